#pragma once

#include <string>
#include <vector>

#include "stft/data.hpp"
#include "stft/model.hpp"
#include "stft/objectives.hpp"

namespace stft {

struct EpochMetrics {
    std::int64_t epoch = 0;
    double loss_total = 0.0;
    double loss_triplet = 0.0;
    double loss_proj = 0.0;
    double loss_recon = 0.0;
    double spikes_audio = 0.0;
    double spikes_visual = 0.0;
};

// Training loop, evaluation harness and checkpointing for one run directory.
class Trainer {
public:
    Trainer(const ModelConfig& config, const Dataset& data, std::string out_dir);

    // runs remaining epochs (resume-aware) and appends per-epoch metrics
    void train(bool eval_each_epoch = false);
    // trains only up to the given epoch (inclusive), for interrupted runs
    void train_until(std::int64_t last_epoch);
    // S/U/HM over the full test set plus unseen-only ZSL, as percentages
    EvalReport evaluate();

    void save_checkpoint(const std::string& path);
    void load_checkpoint(const std::string& path);

    StftModel& model() { return model_; }
    const std::vector<EpochMetrics>& history() const { return history_; }
    const std::string& metrics_path() const { return metrics_path_; }
    double last_eval_spike_total() const { return last_eval_spikes_; }

private:
    EpochMetrics train_epoch(std::int64_t epoch);
    Tensor gather_samples(const Tensor& pool, const std::vector<std::int64_t>& idx) const;
    Tensor gather_text(const std::vector<std::int64_t>& labels) const;
    std::vector<std::int64_t> predict(const Tensor& audio_pool, const Tensor& visual_pool,
                                      const std::vector<std::int64_t>& sample_idx,
                                      const Tensor& class_table,
                                      const std::vector<std::int64_t>& candidates,
                                      bool collect_raster);
    void append_metrics_line(const std::string& line);

    ModelConfig config_;
    Dataset data_;
    StftModel model_;
    Adam adam_;
    Rng run_rng_;
    std::string out_dir_;
    std::string metrics_path_;
    std::int64_t next_epoch_ = 1;
    std::vector<EpochMetrics> history_;
    double last_eval_spikes_ = 0.0;
    SpikeRaster eval_raster_audio_, eval_raster_visual_;
};

// checkpoint file round trip (byte-stable)
void save_checkpoint_file(const std::string& path, StftModel& model, Adam& adam, const Rng& rng,
                          std::int64_t epoch);
std::int64_t load_checkpoint_file(const std::string& path, StftModel& model, Adam& adam, Rng& rng);

struct AblationRow {
    std::string label;
    ModelConfig config;
    EvalReport report;
    std::int64_t fusion_param_count = 0;
    double spike_total = 0.0;
};

// Runs train+evaluate for every grid token of one ablation axis with the
// base config's seed shared across rows.
std::vector<AblationRow> run_ablation(const ModelConfig& base, const Dataset& data,
                                      const std::string& axis,
                                      const std::vector<std::string>& grid,
                                      const std::string& out_root);

ModelConfig apply_ablation_token(const ModelConfig& base, const std::string& axis,
                                 const std::string& token);

std::string format_ablation_table(const std::string& axis, const std::vector<AblationRow>& rows);

}  // namespace stft
