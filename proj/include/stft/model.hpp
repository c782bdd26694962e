#pragma once

#include <memory>
#include <vector>

#include "stft/config.hpp"
#include "stft/joint.hpp"
#include "stft/nn.hpp"
#include "stft/semantic.hpp"
#include "stft/snn.hpp"
#include "stft/tucker.hpp"

namespace stft {

struct ModelOutput {
    Tensor f_av;   // joint audio-visual embedding [B, h_out]
    Tensor f_rec;  // reconstruction of f_av back in text space [B, h_out]
    Tensor f_tex;  // projected per-sample text embedding [B, h_out]
    // LKC intermediates, kept for the per-batch knowledge-slot update
    Tensor p_a, k_oa, p_v, k_ov;
    SpikeRaster raster_audio, raster_visual;
};

// The full pipeline: encoders -> (LKC/LSR, SNN) per modality -> Tucker fusion
// -> shared-weight cross-modal block -> projection heads.
class StftModel {
public:
    explicit StftModel(const ModelConfig& config);

    // audio [B, a_in, h_in], visual [B, v_in, h_in], text [B, text_width]
    ModelOutput forward(const Tensor& audio, const Tensor& visual, const Tensor& text,
                        bool training, Rng& rng);

    // joint embedding only (classification path)
    Tensor embed(const Tensor& audio, const Tensor& visual, bool training, Rng& rng,
                 SpikeRaster* raster_audio = nullptr, SpikeRaster* raster_visual = nullptr);
    // projects raw text embeddings into the joint space
    Tensor project_text(const Tensor& text, bool training, Rng& rng);

    void epoch_start() { slots_.reset_combined(); }
    void update_knowledge(const ModelOutput& out);

    const ModelConfig& config() const { return config_; }
    ParamStore& params() { return params_; }
    BufferStore& buffers() { return buffers_; }
    KnowledgeSlots& slots() { return slots_; }
    // pushes checkpoint-loaded buffer values back into the layers
    void sync_buffers();

private:
    ModelConfig config_;
    ParamStore params_;
    BufferStore buffers_;

    Encoder enc_a_, enc_v_;
    KnowledgeSlots slots_;
    LkcGateParams gate_a_, gate_v_;
    LsrBlock lsr_a_, lsr_v_;
    std::unique_ptr<SnnStack> snn_a_, snn_v_;
    TuckerFactors tucker_a_, tucker_v_;
    std::vector<CrossModalBlock> joint_blocks_;
    ProjectionHead pro_av_, recon_, pro_tex_;

    struct Branches {
        Tensor y_a, y_v;
        Tensor p_a, k_oa, p_v, k_ov;
    };
    Branches fuse_branches(const Tensor& audio, const Tensor& visual, bool training, Rng& rng,
                           SpikeRaster* ra, SpikeRaster* rv);
    Tensor joint_embedding(const Tensor& y_a, const Tensor& y_v);
};

}  // namespace stft
