#pragma once

#include <cstdint>
#include <string>

#include "stft/joint.hpp"
#include "stft/objectives.hpp"
#include "stft/snn.hpp"

namespace stft {

// Every hyperparameter and design knob of one run. JSON keys match the field
// names; CLI flags override file values which override these defaults.
struct ModelConfig {
    std::uint64_t seed = 0;

    // widths (the latent-reasoning stream works on square maps, so the
    // per-modality row counts must equal h_emb)
    std::int64_t a_in = 512;
    std::int64_t v_in = 512;
    std::int64_t h_in = 512;
    std::int64_t h_emb = 512;
    std::int64_t h_hid = 512;
    std::int64_t h_out = 300;
    std::int64_t h_proj = 64;
    std::int64_t heads = 8;
    std::int64_t head_dim = 64;

    std::int64_t time_steps = 4;
    std::int64_t rank = 60;
    std::int64_t slot_count = 3;

    // LIF + threshold dynamics
    double tau_m = 2.0;
    double membrane_r = 1.0;
    double v_rest = 0.0;
    double v_th_init = 1.0;
    double surrogate_width = 0.5;
    std::string threshold_mode = "dynamic";  // dynamic | fixed
    double v_th_fixed = 1.0;

    std::string tsf_mode = "softmax_weight";
    bool glp_enabled = true;
    bool lkc_enabled = true;
    std::string joint_mode = "avg_bidirectional";
    std::int64_t joint_depth = 1;
    std::string triplet_mode = "resolved";

    double d_enc = 0.25;
    double d_proj = 0.20;
    double d_text = 0.10;

    double lr = 1e-4;
    std::int64_t epochs = 60;
    std::int64_t batch_size = 64;

    double gamma = 1.0;
    double w_triplet = 0.5;
    double w_proj_recon = 0.5;
    bool use_proj_loss = true;
    bool use_recon_loss = true;

    void validate() const;

    TsfMode tsf() const { return tsf_mode_from_string(tsf_mode); }
    JointMode joint() const { return joint_mode_from_string(joint_mode); }
    TripletMode triplet() const { return triplet_mode_from_string(triplet_mode); }
    bool dynamic_threshold() const;
    LossConfig loss_config() const;

    std::string to_json() const;
    static ModelConfig from_json_text(const std::string& text);
    static ModelConfig from_json_file(const std::string& path);

    // FNV-1a of the canonical JSON form; stored in checkpoints
    std::uint64_t hash() const;
};

}  // namespace stft
