#include "stft/model.hpp"

#include <stdexcept>

namespace stft {

StftModel::StftModel(const ModelConfig& config) : config_(config) {
    config_.validate();
    Rng rng(config_.seed);
    const std::int64_t h = config_.h_emb;

    enc_a_ = Encoder(params_, buffers_, "enc_a", config_.h_in, config_.h_hid, h, config_.d_enc, rng);
    enc_v_ = Encoder(params_, buffers_, "enc_v", config_.h_in, config_.h_hid, h, config_.d_enc, rng);

    slots_ = KnowledgeSlots(params_, buffers_, "lkc", config_.slot_count, h, rng);
    gate_a_ = LkcGateParams(params_, "lkc.gate_a", h, rng);
    gate_v_ = LkcGateParams(params_, "lkc.gate_v", h, rng);
    lsr_a_ = LsrBlock(params_, "lsr_a", h, rng);
    lsr_v_ = LsrBlock(params_, "lsr_v", h, rng);

    SnnConfig snn_cfg;
    snn_cfg.channels = h;
    snn_cfg.time_steps = config_.time_steps;
    snn_cfg.lif.tau_m = config_.tau_m;
    snn_cfg.lif.r = config_.membrane_r;
    snn_cfg.lif.v_rest = config_.v_rest;
    snn_cfg.lif.v_th_init = config_.v_th_init;
    snn_cfg.surrogate_halfwidth = config_.surrogate_width;
    snn_cfg.glp_enabled = config_.glp_enabled;
    snn_cfg.tsf = config_.tsf();
    snn_cfg.dynamic_threshold = config_.dynamic_threshold();
    snn_cfg.v_th_fixed = config_.v_th_fixed;
    snn_a_ = std::make_unique<SnnStack>(params_, buffers_, "snn_a", snn_cfg, rng);
    snn_v_ = std::make_unique<SnnStack>(params_, buffers_, "snn_v", snn_cfg, rng);

    tucker_a_ = TuckerFactors(params_, "tucker_a", h, h, h, config_.rank, config_.rank, config_.rank, rng);
    tucker_v_ = TuckerFactors(params_, "tucker_v", h, h, h, config_.rank, config_.rank, config_.rank, rng);

    for (std::int64_t d = 0; d < config_.joint_depth; ++d) {
        joint_blocks_.emplace_back(params_, "joint.block" + std::to_string(d), h, config_.heads, rng);
    }

    pro_av_ = ProjectionHead(params_, "pro_av", h, config_.h_hid, config_.h_out, config_.d_proj, rng);
    recon_ = ProjectionHead(params_, "recon", config_.h_out, config_.h_hid, config_.h_out,
                            config_.d_proj, rng);
    pro_tex_ = ProjectionHead(params_, "pro_tex", 300, config_.h_hid, config_.h_out, config_.d_text,
                              rng);
}

void StftModel::sync_buffers() {
    enc_a_.load_buffers();
    enc_v_.load_buffers();
    snn_a_->load_buffers();
    snn_v_->load_buffers();
}

StftModel::Branches StftModel::fuse_branches(const Tensor& audio, const Tensor& visual,
                                             bool training, Rng& rng, SpikeRaster* ra,
                                             SpikeRaster* rv) {
    if (audio.ndim() != 3 || visual.ndim() != 3) {
        throw std::invalid_argument("model: inputs must be [B, rows, h_in]");
    }
    if (audio.dim(1) != config_.a_in || visual.dim(1) != config_.v_in ||
        audio.dim(2) != config_.h_in || visual.dim(2) != config_.h_in) {
        throw std::invalid_argument("model: input dims do not match config (a_in/v_in/h_in)");
    }
    Tensor a_t = enc_a_.forward(audio, training, rng);
    Tensor v_t = enc_v_.forward(visual, training, rng);

    Branches br;
    Tensor k_oa, k_ov;
    if (config_.lkc_enabled) {
        k_oa = lkc_combine(slots_, a_t);
        k_ov = lkc_combine(slots_, v_t);
        br.p_a = lkc_gate(k_oa, gate_a_.w, gate_a_.b);
        br.p_v = lkc_gate(k_ov, gate_v_.w, gate_v_.b);
    } else {
        k_oa = a_t;
        k_ov = v_t;
    }
    br.k_oa = k_oa;
    br.k_ov = k_ov;

    // semantic branch, pooled over the sequence axis into fusion vectors
    Tensor r_a = mean_axis(lsr_a_.forward(k_oa).r, 1);
    Tensor r_v = mean_axis(lsr_v_.forward(k_ov).r, 1);
    // temporal branch
    Tensor s_a = mean_axis(snn_a_->forward(a_t, training, ra), 1);
    Tensor s_v = mean_axis(snn_v_->forward(v_t, training, rv), 1);

    br.y_a = tucker_fuse(r_a, s_a, tucker_a_);
    br.y_v = tucker_fuse(r_v, s_v, tucker_v_);
    return br;
}

Tensor StftModel::joint_embedding(const Tensor& y_a, const Tensor& y_v) {
    const std::int64_t b = y_a.dim(0);
    const std::int64_t h = config_.h_emb;
    // each sample is its own single-token sequence
    Tensor za = reshape(y_a, {b, 1, h});
    Tensor zv = reshape(y_v, {b, 1, h});
    Tensor z = joint_blocks_[0].forward(za, zv, config_.joint());
    for (std::size_t d = 1; d < joint_blocks_.size(); ++d) {
        z = joint_blocks_[d].forward(z, z, config_.joint());
    }
    return reshape(z, {b, h});
}

ModelOutput StftModel::forward(const Tensor& audio, const Tensor& visual, const Tensor& text,
                               bool training, Rng& rng) {
    ModelOutput out;
    Branches br = fuse_branches(audio, visual, training, rng, &out.raster_audio, &out.raster_visual);
    Tensor z = joint_embedding(br.y_a, br.y_v);
    out.f_av = pro_av_.forward(z, training, rng);
    out.f_rec = recon_.forward(out.f_av, training, rng);
    out.f_tex = pro_tex_.forward(text, training, rng);
    out.p_a = br.p_a;
    out.k_oa = br.k_oa;
    out.p_v = br.p_v;
    out.k_ov = br.k_ov;
    return out;
}

Tensor StftModel::embed(const Tensor& audio, const Tensor& visual, bool training, Rng& rng,
                        SpikeRaster* raster_audio, SpikeRaster* raster_visual) {
    Branches br = fuse_branches(audio, visual, training, rng, raster_audio, raster_visual);
    return pro_av_.forward(joint_embedding(br.y_a, br.y_v), training, rng);
}

Tensor StftModel::project_text(const Tensor& text, bool training, Rng& rng) {
    return pro_tex_.forward(text, training, rng);
}

void StftModel::update_knowledge(const ModelOutput& out) {
    if (!config_.lkc_enabled) return;
    slots_.update_combined(out.p_a, out.k_oa, out.p_v, out.k_ov);
}

}  // namespace stft
