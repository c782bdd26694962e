#include "stft/snn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace stft {

namespace {
thread_local SnnValidation g_snn_validation;
}

SnnValidation& snn_validation() { return g_snn_validation; }
void reset_snn_validation() { g_snn_validation = SnnValidation{}; }

void LIFParams::validate() const {
    if (tau_m <= 0.0) throw std::invalid_argument("LIFParams: tau_m must be positive");
    if (v_th_init <= v_rest) throw std::invalid_argument("LIFParams: v_th_init must exceed v_rest");
    if (dt <= 0.0) throw std::invalid_argument("LIFParams: dt must be positive");
}

Tensor lif_step(SpikeState& state, const Tensor& input_current, const LIFParams& params,
                double surrogate_halfwidth) {
    if (!state.v.defined()) {
        state.v = Tensor::full(input_current.shape(), params.v_rest);
    }
    if (state.v.shape() != input_current.shape()) {
        throw std::invalid_argument("lif_step: input current shape " +
                                    shape_str(input_current.shape()) +
                                    " does not match membrane shape " + shape_str(state.v.shape()));
    }
    const double decay = 1.0 - params.dt / params.tau_m;
    const double gain = params.dt / params.tau_m * params.r;
    Tensor v_pre = add(mul(state.v, decay), mul(input_current, gain));
    Tensor spikes = spike_ge(v_pre, state.v_th, surrogate_halfwidth);

    // reset: keep the potential where quiet, pin to v_rest where a spike
    // fired; the masks are constants, gradient flows through v_pre only
    std::vector<double> keep(spikes.data().size());
    std::vector<double> reset(spikes.data().size());
    for (std::size_t i = 0; i < spikes.data().size(); ++i) {
        const double s = spikes.data()[i];
        if (s != 0.0 && s != 1.0) ++g_snn_validation.binarity;
        keep[i] = 1.0 - s;
        reset[i] = s * params.v_rest;
    }
    state.v = add(mul(v_pre, Tensor::from_data(spikes.shape(), std::move(keep))),
                  Tensor::from_data(spikes.shape(), std::move(reset)));

    for (std::size_t i = 0; i < spikes.data().size(); ++i) {
        if (spikes.data()[i] == 1.0 && state.v.data()[i] != params.v_rest) ++g_snn_validation.reset;
    }
    state.spikes.push_back(spikes);
    ++state.t;
    return spikes;
}

GlpResult glp(const Tensor& input_current, const Tensor& beta, std::int64_t axis) {
    if (input_current.dim(axis) < 1) throw std::invalid_argument("glp: empty pooling axis");
    Tensor p_max = pool_broadcast(input_current, axis, Pool::Max);
    Tensor p_avg = pool_broadcast(input_current, axis, Pool::Mean);
    Tensor blend = mul(add(p_max, p_avg), 0.5);
    Tensor one_minus_beta = sub(Tensor::scalar(1.0), beta);
    Tensor p_all = add(blend, add(mul_scalar_t(p_max, beta), mul_scalar_t(p_avg, one_minus_beta)));
    Tensor gated = sigmoid(add(mul(p_all, input_current), input_current));
    return {gated, p_all};
}

TsfMode tsf_mode_from_string(const std::string& s) {
    if (s == "softmax_weight") return TsfMode::SoftmaxWeight;
    if (s == "max_weight") return TsfMode::MaxWeight;
    if (s == "uniform") return TsfMode::Uniform;
    throw std::invalid_argument("unknown tsf_mode: " + s);
}

std::string to_string(TsfMode mode) {
    switch (mode) {
        case TsfMode::SoftmaxWeight: return "softmax_weight";
        case TsfMode::MaxWeight: return "max_weight";
        case TsfMode::Uniform: return "uniform";
    }
    return "?";
}

Tensor tsf_aggregate(const std::vector<Tensor>& currents_per_step, TsfMode mode) {
    if (currents_per_step.empty()) throw std::invalid_argument("tsf_aggregate: empty step list");
    Tensor stacked = stack0(currents_per_step);
    switch (mode) {
        case TsfMode::SoftmaxWeight: {
            Tensor w = softmax(stacked, 0);
            return sum_axis(mul(w, stacked), 0);
        }
        case TsfMode::MaxWeight: {
            Tensor w = pool_broadcast(softmax(stacked, 0), 0, Pool::Max);
            return sum_axis(mul(w, stacked), 0);
        }
        case TsfMode::Uniform:
            return mean_axis(stacked, 0);
    }
    throw std::logic_error("tsf_aggregate: unreachable");
}

double update_threshold(double v_th_prev, const Tensor& p_all, const Tensor& s_current) {
    if (v_th_prev <= 0.0) throw std::invalid_argument("update_threshold: previous v_th must be positive");
    double p_mean = 0.0;
    for (double v : p_all.data()) p_mean += v;
    p_mean /= static_cast<double>(p_all.size());
    const double sig = 1.0 / (1.0 + std::exp(-p_mean));

    double lo = s_current.data()[0], hi = s_current.data()[0];
    for (double v : s_current.data()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    // min-max into (0,1]; a constant tensor maps to all ones (zero entropy)
    constexpr double eps = 1e-12;
    const double span = hi - lo + eps;
    double n_mean = 0.0;
    for (double v : s_current.data()) n_mean += (v - lo + eps) / span;
    n_mean /= static_cast<double>(s_current.size());

    const double factor = sig + n_mean * std::log(n_mean);
    double v_th = std::clamp(factor * v_th_prev, kVthMin, kVthMax);
    if (v_th < kVthMin || v_th > kVthMax || !std::isfinite(v_th)) ++g_snn_validation.clamp;
    return v_th;
}

double SpikeRaster::total() const {
    double acc = 0.0;
    for (const auto& row : counts)
        for (double c : row) acc += c;
    return acc;
}

SnnStack::SnnStack(ParamStore& params, BufferStore& buffers, const std::string& prefix,
                   SnnConfig config, Rng& rng)
    : config_(config) {
    config_.lif.validate();
    const std::int64_t c = config_.channels;
    if (c <= 0) throw std::invalid_argument("SnnStack: channel count must be positive");
    for (int i = 0; i < 3; ++i) {
        const std::string bp = prefix + ".block" + std::to_string(i);
        Block b;
        b.conv_w = params.add(bp + ".conv.w", init_glorot({c, c, 3}, c * 3, c * 3, rng));
        b.conv_b = params.add(bp + ".conv.b", init_bias({c}, c * 3, rng));
        b.bn = BatchNorm(params, buffers, bp + ".bn", c);
        b.glp_beta = params.add(bp + ".glp.beta", Tensor::full({1}, 0.5));
        blocks_.push_back(std::move(b));
    }
}

void SnnStack::load_buffers() {
    for (auto& b : blocks_) b.bn.load_buffers();
}

Tensor SnnStack::forward(const Tensor& x, bool training, SpikeRaster* raster) {
    if (x.ndim() != 3) throw std::invalid_argument("SnnStack: input must be [B, rows, channels]");
    const std::int64_t T = config_.time_steps;
    const std::int64_t kSeqAxis = 1;

    std::vector<SpikeState> states(blocks_.size());
    double v_th = config_.dynamic_threshold ? config_.lif.v_th_init : config_.v_th_fixed;
    for (auto& s : states) s.v_th = v_th;

    if (raster) raster->counts.assign(blocks_.size(), std::vector<double>(static_cast<size_t>(T), 0.0));

    std::vector<Tensor> final_currents;
    final_currents.reserve(static_cast<std::size_t>(T));
    for (std::int64_t t = 0; t < T; ++t) {
        Tensor p = x;  // static input coding: every step sees the encoder output
        Tensor last_p_all;
        Tensor last_current;
        for (std::size_t bi = 0; bi < blocks_.size(); ++bi) {
            Block& blk = blocks_[bi];
            Tensor current = blk.bn.forward(conv1d_same(p, blk.conv_w, blk.conv_b), training);
            if (config_.glp_enabled) {
                GlpResult g = glp(current, blk.glp_beta, kSeqAxis);
                current = g.gated;
                last_p_all = g.p_all;
            } else {
                // with GLP ablated the threshold update reads the raw current
                last_p_all = current;
            }
            last_current = current;
            Tensor spikes = lif_step(states[bi], current, config_.lif, config_.surrogate_halfwidth);
            if (raster) {
                double cnt = 0.0;
                for (double sv : spikes.data()) cnt += sv;
                raster->counts[bi][static_cast<std::size_t>(t)] = cnt;
            }
            p = spikes;
        }
        final_currents.push_back(last_current);
        if (config_.dynamic_threshold) {
            NoGradScope no_grad;
            v_th = update_threshold(v_th, last_p_all, last_current);
            for (auto& s : states) s.v_th = v_th;
        }
    }
    return tsf_aggregate(final_currents, config_.tsf);
}

}  // namespace stft
