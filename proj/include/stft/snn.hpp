#pragma once

#include <string>
#include <vector>

#include "stft/nn.hpp"
#include "stft/tensor.hpp"

namespace stft {

// Membrane dynamics constants for one LIF layer population.
struct LIFParams {
    double tau_m = 2.0;     // membrane time constant, in steps
    double r = 1.0;         // membrane resistance (input gain)
    double v_rest = 0.0;    // reset potential
    double v_th_init = 1.0; // starting threshold
    double dt = 1.0;        // explicit-Euler step, fixed

    void validate() const;
};

// Mutable per-forward spiking state of one LIF layer. The threshold is a
// single scalar per modality stream and is shared by the stream's layers.
struct SpikeState {
    Tensor v;                    // membrane potentials
    double v_th = 1.0;
    std::vector<Tensor> spikes;  // binary record, one tensor per executed step
    std::int64_t t = 0;
};

// Threshold clamp bounds for the dynamic update.
inline constexpr double kVthMin = 0.05;
inline constexpr double kVthMax = 10.0;

// Invariant violations observed by the spiking layers (binary spikes,
// reset-to-v_rest, threshold clamp). Counted, never silently ignored.
struct SnnValidation {
    long long binarity = 0;
    long long reset = 0;
    long long clamp = 0;
    long long total() const { return binarity + reset + clamp; }
};
SnnValidation& snn_validation();
void reset_snn_validation();

// One explicit-Euler step: v <- v + (dt/tau)(-v + R*I); positions at or above
// v_th emit a spike and reset to v_rest. The spike uses a rectangular
// surrogate derivative; the reset mask is treated as a constant in backward.
Tensor lif_step(SpikeState& state, const Tensor& input_current, const LIFParams& params,
                double surrogate_halfwidth);

struct GlpResult {
    Tensor gated;  // sigmoid(P_all (*) I + I)
    Tensor p_all;  // blended pooling map, used by the threshold update
};

// Global-local pooling over `axis`: P_all = (P_max+P_avg)/2 + b*P_max + (1-b)*P_avg.
GlpResult glp(const Tensor& input_current, const Tensor& beta, std::int64_t axis);

enum class TsfMode {
    SoftmaxWeight,  // per-neuron softmax mass of each step (weights sum to 1)
    MaxWeight,      // the printed reading: every step weighted by the largest mass
    Uniform,        // plain average over steps
};
TsfMode tsf_mode_from_string(const std::string& s);
std::string to_string(TsfMode mode);

// Combines the per-step currents of the final block into one tensor.
Tensor tsf_aggregate(const std::vector<Tensor>& currents_per_step, TsfMode mode);

// v_th^t = clamp((sigmoid(mean(P_all)) + N(S) log N(S)) * v_th^{t-1}).
// N is min-max normalization into (0,1] followed by a mean reduction; the
// update is a plain scalar recurrence, no gradient flows through it.
double update_threshold(double v_th_prev, const Tensor& p_all, const Tensor& s_current);

// Firing counts per (block, step), dumped to the metrics file.
struct SpikeRaster {
    std::vector<std::vector<double>> counts;  // [block][step]
    double total() const;
};

struct SnnConfig {
    std::int64_t channels = 0;   // feature width, conv is channels -> channels
    std::int64_t time_steps = 4;
    LIFParams lif;
    double surrogate_halfwidth = 0.5;
    bool glp_enabled = true;
    TsfMode tsf = TsfMode::SoftmaxWeight;
    bool dynamic_threshold = true;
    double v_th_fixed = 1.0;  // used when dynamic_threshold is false
};

// Three conv-LIF blocks with GLP-gated input currents and a per-stream
// dynamically adapted threshold; output is the TSF aggregation of the final
// block's gated currents.
class SnnStack {
public:
    SnnStack(ParamStore& params, BufferStore& buffers, const std::string& prefix, SnnConfig config,
             Rng& rng);

    // x: [B, rows, channels]; returns [B, rows, channels]
    Tensor forward(const Tensor& x, bool training, SpikeRaster* raster = nullptr);

    const SnnConfig& config() const { return config_; }
    void load_buffers();

private:
    struct Block {
        Tensor conv_w;  // [channels, channels, 3]
        Tensor conv_b;
        BatchNorm bn;
        Tensor glp_beta;  // scalar
    };

    SnnConfig config_;
    std::vector<Block> blocks_;
};

}  // namespace stft
