#pragma once

#include <string>

#include "stft/nn.hpp"
#include "stft/tensor.hpp"

namespace stft {

enum class JointMode {
    AvgBidirectional,  // both directional passes with one parameter set, averaged
    AQueriesV,         // queries from audio only, as written
};
JointMode joint_mode_from_string(const std::string& s);
std::string to_string(JointMode mode);

// Multi-head cross attention plus residual MLP; the one parameter set serves
// both modality directions.
class CrossModalBlock {
public:
    CrossModalBlock() = default;
    CrossModalBlock(ParamStore& params, const std::string& prefix, std::int64_t width,
                    std::int64_t heads, Rng& rng);

    // queries from q_src, keys/values from kv_src; [rows, width] or [B, rows, width]
    Tensor mhca(const Tensor& q_src, const Tensor& kv_src) const;
    // Z = MLP(LN(mhca(..))) + mhca(..); bidirectional passes averaged per mode
    Tensor forward(const Tensor& y_a, const Tensor& y_v, JointMode mode) const;

    std::int64_t width() const { return width_; }
    std::int64_t heads() const { return heads_; }

private:
    Tensor directional(const Tensor& q_src, const Tensor& kv_src) const;

    Linear q_, k_, v_, o_;
    LayerNorm ln_;
    Linear mlp1_, mlp2_;
    std::int64_t width_ = 0;
    std::int64_t heads_ = 0;
    std::int64_t head_dim_ = 0;
};

// Two linear layers with ReLU and dropout between them: f4(drop(relu(f3(z)))).
class ProjectionHead {
public:
    ProjectionHead() = default;
    ProjectionHead(ParamStore& params, const std::string& prefix, std::int64_t in,
                   std::int64_t hid, std::int64_t out, double dropout_rate, Rng& rng);

    Tensor forward(const Tensor& z, bool training, Rng& rng) const;

private:
    Linear f3_, f4_;
    double dropout_rate_ = 0.0;
};

}  // namespace stft
