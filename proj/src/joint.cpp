#include "stft/joint.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace stft {

JointMode joint_mode_from_string(const std::string& s) {
    if (s == "avg_bidirectional") return JointMode::AvgBidirectional;
    if (s == "a_queries_v") return JointMode::AQueriesV;
    throw std::invalid_argument("unknown joint_mode: " + s);
}

std::string to_string(JointMode mode) {
    return mode == JointMode::AvgBidirectional ? "avg_bidirectional" : "a_queries_v";
}

CrossModalBlock::CrossModalBlock(ParamStore& params, const std::string& prefix, std::int64_t width,
                                 std::int64_t heads, Rng& rng)
    : q_(params, prefix + ".q", width, width, rng),
      k_(params, prefix + ".k", width, width, rng),
      v_(params, prefix + ".v", width, width, rng),
      o_(params, prefix + ".o", width, width, rng),
      ln_(params, prefix + ".ln", width),
      mlp1_(params, prefix + ".mlp1", width, width, rng),
      mlp2_(params, prefix + ".mlp2", width, width, rng),
      width_(width),
      heads_(heads) {
    if (heads <= 0 || width % heads != 0) {
        throw std::invalid_argument("CrossModalBlock: width must be divisible by head count");
    }
    head_dim_ = width / heads;
}

Tensor CrossModalBlock::mhca(const Tensor& q_src, const Tensor& kv_src) const {
    if (q_src.dim(q_src.ndim() - 1) != width_ || kv_src.dim(kv_src.ndim() - 1) != width_) {
        throw std::invalid_argument("mhca: operand width does not match block width " +
                                    std::to_string(width_));
    }
    Tensor q = q_.forward(q_src);
    Tensor k = k_.forward(kv_src);
    Tensor v = v_.forward(kv_src);
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim_));
    std::vector<Tensor> head_outs;
    head_outs.reserve(static_cast<std::size_t>(heads_));
    for (std::int64_t h = 0; h < heads_; ++h) {
        Tensor qh = slice_last(q, h * head_dim_, head_dim_);
        Tensor kh = slice_last(k, h * head_dim_, head_dim_);
        Tensor vh = slice_last(v, h * head_dim_, head_dim_);
        Tensor attn = softmax(mul(matmul(qh, transpose(kh)), scale), q_src.ndim() - 1);
        head_outs.push_back(matmul(attn, vh));
    }
    return o_.forward(concat_last(head_outs));
}

Tensor CrossModalBlock::directional(const Tensor& q_src, const Tensor& kv_src) const {
    Tensor q_av = mhca(q_src, kv_src);
    return add(mlp2_.forward(relu(mlp1_.forward(ln_.forward(q_av)))), q_av);
}

Tensor CrossModalBlock::forward(const Tensor& y_a, const Tensor& y_v, JointMode mode) const {
    Tensor z_av = directional(y_a, y_v);
    if (mode == JointMode::AQueriesV) return z_av;
    Tensor z_va = directional(y_v, y_a);
    return mul(add(z_av, z_va), 0.5);
}

ProjectionHead::ProjectionHead(ParamStore& params, const std::string& prefix, std::int64_t in,
                               std::int64_t hid, std::int64_t out, double dropout_rate, Rng& rng)
    : f3_(params, prefix + ".f3", in, hid, rng),
      f4_(params, prefix + ".f4", hid, out, rng),
      dropout_rate_(dropout_rate) {}

Tensor ProjectionHead::forward(const Tensor& z, bool training, Rng& rng) const {
    return f4_.forward(dropout(relu(f3_.forward(z)), dropout_rate_, training, rng));
}

}  // namespace stft
