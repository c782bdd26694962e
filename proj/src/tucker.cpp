#include "stft/tucker.hpp"

#include <cmath>
#include <stdexcept>

namespace stft {

TuckerFactors::TuckerFactors(ParamStore& params, const std::string& prefix, std::int64_t d_s,
                             std::int64_t d_t, std::int64_t k_out, std::int64_t n_s,
                             std::int64_t n_t, std::int64_t n_k, Rng& rng) {
    if (n_s > d_s || n_t > d_t || n_k > k_out) {
        throw std::invalid_argument("TuckerFactors: rank (" + std::to_string(n_s) + "," +
                                    std::to_string(n_t) + "," + std::to_string(n_k) +
                                    ") exceeds dims (" + std::to_string(d_s) + "," +
                                    std::to_string(d_t) + "," + std::to_string(k_out) + ")");
    }
    g = params.add(prefix + ".g",
                   Tensor::uniform({n_s, n_t, n_k}, 1.0 / std::sqrt(static_cast<double>(n_s)), rng));
    u_s = params.add(prefix + ".u_s",
                     Tensor::uniform({d_s, n_s}, 1.0 / std::sqrt(static_cast<double>(d_s)), rng));
    u_t = params.add(prefix + ".u_t",
                     Tensor::uniform({d_t, n_t}, 1.0 / std::sqrt(static_cast<double>(d_t)), rng));
    u_k = params.add(prefix + ".u_k",
                     Tensor::uniform({k_out, n_k}, 1.0 / std::sqrt(static_cast<double>(n_k)), rng));
}

std::int64_t dense_param_count(std::int64_t d_s, std::int64_t d_t, std::int64_t k_out) {
    return d_s * d_t * k_out;
}

std::int64_t tucker_param_count(std::int64_t d_s, std::int64_t d_t, std::int64_t k_out,
                                std::int64_t n_s, std::int64_t n_t, std::int64_t n_k) {
    return n_s * n_t * n_k + d_s * n_s + d_t * n_t + k_out * n_k;
}

Tensor tucker_compose(const TuckerFactors& f) {
    Tensor t = mode_n_product(f.g, f.u_s, 0);
    t = mode_n_product(t, f.u_t, 1);
    return mode_n_product(t, f.u_k, 2);
}

Tensor tucker_fuse(const Tensor& r, const Tensor& s, const TuckerFactors& f) {
    const bool batched = r.ndim() == 2;
    if (r.ndim() != s.ndim()) {
        throw std::invalid_argument("tucker_fuse: r and s must both be vectors or both batched");
    }
    if ((batched ? r.dim(1) : r.dim(0)) != f.d_s() || (batched ? s.dim(1) : s.dim(0)) != f.d_t()) {
        throw std::invalid_argument("tucker_fuse: operand widths do not match factor dims");
    }
    Tensor r2 = batched ? r : reshape(r, {1, f.d_s()});
    Tensor s2 = batched ? s : reshape(s, {1, f.d_t()});
    Tensor r_low = matmul(r2, f.u_s);  // [B, n_s]
    Tensor s_low = matmul(s2, f.u_t);  // [B, n_t]
    // core contraction y[b,m] = sum_ij G[i,j,m] r_low[b,i] s_low[b,j]
    Tensor core_out = dense_bilinear(r_low, s_low, f.g);  // [B, n_k]
    Tensor y = matmul(core_out, transpose(f.u_k));        // [B, K]
    return batched ? y : reshape(y, {f.k_out()});
}

}  // namespace stft
