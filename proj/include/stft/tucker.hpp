#pragma once

#include <cstdint>
#include <string>

#include "stft/nn.hpp"
#include "stft/tensor.hpp"

namespace stft {

// Full interaction tensor for one modality; only materialized in tests and
// parameter-count comparisons.
struct DenseBilinear {
    Tensor t_full;  // [d_s, d_t, K]
    std::int64_t param_count() const { return t_full.size(); }
};

// Core tensor plus the three factor matrices of one modality's fusion.
struct TuckerFactors {
    Tensor g;    // [n_s, n_t, n_k]
    Tensor u_s;  // [d_s, n_s]
    Tensor u_t;  // [d_t, n_t]
    Tensor u_k;  // [K, n_k]

    TuckerFactors() = default;
    // learnable factors registered under `prefix`
    TuckerFactors(ParamStore& params, const std::string& prefix, std::int64_t d_s, std::int64_t d_t,
                  std::int64_t k_out, std::int64_t n_s, std::int64_t n_t, std::int64_t n_k,
                  Rng& rng);

    std::int64_t d_s() const { return u_s.dim(0); }
    std::int64_t d_t() const { return u_t.dim(0); }
    std::int64_t k_out() const { return u_k.dim(0); }

    std::int64_t param_count() const {
        return g.size() + u_s.size() + u_t.size() + u_k.size();
    }
};

std::int64_t dense_param_count(std::int64_t d_s, std::int64_t d_t, std::int64_t k_out);
std::int64_t tucker_param_count(std::int64_t d_s, std::int64_t d_t, std::int64_t k_out,
                                std::int64_t n_s, std::int64_t n_t, std::int64_t n_k);

// Materializes T = G x1 U_s x2 U_t x3 U_k (test/oracle path).
Tensor tucker_compose(const TuckerFactors& f);

// Y = G x1 (R^T U_s) x2 (S^T U_t) x3 U_k without materializing T.
// r: [d_s] or [B, d_s]; s: [d_t] or [B, d_t]; result [K] or [B, K].
Tensor tucker_fuse(const Tensor& r, const Tensor& s, const TuckerFactors& f);

}  // namespace stft
