#pragma once

#include <string>
#include <vector>

#include "stft/nn.hpp"
#include "stft/tensor.hpp"

namespace stft {

// Two linear layers, each followed by batch norm, ReLU and dropout.
class Encoder {
public:
    Encoder() = default;
    Encoder(ParamStore& params, BufferStore& buffers, const std::string& prefix, std::int64_t h_in,
            std::int64_t h_hid, std::int64_t h_emb, double dropout_rate, Rng& rng);

    // [B, rows, h_in] -> [B, rows, h_emb]
    Tensor forward(const Tensor& x, bool training, Rng& rng);
    void load_buffers();

private:
    Linear f1_, f2_;
    BatchNorm bn1_, bn2_;
    double dropout_rate_ = 0.0;
};

// Learnable latent knowledge slots shared by both modalities, plus the
// combined running state K_t (updated once per training batch).
class KnowledgeSlots {
public:
    KnowledgeSlots() = default;
    KnowledgeSlots(ParamStore& params, BufferStore& buffers, const std::string& prefix,
                   std::int64_t slot_count, std::int64_t h_emb, Rng& rng);

    const std::vector<Tensor>& slots() const { return slots_; }
    const Tensor& alpha() const { return alpha_; }
    std::int64_t h_emb() const { return h_emb_; }

    std::vector<double>& combined() { return *combined_; }
    // Resets K_t to the mean of the learnable slots (epoch start).
    void reset_combined();
    // K_t = alpha (P_a K_oa + P_v K_ov) + (1-alpha) K_{t-1}, batch-meaned
    // operands, computed outside the tape.
    void update_combined(const Tensor& p_a, const Tensor& k_oa, const Tensor& p_v,
                         const Tensor& k_ov);

private:
    std::vector<Tensor> slots_;
    Tensor alpha_;
    std::vector<double>* combined_ = nullptr;
    std::int64_t h_emb_ = 0;
};

// K_o = sum_i sigmoid(K_i feat) (*) feat, feat square [h_emb x h_emb]
// (optionally batched [B, h_emb, h_emb]).
Tensor lkc_combine(const KnowledgeSlots& slots, const Tensor& feat);

// P = relu(W_o K_o + b_o)
Tensor lkc_gate(const Tensor& k_o, const Tensor& w_o, const Tensor& b_o);

struct LsrOutput {
    Tensor r;     // MLP(LN(SA(K_o))) + SA(K_o)
    Tensor attn;  // attention weights, rows sum to 1
};

// Single-head self-attention block with a residual MLP.
class LsrBlock {
public:
    LsrBlock() = default;
    LsrBlock(ParamStore& params, const std::string& prefix, std::int64_t h_emb, Rng& rng);

    LsrOutput forward(const Tensor& k_o) const;

private:
    Linear q_, k_, v_;
    LayerNorm ln_;
    Linear mlp1_, mlp2_;
    std::int64_t h_emb_ = 0;
};

// Per-modality gate parameters (one weight/bias pair per modality).
struct LkcGateParams {
    Tensor w;  // [h_emb, h_emb]
    Tensor b;  // [h_emb]
    LkcGateParams() = default;
    LkcGateParams(ParamStore& params, const std::string& prefix, std::int64_t h_emb, Rng& rng) {
        w = params.add(prefix + ".w", init_glorot({h_emb, h_emb}, h_emb, h_emb, rng));
        b = params.add(prefix + ".b", init_bias({h_emb}, h_emb, rng));
    }
};

}  // namespace stft
