#include "stft/semantic.hpp"

#include <cmath>
#include <stdexcept>

namespace stft {

Encoder::Encoder(ParamStore& params, BufferStore& buffers, const std::string& prefix,
                 std::int64_t h_in, std::int64_t h_hid, std::int64_t h_emb, double dropout_rate,
                 Rng& rng)
    : f1_(params, prefix + ".f1", h_in, h_hid, rng),
      f2_(params, prefix + ".f2", h_hid, h_emb, rng),
      bn1_(params, buffers, prefix + ".bn1", h_hid),
      bn2_(params, buffers, prefix + ".bn2", h_emb),
      dropout_rate_(dropout_rate) {}

Tensor Encoder::forward(const Tensor& x, bool training, Rng& rng) {
    Tensor h = dropout(relu(bn1_.forward(f1_.forward(x), training)), dropout_rate_, training, rng);
    return dropout(relu(bn2_.forward(f2_.forward(h), training)), dropout_rate_, training, rng);
}

void Encoder::load_buffers() {
    bn1_.load_buffers();
    bn2_.load_buffers();
}

KnowledgeSlots::KnowledgeSlots(ParamStore& params, BufferStore& buffers, const std::string& prefix,
                               std::int64_t slot_count, std::int64_t h_emb, Rng& rng)
    : h_emb_(h_emb) {
    if (slot_count < 1) throw std::invalid_argument("KnowledgeSlots: need at least one slot");
    const double bound = 1.0 / std::sqrt(static_cast<double>(h_emb));
    for (std::int64_t i = 0; i < slot_count; ++i) {
        slots_.push_back(params.add(prefix + ".k" + std::to_string(i),
                                    Tensor::uniform({h_emb, h_emb}, bound, rng)));
    }
    alpha_ = params.add(prefix + ".alpha", Tensor::full({1}, 0.5));
    combined_ = buffers.add(prefix + ".combined", static_cast<std::size_t>(h_emb * h_emb), 0.0);
    reset_combined();
}

void KnowledgeSlots::reset_combined() {
    auto& kt = *combined_;
    std::fill(kt.begin(), kt.end(), 0.0);
    const double inv = 1.0 / static_cast<double>(slots_.size());
    for (const auto& s : slots_) {
        for (std::size_t i = 0; i < kt.size(); ++i) kt[i] += s.data()[i] * inv;
    }
}

namespace {

// Mean over the leading batch axis of [B, h, h]; identity for [h, h].
std::vector<double> batch_mean(const Tensor& t, std::int64_t h) {
    const std::int64_t block = h * h;
    const std::int64_t batch = t.size() / block;
    std::vector<double> out(static_cast<std::size_t>(block), 0.0);
    const double inv = 1.0 / static_cast<double>(batch);
    for (std::int64_t b = 0; b < batch; ++b) {
        const double* p = t.data().data() + b * block;
        for (std::int64_t i = 0; i < block; ++i) out[static_cast<std::size_t>(i)] += p[i] * inv;
    }
    return out;
}

// [h,h] x [h,h] row-major product into out
void square_matmul_acc(const std::vector<double>& a, const std::vector<double>& b,
                       std::vector<double>& out, std::int64_t h, double scale) {
    for (std::int64_t i = 0; i < h; ++i) {
        for (std::int64_t k = 0; k < h; ++k) {
            const double av = a[static_cast<std::size_t>(i * h + k)] * scale;
            if (av == 0.0) continue;
            for (std::int64_t j = 0; j < h; ++j) {
                out[static_cast<std::size_t>(i * h + j)] += av * b[static_cast<std::size_t>(k * h + j)];
            }
        }
    }
}

}  // namespace

void KnowledgeSlots::update_combined(const Tensor& p_a, const Tensor& k_oa, const Tensor& p_v,
                                     const Tensor& k_ov) {
    const std::int64_t h = h_emb_;
    const double a = alpha_.data()[0];
    std::vector<double> pa = batch_mean(p_a, h), koa = batch_mean(k_oa, h);
    std::vector<double> pv = batch_mean(p_v, h), kov = batch_mean(k_ov, h);
    std::vector<double> fresh(static_cast<std::size_t>(h * h), 0.0);
    square_matmul_acc(pa, koa, fresh, h, 1.0);
    square_matmul_acc(pv, kov, fresh, h, 1.0);
    auto& kt = *combined_;
    for (std::size_t i = 0; i < kt.size(); ++i) {
        kt[i] = a * fresh[i] + (1.0 - a) * kt[i];
        if (!std::isfinite(kt[i])) throw std::runtime_error("KnowledgeSlots: non-finite K_t");
    }
}

Tensor lkc_combine(const KnowledgeSlots& slots, const Tensor& feat) {
    const std::int64_t h = slots.h_emb();
    const std::int64_t nd = feat.ndim();
    if (nd < 2 || feat.dim(nd - 1) != h || feat.dim(nd - 2) != h) {
        throw std::invalid_argument("lkc_combine: features must be square " + std::to_string(h) +
                                    "x" + std::to_string(h) + " maps, got " + shape_str(feat.shape()));
    }
    Tensor k_o;
    for (const auto& slot : slots.slots()) {
        Tensor term = mul(sigmoid(matmul(slot, feat)), feat);
        k_o = k_o.defined() ? add(k_o, term) : term;
    }
    return k_o;
}

Tensor lkc_gate(const Tensor& k_o, const Tensor& w_o, const Tensor& b_o) {
    return relu(add_colvec(matmul(w_o, k_o), b_o));
}

LsrBlock::LsrBlock(ParamStore& params, const std::string& prefix, std::int64_t h_emb, Rng& rng)
    : q_(params, prefix + ".q", h_emb, h_emb, rng),
      k_(params, prefix + ".k", h_emb, h_emb, rng),
      v_(params, prefix + ".v", h_emb, h_emb, rng),
      ln_(params, prefix + ".ln", h_emb),
      mlp1_(params, prefix + ".mlp1", h_emb, h_emb, rng),
      mlp2_(params, prefix + ".mlp2", h_emb, h_emb, rng),
      h_emb_(h_emb) {}

LsrOutput LsrBlock::forward(const Tensor& k_o) const {
    Tensor q = q_.forward(k_o);
    Tensor k = k_.forward(k_o);
    Tensor v = v_.forward(k_o);
    const double scale = 1.0 / std::sqrt(static_cast<double>(h_emb_));
    Tensor attn = softmax(mul(matmul(q, transpose(k)), scale), k_o.ndim() - 1);
    Tensor sa = matmul(attn, v);
    Tensor r = add(mlp2_.forward(relu(mlp1_.forward(ln_.forward(sa)))), sa);
    return {r, attn};
}

}  // namespace stft
