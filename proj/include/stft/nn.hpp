#pragma once

#include <cmath>
#include <deque>
#include <string>
#include <utility>
#include <vector>

#include "stft/tensor.hpp"

namespace stft {

// Named parameter registry. Modules register their learnables here so the
// optimizer and checkpointing can walk them in a stable order.
class ParamStore {
public:
    Tensor add(const std::string& name, Tensor t) {
        t.set_requires_grad(true);
        items_.emplace_back(name, t);
        return t;
    }
    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
    std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
    Tensor* find(const std::string& name) {
        for (auto& [n, t] : items_) {
            if (n == name) return &t;
        }
        return nullptr;
    }
    void zero_grads() {
        for (auto& [n, t] : items_) t.zero_grad();
    }
    std::int64_t count_scalars() const {
        std::int64_t n = 0;
        for (const auto& [name, t] : items_) n += t.size();
        return n;
    }

private:
    std::vector<std::pair<std::string, Tensor>> items_;
};

// Non-learnable state (batch-norm running stats, knowledge-slot memory, ...)
// that still has to survive a checkpoint round trip. Deque storage keeps the
// pointers handed to modules stable across later registrations.
class BufferStore {
public:
    std::vector<double>* add(const std::string& name, std::size_t size, double init) {
        items_.emplace_back(name, std::vector<double>(size, init));
        return &items_.back().second;
    }
    std::deque<std::pair<std::string, std::vector<double>>>& items() { return items_; }
    const std::deque<std::pair<std::string, std::vector<double>>>& items() const { return items_; }

private:
    std::deque<std::pair<std::string, std::vector<double>>> items_;
};

// Glorot-uniform weights keep activation scale roughly constant through the
// stack; biases follow the usual U(+-1/sqrt(fan_in)).
inline Tensor init_glorot(Shape shape, std::int64_t fan_in, std::int64_t fan_out, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    return Tensor::uniform(std::move(shape), bound, rng);
}

inline Tensor init_bias(Shape shape, std::int64_t fan_in, Rng& rng) {
    return Tensor::uniform(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

struct Linear {
    Tensor w;  // [in, out]
    Tensor b;  // [out]

    Linear() = default;
    Linear(ParamStore& params, const std::string& prefix, std::int64_t in, std::int64_t out,
           Rng& rng) {
        w = params.add(prefix + ".w", init_glorot({in, out}, in, out, rng));
        b = params.add(prefix + ".b", init_bias({out}, in, rng));
    }
    Tensor forward(const Tensor& x) const { return add_rowvec(matmul(x, w), b); }
};

struct BatchNorm {
    Tensor gamma, beta;
    BatchNormStats stats;

    BatchNorm() = default;
    BatchNorm(ParamStore& params, BufferStore& buffers, const std::string& prefix,
              std::int64_t channels) {
        gamma = params.add(prefix + ".gamma", Tensor::full({channels}, 1.0));
        beta = params.add(prefix + ".beta", Tensor::zeros({channels}));
        stats.running_mean.assign(static_cast<std::size_t>(channels), 0.0);
        stats.running_var.assign(static_cast<std::size_t>(channels), 1.0);
        mean_buf_ = buffers.add(prefix + ".running_mean", static_cast<std::size_t>(channels), 0.0);
        var_buf_ = buffers.add(prefix + ".running_var", static_cast<std::size_t>(channels), 1.0);
    }
    Tensor forward(const Tensor& x, bool training) {
        Tensor y = batch_norm(x, gamma, beta, stats, training);
        *mean_buf_ = stats.running_mean;
        *var_buf_ = stats.running_var;
        return y;
    }
    void load_buffers() {
        stats.running_mean = *mean_buf_;
        stats.running_var = *var_buf_;
    }

private:
    std::vector<double>* mean_buf_ = nullptr;
    std::vector<double>* var_buf_ = nullptr;
};

struct LayerNorm {
    Tensor gain, bias;

    LayerNorm() = default;
    LayerNorm(ParamStore& params, const std::string& prefix, std::int64_t width) {
        gain = params.add(prefix + ".gain", Tensor::full({width}, 1.0));
        bias = params.add(prefix + ".bias", Tensor::zeros({width}));
    }
    Tensor forward(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

// Adam with bias correction; moments live next to the parameter list so the
// checkpoint can serialize them by name.
class Adam {
public:
    Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(ParamStore& params) {
        if (m_.empty()) init(params);
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t pi = 0; pi < params.items().size(); ++pi) {
            Tensor& p = params.items()[pi].second;
            const auto& g = p.grad();
            auto& data = p.mutable_data();
            auto& m = m_[pi];
            auto& v = v_[pi];
            for (std::size_t i = 0; i < data.size(); ++i) {
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                data[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    std::int64_t steps() const { return t_; }
    std::vector<std::vector<double>>& moments_m() { return m_; }
    std::vector<std::vector<double>>& moments_v() { return v_; }
    void set_steps(std::int64_t t) { t_ = t; }
    void init(const ParamStore& params) {
        m_.clear();
        v_.clear();
        for (const auto& [name, p] : params.items()) {
            m_.emplace_back(p.data().size(), 0.0);
            v_.emplace_back(p.data().size(), 0.0);
        }
    }

private:
    double lr_, beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

}  // namespace stft
