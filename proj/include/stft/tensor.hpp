#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "stft/rng.hpp"

namespace stft {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated iff requires_grad
    bool requires_grad = false;
};
}  // namespace detail

// Dense row-major tensor of doubles. Copying a Tensor copies the handle, not
// the storage; ops always allocate fresh outputs. Gradients accumulate into
// the node, so every handle to a leaf sees the same grad.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor identity(std::int64_t n);
    // i.i.d. uniform on [-bound, bound]
    static Tensor uniform(Shape shape, double bound, Rng& rng, bool requires_grad = false);
    static Tensor gaussian(Shape shape, double mean, double stddev, Rng& rng,
                           bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t ndim() const { return static_cast<std::int64_t>(node_->shape.size()); }
    std::int64_t dim(std::int64_t i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t size() const { return static_cast<std::int64_t>(node_->data.size()); }

    const std::vector<double>& data() const { return node_->data; }
    std::vector<double>& mutable_data() { return node_->data; }
    double value() const;  // single-element tensors only
    double at(std::initializer_list<std::int64_t> idx) const;

    bool requires_grad() const { return node_ && node_->requires_grad; }
    Tensor& set_requires_grad(bool flag);
    const std::vector<double>& grad() const;
    std::vector<double>& mutable_grad();
    void zero_grad();

    detail::TensorNode* node() const { return node_.get(); }
    std::shared_ptr<detail::TensorNode> shared_node() const { return node_; }

private:
    std::shared_ptr<detail::TensorNode> node_;
};

// Linear record of executed primitives. backward() replays it once, in
// reverse execution order; each entry scatters the output grad into the
// input grads.
class Tape {
public:
    void record(std::string name, std::shared_ptr<detail::TensorNode> out,
                std::function<void()> backward_fn);
    std::size_t size() const { return entries_.size(); }
    void clear() { entries_.clear(); }
    // Zeroes the grads of recorded op outputs. Leaf grads are not touched, so
    // repeated backward passes accumulate there.
    void zero_op_grads();
    // Replays every entry once, newest first.
    void replay_backward();

private:
    struct Entry {
        std::string name;
        std::shared_ptr<detail::TensorNode> out;
        std::function<void()> backward_fn;
    };
    std::vector<Entry> entries_;
};

Tape* active_tape();
bool grad_enabled();

// Installs a fresh tape for the current scope (per-thread).
class TapeScope {
public:
    TapeScope();
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;
    Tape& tape() { return tape_; }

private:
    Tape tape_;
    Tape* prev_;
};

// Disables recording (and requires_grad propagation) for the current scope.
class NoGradScope {
public:
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    bool prev_;
};

// Forward-pass diagnostics used by the finite-difference harness to reject
// sample points that sit on a ReLU or spike-threshold kink.
struct ForwardDiagnostics {
    double min_relu_margin;   // min |x| seen at any relu input
    double min_spike_margin;  // min |v - v_th| seen at any spike input
    long long spike_window_hits;  // inputs inside the surrogate window
};
ForwardDiagnostics& forward_diagnostics();
void reset_forward_diagnostics();

// ---- primitive operations -------------------------------------------------

// matmul over the last two axes; either side may carry a leading batch axis.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);  // swaps the last two axes

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double c);
Tensor mul(const Tensor& a, double c);
// scalar-with-tensor broadcast: s must be a single-element tensor
Tensor mul_scalar_t(const Tensor& x, const Tensor& s);

Tensor neg(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);

Tensor softmax(const Tensor& x, std::int64_t axis);

Tensor sum(const Tensor& x);   // -> shape {1}
Tensor mean(const Tensor& x);  // -> shape {1}
Tensor sum_axis(const Tensor& x, std::int64_t axis);   // removes the axis
Tensor mean_axis(const Tensor& x, std::int64_t axis);  // removes the axis

enum class Pool { Max, Mean };
// Pools along `axis` and broadcasts the pooled value back, so the output
// shape equals the input shape.
Tensor pool_broadcast(const Tensor& x, std::int64_t axis, Pool kind);

Tensor reshape(const Tensor& x, Shape shape);
Tensor stack0(const std::vector<Tensor>& parts);  // -> [N, parts shape...]
Tensor slice_last(const Tensor& x, std::int64_t start, std::int64_t len);
Tensor concat_last(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& rows);

// v broadcast along the last axis (one entry per column).
Tensor add_rowvec(const Tensor& x, const Tensor& v);
Tensor mul_rowvec(const Tensor& x, const Tensor& v);
// v broadcast along the second-to-last axis (one entry per row).
Tensor add_colvec(const Tensor& x, const Tensor& v);

// Contracts mode `mode` (0-based) of t with the rows of m [r x t.dim(mode)].
Tensor mode_n_product(const Tensor& t, const Tensor& m, std::int64_t mode);

// y[b,k] = sum_ij T[i,j,k] * r[b,i] * s[b,j]; r and s may be 1-D (batch of 1).
Tensor dense_bilinear(const Tensor& r, const Tensor& s, const Tensor& t_full);

// 1-D convolution along the middle (sequence) axis with same-padding.
// x [B, L, Cin], w [Cout, Cin, k] (k odd), bias [Cout] -> [B, L, Cout].
Tensor conv1d_same(const Tensor& x, const Tensor& w, const Tensor& bias);

// Inverted dropout: train mode scales kept units by 1/(1-p), eval is identity.
Tensor dropout(const Tensor& x, double p, bool training, Rng& rng);

// Heaviside spike with rectangular surrogate derivative of half-width a.
Tensor spike_ge(const Tensor& v, double v_th, double surrogate_halfwidth);

// ---- composites ------------------------------------------------------------

// Zero-mean unit-variance along the last axis, then y*gain + bias (eps 1e-5).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

struct BatchNormStats {
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double momentum = 0.1;
};

// Normalizes each channel (last axis) over all leading axes. Train mode uses
// batch statistics and updates `stats`; eval mode uses the running values.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormStats& stats, bool training);

// ---- autodiff driver -------------------------------------------------------

// Seeds d(loss)/d(loss)=1 and replays the active tape backward. The loss must
// be a single-element tensor produced under the active tape.
void backward(const Tensor& loss);

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// f must be deterministic; it is re-evaluated under NoGrad for the stencil.
double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                  std::vector<Tensor> inputs, double step = 1e-5);

}  // namespace stft
