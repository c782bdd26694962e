#include "stft/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace stft {

namespace {

thread_local Tape* g_active_tape = nullptr;
thread_local bool g_grad_enabled = true;
thread_local ForwardDiagnostics g_diag = {
    std::numeric_limits<double>::infinity(),
    std::numeric_limits<double>::infinity(),
    0,
};

constexpr double kKinkEps = 1e-3;

void check_finite(const Tensor& t, const char* op) {
    for (double v : t.data()) {
        if (!std::isfinite(v)) {
            throw std::runtime_error(std::string(op) + ": non-finite value produced");
        }
    }
}

bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (!g_grad_enabled || g_active_tape == nullptr) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

// Marks the output differentiable and appends the backward closure.
void record(const char* name, std::initializer_list<const Tensor*> inputs, Tensor& out,
            std::function<void()> backward_fn) {
    if (!should_record(inputs)) return;
    out.set_requires_grad(true);
    g_active_tape->record(name, out.shared_node(), std::move(backward_fn));
}

std::int64_t checked_axis(const Tensor& x, std::int64_t axis, const char* op) {
    if (axis < 0 || axis >= x.ndim()) {
        throw std::invalid_argument(std::string(op) + ": axis " + std::to_string(axis) +
                                    " out of range for shape " + shape_str(x.shape()));
    }
    return axis;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    }
}

// Splits a shape into (outer, n, inner) around `axis`.
struct AxisSplit {
    std::int64_t outer = 1, n = 1, inner = 1;
};
AxisSplit split_axis(const Shape& shape, std::int64_t axis) {
    AxisSplit s;
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(shape.size()); ++i) {
        const auto d = shape[static_cast<std::size_t>(i)];
        if (i < axis) s.outer *= d;
        else if (i == axis) s.n = d;
        else s.inner *= d;
    }
    return s;
}

}  // namespace

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    for (auto d : shape) {
        if (d <= 0) throw std::invalid_argument("tensor: dimensions must be positive");
    }
    Tensor t;
    t.node_ = std::make_shared<detail::TensorNode>();
    t.node_->shape = std::move(shape);
    t.node_->data.assign(static_cast<std::size_t>(numel(t.node_->shape)), value);
    t.set_requires_grad(requires_grad);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    if (numel(shape) != static_cast<std::int64_t>(data.size())) {
        throw std::invalid_argument("tensor: data length does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.node_ = std::make_shared<detail::TensorNode>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(data);
    t.set_requires_grad(requires_grad);
    return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::identity(std::int64_t n) {
    Tensor t = zeros({n, n});
    for (std::int64_t i = 0; i < n; ++i) t.mutable_data()[static_cast<std::size_t>(i * n + i)] = 1.0;
    return t;
}

Tensor Tensor::uniform(Shape shape, double bound, Rng& rng, bool requires_grad) {
    Tensor t = zeros(std::move(shape));
    for (double& v : t.mutable_data()) v = rng.uniform(-bound, bound);
    t.set_requires_grad(requires_grad);
    return t;
}

Tensor Tensor::gaussian(Shape shape, double mean, double stddev, Rng& rng, bool requires_grad) {
    Tensor t = zeros(std::move(shape));
    for (double& v : t.mutable_data()) v = mean + stddev * rng.gaussian();
    t.set_requires_grad(requires_grad);
    return t;
}

double Tensor::value() const {
    if (size() != 1) {
        throw std::invalid_argument("value(): tensor has " + std::to_string(size()) +
                                    " elements, expected 1");
    }
    return node_->data[0];
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
    if (static_cast<std::int64_t>(idx.size()) != ndim()) {
        throw std::invalid_argument("at(): rank mismatch");
    }
    std::int64_t flat = 0;
    std::int64_t i = 0;
    for (auto v : idx) {
        flat = flat * dim(i) + v;
        ++i;
    }
    return node_->data[static_cast<std::size_t>(flat)];
}

Tensor& Tensor::set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    if (flag && node_->grad.size() != node_->data.size()) {
        node_->grad.assign(node_->data.size(), 0.0);
    }
    if (!flag) node_->grad.clear();
    return *this;
}

const std::vector<double>& Tensor::grad() const {
    if (!requires_grad()) throw std::logic_error("grad(): tensor does not track gradients");
    return node_->grad;
}

std::vector<double>& Tensor::mutable_grad() {
    if (!requires_grad()) throw std::logic_error("grad(): tensor does not track gradients");
    return node_->grad;
}

void Tensor::zero_grad() {
    if (requires_grad()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

// ---- Tape -----------------------------------------------------------------

void Tape::record(std::string name, std::shared_ptr<detail::TensorNode> out,
                  std::function<void()> backward_fn) {
    entries_.push_back({std::move(name), std::move(out), std::move(backward_fn)});
}

void Tape::zero_op_grads() {
    // op outputs are always fresh allocations, so this never touches a leaf
    for (auto& e : entries_) {
        std::fill(e.out->grad.begin(), e.out->grad.end(), 0.0);
    }
}

void Tape::replay_backward() {
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        it->backward_fn();
    }
}

Tape* active_tape() { return g_active_tape; }
bool grad_enabled() { return g_grad_enabled; }

TapeScope::TapeScope() : prev_(g_active_tape) { g_active_tape = &tape_; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

NoGradScope::NoGradScope() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradScope::~NoGradScope() { g_grad_enabled = prev_; }

ForwardDiagnostics& forward_diagnostics() { return g_diag; }

void reset_forward_diagnostics() {
    g_diag.min_relu_margin = std::numeric_limits<double>::infinity();
    g_diag.min_spike_margin = std::numeric_limits<double>::infinity();
    g_diag.spike_window_hits = 0;
}

// ---- matmul / transpose -----------------------------------------------------

namespace {

// C[m,n] += A[m,k] * B[k,n], ikj order for locality.
void gemm_acc(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
              std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::int64_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] += A[m,k] * B^T where Bt is [n,k]
void gemm_bt_acc(const double* a, const double* bt, double* c, std::int64_t m, std::int64_t k,
                 std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::int64_t j = 0; j < n; ++j) {
            const double* brow = bt + j * k;
            double acc = 0.0;
            for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C[k,n] += A^T * B where A is [m,k], B is [m,n]
void gemm_at_acc(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                 std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::int64_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c + p * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    const bool a3 = a.ndim() == 3, b3 = b.ndim() == 3;
    if ((a.ndim() != 2 && !a3) || (b.ndim() != 2 && !b3)) {
        throw std::invalid_argument("matmul: operands must be 2-D or batched 3-D, got " +
                                    shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::int64_t m = a.dim(a3 ? 1 : 0), ka = a.dim(a3 ? 2 : 1);
    const std::int64_t kb = b.dim(b3 ? 1 : 0), n = b.dim(b3 ? 2 : 1);
    if (ka != kb) {
        throw std::invalid_argument("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    }
    std::int64_t batch = 1;
    if (a3 && b3) {
        if (a.dim(0) != b.dim(0)) throw std::invalid_argument("matmul: batch sizes disagree");
        batch = a.dim(0);
    } else if (a3 || b3) {
        batch = a3 ? a.dim(0) : b.dim(0);
    }

    Shape out_shape = (a3 || b3) ? Shape{batch, m, n} : Shape{m, n};
    Tensor out = Tensor::zeros(out_shape);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = out.mutable_data().data();
    const std::int64_t k = ka;
    for (std::int64_t bi = 0; bi < batch; ++bi) {
        gemm_acc(pa + (a3 ? bi * m * k : 0), pb + (b3 ? bi * k * n : 0), pc + bi * m * n, m, k, n);
    }
    check_finite(out, "matmul");

    record("matmul", {&a, &b}, out, [a, b, out, a3, b3, batch, m, k, n]() {
        const double* g = out.node()->grad.data();
        if (a.requires_grad()) {
            double* ga = a.node()->grad.data();
            const double* pbm = b.data().data();
            for (std::int64_t bi = 0; bi < batch; ++bi) {
                // dA = dC * B^T
                gemm_bt_acc(g + bi * m * n, pbm + (b3 ? bi * k * n : 0),
                            ga + (a3 ? bi * m * k : 0), m, n, k);
            }
        }
        if (b.requires_grad()) {
            double* gb = b.node()->grad.data();
            const double* pam = a.data().data();
            for (std::int64_t bi = 0; bi < batch; ++bi) {
                // dB = A^T * dC
                gemm_at_acc(pam + (a3 ? bi * m * k : 0), g + bi * m * n,
                            gb + (b3 ? bi * k * n : 0), m, k, n);
            }
        }
    });
    return out;
}

Tensor transpose(const Tensor& x) {
    if (x.ndim() != 2 && x.ndim() != 3) {
        throw std::invalid_argument("transpose: expects 2-D or 3-D, got " + shape_str(x.shape()));
    }
    const bool batched = x.ndim() == 3;
    const std::int64_t batch = batched ? x.dim(0) : 1;
    const std::int64_t m = x.dim(batched ? 1 : 0), n = x.dim(batched ? 2 : 1);
    Shape out_shape = batched ? Shape{batch, n, m} : Shape{n, m};
    Tensor out = Tensor::zeros(out_shape);
    const double* px = x.data().data();
    double* po = out.mutable_data().data();
    for (std::int64_t bi = 0; bi < batch; ++bi) {
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j) po[bi * m * n + j * m + i] = px[bi * m * n + i * n + j];
    }
    record("transpose", {&x}, out, [x, out, batch, m, n]() {
        if (!x.requires_grad()) return;
        const double* g = out.node()->grad.data();
        double* gx = x.node()->grad.data();
        for (std::int64_t bi = 0; bi < batch; ++bi) {
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < n; ++j)
                    gx[bi * m * n + i * n + j] += g[bi * m * n + j * m + i];
        }
    });
    return out;
}

// ---- elementwise binary ------------------------------------------------------

namespace {

enum class BinOp { Add, Sub, Mul, Div };

Tensor binary_op(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
    require_same_shape(a, b, name);
    Tensor out = Tensor::zeros(a.shape());
    const auto& da = a.data();
    const auto& db = b.data();
    auto& dout = out.mutable_data();
    const std::size_t n = da.size();
    switch (op) {
        case BinOp::Add: for (std::size_t i = 0; i < n; ++i) dout[i] = da[i] + db[i]; break;
        case BinOp::Sub: for (std::size_t i = 0; i < n; ++i) dout[i] = da[i] - db[i]; break;
        case BinOp::Mul: for (std::size_t i = 0; i < n; ++i) dout[i] = da[i] * db[i]; break;
        case BinOp::Div: for (std::size_t i = 0; i < n; ++i) dout[i] = da[i] / db[i]; break;
    }
    check_finite(out, name);
    record(name, {&a, &b}, out, [a, b, out, op]() {
        const auto& g = out.node()->grad;
        const std::size_t n = g.size();
        if (a.requires_grad()) {
            auto& ga = a.node()->grad;
            switch (op) {
                case BinOp::Add:
                case BinOp::Sub: for (std::size_t i = 0; i < n; ++i) ga[i] += g[i]; break;
                case BinOp::Mul: {
                    const auto& db = b.data();
                    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * db[i];
                    break;
                }
                case BinOp::Div: {
                    const auto& db = b.data();
                    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] / db[i];
                    break;
                }
            }
        }
        if (b.requires_grad()) {
            auto& gb = b.node()->grad;
            switch (op) {
                case BinOp::Add: for (std::size_t i = 0; i < n; ++i) gb[i] += g[i]; break;
                case BinOp::Sub: for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i]; break;
                case BinOp::Mul: {
                    const auto& da = a.data();
                    for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * da[i];
                    break;
                }
                case BinOp::Div: {
                    const auto& da = a.data();
                    const auto& db = b.data();
                    for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i] * da[i] / (db[i] * db[i]);
                    break;
                }
            }
        }
    });
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Mul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Div, "div"); }

Tensor add(const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.shape());
    const auto& da = a.data();
    auto& dout = out.mutable_data();
    for (std::size_t i = 0; i < da.size(); ++i) dout[i] = da[i] + c;
    check_finite(out, "add_scalar");
    record("add_scalar", {&a}, out, [a, out]() {
        if (!a.requires_grad()) return;
        const auto& g = out.node()->grad;
        auto& ga = a.node()->grad;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
    return out;
}

Tensor mul(const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.shape());
    const auto& da = a.data();
    auto& dout = out.mutable_data();
    for (std::size_t i = 0; i < da.size(); ++i) dout[i] = da[i] * c;
    check_finite(out, "mul_scalar");
    record("mul_scalar", {&a}, out, [a, out, c]() {
        if (!a.requires_grad()) return;
        const auto& g = out.node()->grad;
        auto& ga = a.node()->grad;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
    return out;
}

Tensor mul_scalar_t(const Tensor& x, const Tensor& s) {
    if (s.size() != 1) throw std::invalid_argument("mul_scalar_t: scale must have one element");
    const double c = s.data()[0];
    Tensor out = Tensor::zeros(x.shape());
    const auto& dx = x.data();
    auto& dout = out.mutable_data();
    for (std::size_t i = 0; i < dx.size(); ++i) dout[i] = dx[i] * c;
    check_finite(out, "mul_scalar_t");
    record("mul_scalar_t", {&x, &s}, out, [x, s, out]() {
        const auto& g = out.node()->grad;
        if (x.requires_grad()) {
            const double c = s.data()[0];
            auto& gx = x.node()->grad;
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
        }
        if (s.requires_grad()) {
            const auto& dx = x.data();
            double acc = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * dx[i];
            s.node()->grad[0] += acc;
        }
    });
    return out;
}

// ---- elementwise unary -------------------------------------------------------

namespace {

Tensor unary_op(const Tensor& x, const char* name, const std::function<double(double)>& f,
                const std::function<double(double, double)>& dfdx_from_x_y) {
    Tensor out = Tensor::zeros(x.shape());
    const auto& dx = x.data();
    auto& dout = out.mutable_data();
    for (std::size_t i = 0; i < dx.size(); ++i) dout[i] = f(dx[i]);
    check_finite(out, name);
    record(name, {&x}, out, [x, out, dfdx_from_x_y]() {
        if (!x.requires_grad()) return;
        const auto& g = out.node()->grad;
        const auto& dx = x.data();
        const auto& dy = out.data();
        auto& gx = x.node()->grad;
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfdx_from_x_y(dx[i], dy[i]);
    });
    return out;
}

}  // namespace

Tensor neg(const Tensor& x) {
    return unary_op(x, "neg", [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& x) {
    return unary_op(x, "exp", [](double v) { return std::exp(v); },
                    [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
    for (double v : x.data()) {
        if (v <= 0.0) throw std::domain_error("log: input must be positive");
    }
    return unary_op(x, "log", [](double v) { return std::log(v); },
                    [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
    for (double v : x.data()) {
        if (v < 0.0) throw std::domain_error("sqrt: input must be non-negative");
    }
    return unary_op(x, "sqrt", [](double v) { return std::sqrt(v); },
                    [](double, double y) { return 0.5 / y; });
}

Tensor sigmoid(const Tensor& x) {
    return unary_op(
        x, "sigmoid",
        [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
    for (double v : x.data()) {
        const double m = std::abs(v);
        if (m < g_diag.min_relu_margin) g_diag.min_relu_margin = m;
    }
    // subgradient at 0 is the left limit, i.e. 0
    return unary_op(x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
                    [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

// ---- softmax ----------------------------------------------------------------

Tensor softmax(const Tensor& x, std::int64_t axis) {
    checked_axis(x, axis, "softmax");
    const AxisSplit s = split_axis(x.shape(), axis);
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.data().data();
    double* po = out.mutable_data().data();
    for (std::int64_t o = 0; o < s.outer; ++o) {
        for (std::int64_t i = 0; i < s.inner; ++i) {
            const std::int64_t base = o * s.n * s.inner + i;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::int64_t k = 0; k < s.n; ++k) mx = std::max(mx, px[base + k * s.inner]);
            double z = 0.0;
            for (std::int64_t k = 0; k < s.n; ++k) {
                const double e = std::exp(px[base + k * s.inner] - mx);
                po[base + k * s.inner] = e;
                z += e;
            }
            for (std::int64_t k = 0; k < s.n; ++k) po[base + k * s.inner] /= z;
        }
    }
    check_finite(out, "softmax");
    record("softmax", {&x}, out, [x, out, s]() {
        if (!x.requires_grad()) return;
        const double* g = out.node()->grad.data();
        const double* y = out.data().data();
        double* gx = x.node()->grad.data();
        for (std::int64_t o = 0; o < s.outer; ++o) {
            for (std::int64_t i = 0; i < s.inner; ++i) {
                const std::int64_t base = o * s.n * s.inner + i;
                double dot = 0.0;
                for (std::int64_t k = 0; k < s.n; ++k) {
                    const std::int64_t p = base + k * s.inner;
                    dot += g[p] * y[p];
                }
                for (std::int64_t k = 0; k < s.n; ++k) {
                    const std::int64_t p = base + k * s.inner;
                    gx[p] += y[p] * (g[p] - dot);
                }
            }
        }
    });
    return out;
}

// ---- reductions ----------------------------------------------------------------

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    Tensor out = Tensor::scalar(acc);
    check_finite(out, "sum");
    record("sum", {&x}, out, [x, out]() {
        if (!x.requires_grad()) return;
        const double g = out.node()->grad[0];
        auto& gx = x.node()->grad;
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
    return out;
}

Tensor mean(const Tensor& x) {
    const double inv = 1.0 / static_cast<double>(x.size());
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    Tensor out = Tensor::scalar(acc * inv);
    check_finite(out, "mean");
    record("mean", {&x}, out, [x, out, inv]() {
        if (!x.requires_grad()) return;
        const double g = out.node()->grad[0] * inv;
        auto& gx = x.node()->grad;
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
    return out;
}

namespace {

Tensor reduce_axis(const Tensor& x, std::int64_t axis, bool take_mean, const char* name) {
    checked_axis(x, axis, name);
    const AxisSplit s = split_axis(x.shape(), axis);
    Shape out_shape;
    for (std::int64_t i = 0; i < x.ndim(); ++i) {
        if (i != axis) out_shape.push_back(x.dim(i));
    }
    if (out_shape.empty()) out_shape = {1};
    Tensor out = Tensor::zeros(out_shape);
    const double* px = x.data().data();
    double* po = out.mutable_data().data();
    const double scale = take_mean ? 1.0 / static_cast<double>(s.n) : 1.0;
    for (std::int64_t o = 0; o < s.outer; ++o) {
        for (std::int64_t k = 0; k < s.n; ++k) {
            const std::int64_t base = (o * s.n + k) * s.inner;
            for (std::int64_t i = 0; i < s.inner; ++i) po[o * s.inner + i] += px[base + i] * scale;
        }
    }
    check_finite(out, name);
    record(name, {&x}, out, [x, out, s, scale]() {
        if (!x.requires_grad()) return;
        const double* g = out.node()->grad.data();
        double* gx = x.node()->grad.data();
        for (std::int64_t o = 0; o < s.outer; ++o) {
            for (std::int64_t k = 0; k < s.n; ++k) {
                const std::int64_t base = (o * s.n + k) * s.inner;
                for (std::int64_t i = 0; i < s.inner; ++i) gx[base + i] += g[o * s.inner + i] * scale;
            }
        }
    });
    return out;
}

}  // namespace

Tensor sum_axis(const Tensor& x, std::int64_t axis) { return reduce_axis(x, axis, false, "sum_axis"); }
Tensor mean_axis(const Tensor& x, std::int64_t axis) { return reduce_axis(x, axis, true, "mean_axis"); }

Tensor pool_broadcast(const Tensor& x, std::int64_t axis, Pool kind) {
    checked_axis(x, axis, "pool_broadcast");
    const AxisSplit s = split_axis(x.shape(), axis);
    if (s.n < 1) throw std::invalid_argument("pool_broadcast: empty pooling axis");
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.data().data();
    double* po = out.mutable_data().data();
    // argmax per (outer, inner) slice, kept for the backward pass
    auto argmax = std::make_shared<std::vector<std::int64_t>>();
    if (kind == Pool::Max) argmax->resize(static_cast<std::size_t>(s.outer * s.inner));
    for (std::int64_t o = 0; o < s.outer; ++o) {
        for (std::int64_t i = 0; i < s.inner; ++i) {
            double v;
            if (kind == Pool::Max) {
                v = -std::numeric_limits<double>::infinity();
                std::int64_t best = 0;
                for (std::int64_t k = 0; k < s.n; ++k) {
                    const double u = px[(o * s.n + k) * s.inner + i];
                    if (u > v) {
                        v = u;
                        best = k;
                    }
                }
                (*argmax)[static_cast<std::size_t>(o * s.inner + i)] = best;
            } else {
                v = 0.0;
                for (std::int64_t k = 0; k < s.n; ++k) v += px[(o * s.n + k) * s.inner + i];
                v /= static_cast<double>(s.n);
            }
            for (std::int64_t k = 0; k < s.n; ++k) po[(o * s.n + k) * s.inner + i] = v;
        }
    }
    check_finite(out, "pool_broadcast");
    record("pool_broadcast", {&x}, out, [x, out, s, kind, argmax]() {
        if (!x.requires_grad()) return;
        const double* g = out.node()->grad.data();
        double* gx = x.node()->grad.data();
        for (std::int64_t o = 0; o < s.outer; ++o) {
            for (std::int64_t i = 0; i < s.inner; ++i) {
                double gsum = 0.0;
                for (std::int64_t k = 0; k < s.n; ++k) gsum += g[(o * s.n + k) * s.inner + i];
                if (kind == Pool::Max) {
                    const std::int64_t best = (*argmax)[static_cast<std::size_t>(o * s.inner + i)];
                    gx[(o * s.n + best) * s.inner + i] += gsum;
                } else {
                    const double share = gsum / static_cast<double>(s.n);
                    for (std::int64_t k = 0; k < s.n; ++k) gx[(o * s.n + k) * s.inner + i] += share;
                }
            }
        }
    });
    return out;
}

// ---- shape ops ------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                    shape_str(shape));
    }
    Tensor out = Tensor::from_data(std::move(shape), x.data());
    record("reshape", {&x}, out, [x, out]() {
        if (!x.requires_grad()) return;
        const auto& g = out.node()->grad;
        auto& gx = x.node()->grad;
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
    return out;
}

Tensor stack0(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("stack0: empty input list");
    const Shape& inner_shape = parts[0].shape();
    for (const auto& p : parts) require_same_shape(parts[0], p, "stack0");
    Shape out_shape;
    out_shape.push_back(static_cast<std::int64_t>(parts.size()));
    out_shape.insert(out_shape.end(), inner_shape.begin(), inner_shape.end());
    Tensor out = Tensor::zeros(out_shape);
    const std::int64_t block = parts[0].size();
    for (std::size_t t = 0; t < parts.size(); ++t) {
        std::memcpy(out.mutable_data().data() + static_cast<std::int64_t>(t) * block,
                    parts[t].data().data(), static_cast<std::size_t>(block) * sizeof(double));
    }
    bool any_grad = false;
    for (const auto& p : parts) any_grad = any_grad || p.requires_grad();
    if (any_grad && grad_enabled() && active_tape() != nullptr) {
        out.set_requires_grad(true);
        auto parts_copy = parts;
        active_tape()->record("stack0", out.shared_node(), [parts_copy, out, block]() {
            const double* g = out.node()->grad.data();
            for (std::size_t t = 0; t < parts_copy.size(); ++t) {
                if (!parts_copy[t].requires_grad()) continue;
                double* gp = parts_copy[t].node()->grad.data();
                const double* gslice = g + static_cast<std::int64_t>(t) * block;
                for (std::int64_t i = 0; i < block; ++i) gp[i] += gslice[i];
            }
        });
    }
    return out;
}

Tensor slice_last(const Tensor& x, std::int64_t start, std::int64_t len) {
    const std::int64_t last = x.dim(x.ndim() - 1);
    if (start < 0 || len <= 0 || start + len > last) {
        throw std::invalid_argument("slice_last: range out of bounds");
    }
    Shape out_shape = x.shape();
    out_shape.back() = len;
    Tensor out = Tensor::zeros(out_shape);
    const std::int64_t rows = x.size() / last;
    const double* px = x.data().data();
    double* po = out.mutable_data().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        std::memcpy(po + r * len, px + r * last + start, static_cast<std::size_t>(len) * sizeof(double));
    }
    record("slice_last", {&x}, out, [x, out, start, len, rows, last]() {
        if (!x.requires_grad()) return;
        const double* g = out.node()->grad.data();
        double* gx = x.node()->grad.data();
        for (std::int64_t r = 0; r < rows; ++r) {
            for (std::int64_t j = 0; j < len; ++j) gx[r * last + start + j] += g[r * len + j];
        }
    });
    return out;
}

Tensor concat_last(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_last: empty input list");
    Shape lead = parts[0].shape();
    lead.pop_back();
    std::int64_t total = 0;
    for (const auto& p : parts) {
        Shape pl = p.shape();
        const std::int64_t w = pl.back();
        pl.pop_back();
        if (pl != lead) throw std::invalid_argument("concat_last: leading dimensions disagree");
        total += w;
    }
    Shape out_shape = parts[0].shape();
    out_shape.back() = total;
    Tensor out = Tensor::zeros(out_shape);
    const std::int64_t rows = out.size() / total;
    double* po = out.mutable_data().data();
    std::int64_t off = 0;
    for (const auto& p : parts) {
        const std::int64_t w = p.dim(p.ndim() - 1);
        const double* pp = p.data().data();
        for (std::int64_t r = 0; r < rows; ++r) {
            std::memcpy(po + r * total + off, pp + r * w, static_cast<std::size_t>(w) * sizeof(double));
        }
        off += w;
    }
    bool any_grad = false;
    for (const auto& p : parts) any_grad = any_grad || p.requires_grad();
    if (any_grad && grad_enabled() && active_tape() != nullptr) {
        out.set_requires_grad(true);
        auto parts_copy = parts;
        active_tape()->record("concat_last", out.shared_node(), [parts_copy, out, rows, total]() {
            const double* g = out.node()->grad.data();
            std::int64_t off = 0;
            for (const auto& p : parts_copy) {
                const std::int64_t w = p.dim(p.ndim() - 1);
                if (p.requires_grad()) {
                    double* gp = p.node()->grad.data();
                    for (std::int64_t r = 0; r < rows; ++r) {
                        for (std::int64_t j = 0; j < w; ++j) gp[r * w + j] += g[r * total + off + j];
                    }
                }
                off += w;
            }
        });
    }
    return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& rows) {
    if (x.ndim() != 2) throw std::invalid_argument("gather_rows: expects a 2-D tensor");
    const std::int64_t r_in = x.dim(0), c = x.dim(1);
    for (auto r : rows) {
        if (r < 0 || r >= r_in) throw std::invalid_argument("gather_rows: row index out of range");
    }
    Tensor out = Tensor::zeros({static_cast<std::int64_t>(rows.size()), c});
    const double* px = x.data().data();
    double* po = out.mutable_data().data();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::memcpy(po + static_cast<std::int64_t>(i) * c, px + rows[i] * c,
                    static_cast<std::size_t>(c) * sizeof(double));
    }
    auto rows_copy = std::make_shared<std::vector<std::int64_t>>(rows);
    record("gather_rows", {&x}, out, [x, out, rows_copy, c]() {
        if (!x.requires_grad()) return;
        const double* g = out.node()->grad.data();
        double* gx = x.node()->grad.data();
        for (std::size_t i = 0; i < rows_copy->size(); ++i) {
            const std::int64_t r = (*rows_copy)[i];
            for (std::int64_t j = 0; j < c; ++j) gx[r * c + j] += g[static_cast<std::int64_t>(i) * c + j];
        }
    });
    return out;
}

// ---- broadcast helpers -------------------------------------------------------

namespace {

void require_vec(const Tensor& v, std::int64_t len, const char* op) {
    if (v.ndim() != 1 || v.dim(0) != len) {
        throw std::invalid_argument(std::string(op) + ": vector shape " + shape_str(v.shape()) +
                                    " does not match broadcast length " + std::to_string(len));
    }
}

}  // namespace

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    const std::int64_t c = x.dim(x.ndim() - 1);
    require_vec(v, c, "add_rowvec");
    Tensor out = Tensor::zeros(x.shape());
    const std::int64_t rows = x.size() / c;
    const double* px = x.data().data();
    const double* pv = v.data().data();
    double* po = out.mutable_data().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t j = 0; j < c; ++j) po[r * c + j] = px[r * c + j] + pv[j];
    }
    check_finite(out, "add_rowvec");
    record("add_rowvec", {&x, &v}, out, [x, v, out, rows, c]() {
        const double* g = out.node()->grad.data();
        if (x.requires_grad()) {
            double* gx = x.node()->grad.data();
            for (std::int64_t i = 0; i < rows * c; ++i) gx[i] += g[i];
        }
        if (v.requires_grad()) {
            double* gv = v.node()->grad.data();
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t j = 0; j < c; ++j) gv[j] += g[r * c + j];
        }
    });
    return out;
}

Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
    const std::int64_t c = x.dim(x.ndim() - 1);
    require_vec(v, c, "mul_rowvec");
    Tensor out = Tensor::zeros(x.shape());
    const std::int64_t rows = x.size() / c;
    const double* px = x.data().data();
    const double* pv = v.data().data();
    double* po = out.mutable_data().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t j = 0; j < c; ++j) po[r * c + j] = px[r * c + j] * pv[j];
    }
    check_finite(out, "mul_rowvec");
    record("mul_rowvec", {&x, &v}, out, [x, v, out, rows, c]() {
        const double* g = out.node()->grad.data();
        if (x.requires_grad()) {
            const double* pv = v.data().data();
            double* gx = x.node()->grad.data();
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t j = 0; j < c; ++j) gx[r * c + j] += g[r * c + j] * pv[j];
        }
        if (v.requires_grad()) {
            const double* px = x.data().data();
            double* gv = v.node()->grad.data();
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t j = 0; j < c; ++j) gv[j] += g[r * c + j] * px[r * c + j];
        }
    });
    return out;
}

Tensor add_colvec(const Tensor& x, const Tensor& v) {
    if (x.ndim() < 2) throw std::invalid_argument("add_colvec: expects >= 2-D tensor");
    const std::int64_t rows = x.dim(x.ndim() - 2);
    const std::int64_t cols = x.dim(x.ndim() - 1);
    require_vec(v, rows, "add_colvec");
    const std::int64_t batch = x.size() / (rows * cols);
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.data().data();
    const double* pv = v.data().data();
    double* po = out.mutable_data().data();
    for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t r = 0; r < rows; ++r) {
            const std::int64_t base = (b * rows + r) * cols;
            for (std::int64_t j = 0; j < cols; ++j) po[base + j] = px[base + j] + pv[r];
        }
    }
    check_finite(out, "add_colvec");
    record("add_colvec", {&x, &v}, out, [x, v, out, batch, rows, cols]() {
        const double* g = out.node()->grad.data();
        if (x.requires_grad()) {
            double* gx = x.node()->grad.data();
            for (std::int64_t i = 0; i < batch * rows * cols; ++i) gx[i] += g[i];
        }
        if (v.requires_grad()) {
            double* gv = v.node()->grad.data();
            for (std::int64_t b = 0; b < batch; ++b)
                for (std::int64_t r = 0; r < rows; ++r) {
                    const std::int64_t base = (b * rows + r) * cols;
                    for (std::int64_t j = 0; j < cols; ++j) gv[r] += g[base + j];
                }
        }
    });
    return out;
}

// ---- mode-n product -----------------------------------------------------------

Tensor mode_n_product(const Tensor& t, const Tensor& m, std::int64_t mode) {
    if (m.ndim() != 2) throw std::invalid_argument("mode_n_product: factor must be a matrix");
    checked_axis(t, mode, "mode_n_product");
    const std::int64_t dn = t.dim(mode);
    const std::int64_t r = m.dim(0);
    if (m.dim(1) != dn) {
        throw std::invalid_argument("mode_n_product: factor columns " + std::to_string(m.dim(1)) +
                                    " do not match mode size " + std::to_string(dn));
    }
    const AxisSplit s = split_axis(t.shape(), mode);
    Shape out_shape = t.shape();
    out_shape[static_cast<std::size_t>(mode)] = r;
    Tensor out = Tensor::zeros(out_shape);
    const double* pt = t.data().data();
    const double* pm = m.data().data();
    double* po = out.mutable_data().data();
    for (std::int64_t o = 0; o < s.outer; ++o) {
        for (std::int64_t j = 0; j < r; ++j) {
            double* orow = po + (o * r + j) * s.inner;
            for (std::int64_t k = 0; k < dn; ++k) {
                const double w = pm[j * dn + k];
                if (w == 0.0) continue;
                const double* trow = pt + (o * dn + k) * s.inner;
                for (std::int64_t i = 0; i < s.inner; ++i) orow[i] += w * trow[i];
            }
        }
    }
    check_finite(out, "mode_n_product");
    record("mode_n_product", {&t, &m}, out, [t, m, out, s, dn, r]() {
        const double* g = out.node()->grad.data();
        if (t.requires_grad()) {
            const double* pm = m.data().data();
            double* gt = t.node()->grad.data();
            for (std::int64_t o = 0; o < s.outer; ++o) {
                for (std::int64_t j = 0; j < r; ++j) {
                    const double* grow = g + (o * r + j) * s.inner;
                    for (std::int64_t k = 0; k < dn; ++k) {
                        const double w = pm[j * dn + k];
                        if (w == 0.0) continue;
                        double* trow = gt + (o * dn + k) * s.inner;
                        for (std::int64_t i = 0; i < s.inner; ++i) trow[i] += w * grow[i];
                    }
                }
            }
        }
        if (m.requires_grad()) {
            const double* pt = t.data().data();
            double* gm = m.node()->grad.data();
            for (std::int64_t o = 0; o < s.outer; ++o) {
                for (std::int64_t j = 0; j < r; ++j) {
                    const double* grow = g + (o * r + j) * s.inner;
                    for (std::int64_t k = 0; k < dn; ++k) {
                        const double* trow = pt + (o * dn + k) * s.inner;
                        double acc = 0.0;
                        for (std::int64_t i = 0; i < s.inner; ++i) acc += grow[i] * trow[i];
                        gm[j * dn + k] += acc;
                    }
                }
            }
        }
    });
    return out;
}

// ---- dense bilinear -------------------------------------------------------------

Tensor dense_bilinear(const Tensor& r, const Tensor& s, const Tensor& t_full) {
    if (t_full.ndim() != 3) throw std::invalid_argument("dense_bilinear: tensor must be 3-way");
    const std::int64_t ds = t_full.dim(0), dt = t_full.dim(1), K = t_full.dim(2);
    const bool batched = r.ndim() == 2;
    if (r.ndim() != s.ndim() || (r.ndim() != 1 && r.ndim() != 2)) {
        throw std::invalid_argument("dense_bilinear: r and s must both be 1-D or both 2-D");
    }
    const std::int64_t B = batched ? r.dim(0) : 1;
    if ((batched ? r.dim(1) : r.dim(0)) != ds || (batched ? s.dim(1) : s.dim(0)) != dt ||
        (batched && s.dim(0) != B)) {
        throw std::invalid_argument("dense_bilinear: operand shapes do not match tensor dims");
    }
    Shape out_shape = batched ? Shape{B, K} : Shape{K};
    Tensor out = Tensor::zeros(out_shape);
    const double* pr = r.data().data();
    const double* ps = s.data().data();
    const double* pt = t_full.data().data();
    double* po = out.mutable_data().data();
    for (std::int64_t b = 0; b < B; ++b) {
        const double* rb = pr + b * ds;
        const double* sb = ps + b * dt;
        double* ob = po + b * K;
        for (std::int64_t i = 0; i < ds; ++i) {
            const double ri = rb[i];
            if (ri == 0.0) continue;
            for (std::int64_t j = 0; j < dt; ++j) {
                const double w = ri * sb[j];
                if (w == 0.0) continue;
                const double* trow = pt + (i * dt + j) * K;
                for (std::int64_t k = 0; k < K; ++k) ob[k] += w * trow[k];
            }
        }
    }
    check_finite(out, "dense_bilinear");
    record("dense_bilinear", {&r, &s, &t_full}, out, [r, s, t_full, out, B, ds, dt, K]() {
        const double* g = out.node()->grad.data();
        const double* pr = r.data().data();
        const double* ps = s.data().data();
        const double* pt = t_full.data().data();
        for (std::int64_t b = 0; b < B; ++b) {
            const double* rb = pr + b * ds;
            const double* sb = ps + b * dt;
            const double* gb = g + b * K;
            if (r.requires_grad()) {
                double* gr = r.node()->grad.data() + b * ds;
                for (std::int64_t i = 0; i < ds; ++i) {
                    double acc = 0.0;
                    for (std::int64_t j = 0; j < dt; ++j) {
                        const double* trow = pt + (i * dt + j) * K;
                        double dotk = 0.0;
                        for (std::int64_t k = 0; k < K; ++k) dotk += gb[k] * trow[k];
                        acc += sb[j] * dotk;
                    }
                    gr[i] += acc;
                }
            }
            if (s.requires_grad()) {
                double* gs = s.node()->grad.data() + b * dt;
                for (std::int64_t j = 0; j < dt; ++j) {
                    double acc = 0.0;
                    for (std::int64_t i = 0; i < ds; ++i) {
                        const double* trow = pt + (i * dt + j) * K;
                        double dotk = 0.0;
                        for (std::int64_t k = 0; k < K; ++k) dotk += gb[k] * trow[k];
                        acc += rb[i] * dotk;
                    }
                    gs[j] += acc;
                }
            }
            if (t_full.requires_grad()) {
                double* gt = t_full.node()->grad.data();
                for (std::int64_t i = 0; i < ds; ++i) {
                    const double ri = rb[i];
                    if (ri == 0.0) continue;
                    for (std::int64_t j = 0; j < dt; ++j) {
                        const double w = ri * sb[j];
                        if (w == 0.0) continue;
                        double* trow = gt + (i * dt + j) * K;
                        for (std::int64_t k = 0; k < K; ++k) trow[k] += w * gb[k];
                    }
                }
            }
        }
    });
    return out;
}

// ---- conv1d ------------------------------------------------------------------------

Tensor conv1d_same(const Tensor& x, const Tensor& w, const Tensor& bias) {
    if (x.ndim() != 3) throw std::invalid_argument("conv1d_same: input must be [B, L, Cin]");
    if (w.ndim() != 3) throw std::invalid_argument("conv1d_same: kernel must be [Cout, Cin, k]");
    const std::int64_t B = x.dim(0), L = x.dim(1), cin = x.dim(2);
    const std::int64_t cout = w.dim(0), k = w.dim(2);
    if (w.dim(1) != cin) {
        throw std::invalid_argument("conv1d_same: kernel channels " + std::to_string(w.dim(1)) +
                                    " do not match input channels " + std::to_string(cin));
    }
    if (k % 2 == 0) throw std::invalid_argument("conv1d_same: kernel size must be odd");
    require_vec(bias, cout, "conv1d_same");
    const std::int64_t half = k / 2;
    Tensor out = Tensor::zeros({B, L, cout});
    const double* px = x.data().data();
    const double* pw = w.data().data();
    const double* pb = bias.data().data();
    double* po = out.mutable_data().data();
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t l = 0; l < L; ++l) {
            double* orow = po + (b * L + l) * cout;
            for (std::int64_t co = 0; co < cout; ++co) orow[co] = pb[co];
            for (std::int64_t dk = -half; dk <= half; ++dk) {
                const std::int64_t lp = l + dk;
                if (lp < 0 || lp >= L) continue;  // zero padding
                const double* xrow = px + (b * L + lp) * cin;
                for (std::int64_t co = 0; co < cout; ++co) {
                    const double* wrow = pw + (co * cin) * k + (dk + half);
                    double acc = 0.0;
                    for (std::int64_t ci = 0; ci < cin; ++ci) acc += xrow[ci] * wrow[ci * k];
                    orow[co] += acc;
                }
            }
        }
    }
    check_finite(out, "conv1d_same");
    record("conv1d_same", {&x, &w, &bias}, out, [x, w, bias, out, B, L, cin, cout, k, half]() {
        const double* g = out.node()->grad.data();
        const double* px = x.data().data();
        const double* pw = w.data().data();
        for (std::int64_t b = 0; b < B; ++b) {
            for (std::int64_t l = 0; l < L; ++l) {
                const double* grow = g + (b * L + l) * cout;
                for (std::int64_t dk = -half; dk <= half; ++dk) {
                    const std::int64_t lp = l + dk;
                    if (lp < 0 || lp >= L) continue;
                    if (x.requires_grad()) {
                        double* gxrow = x.node()->grad.data() + (b * L + lp) * cin;
                        for (std::int64_t co = 0; co < cout; ++co) {
                            const double gv = grow[co];
                            if (gv == 0.0) continue;
                            const double* wrow = pw + (co * cin) * k + (dk + half);
                            for (std::int64_t ci = 0; ci < cin; ++ci) gxrow[ci] += gv * wrow[ci * k];
                        }
                    }
                    if (w.requires_grad()) {
                        const double* xrow = px + (b * L + lp) * cin;
                        double* gw = w.node()->grad.data();
                        for (std::int64_t co = 0; co < cout; ++co) {
                            const double gv = grow[co];
                            if (gv == 0.0) continue;
                            double* gwrow = gw + (co * cin) * k + (dk + half);
                            for (std::int64_t ci = 0; ci < cin; ++ci) gwrow[ci * k] += gv * xrow[ci];
                        }
                    }
                }
                if (bias.requires_grad()) {
                    double* gb = bias.node()->grad.data();
                    for (std::int64_t co = 0; co < cout; ++co) gb[co] += grow[co];
                }
            }
        }
    });
    return out;
}

// ---- dropout / spike ------------------------------------------------------------------

Tensor dropout(const Tensor& x, double p, bool training, Rng& rng) {
    if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: rate must be in [0, 1)");
    if (!training || p == 0.0) return x;
    const double scale = 1.0 / (1.0 - p);
    auto mask = std::make_shared<std::vector<double>>(x.data().size());
    Tensor out = Tensor::zeros(x.shape());
    const auto& dx = x.data();
    auto& dout = out.mutable_data();
    for (std::size_t i = 0; i < dx.size(); ++i) {
        const double m = rng.uniform() >= p ? scale : 0.0;
        (*mask)[i] = m;
        dout[i] = dx[i] * m;
    }
    record("dropout", {&x}, out, [x, out, mask]() {
        if (!x.requires_grad()) return;
        const auto& g = out.node()->grad;
        auto& gx = x.node()->grad;
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
    });
    return out;
}

Tensor spike_ge(const Tensor& v, double v_th, double surrogate_halfwidth) {
    const double a = surrogate_halfwidth;
    if (a <= 0.0) throw std::invalid_argument("spike_ge: surrogate half-width must be positive");
    Tensor out = Tensor::zeros(v.shape());
    const auto& dv = v.data();
    auto& dout = out.mutable_data();
    for (std::size_t i = 0; i < dv.size(); ++i) {
        if (!std::isfinite(dv[i])) throw std::runtime_error("spike_ge: non-finite membrane potential");
        const double margin = std::abs(dv[i] - v_th);
        if (margin < g_diag.min_spike_margin) g_diag.min_spike_margin = margin;
        if (margin < a) ++g_diag.spike_window_hits;
        dout[i] = dv[i] >= v_th ? 1.0 : 0.0;
    }
    record("spike_ge", {&v}, out, [v, out, v_th, a]() {
        if (!v.requires_grad()) return;
        const auto& g = out.node()->grad;
        const auto& dv = v.data();
        auto& gv = v.node()->grad;
        const double w = 1.0 / (2.0 * a);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (std::abs(dv[i] - v_th) < a) gv[i] += g[i] * w;
        }
    });
    return out;
}

// ---- normalization composites ------------------------------------------------------

namespace {
constexpr double kNormEps = 1e-5;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    const std::int64_t last = x.ndim() - 1;
    Tensor mu = pool_broadcast(x, last, Pool::Mean);
    Tensor xc = sub(x, mu);
    Tensor var = pool_broadcast(mul(xc, xc), last, Pool::Mean);
    Tensor xhat = div(xc, sqrt(add(var, kNormEps)));
    return add_rowvec(mul_rowvec(xhat, gain), bias);
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats,
                  bool training) {
    const std::int64_t c = x.dim(x.ndim() - 1);
    if (static_cast<std::int64_t>(stats.running_mean.size()) != c ||
        static_cast<std::int64_t>(stats.running_var.size()) != c) {
        throw std::invalid_argument("batch_norm: running stats do not match channel count");
    }
    const Shape orig = x.shape();
    Tensor x2 = x.ndim() == 2 ? x : reshape(x, {x.size() / c, c});
    Tensor out2;
    if (training) {
        Tensor mu = pool_broadcast(x2, 0, Pool::Mean);
        Tensor xc = sub(x2, mu);
        Tensor var = pool_broadcast(mul(xc, xc), 0, Pool::Mean);
        Tensor xhat = div(xc, sqrt(add(var, kNormEps)));
        out2 = add_rowvec(mul_rowvec(xhat, gamma), beta);
        // running-stat update reads batch statistics straight off the data
        const std::int64_t rows = x2.dim(0);
        const double* px = x2.data().data();
        for (std::int64_t j = 0; j < c; ++j) {
            double m = 0.0;
            for (std::int64_t r = 0; r < rows; ++r) m += px[r * c + j];
            m /= static_cast<double>(rows);
            double v = 0.0;
            for (std::int64_t r = 0; r < rows; ++r) {
                const double d = px[r * c + j] - m;
                v += d * d;
            }
            v /= static_cast<double>(rows);
            stats.running_mean[static_cast<std::size_t>(j)] =
                (1.0 - stats.momentum) * stats.running_mean[static_cast<std::size_t>(j)] + stats.momentum * m;
            stats.running_var[static_cast<std::size_t>(j)] =
                (1.0 - stats.momentum) * stats.running_var[static_cast<std::size_t>(j)] + stats.momentum * v;
        }
    } else {
        std::vector<double> shift(static_cast<std::size_t>(c));
        std::vector<double> scale(static_cast<std::size_t>(c));
        for (std::int64_t j = 0; j < c; ++j) {
            shift[static_cast<std::size_t>(j)] = -stats.running_mean[static_cast<std::size_t>(j)];
            scale[static_cast<std::size_t>(j)] =
                1.0 / std::sqrt(stats.running_var[static_cast<std::size_t>(j)] + kNormEps);
        }
        Tensor xhat = mul_rowvec(add_rowvec(x2, Tensor::from_data({c}, shift)),
                                 Tensor::from_data({c}, scale));
        out2 = add_rowvec(mul_rowvec(xhat, gamma), beta);
    }
    return x.ndim() == 2 ? out2 : reshape(out2, orig);
}

// ---- backward / grad_check ------------------------------------------------------------

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw std::invalid_argument("backward: loss must be a single-element tensor");
    }
    if (!loss.requires_grad()) {
        throw std::invalid_argument("backward: loss is not connected to the active tape");
    }
    if (g_active_tape == nullptr) {
        throw std::logic_error("backward: no active tape");
    }
    g_active_tape->zero_op_grads();
    loss.node()->grad[0] = 1.0;
    g_active_tape->replay_backward();
}

double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                  std::vector<Tensor> inputs, double step) {
    // analytic gradients
    std::vector<std::vector<double>> analytic;
    {
        for (auto& t : inputs) {
            t.set_requires_grad(true);
            t.zero_grad();
        }
        TapeScope scope;
        Tensor y = f(inputs);
        if (y.size() != 1) throw std::invalid_argument("grad_check: f must be scalar-valued");
        backward(y);
        for (auto& t : inputs) analytic.push_back(t.grad());
    }
    // central differences
    double max_rel = 0.0;
    NoGradScope no_grad;
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        Tensor& t = inputs[ti];
        for (std::size_t i = 0; i < t.mutable_data().size(); ++i) {
            const double saved = t.mutable_data()[i];
            t.mutable_data()[i] = saved + step;
            const double up = f(inputs).value();
            t.mutable_data()[i] = saved - step;
            const double down = f(inputs).value();
            t.mutable_data()[i] = saved;
            const double fd = (up - down) / (2.0 * step);
            const double a = analytic[ti][i];
            const double rel = std::abs(a - fd) / std::max(1.0, std::abs(a));
            if (rel > max_rel) max_rel = rel;
        }
    }
    return max_rel;
}

}  // namespace stft
