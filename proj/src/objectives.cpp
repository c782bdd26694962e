#include "stft/objectives.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace stft {

TripletMode triplet_mode_from_string(const std::string& s) {
    if (s == "resolved") return TripletMode::Resolved;
    if (s == "printed") return TripletMode::Printed;
    throw std::invalid_argument("unknown triplet_mode: " + s);
}

std::string to_string(TripletMode mode) {
    return mode == TripletMode::Resolved ? "resolved" : "printed";
}

namespace {

// squared Euclidean distance between row i of a and row j of b (raw data)
double sqdist_rows(const Tensor& a, std::int64_t i, const Tensor& b, std::int64_t j) {
    const std::int64_t w = a.dim(1);
    const double* pa = a.data().data() + i * w;
    const double* pb = b.data().data() + j * w;
    double acc = 0.0;
    for (std::int64_t c = 0; c < w; ++c) {
        const double d = pa[c] - pb[c];
        acc += d * d;
    }
    return acc;
}

// per-row squared Euclidean distance, differentiable: [B]
Tensor rowwise_sqdist(const Tensor& a, const Tensor& b) {
    Tensor d = sub(a, b);
    return sum_axis(mul(d, d), 1);
}

}  // namespace

Tensor triplet_loss(const Tensor& f_av, const Tensor& f_tex,
                    const std::vector<std::int64_t>& labels, double gamma, TripletMode mode) {
    if (f_av.ndim() != 2 || f_av.shape() != f_tex.shape()) {
        throw std::invalid_argument("triplet_loss: embeddings must be equal-shape [B, width]");
    }
    const std::int64_t b = f_av.dim(0);
    if (static_cast<std::int64_t>(labels.size()) != b) {
        throw std::invalid_argument("triplet_loss: label count does not match batch");
    }
    if (gamma < 0.0) throw std::invalid_argument("triplet_loss: margin must be non-negative");

    // hardest in-batch negatives, chosen on raw values
    std::vector<std::int64_t> neg_av(static_cast<std::size_t>(b));
    std::vector<std::int64_t> neg_tex(static_cast<std::size_t>(b));
    std::vector<double> valid(static_cast<std::size_t>(b), 0.0);
    for (std::int64_t i = 0; i < b; ++i) {
        double best_av = std::numeric_limits<double>::infinity();
        double best_tex = std::numeric_limits<double>::infinity();
        std::int64_t av_idx = i, tex_idx = i;
        for (std::int64_t j = 0; j < b; ++j) {
            if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(i)]) continue;
            const double dav = sqdist_rows(f_av, j, f_tex, i);
            if (dav < best_av) {
                best_av = dav;
                av_idx = j;
            }
            const double dtex = sqdist_rows(f_av, i, f_tex, j);
            if (dtex < best_tex) {
                best_tex = dtex;
                tex_idx = j;
            }
        }
        if (std::isfinite(best_av)) valid[static_cast<std::size_t>(i)] = 1.0;
        neg_av[static_cast<std::size_t>(i)] = av_idx;
        neg_tex[static_cast<std::size_t>(i)] = tex_idx;
    }

    Tensor d_pos = rowwise_sqdist(f_av, f_tex);                          // d(F_av+, F_tex+)
    Tensor d_neg_av = rowwise_sqdist(gather_rows(f_av, neg_av), f_tex);  // d(F_av-, F_tex+)
    Tensor d_neg_tex = rowwise_sqdist(f_av, gather_rows(f_tex, neg_tex));  // d(F_tex-, F_av+)

    Tensor term1, term2;
    if (mode == TripletMode::Resolved) {
        term1 = relu(add(sub(d_pos, d_neg_av), gamma));
        term2 = relu(add(sub(d_pos, d_neg_tex), gamma));
    } else {
        term1 = relu(add(d_pos, gamma));
        term2 = relu(add(d_neg_av, gamma));
    }
    Tensor mask = Tensor::from_data({b}, valid);
    return mean(mul(add(term1, term2), mask));
}

Tensor projection_loss(const Tensor& f_av, const Tensor& f_tex) {
    if (f_av.shape() != f_tex.shape()) {
        throw std::invalid_argument("projection_loss: shape mismatch");
    }
    Tensor d = sub(f_av, f_tex);
    return mean(mul(d, d));
}

Tensor reconstruction_loss(const Tensor& f_rec, const Tensor& f_tex) {
    if (f_rec.shape() != f_tex.shape()) {
        throw std::invalid_argument("reconstruction_loss: shape mismatch");
    }
    Tensor d = sub(f_rec, f_tex);
    return mean(mul(d, d));
}

Tensor total_loss(const Tensor& lt, const Tensor& lp, const Tensor& lr, const LossConfig& cfg) {
    Tensor proj_part = Tensor::scalar(0.0);
    if (cfg.use_proj_loss) proj_part = add(proj_part, lp);
    if (cfg.use_recon_loss) proj_part = add(proj_part, lr);
    return add(mul(lt, cfg.w_triplet), mul(proj_part, cfg.w_proj_recon));
}

std::vector<std::int64_t> classify(const Tensor& f_av, const Tensor& class_embeddings,
                                   const std::vector<std::int64_t>& candidates) {
    if (candidates.empty()) throw std::invalid_argument("classify: empty candidate set");
    if (f_av.dim(1) != class_embeddings.dim(1)) {
        throw std::invalid_argument("classify: embedding widths disagree");
    }
    const std::int64_t c = class_embeddings.dim(0);
    for (auto cls : candidates) {
        if (cls < 0 || cls >= c) throw std::invalid_argument("classify: candidate out of range");
    }
    std::vector<std::int64_t> preds(static_cast<std::size_t>(f_av.dim(0)));
    for (std::int64_t i = 0; i < f_av.dim(0); ++i) {
        double best = std::numeric_limits<double>::infinity();
        std::int64_t best_cls = candidates[0];
        for (auto cls : candidates) {
            const double d = sqdist_rows(f_av, i, class_embeddings, cls);
            if (d < best || (d == best && cls < best_cls)) {
                best = d;
                best_cls = cls;
            }
        }
        preds[static_cast<std::size_t>(i)] = best_cls;
    }
    return preds;
}

double mean_class_accuracy(const std::vector<std::int64_t>& preds,
                           const std::vector<std::int64_t>& labels,
                           const std::vector<std::int64_t>& class_set) {
    if (class_set.empty()) throw std::invalid_argument("mean_class_accuracy: empty class set");
    if (preds.size() != labels.size()) {
        throw std::invalid_argument("mean_class_accuracy: prediction/label count mismatch");
    }
    double acc_sum = 0.0;
    std::int64_t populated = 0;
    for (auto cls : class_set) {
        std::int64_t total = 0, correct = 0;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] != cls) continue;
            ++total;
            if (preds[i] == cls) ++correct;
        }
        if (total == 0) continue;
        acc_sum += static_cast<double>(correct) / static_cast<double>(total);
        ++populated;
    }
    return populated == 0 ? 0.0 : acc_sum / static_cast<double>(populated);
}

double harmonic_mean(double seen, double unseen) {
    if (seen < 0.0 || unseen < 0.0) throw std::invalid_argument("harmonic_mean: inputs must be >= 0");
    const double denom = seen + unseen;
    return denom > 0.0 ? 2.0 * seen * unseen / denom : 0.0;
}

}  // namespace stft
