#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stft/tensor.hpp"

namespace stft {

enum class TripletMode {
    Resolved,  // bidirectional margin with squared Euclidean distances
    Printed,   // the literal reading: no negative-distance subtraction
};
TripletMode triplet_mode_from_string(const std::string& s);
std::string to_string(TripletMode mode);

struct LossConfig {
    double gamma = 1.0;
    double w_triplet = 0.5;
    double w_proj_recon = 0.5;
    bool use_proj_loss = true;
    bool use_recon_loss = true;
    TripletMode triplet_mode = TripletMode::Resolved;
};

// Margin loss with hardest in-batch negatives (per anchor, lowest index on
// ties). Anchors without any out-of-class negative contribute zero.
Tensor triplet_loss(const Tensor& f_av, const Tensor& f_tex,
                    const std::vector<std::int64_t>& labels, double gamma, TripletMode mode);

// Mean squared elementwise distance (per-sample squared Euclidean / width).
Tensor projection_loss(const Tensor& f_av, const Tensor& f_tex);
Tensor reconstruction_loss(const Tensor& f_rec, const Tensor& f_tex);

Tensor total_loss(const Tensor& lt, const Tensor& lp, const Tensor& lr, const LossConfig& cfg);

// argmin over candidate classes of squared Euclidean distance; ties break to
// the lowest class index.
std::vector<std::int64_t> classify(const Tensor& f_av, const Tensor& class_embeddings,
                                   const std::vector<std::int64_t>& candidates);

// Unweighted mean of per-class accuracies; classes without samples drop out.
double mean_class_accuracy(const std::vector<std::int64_t>& preds,
                           const std::vector<std::int64_t>& labels,
                           const std::vector<std::int64_t>& class_set);

double harmonic_mean(double seen, double unseen);

// Accuracies reported as percentages.
struct EvalReport {
    double seen = 0.0;
    double unseen = 0.0;
    double hm = 0.0;
    double zsl = 0.0;
};

}  // namespace stft
