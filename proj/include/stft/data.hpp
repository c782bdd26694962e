#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "stft/tensor.hpp"

namespace stft {

// Binary matrix container: 8-byte magic "STFTMAT1", u32 rows, u32 cols
// (little endian), then row-major float32 payload.
void write_matrix_f32(const std::string& path, std::int64_t rows, std::int64_t cols,
                      const std::vector<double>& data);
Tensor read_matrix_f32(const std::string& path);

struct DatasetManifest {
    std::string name = "synthetic";
    std::uint64_t seed = 0;
    std::int64_t class_count = 0;
    std::vector<std::int64_t> seen_classes;
    std::vector<std::int64_t> unseen_classes;
    std::int64_t train_per_class = 0;
    std::int64_t test_per_class = 0;
    std::int64_t audio_rows = 0;
    std::int64_t visual_rows = 0;
    std::int64_t feature_width = 0;
    std::int64_t text_width = 300;
    std::int64_t text_rank = 10;
    double sigma = 0.1;
    std::map<std::string, std::string> files;

    void validate() const;
    std::string to_json() const;
    static DatasetManifest from_json_file(const std::string& path);
    void save(const std::string& path) const;
};

struct GenSpec {
    std::string name = "synthetic";
    std::uint64_t seed = 0;
    std::int64_t class_count = 20;
    std::int64_t unseen_count = 5;
    std::int64_t train_per_class = 10;
    std::int64_t test_per_class = 8;
    std::int64_t audio_rows = 32;
    std::int64_t visual_rows = 32;
    std::int64_t feature_width = 24;
    double sigma = 0.1;
    // intrinsic dimension of the class text embeddings (unit-norm Gaussians
    // drawn on a shared subspace, matching the low-dimensional semantic
    // manifold of real class embeddings); 0 draws them isotropically
    std::int64_t text_rank = 10;
};

// Draws one unit-norm text embedding per class and class-conditioned Gaussian
// audio/visual features whose means are fixed random projections of the text
// embedding, then writes the files plus manifest.json into out_dir.
DatasetManifest generate_synthetic(const GenSpec& spec, const std::string& out_dir);

// Everything in memory, features reshaped to [N, rows, width].
struct Dataset {
    DatasetManifest manifest;
    Tensor audio_train, visual_train;
    std::vector<std::int64_t> labels_train;
    Tensor audio_test, visual_test;
    std::vector<std::int64_t> labels_test;
    Tensor text_embeddings;  // [C, text_width]
};

Dataset load_dataset(const std::string& manifest_path);

}  // namespace stft
