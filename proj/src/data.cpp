#include "stft/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

#include <json.hpp>

namespace stft {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {
constexpr char kMagic[8] = {'S', 'T', 'F', 'T', 'M', 'A', 'T', '1'};

void write_u32(std::ofstream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::ifstream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
}  // namespace

void write_matrix_f32(const std::string& path, std::int64_t rows, std::int64_t cols,
                      const std::vector<double>& data) {
    if (rows * cols != static_cast<std::int64_t>(data.size())) {
        throw std::invalid_argument("write_matrix_f32: size mismatch");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_matrix_f32: cannot open " + path);
    out.write(kMagic, 8);
    write_u32(out, static_cast<std::uint32_t>(rows));
    write_u32(out, static_cast<std::uint32_t>(cols));
    std::vector<float> buf(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) buf[i] = static_cast<float>(data[i]);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!out) throw std::runtime_error("write_matrix_f32: write failed for " + path);
}

Tensor read_matrix_f32(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_matrix_f32: cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0) {
        throw std::runtime_error("read_matrix_f32: bad magic in " + path);
    }
    const std::int64_t rows = read_u32(in);
    const std::int64_t cols = read_u32(in);
    std::vector<float> buf(static_cast<std::size_t>(rows * cols));
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!in) throw std::runtime_error("read_matrix_f32: truncated file " + path);
    std::vector<double> data(buf.begin(), buf.end());
    return Tensor::from_data({rows, cols}, std::move(data));
}

void DatasetManifest::validate() const {
    if (class_count < 4) throw std::invalid_argument("manifest: need at least 4 classes");
    if (unseen_classes.size() < 2) throw std::invalid_argument("manifest: need >= 2 unseen classes");
    std::set<std::int64_t> seen(seen_classes.begin(), seen_classes.end());
    std::set<std::int64_t> unseen(unseen_classes.begin(), unseen_classes.end());
    for (auto c : unseen) {
        if (seen.count(c)) throw std::invalid_argument("manifest: seen/unseen splits overlap");
    }
    if (static_cast<std::int64_t>(seen.size() + unseen.size()) != class_count) {
        throw std::invalid_argument("manifest: every class must land in exactly one split");
    }
    for (auto c : seen_classes) {
        if (c < 0 || c >= class_count) throw std::invalid_argument("manifest: class id out of range");
    }
    if (train_per_class < 1 || test_per_class < 1) {
        throw std::invalid_argument("manifest: need at least one sample per class per split");
    }
}

std::string DatasetManifest::to_json() const {
    json j{{"name", name},
           {"seed", seed},
           {"class_count", class_count},
           {"seen_classes", seen_classes},
           {"unseen_classes", unseen_classes},
           {"train_per_class", train_per_class},
           {"test_per_class", test_per_class},
           {"audio_rows", audio_rows},
           {"visual_rows", visual_rows},
           {"feature_width", feature_width},
           {"text_width", text_width},
           {"text_rank", text_rank},
           {"sigma", sigma},
           {"files", files}};
    return j.dump(2);
}

DatasetManifest DatasetManifest::from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("manifest: cannot open " + path);
    json j = json::parse(in);
    DatasetManifest m;
    m.name = j.at("name").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.class_count = j.at("class_count").get<std::int64_t>();
    m.seen_classes = j.at("seen_classes").get<std::vector<std::int64_t>>();
    m.unseen_classes = j.at("unseen_classes").get<std::vector<std::int64_t>>();
    m.train_per_class = j.at("train_per_class").get<std::int64_t>();
    m.test_per_class = j.at("test_per_class").get<std::int64_t>();
    m.audio_rows = j.at("audio_rows").get<std::int64_t>();
    m.visual_rows = j.at("visual_rows").get<std::int64_t>();
    m.feature_width = j.at("feature_width").get<std::int64_t>();
    m.text_width = j.at("text_width").get<std::int64_t>();
    m.text_rank = j.value("text_rank", std::int64_t{0});
    m.sigma = j.at("sigma").get<double>();
    m.files = j.at("files").get<std::map<std::string, std::string>>();
    m.validate();
    return m;
}

void DatasetManifest::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("manifest: cannot write " + path);
    out << to_json() << "\n";
}

namespace {

// class mean for one modality: fixed random projection of the text embedding
std::vector<double> project_embedding(const std::vector<double>& proj,  // [dim, text_width]
                                      const double* text, std::int64_t dim,
                                      std::int64_t text_width) {
    std::vector<double> mean(static_cast<std::size_t>(dim), 0.0);
    for (std::int64_t i = 0; i < dim; ++i) {
        double acc = 0.0;
        const double* row = proj.data() + i * text_width;
        for (std::int64_t j = 0; j < text_width; ++j) acc += row[j] * text[j];
        mean[static_cast<std::size_t>(i)] = acc;
    }
    return mean;
}

}  // namespace

DatasetManifest generate_synthetic(const GenSpec& spec, const std::string& out_dir) {
    if (spec.class_count < 4) throw std::invalid_argument("gen: need at least 4 classes");
    if (spec.unseen_count < 2 || spec.unseen_count >= spec.class_count) {
        throw std::invalid_argument("gen: need >= 2 unseen classes and >= 1 seen class");
    }
    if (spec.sigma < 0.0) throw std::invalid_argument("gen: sigma must be non-negative");
    fs::create_directories(out_dir);

    const std::int64_t c = spec.class_count;
    const std::int64_t tw = 300;
    Rng rng(spec.seed);

    // unit-norm class text embeddings; with text_rank > 0 they live on a
    // shared low-dimensional subspace, so unseen classes are spanned by the
    // seen ones and the cross-modal structure can transfer
    const std::int64_t k = spec.text_rank > 0 ? std::min(spec.text_rank, tw) : tw;
    std::vector<double> basis(static_cast<std::size_t>(tw * k));
    for (double& x : basis) x = rng.gaussian();
    std::vector<double> text(static_cast<std::size_t>(c * tw));
    for (std::int64_t cls = 0; cls < c; ++cls) {
        std::vector<double> z(static_cast<std::size_t>(k));
        for (double& x : z) x = rng.gaussian();
        double norm_sq = 0.0;
        for (std::int64_t j = 0; j < tw; ++j) {
            double v = 0.0;
            if (k == tw) {
                v = z[static_cast<std::size_t>(j)];
            } else {
                for (std::int64_t d = 0; d < k; ++d) v += basis[static_cast<std::size_t>(j * k + d)] * z[static_cast<std::size_t>(d)];
            }
            text[static_cast<std::size_t>(cls * tw + j)] = v;
            norm_sq += v * v;
        }
        const double inv = 1.0 / std::sqrt(norm_sq);
        for (std::int64_t j = 0; j < tw; ++j) text[static_cast<std::size_t>(cls * tw + j)] *= inv;
    }

    // fixed projections into each modality width; the class mean is one
    // width-sized vector shared by every sequence row, so the cross-modal
    // structure survives sequence pooling
    const std::int64_t width = spec.feature_width;
    std::vector<double> proj_a(static_cast<std::size_t>(width * tw));
    std::vector<double> proj_v(static_cast<std::size_t>(width * tw));
    // unit-variance class-mean entries for a unit-norm text embedding
    for (double& x : proj_a) x = rng.gaussian();
    for (double& x : proj_v) x = rng.gaussian();

    std::vector<std::vector<double>> mean_a(static_cast<std::size_t>(c));
    std::vector<std::vector<double>> mean_v(static_cast<std::size_t>(c));
    for (std::int64_t cls = 0; cls < c; ++cls) {
        mean_a[static_cast<std::size_t>(cls)] =
            project_embedding(proj_a, text.data() + cls * tw, width, tw);
        mean_v[static_cast<std::size_t>(cls)] =
            project_embedding(proj_v, text.data() + cls * tw, width, tw);
    }

    DatasetManifest m;
    m.name = spec.name;
    m.seed = spec.seed;
    m.class_count = c;
    for (std::int64_t cls = 0; cls < c - spec.unseen_count; ++cls) m.seen_classes.push_back(cls);
    for (std::int64_t cls = c - spec.unseen_count; cls < c; ++cls) m.unseen_classes.push_back(cls);
    m.train_per_class = spec.train_per_class;
    m.test_per_class = spec.test_per_class;
    m.audio_rows = spec.audio_rows;
    m.visual_rows = spec.visual_rows;
    m.feature_width = spec.feature_width;
    m.text_rank = spec.text_rank;
    m.sigma = spec.sigma;

    auto emit_split = [&](const std::vector<std::int64_t>& classes, std::int64_t per_class,
                          const std::string& tag) {
        std::vector<double> audio, visual;
        std::vector<std::int64_t> labels;
        audio.reserve(static_cast<std::size_t>(classes.size() * per_class * spec.audio_rows * width));
        visual.reserve(
            static_cast<std::size_t>(classes.size() * per_class * spec.visual_rows * width));
        for (auto cls : classes) {
            for (std::int64_t s = 0; s < per_class; ++s) {
                const auto& ma = mean_a[static_cast<std::size_t>(cls)];
                const auto& mv = mean_v[static_cast<std::size_t>(cls)];
                for (std::int64_t r = 0; r < spec.audio_rows; ++r)
                    for (std::int64_t i = 0; i < width; ++i)
                        audio.push_back(ma[static_cast<std::size_t>(i)] + spec.sigma * rng.gaussian());
                for (std::int64_t r = 0; r < spec.visual_rows; ++r)
                    for (std::int64_t i = 0; i < width; ++i)
                        visual.push_back(mv[static_cast<std::size_t>(i)] + spec.sigma * rng.gaussian());
                labels.push_back(cls);
            }
        }
        const std::int64_t n = static_cast<std::int64_t>(labels.size());
        const std::string audio_name = "audio_" + tag + ".bin";
        const std::string visual_name = "visual_" + tag + ".bin";
        const std::string labels_name = "labels_" + tag + ".txt";
        write_matrix_f32((fs::path(out_dir) / audio_name).string(), n * spec.audio_rows,
                         spec.feature_width, audio);
        write_matrix_f32((fs::path(out_dir) / visual_name).string(), n * spec.visual_rows,
                         spec.feature_width, visual);
        std::ofstream lf(fs::path(out_dir) / labels_name);
        for (auto l : labels) lf << l << "\n";
        m.files["audio_" + tag] = audio_name;
        m.files["visual_" + tag] = visual_name;
        m.files["labels_" + tag] = labels_name;
    };

    emit_split(m.seen_classes, spec.train_per_class, "train");
    std::vector<std::int64_t> all_classes;
    for (std::int64_t cls = 0; cls < c; ++cls) all_classes.push_back(cls);
    emit_split(all_classes, spec.test_per_class, "test");

    write_matrix_f32((fs::path(out_dir) / "text_embeddings.bin").string(), c, tw, text);
    m.files["text_embeddings"] = "text_embeddings.bin";

    m.validate();
    m.save((fs::path(out_dir) / "manifest.json").string());
    return m;
}

namespace {

std::vector<std::int64_t> read_labels(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_dataset: cannot open " + path);
    std::vector<std::int64_t> labels;
    std::int64_t v;
    while (in >> v) labels.push_back(v);
    return labels;
}

Tensor reshape_samples(const Tensor& flat, std::int64_t n, std::int64_t rows, std::int64_t width) {
    if (flat.dim(0) != n * rows || flat.dim(1) != width) {
        throw std::runtime_error("load_dataset: feature file shape does not match manifest");
    }
    return Tensor::from_data({n, rows, width}, flat.data());
}

}  // namespace

Dataset load_dataset(const std::string& manifest_path) {
    Dataset d;
    d.manifest = DatasetManifest::from_json_file(manifest_path);
    const fs::path base = fs::path(manifest_path).parent_path();
    auto file = [&](const std::string& key) {
        auto it = d.manifest.files.find(key);
        if (it == d.manifest.files.end()) {
            throw std::runtime_error("load_dataset: manifest lacks file entry " + key);
        }
        return (base / it->second).string();
    };
    d.labels_train = read_labels(file("labels_train"));
    d.labels_test = read_labels(file("labels_test"));
    const std::int64_t n_train = static_cast<std::int64_t>(d.labels_train.size());
    const std::int64_t n_test = static_cast<std::int64_t>(d.labels_test.size());
    d.audio_train = reshape_samples(read_matrix_f32(file("audio_train")), n_train,
                                    d.manifest.audio_rows, d.manifest.feature_width);
    d.visual_train = reshape_samples(read_matrix_f32(file("visual_train")), n_train,
                                     d.manifest.visual_rows, d.manifest.feature_width);
    d.audio_test = reshape_samples(read_matrix_f32(file("audio_test")), n_test,
                                   d.manifest.audio_rows, d.manifest.feature_width);
    d.visual_test = reshape_samples(read_matrix_f32(file("visual_test")), n_test,
                                    d.manifest.visual_rows, d.manifest.feature_width);
    d.text_embeddings = read_matrix_f32(file("text_embeddings"));
    if (d.text_embeddings.dim(0) != d.manifest.class_count ||
        d.text_embeddings.dim(1) != d.manifest.text_width) {
        throw std::runtime_error("load_dataset: text embedding table shape mismatch");
    }
    return d;
}

}  // namespace stft
