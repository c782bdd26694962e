#include "stft/train.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace stft {

namespace fs = std::filesystem;
using nlohmann::json;

Trainer::Trainer(const ModelConfig& config, const Dataset& data, std::string out_dir)
    : config_(config),
      data_(data),
      model_(config),
      adam_(config.lr),
      run_rng_(config.seed ^ 0x9e3779b97f4a7c15ull),
      out_dir_(std::move(out_dir)) {
    data_.manifest.validate();
    if (data_.manifest.audio_rows != config_.a_in || data_.manifest.visual_rows != config_.v_in ||
        data_.manifest.feature_width != config_.h_in) {
        throw std::invalid_argument(
            "trainer: dataset dims (rows/width) do not match config a_in/v_in/h_in");
    }
    if (data_.manifest.text_width != 300) {
        throw std::invalid_argument("trainer: text embeddings must be 300 wide");
    }
    fs::create_directories(out_dir_);
    metrics_path_ = (fs::path(out_dir_) / "metrics.jsonl").string();
    adam_.init(model_.params());
}

void Trainer::append_metrics_line(const std::string& line) {
    std::ofstream out(metrics_path_, std::ios::app);
    out << line << "\n";
}

Tensor Trainer::gather_samples(const Tensor& pool, const std::vector<std::int64_t>& idx) const {
    const std::int64_t rows = pool.dim(1), width = pool.dim(2);
    const std::int64_t block = rows * width;
    Tensor out = Tensor::zeros({static_cast<std::int64_t>(idx.size()), rows, width});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::memcpy(out.mutable_data().data() + static_cast<std::int64_t>(i) * block,
                    pool.data().data() + idx[i] * block,
                    static_cast<std::size_t>(block) * sizeof(double));
    }
    return out;
}

Tensor Trainer::gather_text(const std::vector<std::int64_t>& labels) const {
    const std::int64_t w = data_.text_embeddings.dim(1);
    Tensor out = Tensor::zeros({static_cast<std::int64_t>(labels.size()), w});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        std::memcpy(out.mutable_data().data() + static_cast<std::int64_t>(i) * w,
                    data_.text_embeddings.data().data() + labels[i] * w,
                    static_cast<std::size_t>(w) * sizeof(double));
    }
    return out;
}

EpochMetrics Trainer::train_epoch(std::int64_t epoch) {
    model_.epoch_start();
    const std::int64_t n = static_cast<std::int64_t>(data_.labels_train.size());
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    run_rng_.shuffle(order);

    EpochMetrics em;
    em.epoch = epoch;
    std::int64_t batches = 0;
    for (std::int64_t start = 0; start < n; start += config_.batch_size) {
        const std::int64_t end = std::min(n, start + config_.batch_size);
        std::vector<std::int64_t> idx(order.begin() + start, order.begin() + end);
        std::vector<std::int64_t> labels;
        labels.reserve(idx.size());
        for (auto i : idx) labels.push_back(data_.labels_train[static_cast<std::size_t>(i)]);

        Tensor audio = gather_samples(data_.audio_train, idx);
        Tensor visual = gather_samples(data_.visual_train, idx);
        Tensor text = gather_text(labels);

        double lt_v = 0.0, lp_v = 0.0, lr_v = 0.0, total_v = 0.0;
        try {
            TapeScope scope;
            ModelOutput out = model_.forward(audio, visual, text, true, run_rng_);
            Tensor lt = triplet_loss(out.f_av, out.f_tex, labels, config_.gamma, config_.triplet());
            Tensor lp = projection_loss(out.f_av, out.f_tex);
            Tensor lr = reconstruction_loss(out.f_rec, out.f_tex);
            Tensor loss = total_loss(lt, lp, lr, config_.loss_config());
            lt_v = lt.value();
            lp_v = lp.value();
            lr_v = lr.value();
            total_v = loss.value();
            backward(loss);
            adam_.step(model_.params());
            model_.params().zero_grads();
            model_.update_knowledge(out);
            em.spikes_audio += out.raster_audio.total();
            em.spikes_visual += out.raster_visual.total();
        } catch (const std::runtime_error& e) {
            std::ostringstream os;
            os << "training aborted at epoch " << epoch << " batch " << batches
               << " (triplet=" << lt_v << " proj=" << lp_v << " recon=" << lr_v << "): " << e.what();
            throw std::runtime_error(os.str());
        }
        em.loss_triplet += lt_v;
        em.loss_proj += lp_v;
        em.loss_recon += lr_v;
        em.loss_total += total_v;
        ++batches;
    }
    if (batches > 0) {
        em.loss_triplet /= static_cast<double>(batches);
        em.loss_proj /= static_cast<double>(batches);
        em.loss_recon /= static_cast<double>(batches);
        em.loss_total /= static_cast<double>(batches);
    }
    return em;
}

void Trainer::train_until(std::int64_t last_epoch) {
    const std::int64_t stop = std::min(last_epoch, config_.epochs);
    for (std::int64_t epoch = next_epoch_; epoch <= stop; ++epoch) {
        EpochMetrics em = train_epoch(epoch);
        history_.push_back(em);
        json j{{"type", "epoch"},
               {"epoch", em.epoch},
               {"loss_total", em.loss_total},
               {"loss_triplet", em.loss_triplet},
               {"loss_proj", em.loss_proj},
               {"loss_recon", em.loss_recon},
               {"spikes_audio", em.spikes_audio},
               {"spikes_visual", em.spikes_visual}};
        append_metrics_line(j.dump());
        next_epoch_ = epoch + 1;
    }
}

void Trainer::train(bool eval_each_epoch) {
    for (std::int64_t epoch = next_epoch_; epoch <= config_.epochs; ++epoch) {
        train_until(epoch);
        if (eval_each_epoch) evaluate();
    }
    next_epoch_ = config_.epochs + 1;
}

std::vector<std::int64_t> Trainer::predict(const Tensor& audio_pool, const Tensor& visual_pool,
                                           const std::vector<std::int64_t>& sample_idx,
                                           const Tensor& class_table,
                                           const std::vector<std::int64_t>& candidates,
                                           bool collect_raster) {
    std::vector<std::int64_t> preds;
    preds.reserve(sample_idx.size());
    for (std::size_t start = 0; start < sample_idx.size();
         start += static_cast<std::size_t>(config_.batch_size)) {
        const std::size_t end =
            std::min(sample_idx.size(), start + static_cast<std::size_t>(config_.batch_size));
        std::vector<std::int64_t> idx(sample_idx.begin() + static_cast<std::ptrdiff_t>(start),
                                      sample_idx.begin() + static_cast<std::ptrdiff_t>(end));
        Tensor audio = gather_samples(audio_pool, idx);
        Tensor visual = gather_samples(visual_pool, idx);
        SpikeRaster ra, rv;
        Tensor f_av = model_.embed(audio, visual, false, run_rng_, &ra, &rv);
        if (collect_raster) {
            auto accumulate = [](SpikeRaster& into, const SpikeRaster& from) {
                if (into.counts.empty()) {
                    into = from;
                    return;
                }
                for (std::size_t b = 0; b < from.counts.size(); ++b)
                    for (std::size_t t = 0; t < from.counts[b].size(); ++t)
                        into.counts[b][t] += from.counts[b][t];
            };
            accumulate(eval_raster_audio_, ra);
            accumulate(eval_raster_visual_, rv);
        }
        std::vector<std::int64_t> batch_preds = classify(f_av, class_table, candidates);
        preds.insert(preds.end(), batch_preds.begin(), batch_preds.end());
    }
    return preds;
}

EvalReport Trainer::evaluate() {
    NoGradScope no_grad;
    eval_raster_audio_ = SpikeRaster{};
    eval_raster_visual_ = SpikeRaster{};

    Tensor class_table = model_.project_text(data_.text_embeddings, false, run_rng_);

    const auto& labels = data_.labels_test;
    std::vector<std::int64_t> all_idx, unseen_idx;
    std::vector<bool> is_unseen(static_cast<std::size_t>(data_.manifest.class_count), false);
    for (auto c : data_.manifest.unseen_classes) is_unseen[static_cast<std::size_t>(c)] = true;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        all_idx.push_back(static_cast<std::int64_t>(i));
        if (is_unseen[static_cast<std::size_t>(labels[i])])
            unseen_idx.push_back(static_cast<std::int64_t>(i));
    }
    std::vector<std::int64_t> all_classes;
    for (std::int64_t c = 0; c < data_.manifest.class_count; ++c) all_classes.push_back(c);

    // GZSL: full test set, every class is a candidate
    std::vector<std::int64_t> gzsl_preds =
        predict(data_.audio_test, data_.visual_test, all_idx, class_table, all_classes, true);
    const double seen = mean_class_accuracy(gzsl_preds, labels, data_.manifest.seen_classes);
    const double unseen = mean_class_accuracy(gzsl_preds, labels, data_.manifest.unseen_classes);

    // ZSL: unseen test samples against unseen candidates only
    std::vector<std::int64_t> zsl_labels;
    for (auto i : unseen_idx) zsl_labels.push_back(labels[static_cast<std::size_t>(i)]);
    std::vector<std::int64_t> zsl_preds = predict(data_.audio_test, data_.visual_test, unseen_idx,
                                                  class_table, data_.manifest.unseen_classes, false);
    const double zsl = mean_class_accuracy(zsl_preds, zsl_labels, data_.manifest.unseen_classes);

    EvalReport report;
    report.seen = 100.0 * seen;
    report.unseen = 100.0 * unseen;
    report.hm = harmonic_mean(report.seen, report.unseen);
    report.zsl = 100.0 * zsl;

    last_eval_spikes_ = eval_raster_audio_.total() + eval_raster_visual_.total();
    json j{{"type", "eval"},     {"seen", report.seen}, {"unseen", report.unseen},
           {"hm", report.hm},    {"zsl", report.zsl},   {"spike_total", last_eval_spikes_}};
    append_metrics_line(j.dump());
    auto dump_raster = [&](const char* modality, const SpikeRaster& r) {
        for (std::size_t b = 0; b < r.counts.size(); ++b) {
            for (std::size_t t = 0; t < r.counts[b].size(); ++t) {
                json rec{{"type", "spike_raster"},
                         {"modality", modality},
                         {"block", b},
                         {"step", t},
                         {"count", r.counts[b][t]}};
                append_metrics_line(rec.dump());
            }
        }
    };
    dump_raster("audio", eval_raster_audio_);
    dump_raster("visual", eval_raster_visual_);
    return report;
}

void Trainer::save_checkpoint(const std::string& path) {
    save_checkpoint_file(path, model_, adam_, run_rng_, next_epoch_ - 1);
}

void Trainer::load_checkpoint(const std::string& path) {
    next_epoch_ = load_checkpoint_file(path, model_, adam_, run_rng_) + 1;
}

// ---- checkpoint file ---------------------------------------------------------

namespace {

constexpr char kCkptMagic[8] = {'S', 'T', 'F', 'T', 'C', 'K', 'P', '1'};

void write_u32(std::ofstream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_u64(std::ofstream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_string(std::ofstream& out, const std::string& s) {
    write_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}
void write_doubles(std::ofstream& out, const std::vector<double>& v) {
    write_u64(out, v.size());
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::uint32_t read_u32(std::ifstream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}
std::uint64_t read_u64(std::ifstream& in) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}
std::string read_string(std::ifstream& in) {
    const std::uint32_t len = read_u32(in);
    std::string s(len, '\0');
    in.read(s.data(), len);
    return s;
}
std::vector<double> read_doubles(std::ifstream& in) {
    const std::uint64_t n = read_u64(in);
    std::vector<double> v(n);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
    return v;
}

}  // namespace

void save_checkpoint_file(const std::string& path, StftModel& model, Adam& adam, const Rng& rng,
                          std::int64_t epoch) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
    out.write(kCkptMagic, 8);
    write_u32(out, 1);
    write_u64(out, model.config().hash());
    write_u64(out, static_cast<std::uint64_t>(epoch));
    write_u64(out, static_cast<std::uint64_t>(adam.steps()));
    write_string(out, rng.state());

    const auto& params = model.params().items();
    write_u32(out, static_cast<std::uint32_t>(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        write_string(out, params[i].first);
        write_doubles(out, params[i].second.data());
        write_doubles(out, adam.moments_m()[i]);
        write_doubles(out, adam.moments_v()[i]);
    }
    const auto& buffers = model.buffers().items();
    write_u32(out, static_cast<std::uint32_t>(buffers.size()));
    for (const auto& [name, values] : buffers) {
        write_string(out, name);
        write_doubles(out, values);
    }
    if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

std::int64_t load_checkpoint_file(const std::string& path, StftModel& model, Adam& adam, Rng& rng) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kCkptMagic, 8) != 0) {
        throw std::runtime_error("checkpoint: bad magic in " + path);
    }
    const std::uint32_t version = read_u32(in);
    if (version != 1) throw std::runtime_error("checkpoint: unsupported version");
    const std::uint64_t hash = read_u64(in);
    if (hash != model.config().hash()) {
        throw std::runtime_error("checkpoint: config hash mismatch (file was produced by a "
                                 "different configuration)");
    }
    const std::int64_t epoch = static_cast<std::int64_t>(read_u64(in));
    const std::int64_t adam_steps = static_cast<std::int64_t>(read_u64(in));
    rng.set_state(read_string(in));

    adam.init(model.params());
    adam.set_steps(adam_steps);
    const std::uint32_t param_count = read_u32(in);
    auto& params = model.params().items();
    if (param_count != params.size()) throw std::runtime_error("checkpoint: parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const std::string name = read_string(in);
        if (name != params[i].first) {
            throw std::runtime_error("checkpoint: parameter order mismatch at " + name);
        }
        std::vector<double> values = read_doubles(in);
        Tensor& p = const_cast<Tensor&>(params[i].second);
        if (values.size() != p.data().size()) {
            throw std::runtime_error("checkpoint: parameter size mismatch at " + name);
        }
        p.mutable_data() = std::move(values);
        adam.moments_m()[i] = read_doubles(in);
        adam.moments_v()[i] = read_doubles(in);
    }
    const std::uint32_t buffer_count = read_u32(in);
    auto& buffers = model.buffers().items();
    if (buffer_count != buffers.size()) throw std::runtime_error("checkpoint: buffer count mismatch");
    for (auto& [name, values] : buffers) {
        const std::string file_name = read_string(in);
        if (file_name != name) throw std::runtime_error("checkpoint: buffer order mismatch");
        std::vector<double> loaded = read_doubles(in);
        if (loaded.size() != values.size()) throw std::runtime_error("checkpoint: buffer size mismatch");
        values = std::move(loaded);
    }
    if (!in) throw std::runtime_error("checkpoint: truncated file " + path);
    model.sync_buffers();
    return epoch;
}

// ---- ablation runner ----------------------------------------------------------

ModelConfig apply_ablation_token(const ModelConfig& base, const std::string& axis,
                                 const std::string& token) {
    ModelConfig cfg = base;
    if (axis == "time_steps") {
        cfg.time_steps = std::stoll(token);
    } else if (axis == "rank") {
        cfg.rank = std::stoll(token);
    } else if (axis == "slots") {
        cfg.slot_count = std::stoll(token);
    } else if (axis == "threshold") {
        if (token == "dynamic") {
            cfg.threshold_mode = "dynamic";
        } else if (token.rfind("fixed:", 0) == 0) {
            cfg.threshold_mode = "fixed";
            cfg.v_th_fixed = std::stod(token.substr(6));
        } else {
            throw std::invalid_argument("threshold axis token must be 'dynamic' or 'fixed:<v>'");
        }
    } else if (axis == "tsf") {
        if (token == "on") cfg.tsf_mode = "softmax_weight";
        else if (token == "off") cfg.tsf_mode = "uniform";
        else cfg.tsf_mode = token;
    } else if (axis == "glp") {
        cfg.glp_enabled = token == "on";
    } else if (axis == "lkc") {
        cfg.lkc_enabled = token == "on";
    } else if (axis == "losses") {
        if (token == "full") {
            cfg.use_proj_loss = cfg.use_recon_loss = true;
        } else if (token == "no_lp") {
            cfg.use_proj_loss = false;
        } else if (token == "no_lr") {
            cfg.use_recon_loss = false;
        } else if (token == "no_lp_lr") {
            cfg.use_proj_loss = cfg.use_recon_loss = false;
        } else {
            const auto colon = token.find(':');
            if (colon == std::string::npos) {
                throw std::invalid_argument(
                    "losses axis token must be full|no_lp|no_lr|no_lp_lr|<alpha>:<beta>");
            }
            cfg.w_triplet = std::stod(token.substr(0, colon));
            cfg.w_proj_recon = std::stod(token.substr(colon + 1));
        }
    } else {
        throw std::invalid_argument("unknown ablation axis: " + axis);
    }
    return cfg;
}

std::vector<AblationRow> run_ablation(const ModelConfig& base, const Dataset& data,
                                      const std::string& axis,
                                      const std::vector<std::string>& grid,
                                      const std::string& out_root) {
    std::vector<AblationRow> rows;
    for (const auto& token : grid) {
        AblationRow row;
        row.label = token;
        row.config = apply_ablation_token(base, axis, token);
        std::string dir_token = token;
        for (char& ch : dir_token) {
            if (ch == ':' || ch == '.') ch = '_';
        }
        Trainer trainer(row.config, data, (fs::path(out_root) / (axis + "_" + dir_token)).string());
        trainer.train();
        row.report = trainer.evaluate();
        row.spike_total = trainer.last_eval_spike_total();
        row.fusion_param_count =
            tucker_param_count(row.config.h_emb, row.config.h_emb, row.config.h_emb,
                               row.config.rank, row.config.rank, row.config.rank);
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string format_ablation_table(const std::string& axis, const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << std::left << std::setw(16) << axis << std::right << std::setw(9) << "S" << std::setw(9)
       << "U" << std::setw(9) << "HM" << std::setw(9) << "ZSL" << std::setw(14) << "fusion_params"
       << std::setw(13) << "spike_total" << "\n";
    for (const auto& r : rows) {
        os << std::left << std::setw(16) << r.label << std::right << std::fixed
           << std::setprecision(2) << std::setw(9) << r.report.seen << std::setw(9)
           << r.report.unseen << std::setw(9) << r.report.hm << std::setw(9) << r.report.zsl
           << std::setw(14) << r.fusion_param_count << std::setw(13) << std::setprecision(0)
           << r.spike_total << "\n";
    }
    return os.str();
}

}  // namespace stft
