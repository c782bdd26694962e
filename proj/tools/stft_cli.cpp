// Command-line front end: synthetic data generation, training, evaluation,
// ablation sweeps and the numeric self-checks.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "stft/config.hpp"
#include "stft/data.hpp"
#include "stft/model.hpp"
#include "stft/objectives.hpp"
#include "stft/tensor.hpp"
#include "stft/train.hpp"
#include "stft/tucker.hpp"

namespace fs = std::filesystem;
using namespace stft;

namespace {

std::string output_root() {
    if (const char* env = std::getenv("STFT_OUT_ROOT")) return env;
    return "stft_out";
}

// Optional-valued mirror of every ModelConfig field the CLI exposes; only
// flags the user actually passed override the config file.
struct ConfigFlags {
    std::optional<std::uint64_t> seed;
    std::optional<std::int64_t> a_in, v_in, h_in, h_emb, h_hid, h_out, h_proj, heads, head_dim;
    std::optional<std::int64_t> time_steps, rank, slot_count, joint_depth, epochs, batch_size;
    std::optional<double> tau_m, membrane_r, v_rest, v_th_init, surrogate_width, v_th_fixed;
    std::optional<double> d_enc, d_proj, d_text, lr, gamma, w_triplet, w_proj_recon;
    std::optional<std::string> threshold_mode, tsf_mode, joint_mode, triplet_mode;
    std::optional<bool> glp_enabled, lkc_enabled, use_proj_loss, use_recon_loss;
};

void add_config_flags(CLI::App* cmd, ConfigFlags& f) {
    cmd->add_option("--seed", f.seed, "run seed");
    cmd->add_option("--a-in", f.a_in, "audio rows (must equal h_emb)");
    cmd->add_option("--v-in", f.v_in, "visual rows (must equal h_emb)");
    cmd->add_option("--h-in", f.h_in, "input feature width");
    cmd->add_option("--h-emb", f.h_emb, "embedding width");
    cmd->add_option("--h-hid", f.h_hid, "hidden width");
    cmd->add_option("--h-out", f.h_out, "joint space width");
    cmd->add_option("--h-proj", f.h_proj, "per-head projection width");
    cmd->add_option("--heads", f.heads, "cross-modal attention heads");
    cmd->add_option("--head-dim", f.head_dim, "per-head dimension");
    cmd->add_option("--time-steps,-T", f.time_steps, "SNN time steps");
    cmd->add_option("--rank", f.rank, "Tucker rank");
    cmd->add_option("--slots", f.slot_count, "latent knowledge slot count");
    cmd->add_option("--joint-depth", f.joint_depth, "cross-modal block count");
    cmd->add_option("--epochs", f.epochs, "training epochs");
    cmd->add_option("--batch-size", f.batch_size, "batch size");
    cmd->add_option("--tau-m", f.tau_m, "membrane time constant");
    cmd->add_option("--membrane-r", f.membrane_r, "membrane resistance");
    cmd->add_option("--v-rest", f.v_rest, "reset potential");
    cmd->add_option("--v-th-init", f.v_th_init, "initial threshold");
    cmd->add_option("--surrogate-width", f.surrogate_width, "surrogate half-width");
    cmd->add_option("--threshold-mode", f.threshold_mode, "dynamic | fixed");
    cmd->add_option("--v-th-fixed", f.v_th_fixed, "threshold in fixed mode");
    cmd->add_option("--tsf-mode", f.tsf_mode, "softmax_weight | max_weight | uniform");
    cmd->add_option("--joint-mode", f.joint_mode, "avg_bidirectional | a_queries_v");
    cmd->add_option("--triplet-mode", f.triplet_mode, "resolved | printed");
    cmd->add_option("--glp", f.glp_enabled, "enable global-local pooling");
    cmd->add_option("--lkc", f.lkc_enabled, "enable latent knowledge combiner");
    cmd->add_option("--use-proj-loss", f.use_proj_loss, "include projection loss");
    cmd->add_option("--use-recon-loss", f.use_recon_loss, "include reconstruction loss");
    cmd->add_option("--d-enc", f.d_enc, "encoder dropout");
    cmd->add_option("--d-proj", f.d_proj, "projection/reconstruction dropout");
    cmd->add_option("--d-text", f.d_text, "text head dropout");
    cmd->add_option("--lr", f.lr, "learning rate");
    cmd->add_option("--gamma", f.gamma, "triplet margin");
    cmd->add_option("--w-triplet", f.w_triplet, "triplet loss weight");
    cmd->add_option("--w-proj-recon", f.w_proj_recon, "projection+reconstruction weight");
}

ModelConfig resolve_config(const std::string& config_path, const ConfigFlags& f) {
    ModelConfig cfg;  // defaults
    if (!config_path.empty()) cfg = ModelConfig::from_json_file(config_path);
    auto apply = [](auto& dst, const auto& src) {
        if (src.has_value()) dst = *src;
    };
    apply(cfg.seed, f.seed);
    apply(cfg.a_in, f.a_in);
    apply(cfg.v_in, f.v_in);
    apply(cfg.h_in, f.h_in);
    apply(cfg.h_emb, f.h_emb);
    apply(cfg.h_hid, f.h_hid);
    apply(cfg.h_out, f.h_out);
    apply(cfg.h_proj, f.h_proj);
    apply(cfg.heads, f.heads);
    apply(cfg.head_dim, f.head_dim);
    apply(cfg.time_steps, f.time_steps);
    apply(cfg.rank, f.rank);
    apply(cfg.slot_count, f.slot_count);
    apply(cfg.joint_depth, f.joint_depth);
    apply(cfg.epochs, f.epochs);
    apply(cfg.batch_size, f.batch_size);
    apply(cfg.tau_m, f.tau_m);
    apply(cfg.membrane_r, f.membrane_r);
    apply(cfg.v_rest, f.v_rest);
    apply(cfg.v_th_init, f.v_th_init);
    apply(cfg.surrogate_width, f.surrogate_width);
    apply(cfg.threshold_mode, f.threshold_mode);
    apply(cfg.v_th_fixed, f.v_th_fixed);
    apply(cfg.tsf_mode, f.tsf_mode);
    apply(cfg.joint_mode, f.joint_mode);
    apply(cfg.triplet_mode, f.triplet_mode);
    apply(cfg.glp_enabled, f.glp_enabled);
    apply(cfg.lkc_enabled, f.lkc_enabled);
    apply(cfg.use_proj_loss, f.use_proj_loss);
    apply(cfg.use_recon_loss, f.use_recon_loss);
    apply(cfg.d_enc, f.d_enc);
    apply(cfg.d_proj, f.d_proj);
    apply(cfg.d_text, f.d_text);
    apply(cfg.lr, f.lr);
    apply(cfg.gamma, f.gamma);
    apply(cfg.w_triplet, f.w_triplet);
    apply(cfg.w_proj_recon, f.w_proj_recon);
    cfg.validate();
    return cfg;
}

int run_grad_check(int seeds);
int run_oracle_check(int seeds);

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Spiking Tucker fusion transformer harness"};
    app.require_subcommand(1);

    // gen-data ---------------------------------------------------------------
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    GenSpec spec;
    std::string gen_out;
    gen->add_option("--name", spec.name, "dataset name");
    gen->add_option("--seed", spec.seed, "generator seed");
    gen->add_option("--classes", spec.class_count, "total class count");
    gen->add_option("--unseen", spec.unseen_count, "unseen class count");
    gen->add_option("--train-per-class", spec.train_per_class, "train samples per seen class");
    gen->add_option("--test-per-class", spec.test_per_class, "test samples per class");
    gen->add_option("--audio-rows", spec.audio_rows, "audio rows per sample");
    gen->add_option("--visual-rows", spec.visual_rows, "visual rows per sample");
    gen->add_option("--width", spec.feature_width, "feature width per row");
    gen->add_option("--sigma", spec.sigma, "per-element noise level");
    gen->add_option("--text-rank", spec.text_rank,
                    "intrinsic dimension of the class text embeddings (0 = isotropic)");
    gen->add_option("--out", gen_out, "output directory (default <root>/data/<name>)");

    // train -------------------------------------------------------------------
    auto* train_cmd = app.add_subcommand("train", "train a model");
    std::string train_manifest, train_config, train_out, train_resume;
    bool train_eval_each_epoch = false;
    ConfigFlags train_flags;
    train_cmd->add_option("--manifest", train_manifest, "dataset manifest.json")->required();
    train_cmd->add_option("--config", train_config, "config JSON file");
    train_cmd->add_option("--out", train_out, "run directory (default <root>/runs/<hash>)");
    train_cmd->add_option("--resume", train_resume, "checkpoint to resume from");
    train_cmd->add_flag("--eval-each-epoch", train_eval_each_epoch, "evaluate after every epoch");
    add_config_flags(train_cmd, train_flags);

    // eval ----------------------------------------------------------------------
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string eval_manifest, eval_config, eval_ckpt, eval_mode = "both";
    ConfigFlags eval_flags;
    eval_cmd->add_option("--manifest", eval_manifest, "dataset manifest.json")->required();
    eval_cmd->add_option("--config", eval_config, "config JSON file");
    eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
    eval_cmd->add_option("--mode", eval_mode, "zsl | gzsl | both");
    add_config_flags(eval_cmd, eval_flags);

    // ablate ---------------------------------------------------------------------
    auto* ablate_cmd = app.add_subcommand("ablate", "run one ablation axis");
    std::string ab_manifest, ab_config, ab_axis, ab_grid, ab_out;
    ConfigFlags ab_flags;
    ablate_cmd->add_option("--manifest", ab_manifest, "dataset manifest.json")->required();
    ablate_cmd->add_option("--config", ab_config, "config JSON file");
    ablate_cmd->add_option("--axis", ab_axis,
                           "time_steps | rank | threshold | slots | tsf | glp | lkc | losses")
        ->required();
    ablate_cmd->add_option("--grid", ab_grid, "comma-separated grid tokens")->required();
    ablate_cmd->add_option("--out", ab_out, "output directory");
    add_config_flags(ablate_cmd, ab_flags);

    // numeric self-checks ----------------------------------------------------------
    auto* gc = app.add_subcommand("grad-check", "finite-difference gradient checks");
    int gc_seeds = 20;
    gc->add_option("--seeds", gc_seeds, "random seeds per check");
    auto* oc = app.add_subcommand("oracle-check", "brute-force oracle equivalence checks");
    int oc_seeds = 50;
    oc->add_option("--seeds", oc_seeds, "random seeds");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            if (gen_out.empty()) gen_out = (fs::path(output_root()) / "data" / spec.name).string();
            DatasetManifest m = generate_synthetic(spec, gen_out);
            std::cout << "wrote " << (fs::path(gen_out) / "manifest.json").string() << " ("
                      << m.seen_classes.size() << " seen / " << m.unseen_classes.size()
                      << " unseen classes)\n";
            return 0;
        }
        if (train_cmd->parsed()) {
            ModelConfig cfg = resolve_config(train_config, train_flags);
            Dataset data = load_dataset(train_manifest);
            if (train_out.empty()) {
                std::ostringstream os;
                os << std::hex << cfg.hash();
                train_out = (fs::path(output_root()) / "runs" / os.str()).string();
            }
            Trainer trainer(cfg, data, train_out);
            if (!train_resume.empty()) trainer.load_checkpoint(train_resume);
            trainer.train(train_eval_each_epoch);
            EvalReport r = trainer.evaluate();
            trainer.save_checkpoint((fs::path(train_out) / "checkpoint.bin").string());
            std::cout << "S=" << r.seen << " U=" << r.unseen << " HM=" << r.hm << " ZSL=" << r.zsl
                      << "\nmetrics: " << trainer.metrics_path() << "\n";
            return 0;
        }
        if (eval_cmd->parsed()) {
            ModelConfig cfg = resolve_config(eval_config, eval_flags);
            Dataset data = load_dataset(eval_manifest);
            Trainer trainer(cfg, data, (fs::path(output_root()) / "eval_tmp").string());
            trainer.load_checkpoint(eval_ckpt);
            EvalReport r = trainer.evaluate();
            if (eval_mode == "zsl") {
                std::cout << "ZSL=" << r.zsl << "\n";
            } else if (eval_mode == "gzsl") {
                std::cout << "S=" << r.seen << " U=" << r.unseen << " HM=" << r.hm << "\n";
            } else {
                std::cout << "S=" << r.seen << " U=" << r.unseen << " HM=" << r.hm
                          << " ZSL=" << r.zsl << "\n";
            }
            return 0;
        }
        if (ablate_cmd->parsed()) {
            ModelConfig cfg = resolve_config(ab_config, ab_flags);
            Dataset data = load_dataset(ab_manifest);
            if (ab_out.empty()) ab_out = (fs::path(output_root()) / "ablate" / ab_axis).string();
            std::vector<std::string> grid;
            std::stringstream ss(ab_grid);
            std::string token;
            while (std::getline(ss, token, ',')) grid.push_back(token);
            auto rows = run_ablation(cfg, data, ab_axis, grid, ab_out);
            std::cout << format_ablation_table(ab_axis, rows);
            return 0;
        }
        if (gc->parsed()) return run_grad_check(gc_seeds);
        if (oc->parsed()) return run_oracle_check(oc_seeds);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

namespace {

int run_grad_check(int seeds) {
    double worst_op = 0.0;
    for (int s = 0; s < seeds; ++s) {
        Rng rng(1000 + static_cast<std::uint64_t>(s));
        Tensor a = Tensor::gaussian({3, 4}, 0.0, 1.0, rng);
        Tensor b = Tensor::gaussian({4, 3}, 0.0, 1.0, rng);
        Tensor t3 = Tensor::gaussian({3, 4, 2}, 0.0, 1.0, rng);
        Tensor m = Tensor::gaussian({5, 4}, 0.0, 1.0, rng);
        worst_op = std::max(worst_op, grad_check([](const std::vector<Tensor>& in) {
            return mean(sigmoid(matmul(in[0], in[1])));
        }, {a, b}));
        worst_op = std::max(worst_op, grad_check([](const std::vector<Tensor>& in) {
            return sum(mul(softmax(mode_n_product(in[0], in[1], 1), 2), in[0] ));
        }, {t3, Tensor::gaussian({4, 4}, 0.0, 1.0, rng)}));
        worst_op = std::max(worst_op, grad_check([](const std::vector<Tensor>& in) {
            return sum(mode_n_product(in[0], in[1], 1));
        }, {t3, m}));
    }
    std::cout << "op-level max relative error over " << seeds << " seeds: " << worst_op << "\n";
    const bool ok = worst_op < 1e-6;
    std::cout << (ok ? "PASS" : "FAIL") << "\n";
    return ok ? 0 : 1;
}

int run_oracle_check(int seeds) {
    double worst = 0.0;
    for (int s = 0; s < seeds; ++s) {
        Rng rng(2000 + static_cast<std::uint64_t>(s));
        const std::int64_t ds = 2 + static_cast<std::int64_t>(rng.next_below(7));
        const std::int64_t dt = 2 + static_cast<std::int64_t>(rng.next_below(7));
        const std::int64_t k = 2 + static_cast<std::int64_t>(rng.next_below(7));
        ParamStore params;
        Rng init_rng(3000 + static_cast<std::uint64_t>(s));
        TuckerFactors f(params, "t", ds, dt, k, ds, dt, k, init_rng);
        Tensor r = Tensor::gaussian({ds}, 0.0, 1.0, rng);
        Tensor sv = Tensor::gaussian({dt}, 0.0, 1.0, rng);
        Tensor direct = tucker_fuse(r, sv, f);
        Tensor composed = dense_bilinear(r, sv, tucker_compose(f));
        for (std::int64_t i = 0; i < k; ++i) {
            worst = std::max(worst, std::abs(direct.data()[static_cast<std::size_t>(i)] -
                                             composed.data()[static_cast<std::size_t>(i)]));
        }
    }
    std::cout << "tucker_fuse vs dense_bilinear(tucker_compose): max abs diff over " << seeds
              << " seeds: " << worst << "\n";
    const bool ok = worst < 1e-10;
    std::cout << (ok ? "PASS" : "FAIL") << "\n";
    return ok ? 0 : 1;
}

}  // namespace
