#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "stft/config.hpp"
#include "stft/data.hpp"
#include "stft/train.hpp"

using namespace stft;
namespace fs = std::filesystem;

namespace {

std::string tmp_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / "stft_tests" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

GenSpec tiny_spec() {
    GenSpec spec;
    spec.class_count = 6;
    spec.unseen_count = 2;
    spec.train_per_class = 4;
    spec.test_per_class = 3;
    spec.audio_rows = 8;
    spec.visual_rows = 8;
    spec.feature_width = 6;
    spec.sigma = 0.1;
    spec.seed = 7;
    return spec;
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.seed = 7;
    cfg.a_in = cfg.v_in = cfg.h_emb = 8;
    cfg.h_in = 6;
    cfg.h_hid = 8;
    cfg.h_out = 16;
    cfg.heads = 2;
    cfg.head_dim = 4;
    cfg.h_proj = 4;
    cfg.time_steps = 2;
    cfg.rank = 4;
    cfg.slot_count = 2;
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.d_enc = cfg.d_proj = cfg.d_text = 0.1;
    return cfg;
}

std::string file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// 16-wide setup for the tests that need learning to actually happen
GenSpec small16_spec() {
    GenSpec spec;
    spec.class_count = 6;
    spec.unseen_count = 2;
    spec.train_per_class = 8;
    spec.test_per_class = 4;
    spec.audio_rows = spec.visual_rows = 16;
    spec.feature_width = 8;
    spec.sigma = 0.1;
    spec.seed = 7;
    spec.text_rank = 4;
    return spec;
}

ModelConfig small16_config() {
    ModelConfig cfg;
    cfg.seed = 7;
    cfg.a_in = cfg.v_in = cfg.h_emb = 16;
    cfg.h_in = 8;
    cfg.h_hid = 16;
    cfg.h_out = 32;
    cfg.heads = 4;
    cfg.head_dim = 4;
    cfg.h_proj = 4;
    cfg.time_steps = 2;
    cfg.rank = 6;
    cfg.slot_count = 2;
    cfg.batch_size = 4;
    cfg.d_enc = cfg.d_proj = cfg.d_text = 0.0;
    return cfg;
}

}  // namespace

TEST_CASE("matrix file round trip") {
    const std::string dir = tmp_dir("matrix");
    Rng rng(1);
    Tensor m = Tensor::gaussian({5, 3}, 0.0, 1.0, rng);
    // quantized to f32 on disk
    write_matrix_f32(dir + "/m.bin", 5, 3, m.data());
    Tensor back = read_matrix_f32(dir + "/m.bin");
    CHECK(back.shape() == Shape{5, 3});
    for (std::size_t i = 0; i < m.data().size(); ++i) {
        CHECK(back.data()[i] == doctest::Approx(m.data()[i]).epsilon(1e-6));
    }
}

TEST_CASE("synthetic generation is byte-identical for a fixed seed") {
    GenSpec spec = tiny_spec();
    const std::string d1 = tmp_dir("gen1");
    const std::string d2 = tmp_dir("gen2");
    generate_synthetic(spec, d1);
    generate_synthetic(spec, d2);
    for (const char* f : {"audio_train.bin", "visual_train.bin", "audio_test.bin",
                          "visual_test.bin", "text_embeddings.bin", "labels_train.txt",
                          "labels_test.txt", "manifest.json"}) {
        CHECK(file_bytes(d1 + "/" + f) == file_bytes(d2 + "/" + f));
    }
}

TEST_CASE("sigma 0 collapses every sample of a class onto its mean") {
    GenSpec spec = tiny_spec();
    spec.sigma = 0.0;
    const std::string dir = tmp_dir("gen_sigma0");
    generate_synthetic(spec, dir);
    Dataset data = load_dataset(dir + "/manifest.json");
    // two samples of the same class are identical
    const std::int64_t block = spec.audio_rows * spec.feature_width;
    for (std::int64_t s = 1; s < spec.train_per_class; ++s) {
        for (std::int64_t i = 0; i < block; ++i) {
            CHECK(data.audio_train.data()[static_cast<std::size_t>(i)] ==
                  data.audio_train.data()[static_cast<std::size_t>(s * block + i)]);
        }
    }
}

TEST_CASE("manifest validation rejects overlapping splits") {
    GenSpec spec = tiny_spec();
    const std::string dir = tmp_dir("gen_bad");
    DatasetManifest m = generate_synthetic(spec, dir);
    m.unseen_classes.push_back(m.seen_classes.front());
    CHECK_THROWS_AS(m.validate(), std::invalid_argument);
}

TEST_CASE("config JSON round trip and hash stability") {
    ModelConfig cfg = tiny_config();
    ModelConfig back = ModelConfig::from_json_text(cfg.to_json());
    CHECK(back.to_json() == cfg.to_json());
    CHECK(back.hash() == cfg.hash());
    back.rank = cfg.rank + 1;
    CHECK(back.hash() != cfg.hash());
}

TEST_CASE("config validation catches inconsistent widths") {
    ModelConfig cfg = tiny_config();
    cfg.head_dim = 3;  // heads*head_dim != h_emb
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny_config();
    cfg.a_in = 9;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("lr = 0 freezes parameters through training") {
    GenSpec spec = tiny_spec();
    const std::string dir = tmp_dir("lr0");
    generate_synthetic(spec, dir);
    Dataset data = load_dataset(dir + "/manifest.json");
    ModelConfig cfg = tiny_config();
    cfg.lr = 0.0;
    cfg.epochs = 2;
    Trainer trainer(cfg, data, tmp_dir("lr0_run"));
    std::vector<std::vector<double>> before;
    for (const auto& [name, p] : trainer.model().params().items()) before.push_back(p.data());
    trainer.train();
    std::size_t i = 0;
    for (const auto& [name, p] : trainer.model().params().items()) {
        CHECK(p.data() == before[i]);
        ++i;
    }
}

TEST_CASE("training determinism: identical seeds give identical metric files") {
    GenSpec spec = tiny_spec();
    const std::string dir = tmp_dir("det_data");
    generate_synthetic(spec, dir);
    Dataset data = load_dataset(dir + "/manifest.json");
    ModelConfig cfg = tiny_config();
    const std::string r1 = tmp_dir("det_run1");
    const std::string r2 = tmp_dir("det_run2");
    {
        Trainer t1(cfg, data, r1);
        t1.train();
        t1.evaluate();
    }
    {
        Trainer t2(cfg, data, r2);
        t2.train();
        t2.evaluate();
    }
    const std::string m1 = file_bytes(r1 + "/metrics.jsonl");
    CHECK(!m1.empty());
    CHECK(m1 == file_bytes(r2 + "/metrics.jsonl"));
}

TEST_CASE("smoke training reduces the loss on easy data") {
    const std::string dir = tmp_dir("smoke_data");
    generate_synthetic(small16_spec(), dir);
    Dataset data = load_dataset(dir + "/manifest.json");
    ModelConfig cfg = small16_config();
    cfg.epochs = 10;
    cfg.lr = 5e-3;
    Trainer trainer(cfg, data, tmp_dir("smoke_run"));
    trainer.train();
    const auto& h = trainer.history();
    CHECK(h.back().loss_total < 0.5 * h.front().loss_total);
}

TEST_CASE("untrained model evaluates at chance level") {
    GenSpec spec = tiny_spec();
    spec.class_count = 8;
    spec.unseen_count = 4;
    spec.test_per_class = 12;
    const std::string dir = tmp_dir("chance_data");
    generate_synthetic(spec, dir);
    Dataset data = load_dataset(dir + "/manifest.json");
    ModelConfig cfg = tiny_config();
    Trainer trainer(cfg, data, tmp_dir("chance_run"));  // no training at all
    EvalReport r = trainer.evaluate();
    // ZSL chance: 1/4 over 48 unseen samples; binomial 3 sigma ~ 18.7%
    CHECK(std::abs(r.zsl - 25.0) < 19.0);
    // report HM is internally consistent with its own S and U fields
    const double expect_hm =
        (r.seen + r.unseen) > 0 ? 2.0 * r.seen * r.unseen / (r.seen + r.unseen) : 0.0;
    CHECK(r.hm == doctest::Approx(expect_hm).epsilon(1e-9));
}

TEST_CASE("noise-free data trains to perfect seen accuracy") {
    GenSpec spec = small16_spec();
    spec.sigma = 0.0;
    const std::string dir = tmp_dir("sigma0_train_data");
    generate_synthetic(spec, dir);
    Dataset data = load_dataset(dir + "/manifest.json");
    ModelConfig cfg = small16_config();
    cfg.epochs = 80;
    cfg.lr = 2e-3;
    Trainer trainer(cfg, data, tmp_dir("sigma0_train_run"));
    trainer.train();
    EvalReport r = trainer.evaluate();
    CHECK(r.seen == doctest::Approx(100.0));
}

TEST_CASE("overwhelming noise keeps zero-shot accuracy at chance") {
    GenSpec spec = tiny_spec();
    // class-mean entries are ~unit scale, so mean norm ~ sqrt(width);
    // sigma at 10x the mean norm drowns the signal completely
    spec.sigma = 10.0 * std::sqrt(static_cast<double>(spec.feature_width));
    spec.unseen_count = 2;
    spec.test_per_class = 12;
    const std::string dir = tmp_dir("noise_data");
    generate_synthetic(spec, dir);
    Dataset data = load_dataset(dir + "/manifest.json");
    ModelConfig cfg = tiny_config();
    cfg.epochs = 8;
    cfg.lr = 1e-3;
    Trainer trainer(cfg, data, tmp_dir("noise_run"));
    trainer.train();
    EvalReport r = trainer.evaluate();
    // chance 50% over 24 unseen samples; 3 sigma ~ 30.6%
    CHECK(std::abs(r.zsl - 50.0) < 31.0);
}

TEST_CASE("checkpoint: save -> load -> save is byte-identical") {
    GenSpec spec = tiny_spec();
    const std::string dir = tmp_dir("ckpt_data");
    generate_synthetic(spec, dir);
    Dataset data = load_dataset(dir + "/manifest.json");
    ModelConfig cfg = tiny_config();
    const std::string run = tmp_dir("ckpt_run");
    Trainer trainer(cfg, data, run);
    trainer.train();
    trainer.save_checkpoint(run + "/a.bin");
    Trainer loaded(cfg, data, tmp_dir("ckpt_run2"));
    loaded.load_checkpoint(run + "/a.bin");
    loaded.save_checkpoint(run + "/b.bin");
    CHECK(file_bytes(run + "/a.bin") == file_bytes(run + "/b.bin"));
}

TEST_CASE("checkpoint: loaded evaluation matches in-memory evaluation") {
    GenSpec spec = tiny_spec();
    const std::string dir = tmp_dir("ckpt_eval_data");
    generate_synthetic(spec, dir);
    Dataset data = load_dataset(dir + "/manifest.json");
    ModelConfig cfg = tiny_config();
    const std::string run = tmp_dir("ckpt_eval_run");
    Trainer trainer(cfg, data, run);
    trainer.train();
    EvalReport in_memory = trainer.evaluate();
    trainer.save_checkpoint(run + "/ckpt.bin");

    Trainer loaded(cfg, data, tmp_dir("ckpt_eval_run2"));
    loaded.load_checkpoint(run + "/ckpt.bin");
    EvalReport reloaded = loaded.evaluate();
    CHECK(reloaded.seen == doctest::Approx(in_memory.seen).epsilon(1e-12));
    CHECK(reloaded.unseen == doctest::Approx(in_memory.unseen).epsilon(1e-12));
    CHECK(reloaded.hm == doctest::Approx(in_memory.hm).epsilon(1e-12));
    CHECK(reloaded.zsl == doctest::Approx(in_memory.zsl).epsilon(1e-12));
}

TEST_CASE("checkpoint rejects a mismatched config") {
    GenSpec spec = tiny_spec();
    const std::string dir = tmp_dir("ckpt_mismatch_data");
    generate_synthetic(spec, dir);
    Dataset data = load_dataset(dir + "/manifest.json");
    ModelConfig cfg = tiny_config();
    const std::string run = tmp_dir("ckpt_mismatch_run");
    Trainer trainer(cfg, data, run);
    trainer.save_checkpoint(run + "/ckpt.bin");
    ModelConfig other = cfg;
    other.rank = cfg.rank + 1;
    Trainer t2(other, data, tmp_dir("ckpt_mismatch_run2"));
    CHECK_THROWS_AS(t2.load_checkpoint(run + "/ckpt.bin"), std::runtime_error);
}

TEST_CASE("resume continues the metric history identically") {
    GenSpec spec = tiny_spec();
    const std::string dir = tmp_dir("resume_data");
    generate_synthetic(spec, dir);
    Dataset data = load_dataset(dir + "/manifest.json");
    ModelConfig cfg = tiny_config();
    cfg.epochs = 4;

    // unbroken run
    Trainer full(cfg, data, tmp_dir("resume_full"));
    full.train();

    // interrupted run: stop after epoch 2, checkpoint, resume in a new trainer
    const std::string half_run = tmp_dir("resume_half");
    Trainer half(cfg, data, half_run);
    half.train_until(2);
    half.save_checkpoint(half_run + "/ckpt.bin");

    Trainer resumed(cfg, data, tmp_dir("resume_rest"));
    resumed.load_checkpoint(half_run + "/ckpt.bin");
    resumed.train();

    REQUIRE(full.history().size() == 4);
    REQUIRE(resumed.history().size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        const EpochMetrics& want = full.history()[2 + i];
        const EpochMetrics& got = resumed.history()[i];
        CHECK(got.epoch == want.epoch);
        CHECK(got.loss_total == want.loss_total);
        CHECK(got.loss_triplet == want.loss_triplet);
        CHECK(got.loss_proj == want.loss_proj);
        CHECK(got.loss_recon == want.loss_recon);
        CHECK(got.spikes_audio == want.spikes_audio);
        CHECK(got.spikes_visual == want.spikes_visual);
    }
}

TEST_CASE("ablation runner: axis isolation and grid plumbing") {
    GenSpec spec = tiny_spec();
    const std::string dir = tmp_dir("ablate_data");
    generate_synthetic(spec, dir);
    Dataset data = load_dataset(dir + "/manifest.json");
    ModelConfig cfg = tiny_config();
    cfg.epochs = 1;

    // tsf on/off differ only in tsf_mode
    auto rows = run_ablation(cfg, data, "tsf", {"on", "off"}, tmp_dir("ablate_tsf"));
    REQUIRE(rows.size() == 2);
    ModelConfig a = rows[0].config, b = rows[1].config;
    CHECK(a.tsf_mode != b.tsf_mode);
    a.tsf_mode = b.tsf_mode;
    CHECK(a.hash() == b.hash());

    // rank grid: strictly increasing fusion parameter counts
    auto rank_rows = run_ablation(cfg, data, "rank", {"2", "4", "6", "8"}, tmp_dir("ablate_rank"));
    for (std::size_t i = 1; i < rank_rows.size(); ++i) {
        CHECK(rank_rows[i].fusion_param_count > rank_rows[i - 1].fusion_param_count);
    }

    // threshold axis rows carry spike diagnostics
    auto th_rows = run_ablation(cfg, data, "threshold", {"dynamic", "fixed:0.5", "fixed:1.0"},
                                tmp_dir("ablate_th"));
    REQUIRE(th_rows.size() == 3);
    const std::string table = format_ablation_table("threshold", th_rows);
    CHECK(table.find("spike_total") != std::string::npos);
}
