#include "stft/config.hpp"

#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace stft {

using nlohmann::json;

void ModelConfig::validate() const {
    auto positive = [](std::int64_t v, const char* name) {
        if (v <= 0) throw std::invalid_argument(std::string("config: ") + name + " must be positive");
    };
    positive(a_in, "a_in");
    positive(v_in, "v_in");
    positive(h_in, "h_in");
    positive(h_emb, "h_emb");
    positive(h_hid, "h_hid");
    positive(h_out, "h_out");
    positive(h_proj, "h_proj");
    positive(heads, "heads");
    positive(head_dim, "head_dim");
    positive(time_steps, "time_steps");
    positive(rank, "rank");
    positive(slot_count, "slot_count");
    positive(joint_depth, "joint_depth");
    positive(batch_size, "batch_size");
    if (epochs < 1) throw std::invalid_argument("config: epochs must be >= 1");
    if (h_emb != heads * head_dim) {
        throw std::invalid_argument("config: h_emb must equal heads * head_dim");
    }
    if (a_in != h_emb || v_in != h_emb) {
        throw std::invalid_argument(
            "config: a_in and v_in must equal h_emb (the latent reasoning stream needs square "
            "feature maps)");
    }
    if (rank > h_emb) throw std::invalid_argument("config: rank must not exceed h_emb");
    if (gamma < 0.0) throw std::invalid_argument("config: gamma must be non-negative");
    for (double d : {d_enc, d_proj, d_text}) {
        if (d < 0.0 || d >= 1.0) throw std::invalid_argument("config: dropout rates must be in [0,1)");
    }
    if (threshold_mode != "dynamic" && threshold_mode != "fixed") {
        throw std::invalid_argument("config: threshold_mode must be dynamic or fixed");
    }
    if (threshold_mode == "fixed" && v_th_fixed <= v_rest) {
        throw std::invalid_argument("config: fixed threshold must exceed v_rest");
    }
    // these throw on unknown names
    tsf();
    joint();
    triplet();
}

bool ModelConfig::dynamic_threshold() const { return threshold_mode == "dynamic"; }

LossConfig ModelConfig::loss_config() const {
    LossConfig cfg;
    cfg.gamma = gamma;
    cfg.w_triplet = w_triplet;
    cfg.w_proj_recon = w_proj_recon;
    cfg.use_proj_loss = use_proj_loss;
    cfg.use_recon_loss = use_recon_loss;
    cfg.triplet_mode = triplet();
    return cfg;
}

namespace {

json to_json_obj(const ModelConfig& c) {
    return json{{"seed", c.seed},
                {"a_in", c.a_in},
                {"v_in", c.v_in},
                {"h_in", c.h_in},
                {"h_emb", c.h_emb},
                {"h_hid", c.h_hid},
                {"h_out", c.h_out},
                {"h_proj", c.h_proj},
                {"heads", c.heads},
                {"head_dim", c.head_dim},
                {"time_steps", c.time_steps},
                {"rank", c.rank},
                {"slot_count", c.slot_count},
                {"tau_m", c.tau_m},
                {"membrane_r", c.membrane_r},
                {"v_rest", c.v_rest},
                {"v_th_init", c.v_th_init},
                {"surrogate_width", c.surrogate_width},
                {"threshold_mode", c.threshold_mode},
                {"v_th_fixed", c.v_th_fixed},
                {"tsf_mode", c.tsf_mode},
                {"glp_enabled", c.glp_enabled},
                {"lkc_enabled", c.lkc_enabled},
                {"joint_mode", c.joint_mode},
                {"joint_depth", c.joint_depth},
                {"triplet_mode", c.triplet_mode},
                {"d_enc", c.d_enc},
                {"d_proj", c.d_proj},
                {"d_text", c.d_text},
                {"lr", c.lr},
                {"epochs", c.epochs},
                {"batch_size", c.batch_size},
                {"gamma", c.gamma},
                {"w_triplet", c.w_triplet},
                {"w_proj_recon", c.w_proj_recon},
                {"use_proj_loss", c.use_proj_loss},
                {"use_recon_loss", c.use_recon_loss}};
}

template <typename T>
void read_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

std::string ModelConfig::to_json() const { return to_json_obj(*this).dump(2); }

ModelConfig ModelConfig::from_json_text(const std::string& text) {
    json j = json::parse(text);
    ModelConfig c;
    read_if(j, "seed", c.seed);
    read_if(j, "a_in", c.a_in);
    read_if(j, "v_in", c.v_in);
    read_if(j, "h_in", c.h_in);
    read_if(j, "h_emb", c.h_emb);
    read_if(j, "h_hid", c.h_hid);
    read_if(j, "h_out", c.h_out);
    read_if(j, "h_proj", c.h_proj);
    read_if(j, "heads", c.heads);
    read_if(j, "head_dim", c.head_dim);
    read_if(j, "time_steps", c.time_steps);
    read_if(j, "rank", c.rank);
    read_if(j, "slot_count", c.slot_count);
    read_if(j, "tau_m", c.tau_m);
    read_if(j, "membrane_r", c.membrane_r);
    read_if(j, "v_rest", c.v_rest);
    read_if(j, "v_th_init", c.v_th_init);
    read_if(j, "surrogate_width", c.surrogate_width);
    read_if(j, "threshold_mode", c.threshold_mode);
    read_if(j, "v_th_fixed", c.v_th_fixed);
    read_if(j, "tsf_mode", c.tsf_mode);
    read_if(j, "glp_enabled", c.glp_enabled);
    read_if(j, "lkc_enabled", c.lkc_enabled);
    read_if(j, "joint_mode", c.joint_mode);
    read_if(j, "joint_depth", c.joint_depth);
    read_if(j, "triplet_mode", c.triplet_mode);
    read_if(j, "d_enc", c.d_enc);
    read_if(j, "d_proj", c.d_proj);
    read_if(j, "d_text", c.d_text);
    read_if(j, "lr", c.lr);
    read_if(j, "epochs", c.epochs);
    read_if(j, "batch_size", c.batch_size);
    read_if(j, "gamma", c.gamma);
    read_if(j, "w_triplet", c.w_triplet);
    read_if(j, "w_proj_recon", c.w_proj_recon);
    read_if(j, "use_proj_loss", c.use_proj_loss);
    read_if(j, "use_recon_loss", c.use_recon_loss);
    return c;
}

ModelConfig ModelConfig::from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_json_text(text);
}

std::uint64_t ModelConfig::hash() const {
    const std::string text = to_json();
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace stft
