#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "moee/common.hpp"
#include "moee/denoiser.hpp"
#include "moee/emotion_latents.hpp"
#include "moee/faces.hpp"

namespace moee {

/// Every experiment knob in one place. Defaults are the desk-scale
/// configuration; `paper_faithful()` switches the dimension and sampler
/// settings the reference setup prescribes.
struct TrainConfig {
    // model dims
    int image_hw = 16;
    int patch = 4;
    int d_model = 48;
    int n_blocks = 4;
    int mlp_hidden = 96;
    int d_attn = 48;
    int n_id_tokens = 4;
    int d_id = 16;
    int num_experts = kNumBasicEmotions;
    EmotionLatentsConfig e2l;

    // schedule
    int T = 1000;
    double beta_min = 0.05;
    double beta_max = 20.0;

    // loss
    double lambda = 4.0;

    // optimizer / budgets
    double lr = 2e-3;
    double lr_stage2 = 5e-3;  // fresh conditioning modules train faster
    double weight_decay = 1e-4;
    int batch = 16;
    int steps_stage1 = 8000;
    int steps_stage2_expert = 6000;  // per expert
    int steps_stage2_gating = 1000;

    // masked noisy emotion sampling
    double p_noise = 0.15;
    double neutral_fraction = 0.5;

    // sampling
    int ddim_steps = 50;
    double eta = 0.0;

    // dataset
    DatasetConfig dataset;

    // stage-2 emotion-to-latents trainability
    bool train_e2l_stage2a = true;
    bool train_e2l_stage2b = false;  // keep expert-latent pairing intact through 2b

    uint64_t seed = 1;
    std::string out_dir = "runs/exp";

    DenoiserConfig denoiser_config(EmotionWiring wiring) const {
        DenoiserConfig d;
        d.image_hw = image_hw;
        d.patch = patch;
        d.d_model = d_model;
        d.n_blocks = n_blocks;
        d.mlp_hidden = mlp_hidden;
        d.d_attn = d_attn;
        d.n_id_tokens = n_id_tokens;
        d.d_id = d_id;
        d.num_experts = num_experts;
        d.c_emotion = e2l.c_emotion;
        d.d_attn_cond = d_attn;
        d.wiring = wiring;
        return d;
    }

    /// The reference dimensions: emotion latent 8x512 over a 768-channel
    /// bank, batch 4, lr 1e-5, 150 DDIM steps. Slow on a desk CPU; kept as a
    /// named configuration.
    static TrainConfig paper_faithful() {
        TrainConfig c;
        c.e2l.t_emotion = 8;
        c.e2l.c_emotion = 512;
        c.e2l.c_bank = 768;
        c.e2l.bank_rows = 64;
        c.lr = 1e-5;
        c.lr_stage2 = 1e-5;
        c.batch = 4;
        c.ddim_steps = 150;
        c.steps_stage1 = 30000;
        c.steps_stage2_expert = 5000;
        c.steps_stage2_gating = 30000;
        return c;
    }
};

namespace detail_config {

template <class T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail_config

inline TrainConfig config_from_json(const nlohmann::json& j) {
    using detail_config::read_key;
    TrainConfig c;
    static const char* known[] = {
        "image_hw", "patch", "d_model", "n_blocks", "mlp_hidden", "d_attn", "n_id_tokens",
        "d_id", "num_experts", "t_emotion", "c_emotion", "c_bank", "bank_rows", "T",
        "beta_min", "beta_max", "lambda", "lr", "weight_decay", "batch", "steps_stage1",
        "steps_stage2_expert", "steps_stage2_gating", "p_noise", "neutral_fraction",
        "ddim_steps", "eta", "n_identities", "per_emotion", "per_compound", "per_neutral",
        "emotion_jitter", "include_compounds", "train_e2l_stage2a", "train_e2l_stage2b",
        "seed", "out_dir", "paper_faithful"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || it.key() == k;
        check(ok, "config: unknown key '" + it.key() + "'");
    }
    bool paper = false;
    read_key(j, "paper_faithful", paper);
    if (paper) c = TrainConfig::paper_faithful();

    read_key(j, "image_hw", c.image_hw);
    read_key(j, "patch", c.patch);
    read_key(j, "d_model", c.d_model);
    read_key(j, "n_blocks", c.n_blocks);
    read_key(j, "mlp_hidden", c.mlp_hidden);
    read_key(j, "d_attn", c.d_attn);
    read_key(j, "n_id_tokens", c.n_id_tokens);
    read_key(j, "d_id", c.d_id);
    read_key(j, "num_experts", c.num_experts);
    read_key(j, "t_emotion", c.e2l.t_emotion);
    read_key(j, "c_emotion", c.e2l.c_emotion);
    read_key(j, "c_bank", c.e2l.c_bank);
    read_key(j, "bank_rows", c.e2l.bank_rows);
    read_key(j, "T", c.T);
    read_key(j, "beta_min", c.beta_min);
    read_key(j, "beta_max", c.beta_max);
    read_key(j, "lambda", c.lambda);
    read_key(j, "lr", c.lr);
    read_key(j, "lr_stage2", c.lr_stage2);
    read_key(j, "weight_decay", c.weight_decay);
    read_key(j, "batch", c.batch);
    read_key(j, "steps_stage1", c.steps_stage1);
    read_key(j, "steps_stage2_expert", c.steps_stage2_expert);
    read_key(j, "steps_stage2_gating", c.steps_stage2_gating);
    read_key(j, "p_noise", c.p_noise);
    read_key(j, "neutral_fraction", c.neutral_fraction);
    read_key(j, "ddim_steps", c.ddim_steps);
    read_key(j, "eta", c.eta);
    read_key(j, "n_identities", c.dataset.n_identities);
    read_key(j, "per_emotion", c.dataset.per_emotion);
    read_key(j, "per_compound", c.dataset.per_compound);
    read_key(j, "per_neutral", c.dataset.per_neutral);
    read_key(j, "emotion_jitter", c.dataset.emotion_jitter);
    read_key(j, "include_compounds", c.dataset.include_compounds);
    read_key(j, "train_e2l_stage2a", c.train_e2l_stage2a);
    read_key(j, "train_e2l_stage2b", c.train_e2l_stage2b);
    read_key(j, "seed", c.seed);
    read_key(j, "out_dir", c.out_dir);

    c.dataset.H = c.image_hw;
    c.dataset.W = c.image_hw;
    return c;
}

inline TrainConfig config_from_file(const std::string& path) {
    std::ifstream is(path);
    check(is.good(), "config: cannot open " + path);
    nlohmann::json j = nlohmann::json::parse(is);
    return config_from_json(j);
}

}  // namespace moee
