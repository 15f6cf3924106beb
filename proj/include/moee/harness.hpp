#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "moee/config.hpp"
#include "moee/denoiser.hpp"
#include "moee/diffusion.hpp"
#include "moee/emotion_latents.hpp"
#include "moee/faces.hpp"

namespace moee {

/// The experiment variants mirroring the ablation axes: the full mixture,
/// no mixture (single plain conditioning block), uniform global weights, and
/// no masked noisy sampling.
enum class Variant { Full, WoMoee, WoGs, WoMns };
const char* variant_name(Variant v);

/// Denoiser + emotion-to-latents + frozen perceptual extractor + schedule:
/// everything a training stage or sampler needs.
struct Model {
    TrainConfig cfg;
    EmotionWiring wiring = EmotionWiring::Moee;
    Denoiser denoiser;
    EmotionToLatents e2l;
    PerceptualExtractor perceptual;
    DiffusionSchedule sched;

    static Model init(const TrainConfig& cfg, EmotionWiring wiring);

    NamedParams named_params() const;
    void save(const std::string& path) const;
    /// Copies matching tensors from the checkpoint; with strict=true every
    /// model parameter must be present. Returns the names left untouched.
    std::vector<std::string> load(const std::string& path, bool strict);

    void freeze_all();

    /// Conditional noise prediction. emotion_latent may be undefined
    /// (stage 1); traces receive the global gate vectors when routing.
    Tensor predict_eps(const Tensor& z, const std::vector<int>& t_idx, const Tensor& id_params,
                       const Tensor& emotion_latent, const RoutingMode& mode,
                       RoutingTrace* tr1 = nullptr, RoutingTrace* tr2 = nullptr) const;

    LossConfig loss_config() const { return {cfg.lambda, &perceptual}; }
};

// ---- training -----------------------------------------------------------------

struct MetricsRow {
    int step = 0;
    double loss_latent = 0.0;
    double loss_spatial = 0.0;
    double loss_total = 0.0;
    double g_entropy = 0.0;
};

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);

/// Stage 1: trains the base (trunk, embeddings, identity conditioning, head)
/// with the emotion pathway inactive. Mixture parameters stay frozen and
/// zero-initialized output projections keep the module an exact identity.
std::vector<MetricsRow> train_stage1(Model& model, const Dataset& data, Rng& rng);

/// Stage 2a: per emotion, hard-routes to that expert and trains it (both
/// conditioning sites) plus the label path of emotion-to-latents on
/// masked-noisy-sampled single-emotion data. Everything else is
/// checksum-verified frozen. p_noise_override < 0 keeps the config value
/// (the no-MNS ablation passes 0).
std::vector<MetricsRow> train_stage2_experts(Model& model, const Dataset& data, Rng& rng,
                                             double p_noise_override = -1.0);

/// Stage 2b: freezes experts and trunk, trains the local/global gates and
/// the label path on pure + compound data in soft routing. uniform_g trains
/// the no-global-soft-assignment ablation (g pinned to 1/e).
std::vector<MetricsRow> train_stage2_gating(Model& model, const Dataset& data, Rng& rng,
                                            bool uniform_g);

/// Budget-matched stage 2 for the no-mixture ablation: one plain
/// cross-attention block + label path, trained on the same draws
/// (masked-noisy pure phase, then labeled pure+compound phase).
std::vector<MetricsRow> train_stage2_plain(Model& model, const Dataset& data, Rng& rng);

// ---- evaluation ----------------------------------------------------------------

struct EvalOptions {
    int n_per_emotion = 64;
    int n_per_compound = 32;
    int n_identity_probes = 4;  // per emotion, for identity consistency
    int ddim_steps = 50;
    uint64_t seed = 777;
    bool uniform_g = false;       // no-GS ablation evaluates with g = 1/e
    std::string grid_dir;         // when set, sample grids are written here
};

struct CompoundResult {
    std::string name;
    double mean_coeff = 0.0;
    double mean_residual = 0.0;
    double pass_fraction = 0.0;  // coeff in (0,1) and residual < pure baseline
};

struct EvalReport {
    std::string variant;
    double pure_accuracy = 0.0;
    std::array<std::array<int, kNumBasicEmotions>, kNumBasicEmotions> confusion{};
    double pure_residual_baseline = 0.0;
    std::vector<CompoundResult> compounds;
    double compound_pass_fraction = 0.0;
    double latent_separation = 0.0;       // multimodal, grouped by emotion
    double cross_modal_distance = 0.0;    // mean label-vs-audio latent distance
    double identity_consistency = 0.0;    // mean Linf of recovered identity
    double mean_g_entropy = 0.0;
    double seconds = 0.0;

    nlohmann::ordered_json to_json() const;
};

EvalReport evaluate(const Model& model, const EmotionSpec& spec, const EvalOptions& opts);

/// Emotion latents for the separation metric: per emotion, the label
/// condition plus seeded noisy audio/text stub conditions.
double eval_latent_separation(const Model& model, const EmotionSpec& spec, uint64_t seed,
                              int per_modality, double* cross_modal_distance = nullptr);

// ---- experiment orchestration ----------------------------------------------------

struct ExperimentResult {
    std::string out_dir;
    std::map<std::string, EvalReport> reports;  // keyed by variant name
    uint64_t config_hash = 0;
};

/// End-to-end pipeline: dataset, stage 1, stage 2 for the full model and
/// (optionally) the three ablations, checkpoints, per-stage metrics CSVs,
/// sample grids and a combined report JSON under out_dir.
ExperimentResult run_experiment(const TrainConfig& cfg, bool with_ablations,
                                const EvalOptions& eval_opts);

uint64_t config_hash(const TrainConfig& cfg);

/// Writes an n-per-row montage of [count x H x W] images as one PGM.
void write_image_grid(const std::string& path, const std::vector<std::vector<double>>& images,
                      int H, int W, int per_row);

}  // namespace moee
