#include "moee/harness.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "moee/checkpoint.hpp"
#include "moee/optim.hpp"

namespace moee {

namespace fs = std::filesystem;

const char* variant_name(Variant v) {
    switch (v) {
        case Variant::Full: return "full";
        case Variant::WoMoee: return "wo_moee";
        case Variant::WoGs: return "wo_gs";
        case Variant::WoMns: return "wo_mns";
    }
    return "?";
}

namespace {

uint64_t derive_seed(uint64_t seed, uint64_t stream) {
    return Rng::stream(seed, stream).next_u64();
}

uint64_t fnv1a(const void* data, size_t n, uint64_t h = 1469598103934665603ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

uint64_t tensor_checksum(const Tensor& t) {
    return fnv1a(t.data(), static_cast<size_t>(t.numel()) * sizeof(double));
}

std::map<std::string, uint64_t> param_checksums(const NamedParams& params) {
    std::map<std::string, uint64_t> out;
    for (const auto& [name, t] : params) out[name] = tensor_checksum(t);
    return out;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

nlohmann::ordered_json config_to_json(const TrainConfig& c) {
    nlohmann::ordered_json j;
    j["image_hw"] = c.image_hw;
    j["patch"] = c.patch;
    j["d_model"] = c.d_model;
    j["n_blocks"] = c.n_blocks;
    j["mlp_hidden"] = c.mlp_hidden;
    j["d_attn"] = c.d_attn;
    j["n_id_tokens"] = c.n_id_tokens;
    j["d_id"] = c.d_id;
    j["num_experts"] = c.num_experts;
    j["t_emotion"] = c.e2l.t_emotion;
    j["c_emotion"] = c.e2l.c_emotion;
    j["c_bank"] = c.e2l.c_bank;
    j["bank_rows"] = c.e2l.bank_rows;
    j["T"] = c.T;
    j["beta_min"] = c.beta_min;
    j["beta_max"] = c.beta_max;
    j["lambda"] = c.lambda;
    j["lr"] = c.lr;
    j["weight_decay"] = c.weight_decay;
    j["batch"] = c.batch;
    j["steps_stage1"] = c.steps_stage1;
    j["steps_stage2_expert"] = c.steps_stage2_expert;
    j["steps_stage2_gating"] = c.steps_stage2_gating;
    j["p_noise"] = c.p_noise;
    j["neutral_fraction"] = c.neutral_fraction;
    j["ddim_steps"] = c.ddim_steps;
    j["eta"] = c.eta;
    j["n_identities"] = c.dataset.n_identities;
    j["per_emotion"] = c.dataset.per_emotion;
    j["per_compound"] = c.dataset.per_compound;
    j["per_neutral"] = c.dataset.per_neutral;
    j["emotion_jitter"] = c.dataset.emotion_jitter;
    j["include_compounds"] = c.dataset.include_compounds;
    j["train_e2l_stage2a"] = c.train_e2l_stage2a;
    j["train_e2l_stage2b"] = c.train_e2l_stage2b;
    j["seed"] = c.seed;
    return j;
}

}  // namespace

uint64_t config_hash(const TrainConfig& cfg) {
    const std::string dump = config_to_json(cfg).dump();
    return fnv1a(dump.data(), dump.size());
}

// ---- Model ---------------------------------------------------------------------

Model Model::init(const TrainConfig& cfg, EmotionWiring wiring) {
    Model m;
    m.cfg = cfg;
    m.wiring = wiring;
    Rng rng(derive_seed(cfg.seed, wiring == EmotionWiring::PlainBlock ? 9 : 2));
    m.denoiser = Denoiser::init(cfg.denoiser_config(wiring), rng);
    m.e2l = EmotionToLatents::init(cfg.e2l, rng);
    m.perceptual = PerceptualExtractor::init(cfg.image_hw, rng);
    m.sched = make_schedule(cfg.T, cfg.beta_min, cfg.beta_max);
    return m;
}

NamedParams Model::named_params() const {
    NamedParams out;
    denoiser.collect(out, "denoiser");
    e2l.collect(out, "e2l");
    perceptual.collect(out, "perceptual");
    return out;
}

void Model::save(const std::string& path) const {
    Checkpoint ck;
    for (const auto& [name, t] : named_params()) ck.put(name, t);
    ck.save(path);
}

std::vector<std::string> Model::load(const std::string& path, bool strict) {
    const Checkpoint ck = Checkpoint::load(path);
    std::vector<std::string> missing;
    for (auto& [name, t] : named_params()) {
        if (!ck.has(name)) {
            check(!strict, "load: checkpoint " + path + " lacks parameter " + name);
            missing.push_back(name);
            continue;
        }
        Tensor stored = ck.get(name);
        check_same_shape(stored.shape(), t.shape(), ("load: " + name).c_str());
        Tensor mut = t;
        mut.mutable_values() = stored.values();
    }
    return missing;
}

void Model::freeze_all() {
    for (auto& [name, t] : named_params()) {
        Tensor mut = t;
        mut.set_requires_grad(false);
        mut.zero_grad();
    }
}

Tensor Model::predict_eps(const Tensor& z, const std::vector<int>& t_idx, const Tensor& id_params,
                          const Tensor& emotion_latent, const RoutingMode& mode,
                          RoutingTrace* tr1, RoutingTrace* tr2) const {
    return denoiser.forward(z, t_idx, id_params, emotion_latent, mode, tr1, tr2);
}

// ---- training core ---------------------------------------------------------------

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
    std::ofstream os(path, std::ios::trunc);
    check(os.good(), "cannot open metrics csv " + path);
    os << "step,loss_latent,loss_spatial,loss_total,g_entropy\n";
    for (const auto& r : rows)
        os << r.step << ',' << fmt_double(r.loss_latent) << ',' << fmt_double(r.loss_spatial)
           << ',' << fmt_double(r.loss_total) << ',' << fmt_double(r.g_entropy) << '\n';
    check(os.good(), "metrics csv write failed: " + path);
}

namespace {

struct TrainBatch {
    Tensor images;  // [b, px]
    Tensor ids;     // [b, 4]
    Tensor cond;    // [b, 6] label weights; undefined -> emotion pathway off
};

using BatchFn = std::function<TrainBatch(Rng&)>;

std::set<const void*> node_set(const std::vector<Tensor>& ts) {
    std::set<const void*> s;
    for (const Tensor& t : ts) s.insert(t.node().get());
    return s;
}

/// Shared stage loop: freezes everything except `trainables`, optimizes with
/// AdamW, logs metrics, and hard-fails if any frozen tensor changed.
std::vector<MetricsRow> run_stage(Model& model, const std::string& stage_name, int steps,
                                  int first_step, const BatchFn& draw, const RoutingMode& mode,
                                  const std::vector<Tensor>& trainables, Rng& rng,
                                  bool assert_uniform_g, double stage_lr) {
    model.freeze_all();
    for (Tensor t : trainables) t.set_requires_grad(true);

    const auto trainable_nodes = node_set(trainables);
    const NamedParams all = model.named_params();
    std::map<std::string, uint64_t> frozen_before;
    for (const auto& [name, t] : all)
        if (!trainable_nodes.count(t.node().get())) frozen_before[name] = tensor_checksum(t);

    AdamW opt(trainables, {.lr = stage_lr,
                           .beta1 = 0.9,
                           .beta2 = 0.999,
                           .eps = 1e-8,
                           .weight_decay = model.cfg.weight_decay});
    const LossConfig loss_cfg = model.loss_config();

    std::vector<MetricsRow> rows;
    rows.reserve(static_cast<size_t>(steps));
    Tape tape;
    for (int step = 0; step < steps; ++step) {
        Tape::Scope scope(tape);
        TrainBatch batch = draw(rng);
        Tensor latent;
        if (batch.cond.defined()) latent = model.e2l.forward_labels(batch.cond);

        RoutingTrace tr1, tr2;
        EpsModel closure = [&](const Tensor& z, const std::vector<int>& t_idx) {
            return model.predict_eps(z, t_idx, batch.ids, latent, mode, &tr1, &tr2);
        };
        LossBreakdown lb = total_loss(closure, batch.images, model.sched, loss_cfg, rng);
        const double total = lb.total.item();
        if (!std::isfinite(total))
            throw std::runtime_error("NaN/Inf loss in " + stage_name + " at step " +
                                     std::to_string(step) + " (latent=" + fmt_double(lb.latent) +
                                     ", spatial=" + fmt_double(lb.spatial) + ")");
        tape.backward(lb.total);
        opt.step();
        opt.zero_grad();
        tape.clear();

        if (assert_uniform_g && tr1.batch > 0) {
            const double uniform = 1.0 / tr1.num_experts;
            for (double g : tr1.g)
                check(g == uniform, stage_name + ": uniform-g wiring produced g != 1/e");
        }

        MetricsRow row;
        row.step = first_step + step;
        row.loss_latent = lb.latent;
        row.loss_spatial = lb.spatial;
        row.loss_total = total;
        row.g_entropy = tr1.batch > 0 ? 0.5 * (tr1.mean_entropy() + tr2.mean_entropy()) : 0.0;
        rows.push_back(row);
    }

    for (const auto& [name, t] : all) {
        if (trainable_nodes.count(t.node().get())) continue;
        if (tensor_checksum(t) != frozen_before.at(name))
            throw std::runtime_error(stage_name + ": frozen parameter mutated: " + name);
    }
    return rows;
}

Tensor batch_images(const std::vector<const std::vector<double>*>& imgs) {
    const int b = static_cast<int>(imgs.size());
    const int px = static_cast<int>(imgs[0]->size());
    std::vector<double> flat;
    flat.reserve(static_cast<size_t>(b * px));
    for (const auto* img : imgs) flat.insert(flat.end(), img->begin(), img->end());
    return Tensor::from_data({b, px}, std::move(flat));
}

Tensor batch_ids(const std::vector<std::array<double, 4>>& ids) {
    std::vector<double> flat;
    for (const auto& a : ids) flat.insert(flat.end(), a.begin(), a.end());
    return Tensor::from_data({static_cast<int>(ids.size()), 4}, std::move(flat));
}

Tensor batch_conds(const std::vector<std::vector<double>>& conds) {
    std::vector<double> flat;
    for (const auto& c : conds) flat.insert(flat.end(), c.begin(), c.end());
    return Tensor::from_data({static_cast<int>(conds.size()), kNumBasicEmotions},
                             std::move(flat));
}

BatchFn stage1_batches(const Dataset& data, int batch) {
    return [&data, batch](Rng& rng) {
        std::vector<const std::vector<double>*> imgs;
        std::vector<std::array<double, 4>> ids;
        for (int i = 0; i < batch; ++i) {
            const FaceSample& s =
                data.samples[static_cast<size_t>(rng.below(static_cast<int64_t>(data.samples.size())))];
            imgs.push_back(&s.image);
            ids.push_back(data.identities[static_cast<size_t>(s.identity_id)].vec());
        }
        return TrainBatch{batch_images(imgs), batch_ids(ids), Tensor()};
    };
}

BatchFn mns_batches(const Dataset& data, int batch, const SamplerConfig& sampler,
                    int target_emotion /* -1 = random per element */) {
    return [&data, batch, sampler, target_emotion](Rng& rng) {
        std::vector<std::vector<double>> imgs_owned;
        std::vector<std::array<double, 4>> ids;
        std::vector<std::vector<double>> conds;
        imgs_owned.reserve(static_cast<size_t>(batch));
        for (int i = 0; i < batch; ++i) {
            const int target = target_emotion >= 0
                                   ? target_emotion
                                   : static_cast<int>(rng.below(kNumBasicEmotions));
            DrawnSample s = sample_one(data, sampler, target, rng);
            imgs_owned.push_back(std::move(s.image));
            ids.push_back(s.identity);
            conds.push_back(std::move(s.condition));
        }
        std::vector<const std::vector<double>*> imgs;
        for (const auto& im : imgs_owned) imgs.push_back(&im);
        return TrainBatch{batch_images(imgs), batch_ids(ids), batch_conds(conds)};
    };
}

BatchFn labeled_batches(const Dataset& data, int batch, bool compounds) {
    return [&data, batch, compounds](Rng& rng) {
        std::vector<std::vector<double>> imgs_owned;
        std::vector<std::array<double, 4>> ids;
        std::vector<std::vector<double>> conds;
        for (int i = 0; i < batch; ++i) {
            DrawnSample s = sample_labeled(data, compounds, rng);
            imgs_owned.push_back(std::move(s.image));
            ids.push_back(s.identity);
            conds.push_back(std::move(s.condition));
        }
        std::vector<const std::vector<double>*> imgs;
        for (const auto& im : imgs_owned) imgs.push_back(&im);
        return TrainBatch{batch_images(imgs), batch_ids(ids), batch_conds(conds)};
    };
}

std::vector<Tensor> e2l_label_path(Model& model, bool with_bank_attn) {
    std::vector<Tensor> t = model.e2l.trainable_label_path();
    if (with_bank_attn) {
        t.push_back(model.e2l.bank);
        t.push_back(model.e2l.attn.wq);
        t.push_back(model.e2l.attn.wk);
        t.push_back(model.e2l.attn.wv);
        t.push_back(model.e2l.attn.wo);
    }
    return t;
}

}  // namespace

std::vector<MetricsRow> train_stage1(Model& model, const Dataset& data, Rng& rng) {
    // Emotion pathway inactive: no latent is built, and the zero-initialized
    // expert output projections keep the mixture an exact identity anyway.
    return run_stage(model, "stage1", model.cfg.steps_stage1, 0, stage1_batches(data, model.cfg.batch),
                     RoutingMode::soft(), model.denoiser.base_params(), rng, false,
                     model.cfg.lr);
}

std::vector<MetricsRow> train_stage2_experts(Model& model, const Dataset& data, Rng& rng,
                                             double p_noise_override) {
    check(model.wiring == EmotionWiring::Moee, "train_stage2_experts: mixture wiring required");
    SamplerConfig sampler{p_noise_override >= 0.0 ? p_noise_override : model.cfg.p_noise,
                          model.cfg.neutral_fraction};
    std::vector<MetricsRow> all_rows;
    for (int emo = 0; emo < model.cfg.num_experts; ++emo) {
        std::vector<Tensor> trainables = model.denoiser.expert_params(emo);
        if (model.cfg.train_e2l_stage2a)
            for (Tensor& t : e2l_label_path(model, false)) trainables.push_back(t);
        auto rows = run_stage(model, "stage2a[" + emotion_name(emo) + "]",
                              model.cfg.steps_stage2_expert,
                              emo * model.cfg.steps_stage2_expert,
                              mns_batches(data, model.cfg.batch, sampler, emo),
                              RoutingMode::hard(emo), trainables, rng, false,
                              model.cfg.lr_stage2);
        all_rows.insert(all_rows.end(), rows.begin(), rows.end());
    }
    return all_rows;
}

std::vector<MetricsRow> train_stage2_gating(Model& model, const Dataset& data, Rng& rng,
                                            bool uniform_g) {
    check(model.wiring == EmotionWiring::Moee, "train_stage2_gating: mixture wiring required");
    std::vector<Tensor> trainables;
    if (uniform_g) {
        // no-GS ablation: the global gate is out of the model function, so
        // only the local gates (and label path) train.
        trainables = {model.denoiser.site1.local_gate.phi, model.denoiser.site2.local_gate.phi};
    } else {
        trainables = model.denoiser.gate_params();
    }
    if (model.cfg.train_e2l_stage2b)
        for (Tensor& t : e2l_label_path(model, false)) trainables.push_back(t);
    const RoutingMode mode =
        uniform_g ? RoutingMode::uniform(model.cfg.num_experts) : RoutingMode::soft();
    return run_stage(model, uniform_g ? "stage2b[uniform_g]" : "stage2b",
                     model.cfg.steps_stage2_gating, 0,
                     labeled_batches(data, model.cfg.batch, true), mode, trainables, rng,
                     uniform_g, model.cfg.lr_stage2);
}

std::vector<MetricsRow> train_stage2_plain(Model& model, const Dataset& data, Rng& rng) {
    check(model.wiring == EmotionWiring::PlainBlock, "train_stage2_plain: plain wiring required");
    // Budget matched to the mixture pipeline: the masked-noisy pure phase
    // followed by the labeled pure+compound phase.
    const int mns_steps = model.cfg.num_experts * model.cfg.steps_stage2_expert;
    const int labeled_steps = model.cfg.steps_stage2_gating;
    SamplerConfig sampler{model.cfg.p_noise, model.cfg.neutral_fraction};

    std::vector<Tensor> trainables = model.denoiser.plain_emo_params();
    if (model.cfg.train_e2l_stage2a)
        for (Tensor& t : e2l_label_path(model, false)) trainables.push_back(t);

    auto rows = run_stage(model, "stage2_plain[mns]", mns_steps, 0,
                          mns_batches(data, model.cfg.batch, sampler, -1), RoutingMode::soft(),
                          trainables, rng, false, model.cfg.lr_stage2);
    auto rows2 = run_stage(model, "stage2_plain[labeled]", labeled_steps, mns_steps,
                           labeled_batches(data, model.cfg.batch, true), RoutingMode::soft(),
                           trainables, rng, false, model.cfg.lr_stage2);
    rows.insert(rows.end(), rows2.begin(), rows2.end());
    return rows;
}

// ---- evaluation -------------------------------------------------------------------

double eval_latent_separation(const Model& model, const EmotionSpec& spec, uint64_t seed,
                              int per_modality, double* cross_modal_distance) {
    NoGradGuard no_grad;
    Rng rng(derive_seed(seed, 55));
    std::vector<std::vector<std::vector<double>>> classes;
    double cross = 0.0;
    int cross_count = 0;
    for (int emo = 0; emo < kNumBasicEmotions; ++emo) {
        std::vector<EmotionCondition> conds;
        conds.push_back(EmotionCondition::pure_label(static_cast<Emotion>(emo)));
        std::vector<double> weights(kNumBasicEmotions, 0.0);
        weights[static_cast<size_t>(emo)] = 1.0;
        const auto anchor = spec.anchors[static_cast<size_t>(emo)].vec();
        for (int k = 0; k < per_modality; ++k) {
            conds.push_back(EmotionCondition::audio(synthetic_audio_feature(
                {anchor[0], anchor[1], anchor[2], anchor[3]}, model.cfg.e2l.d_audio_raw, rng)));
            conds.push_back(EmotionCondition::text(
                synthetic_text_feature(weights, model.cfg.e2l.d_text_raw, rng)));
        }
        std::vector<std::vector<double>> latents;
        for (const auto& c : conds) latents.push_back(model.e2l.forward({c}).values());
        // label vs mean-audio distance (alignment diagnostic, logged only)
        double d2 = 0.0;
        for (size_t i = 0; i < latents[0].size(); ++i) {
            const double d = latents[0][i] - latents[1][i];
            d2 += d * d;
        }
        cross += std::sqrt(d2);
        ++cross_count;
        classes.push_back(std::move(latents));
    }
    if (cross_modal_distance) *cross_modal_distance = cross / cross_count;
    return latent_separation(classes);
}

EvalReport evaluate(const Model& model, const EmotionSpec& spec, const EvalOptions& opts) {
    const auto t0 = std::chrono::steady_clock::now();
    NoGradGuard no_grad;
    EvalReport rep;
    rep.variant = model.wiring == EmotionWiring::PlainBlock
                      ? "wo_moee"
                      : (opts.uniform_g ? "wo_gs" : "full");

    const int px = model.cfg.image_hw * model.cfg.image_hw;
    // Single-emotion generation invokes the corresponding expert directly;
    // compounds need the cooperating soft mixture (uniform for the no-GS
    // ablation).
    const RoutingMode blend_mode = opts.uniform_g && model.wiring == EmotionWiring::Moee
                                       ? RoutingMode::uniform(model.cfg.num_experts)
                                       : RoutingMode::soft();

    Rng id_rng(derive_seed(opts.seed, 40));
    double entropy_acc = 0.0;
    int entropy_count = 0;
    int correct = 0, total = 0;
    double residual_acc = 0.0;
    double id_err_acc = 0.0;
    int id_probes = 0;
    InversionBudget id_budget;
    id_budget.max_evals = 9000;

    for (int emo = 0; emo < kNumBasicEmotions; ++emo) {
        const int n = opts.n_per_emotion;
        std::vector<std::array<double, 4>> ids;
        std::vector<IdentityParams> id_params;
        for (int i = 0; i < n; ++i) {
            IdentityParams ip{id_rng.uniform(0.50, 0.68), id_rng.uniform(0.50, 0.68),
                              id_rng.uniform(0.35, 0.65), id_rng.uniform(0.35, 0.65)};
            id_params.push_back(ip);
            ids.push_back(ip.vec());
        }
        std::vector<std::vector<double>> conds(static_cast<size_t>(n),
                                               std::vector<double>(kNumBasicEmotions, 0.0));
        for (auto& c : conds) c[static_cast<size_t>(emo)] = 1.0;

        Tensor id_tensor = batch_ids(ids);
        Tensor cond_tensor = batch_conds(conds);
        Tensor latent = model.e2l.forward_labels(cond_tensor);

        const RoutingMode pure_mode = model.wiring == EmotionWiring::Moee && !opts.uniform_g
                                          ? RoutingMode::hard(emo)
                                          : blend_mode;
        EpsModel closure = [&](const Tensor& z, const std::vector<int>& t_idx) {
            RoutingTrace tr1, tr2;
            Tensor eps = model.predict_eps(z, t_idx, id_tensor, latent, pure_mode, &tr1, &tr2);
            if (tr1.batch > 0) {
                entropy_acc += 0.5 * (tr1.mean_entropy() + tr2.mean_entropy());
                ++entropy_count;
            }
            return eps;
        };
        Rng noise_rng(derive_seed(opts.seed, 200 + static_cast<uint64_t>(emo)));
        Tensor images = ddim_sample(closure, {n, px}, model.sched, opts.ddim_steps,
                                    model.cfg.eta, noise_rng);

        for (int i = 0; i < n; ++i) {
            std::vector<double> img(images.values().begin() + i * px,
                                    images.values().begin() + (i + 1) * px);
            for (auto& v : img) v = std::min(1.0, std::max(0.0, v));
            const auto cls = emotion_classify(img, model.cfg.image_hw, model.cfg.image_hw,
                                              id_params[static_cast<size_t>(i)], spec);
            ++total;
            if (static_cast<int>(cls.label) == emo) ++correct;
            ++rep.confusion[static_cast<size_t>(emo)][static_cast<size_t>(cls.label)];

            const auto v = cls.inversion.emotion.vec();
            const auto a = spec.anchors[static_cast<size_t>(emo)].vec();
            double d2 = 0.0;
            for (size_t k = 0; k < 4; ++k) d2 += (v[k] - a[k]) * (v[k] - a[k]);
            residual_acc += std::sqrt(d2);

            if (i < opts.n_identity_probes) {
                const auto full_inv = infer_params_full(img, model.cfg.image_hw,
                                                        model.cfg.image_hw,
                                                        id_params[static_cast<size_t>(i)],
                                                        id_budget);
                const auto got = full_inv.identity.vec();
                const auto want = id_params[static_cast<size_t>(i)].vec();
                double linf = 0.0;
                for (size_t k = 0; k < 4; ++k)
                    linf = std::max(linf, std::fabs(got[k] - want[k]));
                id_err_acc += linf;
                ++id_probes;
            }
        }
        if (!opts.grid_dir.empty()) {
            std::vector<std::vector<double>> imgs;
            for (int i = 0; i < n; ++i) {
                std::vector<double> img(images.values().begin() + i * px,
                                        images.values().begin() + (i + 1) * px);
                for (auto& v : img) v = std::min(1.0, std::max(0.0, v));
                imgs.push_back(std::move(img));
            }
            write_image_grid(opts.grid_dir + "/samples_" + emotion_name(emo) + ".pgm", imgs,
                             model.cfg.image_hw, model.cfg.image_hw, 8);
        }
    }
    rep.pure_accuracy = static_cast<double>(correct) / total;
    rep.pure_residual_baseline = residual_acc / total;
    rep.identity_consistency = id_probes > 0 ? id_err_acc / id_probes : 0.0;

    // compound emotions
    int pass_total = 0, compound_total = 0;
    for (const auto& pair : compound_pairs()) {
        CompoundResult cr;
        cr.name = pair.name;
        const int n = opts.n_per_compound;
        std::vector<std::array<double, 4>> ids;
        std::vector<IdentityParams> id_params;
        for (int i = 0; i < n; ++i) {
            IdentityParams ip{id_rng.uniform(0.50, 0.68), id_rng.uniform(0.50, 0.68),
                              id_rng.uniform(0.35, 0.65), id_rng.uniform(0.35, 0.65)};
            id_params.push_back(ip);
            ids.push_back(ip.vec());
        }
        std::vector<std::vector<double>> conds(static_cast<size_t>(n),
                                               std::vector<double>(kNumBasicEmotions, 0.0));
        for (auto& c : conds) {
            c[static_cast<size_t>(pair.a)] = 0.5;
            c[static_cast<size_t>(pair.b)] = 0.5;
        }
        Tensor id_tensor = batch_ids(ids);
        Tensor latent = model.e2l.forward_labels(batch_conds(conds));
        EpsModel closure = [&](const Tensor& z, const std::vector<int>& t_idx) {
            return model.predict_eps(z, t_idx, id_tensor, latent, blend_mode);
        };
        Rng noise_rng(derive_seed(opts.seed, 300 + static_cast<uint64_t>(&pair - &compound_pairs()[0])));
        Tensor images = ddim_sample(closure, {n, px}, model.sched, opts.ddim_steps,
                                    model.cfg.eta, noise_rng);
        for (int i = 0; i < n; ++i) {
            std::vector<double> img(images.values().begin() + i * px,
                                    images.values().begin() + (i + 1) * px);
            for (auto& v : img) v = std::min(1.0, std::max(0.0, v));
            const auto inv = infer_params(img, model.cfg.image_hw, model.cfg.image_hw,
                                          id_params[static_cast<size_t>(i)]);
            const auto proj = project_onto_anchor_segment(inv.emotion, pair.a, pair.b, spec);
            cr.mean_coeff += proj.coeff / n;
            cr.mean_residual += proj.residual / n;
            const bool pass = proj.coeff > 0.0 && proj.coeff < 1.0 &&
                              proj.residual < rep.pure_residual_baseline;
            if (pass) ++pass_total;
            cr.pass_fraction += pass ? 1.0 / n : 0.0;
            ++compound_total;
        }
        rep.compounds.push_back(cr);
    }
    rep.compound_pass_fraction =
        compound_total > 0 ? static_cast<double>(pass_total) / compound_total : 0.0;

    rep.latent_separation =
        eval_latent_separation(model, spec, opts.seed, 6, &rep.cross_modal_distance);
    rep.mean_g_entropy = entropy_count > 0 ? entropy_acc / entropy_count : 0.0;
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

nlohmann::ordered_json EvalReport::to_json() const {
    nlohmann::ordered_json j;
    j["variant"] = variant;
    j["pure_accuracy"] = pure_accuracy;
    nlohmann::ordered_json conf = nlohmann::ordered_json::array();
    for (const auto& row : confusion) conf.push_back(row);
    j["confusion"] = conf;
    j["pure_residual_baseline"] = pure_residual_baseline;
    nlohmann::ordered_json comps = nlohmann::ordered_json::array();
    for (const auto& c : compounds) {
        nlohmann::ordered_json cj;
        cj["name"] = c.name;
        cj["mean_coeff"] = c.mean_coeff;
        cj["mean_residual"] = c.mean_residual;
        cj["pass_fraction"] = c.pass_fraction;
        comps.push_back(cj);
    }
    j["compounds"] = comps;
    j["compound_pass_fraction"] = compound_pass_fraction;
    j["latent_separation"] = latent_separation;
    j["cross_modal_distance"] = cross_modal_distance;
    j["identity_consistency"] = identity_consistency;
    j["mean_g_entropy"] = mean_g_entropy;
    j["seconds"] = seconds;
    return j;
}

// ---- experiment orchestration -------------------------------------------------------

void write_image_grid(const std::string& path, const std::vector<std::vector<double>>& images,
                      int H, int W, int per_row) {
    check(!images.empty(), "write_image_grid: no images");
    const int rows = (static_cast<int>(images.size()) + per_row - 1) / per_row;
    std::vector<double> grid(static_cast<size_t>(rows * H * per_row * W), 0.0);
    for (size_t i = 0; i < images.size(); ++i) {
        const int gr = static_cast<int>(i) / per_row;
        const int gc = static_cast<int>(i) % per_row;
        for (int r = 0; r < H; ++r)
            for (int c = 0; c < W; ++c)
                grid[static_cast<size_t>((gr * H + r) * (per_row * W) + gc * W + c)] =
                    images[i][static_cast<size_t>(r * W + c)];
    }
    write_pgm(path, grid, rows * H, per_row * W);
}

ExperimentResult run_experiment(const TrainConfig& cfg, bool with_ablations,
                                const EvalOptions& eval_opts) {
    ExperimentResult result;
    result.out_dir = cfg.out_dir;
    result.config_hash = config_hash(cfg);
    fs::create_directories(cfg.out_dir);

    DatasetConfig dcfg = cfg.dataset;
    dcfg.H = cfg.image_hw;
    dcfg.W = cfg.image_hw;
    dcfg.seed = derive_seed(cfg.seed, 1);
    const Dataset data = build_dataset(dcfg);

    auto eval_variant = [&](const Model& m, bool uniform_g, const std::string& name) {
        EvalOptions opts = eval_opts;
        opts.uniform_g = uniform_g;
        fs::create_directories(fs::path(cfg.out_dir) / name);
        opts.grid_dir = (fs::path(cfg.out_dir) / name).string();
        EvalReport rep = evaluate(m, data.spec, opts);
        rep.variant = name;
        result.reports[name] = rep;
    };

    // full pipeline
    Model model = Model::init(cfg, EmotionWiring::Moee);
    {
        Rng rng(derive_seed(cfg.seed, 3));
        write_metrics_csv((fs::path(cfg.out_dir) / "metrics_stage1.csv").string(),
                          train_stage1(model, data, rng));
        model.save((fs::path(cfg.out_dir) / "base.ckpt").string());
    }
    {
        Rng rng(derive_seed(cfg.seed, 4));
        write_metrics_csv((fs::path(cfg.out_dir) / "metrics_stage2_experts.csv").string(),
                          train_stage2_experts(model, data, rng));
        model.save((fs::path(cfg.out_dir) / "experts.ckpt").string());
    }
    {
        Rng rng(derive_seed(cfg.seed, 5));
        write_metrics_csv((fs::path(cfg.out_dir) / "metrics_stage2_gating.csv").string(),
                          train_stage2_gating(model, data, rng, false));
        model.save((fs::path(cfg.out_dir) / "full.ckpt").string());
    }
    eval_variant(model, false, "full");

    if (with_ablations) {
        {
            Model wo_gs = Model::init(cfg, EmotionWiring::Moee);
            wo_gs.load((fs::path(cfg.out_dir) / "experts.ckpt").string(), true);
            Rng rng(derive_seed(cfg.seed, 6));
            fs::create_directories(fs::path(cfg.out_dir) / "wo_gs");
            write_metrics_csv(
                (fs::path(cfg.out_dir) / "wo_gs" / "metrics_stage2_gating.csv").string(),
                train_stage2_gating(wo_gs, data, rng, true));
            wo_gs.save((fs::path(cfg.out_dir) / "wo_gs.ckpt").string());
            eval_variant(wo_gs, true, "wo_gs");
        }
        {
            Model wo_mns = Model::init(cfg, EmotionWiring::Moee);
            wo_mns.load((fs::path(cfg.out_dir) / "base.ckpt").string(), true);
            Rng rng_a(derive_seed(cfg.seed, 7));
            fs::create_directories(fs::path(cfg.out_dir) / "wo_mns");
            write_metrics_csv(
                (fs::path(cfg.out_dir) / "wo_mns" / "metrics_stage2_experts.csv").string(),
                train_stage2_experts(wo_mns, data, rng_a, 0.0));
            Rng rng_b(derive_seed(cfg.seed, 8));
            write_metrics_csv(
                (fs::path(cfg.out_dir) / "wo_mns" / "metrics_stage2_gating.csv").string(),
                train_stage2_gating(wo_mns, data, rng_b, false));
            wo_mns.save((fs::path(cfg.out_dir) / "wo_mns.ckpt").string());
            eval_variant(wo_mns, false, "wo_mns");
        }
        {
            Model wo_moee = Model::init(cfg, EmotionWiring::PlainBlock);
            wo_moee.load((fs::path(cfg.out_dir) / "base.ckpt").string(), false);
            Rng rng(derive_seed(cfg.seed, 10));
            fs::create_directories(fs::path(cfg.out_dir) / "wo_moee");
            write_metrics_csv(
                (fs::path(cfg.out_dir) / "wo_moee" / "metrics_stage2.csv").string(),
                train_stage2_plain(wo_moee, data, rng));
            wo_moee.save((fs::path(cfg.out_dir) / "wo_moee.ckpt").string());
            eval_variant(wo_moee, false, "wo_moee");
        }
    }

    nlohmann::ordered_json report;
    report["config"] = config_to_json(cfg);
    report["config_hash"] = result.config_hash;
    nlohmann::ordered_json variants;
    for (const auto& [name, rep] : result.reports) variants[name] = rep.to_json();
    report["variants"] = variants;
    std::ofstream os(fs::path(cfg.out_dir) / "report.json", std::ios::trunc);
    os << report.dump(2) << "\n";

    return result;
}

}  // namespace moee
