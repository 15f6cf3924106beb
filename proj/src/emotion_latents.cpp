#include "moee/emotion_latents.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

namespace moee {

EmotionCondition EmotionCondition::label(std::vector<double> weights) {
    check(static_cast<int>(weights.size()) == kNumBasicEmotions,
          "label condition needs " + std::to_string(kNumBasicEmotions) + " weights");
    double sum = 0.0;
    for (double w : weights) {
        check(w >= 0.0, "label weights must be nonnegative");
        sum += w;
    }
    check(std::fabs(sum - 1.0) <= 1e-6,
          "label weights must sum to 1, got " + std::to_string(sum));
    return {Modality::Label, std::move(weights)};
}

EmotionCondition EmotionCondition::pure_label(Emotion e) {
    std::vector<double> w(kNumBasicEmotions, 0.0);
    w[static_cast<size_t>(e)] = 1.0;
    return {Modality::Label, std::move(w)};
}

EmotionCondition EmotionCondition::compound_label(Emotion a, Emotion b, double alpha) {
    check(alpha >= 0.0 && alpha <= 1.0, "compound alpha must be in [0,1]");
    std::vector<double> w(kNumBasicEmotions, 0.0);
    w[static_cast<size_t>(a)] += alpha;
    w[static_cast<size_t>(b)] += 1.0 - alpha;
    return {Modality::Label, std::move(w)};
}

EmotionCondition EmotionCondition::text(std::vector<double> feature) {
    return {Modality::Text, std::move(feature)};
}

EmotionCondition EmotionCondition::audio(std::vector<double> feature) {
    return {Modality::Audio, std::move(feature)};
}

EmotionToLatents EmotionToLatents::init(const EmotionLatentsConfig& cfg, Rng& rng) {
    check(cfg.bank_rows >= cfg.t_emotion,
          "embedding bank must have at least t_emotion rows");
    EmotionToLatents m;
    m.cfg = cfg;
    m.mlp_w1 = Tensor::glorot(kNumBasicEmotions, cfg.mlp_hidden, rng).set_requires_grad(true);
    m.mlp_b1 = Tensor::zeros({cfg.mlp_hidden}).set_requires_grad(true);
    m.mlp_w2 = Tensor::glorot(cfg.mlp_hidden, cfg.d_feat, rng).set_requires_grad(true);
    m.mlp_b2 = Tensor::zeros({cfg.d_feat}).set_requires_grad(true);

    // Frozen stand-ins for the pretrained text/audio encoders; seeded once,
    // never trained.
    m.text_stub = Tensor::glorot(cfg.d_text_raw, cfg.d_feat_text, rng);
    m.audio_stub = Tensor::glorot(cfg.d_audio_raw, cfg.d_feat_audio, rng);

    const int qdim = cfg.t_emotion * cfg.c_query;
    m.fc_label_w = Tensor::glorot(cfg.d_feat, qdim, rng).set_requires_grad(true);
    m.fc_label_b = Tensor::zeros({qdim}).set_requires_grad(true);
    m.fc_text_w = Tensor::glorot(cfg.d_feat_text, qdim, rng).set_requires_grad(true);
    m.fc_text_b = Tensor::zeros({qdim}).set_requires_grad(true);
    m.fc_audio_w = Tensor::glorot(cfg.d_feat_audio, qdim, rng).set_requires_grad(true);
    m.fc_audio_b = Tensor::zeros({qdim}).set_requires_grad(true);

    // Unit-variance embeddings keep the initial attention over the bank
    // meaningfully non-uniform, so different conditions produce different
    // latents from the first step.
    m.bank = Tensor::randn({cfg.bank_rows, cfg.c_bank}, rng, 1.0).set_requires_grad(true);
    m.attn = AttentionParams::init(cfg.c_query, cfg.c_bank, cfg.d_attn, cfg.c_emotion, rng);
    // Sharpened query projection: near-uniform attention over the bank at
    // init would collapse all conditions onto the bank mean, starving the
    // conditioning pathway of gradient.
    for (double& v : m.attn.wq.mutable_values()) v *= 3.5;
    return m;
}

Tensor EmotionToLatents::encode(const std::vector<EmotionCondition>& conds) const {
    check(!conds.empty(), "encode: empty condition batch");
    const auto modality = conds[0].modality;
    for (const auto& c : conds)
        check(c.modality == modality, "encode: mixed modalities in one batch");

    const int b = static_cast<int>(conds.size());
    int d_raw = 0;
    switch (modality) {
        case EmotionCondition::Modality::Label: d_raw = kNumBasicEmotions; break;
        case EmotionCondition::Modality::Text: d_raw = cfg.d_text_raw; break;
        case EmotionCondition::Modality::Audio: d_raw = cfg.d_audio_raw; break;
    }
    std::vector<double> flat;
    flat.reserve(static_cast<size_t>(b * d_raw));
    for (const auto& c : conds) {
        check(static_cast<int>(c.payload.size()) == d_raw,
              "encode: condition payload has " + std::to_string(c.payload.size()) +
                  " dims, expected " + std::to_string(d_raw));
        for (double v : c.payload) {
            check(std::isfinite(v), "encode: non-finite condition payload");
            flat.push_back(v);
        }
    }
    Tensor raw = Tensor::from_data({b, d_raw}, std::move(flat));

    switch (modality) {
        case EmotionCondition::Modality::Label: {
            Tensor h = tanh_t(add(matmul(raw, mlp_w1), mlp_b1));
            return add(matmul(h, mlp_w2), mlp_b2);
        }
        case EmotionCondition::Modality::Text: return matmul(raw, text_stub);
        case EmotionCondition::Modality::Audio: return matmul(raw, audio_stub);
    }
    throw ContractError("encode: unreachable modality");
}

Tensor EmotionToLatents::to_query(const Tensor& features, EmotionCondition::Modality m) const {
    const Tensor* w = nullptr;
    const Tensor* bb = nullptr;
    switch (m) {
        case EmotionCondition::Modality::Label: w = &fc_label_w; bb = &fc_label_b; break;
        case EmotionCondition::Modality::Text: w = &fc_text_w; bb = &fc_text_b; break;
        case EmotionCondition::Modality::Audio: w = &fc_audio_w; bb = &fc_audio_b; break;
    }
    if (features.dim(1) != w->dim(0))
        throw ContractError("to_query: feature dim " + shape_str(features.shape()) +
                            " does not match projection " + shape_str(w->shape()));
    const int b = features.dim(0);
    // Project to t_emotion * c_query and reshape into t_emotion distinct
    // query tokens (tiling one token would collapse all outputs).
    Tensor q = add(matmul(features, *w), *bb);
    return reshape(q, {b, cfg.t_emotion, cfg.c_query});
}

Tensor EmotionToLatents::to_emotion_latent(const Tensor& query) const {
    check(query.rank() == 3 && query.dim(1) == cfg.t_emotion && query.dim(2) == cfg.c_query,
          "to_emotion_latent: bad query shape " + shape_str(query.shape()));
    return cross_attention(query, bank, attn);  // bank broadcast over batch
}

Tensor EmotionToLatents::forward(const std::vector<EmotionCondition>& conds) const {
    check(!conds.empty(), "forward: empty condition batch");
    // Group contiguous same-modality runs; typical batches are single-modality.
    std::vector<Tensor> parts;
    size_t i = 0;
    while (i < conds.size()) {
        size_t j = i + 1;
        while (j < conds.size() && conds[j].modality == conds[i].modality) ++j;
        std::vector<EmotionCondition> run(conds.begin() + static_cast<long>(i),
                                          conds.begin() + static_cast<long>(j));
        Tensor feats = encode(run);
        parts.push_back(to_emotion_latent(to_query(feats, conds[i].modality)));
        i = j;
    }
    if (parts.size() == 1) return parts[0];
    return concat(parts, 0);
}

Tensor EmotionToLatents::forward_labels(const Tensor& weights) const {
    check(weights.rank() == 2 && weights.dim(1) == kNumBasicEmotions,
          "forward_labels: expected [b,6] weights, got " + shape_str(weights.shape()));
    Tensor h = tanh_t(add(matmul(weights, mlp_w1), mlp_b1));
    Tensor feats = add(matmul(h, mlp_w2), mlp_b2);
    return to_emotion_latent(to_query(feats, EmotionCondition::Modality::Label));
}

void EmotionToLatents::collect(NamedParams& out, const std::string& prefix) const {
    put_param(out, prefix + ".mlp_w1", mlp_w1);
    put_param(out, prefix + ".mlp_b1", mlp_b1);
    put_param(out, prefix + ".mlp_w2", mlp_w2);
    put_param(out, prefix + ".mlp_b2", mlp_b2);
    put_param(out, prefix + ".text_stub", text_stub);
    put_param(out, prefix + ".audio_stub", audio_stub);
    put_param(out, prefix + ".fc_label_w", fc_label_w);
    put_param(out, prefix + ".fc_label_b", fc_label_b);
    put_param(out, prefix + ".fc_text_w", fc_text_w);
    put_param(out, prefix + ".fc_text_b", fc_text_b);
    put_param(out, prefix + ".fc_audio_w", fc_audio_w);
    put_param(out, prefix + ".fc_audio_b", fc_audio_b);
    put_param(out, prefix + ".bank", bank);
    attn.collect(out, prefix + ".attn");
}

void EmotionToLatents::set_trainable(bool v) {
    for (Tensor* t : {&mlp_w1, &mlp_b1, &mlp_w2, &mlp_b2, &fc_label_w, &fc_label_b, &fc_text_w,
                      &fc_text_b, &fc_audio_w, &fc_audio_b, &bank})
        t->set_requires_grad(v);
    attn.set_trainable(v);
    // stubs stay frozen
}

std::vector<Tensor> EmotionToLatents::trainable_label_path() const {
    return {mlp_w1, mlp_b1, mlp_w2, mlp_b2, fc_label_w, fc_label_b};
}

double latent_separation(const std::vector<std::vector<std::vector<double>>>& class_samples) {
    const size_t k = class_samples.size();
    check(k >= 2, "latent_separation: need at least 2 classes");
    size_t dim = 0;
    for (const auto& cls : class_samples) {
        check(!cls.empty(), "latent_separation: empty class");
        for (const auto& s : cls) {
            if (dim == 0) dim = s.size();
            check(s.size() == dim, "latent_separation: inconsistent latent dims");
        }
    }

    std::vector<std::vector<double>> centroids(k, std::vector<double>(dim, 0.0));
    for (size_t c = 0; c < k; ++c) {
        for (const auto& s : class_samples[c])
            for (size_t i = 0; i < dim; ++i) centroids[c][i] += s[i];
        for (auto& v : centroids[c]) v /= static_cast<double>(class_samples[c].size());
    }

    double inter = 0.0;
    int pairs = 0;
    for (size_t a = 0; a < k; ++a)
        for (size_t b = a + 1; b < k; ++b) {
            double d2 = 0.0;
            for (size_t i = 0; i < dim; ++i) {
                const double d = centroids[a][i] - centroids[b][i];
                d2 += d * d;
            }
            inter += std::sqrt(d2);
            ++pairs;
        }
    inter /= pairs;

    double intra = 0.0;
    int count = 0;
    for (size_t c = 0; c < k; ++c)
        for (const auto& s : class_samples[c]) {
            double d2 = 0.0;
            for (size_t i = 0; i < dim; ++i) {
                const double d = s[i] - centroids[c][i];
                d2 += d * d;
            }
            intra += std::sqrt(d2);
            ++count;
        }
    intra /= count;

    if (intra <= 0.0) return kSeparationCap;
    return std::min(inter / intra, kSeparationCap);
}

std::vector<double> synthetic_text_feature(const std::vector<double>& label_weights, int d_raw,
                                           Rng& rng) {
    check(static_cast<int>(label_weights.size()) == kNumBasicEmotions,
          "synthetic_text_feature: need 6 label weights");
    check(d_raw > kNumBasicEmotions, "synthetic_text_feature: d_raw too small");
    std::vector<double> v(static_cast<size_t>(d_raw), 0.0);
    // Emotion keyword counts scale with the label weight; weak filler noise
    // in the remaining slots mimics non-emotional words.
    for (int i = 0; i < kNumBasicEmotions; ++i)
        v[static_cast<size_t>(i)] =
            label_weights[static_cast<size_t>(i)] * (2.0 + rng.uniform(0.0, 1.0));
    for (int i = kNumBasicEmotions; i < d_raw; ++i)
        v[static_cast<size_t>(i)] = rng.uniform(0.0, 0.3);
    return v;
}

std::vector<double> synthetic_audio_feature(const std::vector<double>& anchor_params, int d_raw,
                                            Rng& rng) {
    check(static_cast<int>(anchor_params.size()) <= d_raw,
          "synthetic_audio_feature: d_raw smaller than anchor vector");
    std::vector<double> v(static_cast<size_t>(d_raw), 0.0);
    for (size_t i = 0; i < anchor_params.size(); ++i)
        v[i] = anchor_params[i] + 0.15 * rng.gaussian();
    for (size_t i = anchor_params.size(); i < static_cast<size_t>(d_raw); ++i)
        v[i] = 0.3 * rng.gaussian();  // nuisance prosody dims
    return v;
}



void write_condition_file(const std::string& path, const std::vector<EmotionCondition>& conds) {
    std::ofstream os(path, std::ios::trunc);
    check(os.good(), "write_condition_file: cannot open " + path);
    for (const auto& c : conds) {
        nlohmann::ordered_json rec;
        switch (c.modality) {
            case EmotionCondition::Modality::Label: rec["modality"] = "label"; break;
            case EmotionCondition::Modality::Text: rec["modality"] = "text"; break;
            case EmotionCondition::Modality::Audio: rec["modality"] = "audio"; break;
        }
        rec["payload"] = c.payload;
        os << rec.dump() << "\n";
    }
    check(os.good(), "write_condition_file: write failed for " + path);
}

std::vector<EmotionCondition> read_condition_file(const std::string& path) {
    std::ifstream is(path);
    check(is.good(), "read_condition_file: cannot open " + path);
    std::vector<EmotionCondition> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        nlohmann::json rec = nlohmann::json::parse(line);
        const std::string modality = rec.at("modality").get<std::string>();
        std::vector<double> payload = rec.at("payload").get<std::vector<double>>();
        if (modality == "label") {
            out.push_back(EmotionCondition::label(std::move(payload)));
        } else if (modality == "text") {
            out.push_back(EmotionCondition::text(std::move(payload)));
        } else if (modality == "audio") {
            out.push_back(EmotionCondition::audio(std::move(payload)));
        } else {
            throw ContractError("read_condition_file: unknown modality '" + modality + "'");
        }
    }
    return out;
}

}  // namespace moee
