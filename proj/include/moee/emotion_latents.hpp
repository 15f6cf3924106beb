#pragma once

#include <vector>

#include "moee/attention.hpp"
#include "moee/emotions.hpp"

namespace moee {

/// One emotion conditioning signal. Labels are weight vectors over the six
/// basic emotions (one-hot for pure, convex combination for compound); text
/// and audio are synthetic raw feature vectors fed through frozen stub
/// encoders standing in for pretrained text/audio models.
struct EmotionCondition {
    enum class Modality { Label, Text, Audio };
    Modality modality = Modality::Label;
    std::vector<double> payload;

    static EmotionCondition label(std::vector<double> weights);
    static EmotionCondition pure_label(Emotion e);
    static EmotionCondition compound_label(Emotion a, Emotion b, double alpha);
    static EmotionCondition text(std::vector<double> feature);
    static EmotionCondition audio(std::vector<double> feature);
};

struct EmotionLatentsConfig {
    int t_emotion = 8;    // output tokens
    int c_emotion = 64;   // output channels (paper-faithful: 512)
    int c_bank = 96;      // embedding-bank channels (paper-faithful: 768)
    int bank_rows = 64;
    int c_query = 32;
    int d_attn = 32;
    int mlp_hidden = 32;
    int d_feat = 32;        // label-encoder output
    int d_text_raw = 16;    // bag-of-keyword vector
    int d_audio_raw = 8;    // anchor params + nuisance dims
    int d_feat_text = 24;   // frozen stub outputs
    int d_feat_audio = 24;
};

/// Maps heterogeneous emotion conditions into a fixed-shape latent
/// (b, t_emotion, c_emotion): per-modality encoders -> per-modality FC into
/// t_emotion query tokens -> cross-attention over a learnable embedding bank
/// serving as keys and values.
struct EmotionToLatents {
    EmotionLatentsConfig cfg;

    // label encoder: two-layer MLP, trainable
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    // frozen seeded stub projections for text/audio
    Tensor text_stub, audio_stub;
    // per-modality query projections (d_feat_mod -> t_emotion * c_query)
    Tensor fc_label_w, fc_label_b;
    Tensor fc_text_w, fc_text_b;
    Tensor fc_audio_w, fc_audio_b;
    // learnable embeddings used as keys and values
    Tensor bank;  // [bank_rows, c_bank]
    AttentionParams attn;  // c_query -> d_attn; c_bank -> d_attn; d_attn -> c_emotion

    static EmotionToLatents init(const EmotionLatentsConfig& cfg, Rng& rng);

    /// Modality encoder output for a batch of same-modality conditions.
    Tensor encode(const std::vector<EmotionCondition>& conds) const;
    /// Encoder features -> t_emotion query tokens [b, t_emotion, c_query].
    Tensor to_query(const Tensor& features, EmotionCondition::Modality m) const;
    /// Query tokens -> emotion latent [b, t_emotion, c_emotion].
    Tensor to_emotion_latent(const Tensor& query) const;

    /// Full pipeline for a batch of conditions (modalities may be mixed).
    Tensor forward(const std::vector<EmotionCondition>& conds) const;
    /// Fast path: label weights [b, 6] -> latent.
    Tensor forward_labels(const Tensor& weights) const;

    void collect(NamedParams& out, const std::string& prefix) const;
    /// Label path + bank + attention; stubs stay frozen always.
    void set_trainable(bool v);

    std::vector<Tensor> trainable_label_path() const;
};

/// Mean pairwise inter-class centroid distance divided by mean intra-class
/// distance to the own-class centroid, over flattened latents. Zero intra
/// spread returns kSeparationCap (the documented finite stand-in for the
/// infinite ratio).
constexpr double kSeparationCap = 1e6;
double latent_separation(const std::vector<std::vector<std::vector<double>>>& class_samples);

/// Synthetic raw modality features (dataset/eval plumbing).
/// Text: bag-of-emotion-keyword counts driven by the label weights plus
/// filler-word noise. Audio: emotion anchor parameters plus noise in the
/// leading dims, nuisance prosody dims after.
std::vector<double> synthetic_text_feature(const std::vector<double>& label_weights, int d_raw,
                                           Rng& rng);
std::vector<double> synthetic_audio_feature(const std::vector<double>& anchor_params, int d_raw,
                                            Rng& rng);

/// Reproducible eval sets: line-delimited JSON records
/// {"modality": "label"|"text"|"audio", "payload": [...]}.
void write_condition_file(const std::string& path, const std::vector<EmotionCondition>& conds);
std::vector<EmotionCondition> read_condition_file(const std::string& path);

}  // namespace moee
