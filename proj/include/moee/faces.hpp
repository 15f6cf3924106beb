#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "moee/emotions.hpp"
#include "moee/rng.hpp"
#include "moee/tensor.hpp"

namespace moee {

/// Normalized emotion coordinates. All anchor arithmetic (compound blends,
/// classification, segment projection) happens in this space; neutral is the
/// zero vector. eye_openness in [-1,1] maps to the rendered eye opening
/// 0.6 + 0.4 * eye_openness, which spans the physical [0.2, 1.0] range.
struct EmotionParams {
    double mouth_curve = 0.0;   // [-1, 1]
    double mouth_open = 0.0;    // [0, 1]
    double brow_angle = 0.0;    // [-1, 1]
    double eye_openness = 0.0;  // [-1, 1]

    double eye_open_actual() const { return 0.6 + 0.4 * eye_openness; }
    std::array<double, 4> vec() const { return {mouth_curve, mouth_open, brow_angle, eye_openness}; }
    static EmotionParams from_vec(const std::array<double, 4>& v) {
        return {v[0], v[1], v[2], v[3]};
    }
    void validate() const;
};

/// Who the face is: feature proportions, each in [0.3, 0.7].
struct IdentityParams {
    double face_width = 0.5;
    double face_height = 0.5;
    double eye_spacing = 0.5;
    double eye_height = 0.5;

    std::array<double, 4> vec() const { return {face_width, face_height, eye_spacing, eye_height}; }
    static IdentityParams from_vec(const std::array<double, 4>& v) {
        return {v[0], v[1], v[2], v[3]};
    }
    void validate() const;
};

struct FaceParams {
    IdentityParams identity;
    EmotionParams emotion;
    void validate() const {
        identity.validate();
        emotion.validate();
    }
};

/// Half-open pixel rectangle rows [r0, r1) x cols [c0, c1).
struct MouthMask {
    int r0 = 0, r1 = 0, c0 = 0, c1 = 0;
    bool contains(int r, int c) const { return r >= r0 && r < r1 && c >= c0 && c < c1; }
};

/// Anchor table for the six basic emotions plus convex compound blends.
/// Anchors are pairwise separated by at least 0.5 in L2 (asserted by tests).
struct EmotionSpec {
    std::array<EmotionParams, kNumBasicEmotions> anchors;

    static EmotionSpec standard();
    const EmotionParams& anchor(Emotion e) const { return anchors[static_cast<size_t>(e)]; }
    EmotionParams compound(Emotion a, Emotion b, double alpha) const;
    double min_anchor_separation() const;
};

/// Deterministic anti-aliased rasterization of the parametric face: face
/// outline ellipse, two eyes, two brow strokes, one mouth arc. Every shape is
/// a smoothstep of its signed distance, so the image is smooth in the
/// parameters and exactly zero outside each shape's support.
std::vector<double> render_face(const FaceParams& params, int H, int W);

/// Coverage of the mouth stroke alone, same geometry as render_face
/// (diagnostics and geometry tests).
std::vector<double> render_mouth_layer(const FaceParams& params, int H, int W);

/// Mouth bounding rectangle covering the mouth stroke for every emotion
/// value at this identity (it depends on identity only).
MouthMask mouth_mask_for(const IdentityParams& identity, int H, int W);

/// Zeroes the pixels inside the mask.
void apply_mouth_mask(std::vector<double>& image, const MouthMask& mask, int W);

struct InversionBudget {
    int max_evals = 5200;
    double min_step = 1e-3;
    double converged_mse = 0.02;
};

/// Recovered parameters from a rendered (possibly noisy) image via bounded
/// cyclic coordinate search on pixel MSE. `converged == false` flags inputs
/// the renderer family cannot explain (never silent garbage).
struct InversionResult {
    EmotionParams emotion;
    IdentityParams identity;
    double mse = 0.0;
    bool converged = false;
    int evals = 0;
};

/// Emotion-only inversion with the identity held at the prior.
InversionResult infer_params(const std::vector<double>& image, int H, int W,
                             const IdentityParams& identity_prior,
                             const InversionBudget& budget = {});
/// Joint identity+emotion inversion, identity initialized at the prior.
InversionResult infer_params_full(const std::vector<double>& image, int H, int W,
                                  const IdentityParams& identity_prior,
                                  const InversionBudget& budget = {});

struct Classification {
    Emotion label = Emotion::Angry;
    double confidence = 0.0;  // margin between best and second-best distance
    InversionResult inversion;
};

Classification emotion_classify(const std::vector<double>& image, int H, int W,
                                const IdentityParams& identity_prior, const EmotionSpec& spec,
                                const InversionBudget& budget = {});

/// Projection of an inferred emotion point onto the segment between two
/// anchors: blend coefficient along the segment plus off-segment residual.
struct SegmentProjection {
    double coeff = 0.0;
    double residual = 0.0;
};
SegmentProjection project_onto_anchor_segment(const EmotionParams& p, Emotion a, Emotion b,
                                              const EmotionSpec& spec);

// ---- dataset -----------------------------------------------------------------

/// One synthetic sample. kind: 0..5 pure emotion, 6 neutral, 7+k compound k.
struct FaceSample {
    std::vector<double> image;
    FaceParams params;
    std::vector<double> label_weights;  // 6 entries; zeros for neutral
    bool is_neutral = false;
    int compound_index = -1;  // >= 0 for compound samples
    int identity_id = 0;
    MouthMask mask;
};

struct DatasetConfig {
    int H = 16, W = 16;
    int n_identities = 32;
    int per_emotion = 2;   // jittered instances per (identity, pure emotion)
    int per_compound = 2;
    int per_neutral = 2;
    double emotion_jitter = 0.08;
    double compound_alpha = 0.5;
    bool include_compounds = true;  // off for the reduced-dataset ablation
    uint64_t seed = 1;
};

struct Dataset {
    DatasetConfig cfg;
    EmotionSpec spec;
    std::vector<FaceSample> samples;
    std::vector<IdentityParams> identities;
    // index lists into samples
    std::vector<std::array<std::vector<int>, kNumBasicEmotions>> pure_by_identity;
    std::vector<std::vector<int>> neutral_by_identity;
    std::vector<std::array<std::vector<int>, 4>> compound_by_identity;

    int pixels() const { return cfg.H * cfg.W; }
};

/// Builds the full synthetic dataset; every identity gets all six pure
/// emotions and neutral (contract-checked), plus the four compounds unless
/// disabled.
Dataset build_dataset(const DatasetConfig& cfg);

// ---- masked noisy emotion sampling --------------------------------------------

struct SamplerConfig {
    double p_noise = 0.3;        // probability of a cross-emotion/neutral substitute
    double neutral_fraction = 0.5;  // share of substitutes that are neutral
};

struct DrawnSample {
    std::vector<double> image;           // masked when mask_applied
    std::vector<double> condition;       // 6 label weights (always the target)
    std::array<double, 4> identity;      // conditioning identity
    bool mask_applied = false;
};

/// Draws one training sample for a target emotion: with probability
/// 1 - p_noise the identity's own target-emotion sample; otherwise a
/// different-emotion or neutral sample of the same identity with the mouth
/// region zeroed, still conditioned on the target emotion.
DrawnSample sample_one(const Dataset& data, const SamplerConfig& cfg, int target_emotion,
                       Rng& rng);

/// Plain draw of a pure or compound sample (stage-2 gating training):
/// condition equals the sample's own label weights.
DrawnSample sample_labeled(const Dataset& data, bool compound_ok, Rng& rng);

// ---- file formats --------------------------------------------------------------

void write_pgm(const std::string& path, const std::vector<double>& image, int H, int W);
std::vector<double> read_pgm(const std::string& path, int& H, int& W);

/// Line-delimited JSON manifest + one PGM per sample.
void write_dataset(const Dataset& data, const std::string& dir);

}  // namespace moee
