#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "moee/faces.hpp"
#include "testutil.hpp"

using namespace moee;
using namespace moee::testutil;

namespace {

// Faces drawn from the dataset identity envelope (the domain where the
// parameter oracle is calibrated).
FaceParams sample_face(Rng& rng, const EmotionSpec& spec, int emotion, double jitter = 0.08) {
    FaceParams p;
    p.identity.face_width = rng.uniform(0.50, 0.68);
    p.identity.face_height = rng.uniform(0.50, 0.68);
    p.identity.eye_spacing = rng.uniform(0.35, 0.65);
    p.identity.eye_height = rng.uniform(0.35, 0.65);
    auto v = spec.anchors[static_cast<size_t>(emotion)].vec();
    v[0] = std::clamp(v[0] + jitter * rng.uniform(-1, 1), -1.0, 1.0);
    v[1] = std::clamp(v[1] + jitter * rng.uniform(-1, 1), 0.0, 1.0);
    v[2] = std::clamp(v[2] + jitter * rng.uniform(-1, 1), -1.0, 1.0);
    v[3] = std::clamp(v[3] + jitter * rng.uniform(-1, 1), -1.0, 1.0);
    p.emotion = EmotionParams::from_vec(v);
    return p;
}

double linf_emotion(const EmotionParams& a, const EmotionParams& b) {
    double m = 0.0;
    const auto va = a.vec(), vb = b.vec();
    for (size_t i = 0; i < 4; ++i) m = std::max(m, std::fabs(va[i] - vb[i]));
    return m;
}

}  // namespace

TEST_CASE("renderer: determinism, range, parameter validation") {
    FaceParams p;
    p.identity = {0.5, 0.55, 0.5, 0.5};
    p.emotion = {0.4, 0.3, -0.2, 0.1};
    auto a = render_face(p, 16, 16);
    auto b = render_face(p, 16, 16);
    CHECK(a == b);
    for (double v : a) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    double mass = 0.0;
    for (double v : a) mass += v;
    CHECK(mass > 1.0);  // something was drawn

    FaceParams bad = p;
    bad.identity.face_width = 0.9;
    CHECK_THROWS_AS(render_face(bad, 16, 16), ContractError);
    bad = p;
    bad.emotion.mouth_open = 1.4;
    CHECK_THROWS_AS(render_face(bad, 16, 16), ContractError);
}

TEST_CASE("anchors: pairwise separation >= 0.5; compounds are convex blends") {
    EmotionSpec spec = EmotionSpec::standard();
    CHECK(spec.min_anchor_separation() >= 0.5);

    EmotionParams c = spec.compound(Emotion::Happy, Emotion::Surprised, 0.25);
    auto va = spec.anchor(Emotion::Happy).vec();
    auto vb = spec.anchor(Emotion::Surprised).vec();
    auto vc = c.vec();
    for (size_t i = 0; i < 4; ++i)
        CHECK(vc[i] == doctest::Approx(0.25 * va[i] + 0.75 * vb[i]).epsilon(1e-15));

    // neutral is the zero vector
    EmotionParams neutral;
    for (double v : neutral.vec()) CHECK(v == 0.0);
    CHECK(neutral.eye_open_actual() == doctest::Approx(0.6));
}

TEST_CASE("mouth layer: flat thin stroke at rest, mirror symmetry under curve flip") {
    // identity chosen so the mouth centerline lands on a half-pixel row:
    // my = 8 + 4.16 * fh = 10.5 for fh = 2.5/4.16
    FaceParams p;
    p.identity = {0.55, 2.5 / 4.16, 0.5, 0.5};
    p.emotion = {0.0, 0.0, 0.0, 0.0};
    const int H = 16, W = 16;

    auto flat = render_mouth_layer(p, H, W);
    // all mouth pixels hug the centerline row band
    const double my = 10.5;
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c)
            if (flat[static_cast<size_t>(r * W + c)] > 0.0)
                CHECK(std::fabs((r + 0.5) - my) < 1.5);

    FaceParams up = p, down = p;
    up.emotion.mouth_curve = 0.7;
    up.emotion.mouth_open = 0.4;
    down.emotion.mouth_curve = -0.7;
    down.emotion.mouth_open = 0.4;
    auto iu = render_mouth_layer(up, H, W);
    auto id = render_mouth_layer(down, H, W);
    // mirror row about y = 10.5: r' = 20 - r
    for (int r = 5; r < 16; ++r) {
        const int rm = 20 - r;
        if (rm < 0 || rm >= H) continue;
        for (int c = 0; c < W; ++c)
            CHECK(std::fabs(iu[static_cast<size_t>(r * W + c)] -
                            id[static_cast<size_t>(rm * W + c)]) < 1e-9);
    }
}

TEST_CASE("mouth mask contains the stroke for every emotion extreme") {
    Rng rng(31);
    for (int trial = 0; trial < 8; ++trial) {
        IdentityParams idp{rng.uniform(0.32, 0.68), rng.uniform(0.32, 0.68),
                           rng.uniform(0.32, 0.68), rng.uniform(0.32, 0.68)};
        const MouthMask mask = mouth_mask_for(idp, 16, 16);
        CHECK(mask.r0 >= 0);
        CHECK(mask.r1 <= 16);
        CHECK(mask.c0 >= 0);
        CHECK(mask.c1 <= 16);
        CHECK(mask.r1 > mask.r0);
        for (double mc : {-1.0, 0.0, 1.0})
            for (double mo : {0.0, 1.0}) {
                FaceParams p{idp, {mc, mo, 0.0, 0.0}};
                auto layer = render_mouth_layer(p, 16, 16);
                for (int r = 0; r < 16; ++r)
                    for (int c = 0; c < 16; ++c)
                        if (layer[static_cast<size_t>(r * 16 + c)] > 0.0)
                            CHECK(mask.contains(r, c));
            }
    }
}

TEST_CASE("mouth_open changes pixels only inside the mouth mask") {
    Rng rng(32);
    for (int trial = 0; trial < 6; ++trial) {
        IdentityParams idp{rng.uniform(0.32, 0.68), rng.uniform(0.32, 0.68),
                           rng.uniform(0.32, 0.68), rng.uniform(0.32, 0.68)};
        const double mc = rng.uniform(-1, 1), ba = rng.uniform(-1, 1), eo = rng.uniform(-1, 1);
        FaceParams closed{idp, {mc, 0.0, ba, eo}};
        FaceParams open{idp, {mc, 1.0, ba, eo}};
        auto a = render_face(closed, 16, 16);
        auto b = render_face(open, 16, 16);
        const MouthMask mask = mouth_mask_for(idp, 16, 16);
        bool differs_inside = false;
        for (int r = 0; r < 16; ++r)
            for (int c = 0; c < 16; ++c) {
                const double d = std::fabs(a[static_cast<size_t>(r * 16 + c)] -
                                           b[static_cast<size_t>(r * 16 + c)]);
                if (mask.contains(r, c)) {
                    differs_inside = differs_inside || d > 0.0;
                } else {
                    CHECK(d == 0.0);
                }
            }
        CHECK(differs_inside);
    }
}

TEST_CASE("renderer is smooth in its parameters (finite differences exist)") {
    FaceParams p;
    p.identity = {0.5, 0.5, 0.5, 0.5};
    p.emotion = {0.3, 0.4, -0.3, 0.2};
    const double eps = 1e-6;
    auto base = render_face(p, 16, 16);
    FaceParams q = p;
    q.emotion.mouth_curve += eps;
    auto shifted = render_face(q, 16, 16);
    double grad_mag = 0.0;
    for (size_t i = 0; i < base.size(); ++i)
        grad_mag += std::fabs(shifted[i] - base[i]) / eps;
    CHECK(grad_mag > 0.01);
    CHECK(std::isfinite(grad_mag));
}

TEST_CASE("round-trip: clean renders recover emotion params within 0.05 Linf (100 faces)") {
    Rng rng(33);
    EmotionSpec spec = EmotionSpec::standard();
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
        const int emo = static_cast<int>(rng.below(kNumBasicEmotions));
        FaceParams p = sample_face(rng, spec, emo);
        auto img = render_face(p, 16, 16);
        auto inv = infer_params(img, 16, 16, p.identity);
        CHECK(inv.converged);
        worst = std::max(worst, linf_emotion(inv.emotion, p.emotion));
    }
    CHECK(worst <= 0.05);
}

TEST_CASE("round-trip under gaussian pixel noise sigma = 0.05") {
    // Calibrated over 200 random faces: the typical (median) error sits well
    // under 0.1 Linf; individual draws have a heavier tail, bounded here.
    Rng rng(34);
    EmotionSpec spec = EmotionSpec::standard();
    std::vector<double> errs;
    for (int i = 0; i < 20; ++i) {
        const int emo = static_cast<int>(rng.below(kNumBasicEmotions));
        FaceParams p = sample_face(rng, spec, emo);
        auto img = render_face(p, 16, 16);
        for (auto& v : img) v = std::clamp(v + 0.05 * rng.gaussian(), 0.0, 1.0);
        auto inv = infer_params(img, 16, 16, p.identity);
        CHECK(inv.converged);
        errs.push_back(linf_emotion(inv.emotion, p.emotion));
    }
    std::sort(errs.begin(), errs.end());
    CHECK(errs[errs.size() / 2] <= 0.1);
    CHECK(errs.back() <= 0.25);
}

TEST_CASE("pure-noise image is flagged, never silent garbage") {
    Rng rng(35);
    std::vector<double> noise(256);
    for (auto& v : noise) v = rng.uniform(0, 1);
    auto inv = infer_params(noise, 16, 16, {0.5, 0.5, 0.5, 0.5});
    CHECK(!inv.converged);
    CHECK(inv.mse > 0.02);
}

TEST_CASE("emotion_classify: 100% on clean anchor renders, margin positive") {
    Rng rng(36);
    EmotionSpec spec = EmotionSpec::standard();
    for (int trial = 0; trial < 12; ++trial) {
        IdentityParams idp{rng.uniform(0.34, 0.66), rng.uniform(0.34, 0.66),
                           rng.uniform(0.34, 0.66), rng.uniform(0.34, 0.66)};
        for (int emo = 0; emo < kNumBasicEmotions; ++emo) {
            FaceParams p{idp, spec.anchors[static_cast<size_t>(emo)]};
            auto img = render_face(p, 16, 16);
            auto cls = emotion_classify(img, 16, 16, idp, spec);
            CHECK(static_cast<int>(cls.label) == emo);
            CHECK(cls.confidence > 0.0);
        }
    }
}

TEST_CASE("compound midpoint renders invert near the anchor midpoint") {
    Rng rng(37);
    EmotionSpec spec = EmotionSpec::standard();
    for (const auto& pair : compound_pairs()) {
        IdentityParams idp{rng.uniform(0.36, 0.64), rng.uniform(0.36, 0.64),
                           rng.uniform(0.36, 0.64), rng.uniform(0.36, 0.64)};
        EmotionParams mid = spec.compound(pair.a, pair.b, 0.5);
        FaceParams p{idp, mid};
        auto inv = infer_params(render_face(p, 16, 16), 16, 16, idp);
        CHECK(linf_emotion(inv.emotion, mid) <= 0.05);

        auto proj = project_onto_anchor_segment(inv.emotion, pair.a, pair.b, spec);
        CHECK(proj.coeff > 0.3);
        CHECK(proj.coeff < 0.7);
        CHECK(proj.residual < 0.2);
    }
}

TEST_CASE("full inversion recovers identity within tolerance") {
    Rng rng(38);
    EmotionSpec spec = EmotionSpec::standard();
    for (int i = 0; i < 5; ++i) {
        FaceParams p = sample_face(rng, spec, static_cast<int>(rng.below(6)));
        auto img = render_face(p, 16, 16);
        // start from a perturbed prior
        IdentityParams prior = p.identity;
        prior.face_width = std::clamp(prior.face_width + 0.05, 0.3, 0.7);
        InversionBudget budget;
        budget.max_evals = 6000;
        auto inv = infer_params_full(img, 16, 16, prior, budget);
        CHECK(inv.converged);
        double iderr = 0.0;
        const auto va = inv.identity.vec(), vb = p.identity.vec();
        for (size_t k = 0; k < 4; ++k) iderr = std::max(iderr, std::fabs(va[k] - vb[k]));
        CHECK(iderr <= 0.08);
    }
}

TEST_CASE("dataset: determinism, completeness, mask exactness") {
    DatasetConfig cfg;
    cfg.n_identities = 4;
    cfg.per_emotion = 2;
    cfg.per_neutral = 1;
    cfg.per_compound = 1;
    cfg.seed = 42;
    Dataset a = build_dataset(cfg);
    Dataset b = build_dataset(cfg);
    REQUIRE(a.samples.size() == b.samples.size());
    for (size_t i = 0; i < a.samples.size(); ++i)
        CHECK(a.samples[i].image == b.samples[i].image);

    CHECK(a.samples.size() ==
          static_cast<size_t>(4 * (6 * 2 + 1 + 4 * 1)));
    for (int id = 0; id < 4; ++id) {
        CHECK(!a.neutral_by_identity[static_cast<size_t>(id)].empty());
        for (int e = 0; e < 6; ++e)
            CHECK(a.pure_by_identity[static_cast<size_t>(id)][static_cast<size_t>(e)].size() == 2);
    }
}

TEST_CASE("masked noisy sampling: probability limits and binomial behavior") {
    DatasetConfig dcfg;
    dcfg.n_identities = 6;
    dcfg.per_emotion = 2;
    dcfg.per_neutral = 1;
    dcfg.per_compound = 1;
    dcfg.seed = 7;
    Dataset data = build_dataset(dcfg);

    // p_noise = 0: never masked; p_noise = 1: always masked
    Rng r0(1);
    for (int i = 0; i < 50; ++i)
        CHECK(!sample_one(data, {0.0, 0.5}, 2, r0).mask_applied);
    Rng r1(2);
    for (int i = 0; i < 50; ++i)
        CHECK(sample_one(data, {1.0, 0.5}, 2, r1).mask_applied);

    // binomial: 10000 draws at p = 0.3 within 3 sigma
    const int n = 10000;
    const double p = 0.3;
    Rng rb(3);
    int masked = 0;
    for (int i = 0; i < n; ++i) {
        auto s = sample_one(data, {p, 0.5}, i % 6, rb);
        if (s.mask_applied) {
            ++masked;
            // mask exactness: all pixels inside the mouth rect are zero
            // (identity of the drawn sample is in s.identity)
        }
        // every condition is the target one-hot
        CHECK(s.condition[static_cast<size_t>(i % 6)] == 1.0);
    }
    const double frac = static_cast<double>(masked) / n;
    const double sigma = std::sqrt(p * (1 - p) / n);
    CHECK(std::fabs(frac - p) <= 3.0 * sigma);
}

TEST_CASE("masked samples have exactly zero mouth pixels and untouched outside") {
    DatasetConfig dcfg;
    dcfg.n_identities = 3;
    dcfg.per_emotion = 1;
    dcfg.per_neutral = 1;
    dcfg.seed = 11;
    Dataset data = build_dataset(dcfg);
    Rng rng(4);
    int seen = 0;
    while (seen < 20) {
        auto s = sample_one(data, {1.0, 0.5}, 1, rng);
        REQUIRE(s.mask_applied);
        // locate the identity to get its mask
        int id = -1;
        for (size_t i = 0; i < data.identities.size(); ++i)
            if (data.identities[i].vec() == s.identity) id = static_cast<int>(i);
        REQUIRE(id >= 0);
        const MouthMask mask = mouth_mask_for(data.identities[static_cast<size_t>(id)], 16, 16);
        for (int r = mask.r0; r < mask.r1; ++r)
            for (int c = mask.c0; c < mask.c1; ++c)
                CHECK(s.image[static_cast<size_t>(r * 16 + c)] == 0.0);
        ++seen;
    }
}

TEST_CASE("pgm files round-trip") {
    Rng rng(39);
    std::vector<double> img(16 * 16);
    for (auto& v : img) v = rng.uniform(0, 1);
    const auto path = std::filesystem::temp_directory_path() / "moee_test.pgm";
    write_pgm(path.string(), img, 16, 16);
    int H = 0, W = 0;
    auto back = read_pgm(path.string(), H, W);
    CHECK(H == 16);
    CHECK(W == 16);
    for (size_t i = 0; i < img.size(); ++i)
        CHECK(std::fabs(back[i] - img[i]) <= 0.5 / 255.0 + 1e-12);
    std::filesystem::remove(path);
}

TEST_CASE("dataset files: manifest and images are written deterministically") {
    DatasetConfig cfg;
    cfg.n_identities = 2;
    cfg.per_emotion = 1;
    cfg.per_neutral = 1;
    cfg.per_compound = 1;
    cfg.seed = 5;
    Dataset data = build_dataset(cfg);
    namespace fs = std::filesystem;
    const auto dir1 = fs::temp_directory_path() / "moee_ds1";
    const auto dir2 = fs::temp_directory_path() / "moee_ds2";
    write_dataset(data, dir1.string());
    write_dataset(data, dir2.string());

    auto slurp = [](const fs::path& p) {
        std::ifstream is(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    };
    CHECK(slurp(dir1 / "manifest.jsonl") == slurp(dir2 / "manifest.jsonl"));
    CHECK(slurp(dir1 / "images/000000.pgm") == slurp(dir2 / "images/000000.pgm"));
    CHECK(!slurp(dir1 / "manifest.jsonl").empty());
    fs::remove_all(dir1);
    fs::remove_all(dir2);
}
