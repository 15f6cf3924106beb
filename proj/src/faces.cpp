#include "moee/faces.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace moee {

namespace {

constexpr double kAA = 0.8;  // anti-alias transition width, pixels

double smoothstep01(double t) {
    if (t <= 0.0) return 0.0;
    if (t >= 1.0) return 1.0;
    return t * t * (3.0 - 2.0 * t);
}

// Filled region of a signed distance (negative inside).
double filled_cov(double sdf) { return smoothstep01(0.5 - sdf / kAA); }
// Stroke of half-width hw around a zero set; dist >= 0.
double stroke_cov(double dist, double hw) { return smoothstep01(0.5 + (hw - dist) / kAA); }

double clamp(double v, double lo, double hi) { return std::min(hi, std::max(lo, v)); }

struct Geometry {
    double cx, cy, ax, ay;
    double eye_x_off, eye_y;
    double rex;
    double brow_y, brow_len;
    double mouth_y, mouth_halfw, curve_amp;

    static Geometry from(const IdentityParams& id, int H, int W) {
        Geometry g;
        g.cx = 0.5 * W;
        g.cy = 0.5 * H;
        g.ax = 0.5 * id.face_width * W;
        g.ay = 0.5 * id.face_height * H;
        g.eye_x_off = (0.30 + 0.40 * id.eye_spacing) * g.ax;
        g.eye_y = g.cy - 0.50 * id.eye_height * g.ay;
        g.rex = 0.16 * g.ax + 0.35;
        g.brow_y = g.eye_y - 0.52 * g.ay;
        g.brow_len = 0.45 * g.ax;
        g.mouth_y = g.cy + 0.52 * g.ay;
        g.mouth_halfw = 0.46 * g.ax;
        g.curve_amp = 0.42 * g.ay;
        return g;
    }

    // One thin stroke per lip; mouth_open separates the lips vertically, so
    // opening and curvature leave distinct pixel signatures.
    double lip_half_thickness() const { return 0.10 * ay; }
    double lip_gap(double mouth_open) const { return 0.55 * ay * mouth_open; }
    double mouth_vertical_extent_max() const { return 0.5 * 0.55 * ay + lip_half_thickness(); }
    // Brows translate vertically with their angle (raised when positive,
    // lowered toward the eyes when negative).
    // Translation cues carry a pixel floor so small faces keep salient
    // per-parameter signals.
    double brow_y_at(double brow_angle) const {
        return brow_y - (0.30 * ay + 0.6) * brow_angle;
    }
    // Opening lifts the eye center (raised upper lid).
    double eye_y_at(double eye_open_actual) const {
        return eye_y - (0.30 * ay + 0.6) * (eye_open_actual - 0.6);
    }
};

double segment_dist(double px, double py, double x0, double y0, double x1, double y1) {
    const double vx = x1 - x0, vy = y1 - y0;
    const double len2 = vx * vx + vy * vy;
    double t = len2 > 0.0 ? ((px - x0) * vx + (py - y0) * vy) / len2 : 0.0;
    t = clamp(t, 0.0, 1.0);
    const double dx = px - (x0 + t * vx), dy = py - (y0 + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

double mouth_coverage(const Geometry& g, const EmotionParams& e, double px, double py) {
    const double dx = px - g.cx;
    const double xn = clamp(dx / g.mouth_halfw, -1.0, 1.0);
    const double ycurve = g.mouth_y + e.mouth_curve * g.curve_amp * (xn * xn - 0.5);
    const double dl = std::max(0.0, std::fabs(dx) - g.mouth_halfw);
    const double half_gap = 0.5 * g.lip_gap(e.mouth_open);
    const double ht = g.lip_half_thickness();
    double transparent = 1.0;
    for (int lip = -1; lip <= 1; lip += 2) {
        const double dv = py - (ycurve + lip * half_gap);
        const double dist = std::sqrt(dv * dv + dl * dl);
        transparent *= 1.0 - stroke_cov(dist, ht);
    }
    return 1.0 - transparent;
}

}  // namespace

void EmotionParams::validate() const {
    check(mouth_curve >= -1.0 && mouth_curve <= 1.0, "mouth_curve out of [-1,1]");
    check(mouth_open >= 0.0 && mouth_open <= 1.0, "mouth_open out of [0,1]");
    check(brow_angle >= -1.0 && brow_angle <= 1.0, "brow_angle out of [-1,1]");
    check(eye_openness >= -1.0 && eye_openness <= 1.0, "eye_openness out of [-1,1]");
}

void IdentityParams::validate() const {
    for (double v : vec())
        check(v >= 0.3 && v <= 0.7, "identity parameter out of [0.3,0.7]");
}

EmotionSpec EmotionSpec::standard() {
    EmotionSpec s;
    auto set = [&](Emotion e, double mc, double mo, double ba, double eo) {
        s.anchors[static_cast<size_t>(e)] = {mc, mo, ba, eo};
    };
    // hand-tuned for >= 0.5 pairwise L2 separation
    set(Emotion::Angry, -0.55, 0.15, -0.90, 0.10);
    set(Emotion::Disgusted, -0.60, 0.35, -0.10, -0.55);
    set(Emotion::Fear, -0.25, 0.60, 0.55, 0.65);
    set(Emotion::Happy, 0.90, 0.30, 0.15, 0.00);
    set(Emotion::Sad, -0.80, 0.05, -0.45, -0.30);
    set(Emotion::Surprised, 0.15, 0.95, 0.75, 0.90);
    return s;
}

EmotionParams EmotionSpec::compound(Emotion a, Emotion b, double alpha) const {
    check(alpha >= 0.0 && alpha <= 1.0, "compound alpha out of [0,1]");
    const auto& va = anchor(a).vec();
    const auto& vb = anchor(b).vec();
    std::array<double, 4> v;
    for (size_t i = 0; i < 4; ++i) v[i] = alpha * va[i] + (1.0 - alpha) * vb[i];
    return EmotionParams::from_vec(v);
}

double EmotionSpec::min_anchor_separation() const {
    double best = 1e300;
    for (int a = 0; a < kNumBasicEmotions; ++a)
        for (int b = a + 1; b < kNumBasicEmotions; ++b) {
            const auto va = anchors[static_cast<size_t>(a)].vec();
            const auto vb = anchors[static_cast<size_t>(b)].vec();
            double d2 = 0.0;
            for (size_t i = 0; i < 4; ++i) d2 += (va[i] - vb[i]) * (va[i] - vb[i]);
            best = std::min(best, std::sqrt(d2));
        }
    return best;
}

std::vector<double> render_face(const FaceParams& params, int H, int W) {
    params.validate();
    check(H >= 8 && W >= 8, "render_face: image too small");
    const Geometry g = Geometry::from(params.identity, H, W);
    const EmotionParams& e = params.emotion;

    const double rey = g.ay * 0.06 + (0.30 * g.ay + 0.5) * e.eye_open_actual();
    const double rex = g.rex * (0.80 + 0.35 * e.eye_open_actual());
    const double eye_scale = std::sqrt(rex * rey);
    const double ring_scale = std::min(g.ax, g.ay);
    const double brow_slope = 1.2 * e.brow_angle;

    std::vector<double> img(static_cast<size_t>(H * W), 0.0);
    for (int r = 0; r < H; ++r) {
        const double py = r + 0.5;
        for (int c = 0; c < W; ++c) {
            const double px = c + 0.5;
            double transparent = 1.0;  // screen-blend accumulator

            // face outline ring
            {
                const double fx = (px - g.cx) / g.ax, fy = (py - g.cy) / g.ay;
                const double f = std::sqrt(fx * fx + fy * fy);
                const double cov = stroke_cov(std::fabs((f - 1.0) * ring_scale), 0.55);
                transparent *= 1.0 - cov;
            }
            // eyes
            const double ey = g.eye_y_at(e.eye_open_actual());
            for (int s = -1; s <= 1; s += 2) {
                const double ex = g.cx + s * g.eye_x_off;
                const double fx = (px - ex) / rex, fy = (py - ey) / rey;
                const double f = std::sqrt(fx * fx + fy * fy);
                const double cov = filled_cov((f - 1.0) * eye_scale);
                transparent *= 1.0 - cov;
            }
            // brows
            for (int s = -1; s <= 1; s += 2) {
                const double bx = g.cx + s * g.eye_x_off;
                const double by = g.brow_y_at(e.brow_angle);
                const double m = s * brow_slope;
                const double dist =
                    segment_dist(px, py, bx - g.brow_len, by - m * g.brow_len,
                                 bx + g.brow_len, by + m * g.brow_len);
                transparent *= 1.0 - stroke_cov(dist, 0.55);
            }
            // mouth
            transparent *= 1.0 - mouth_coverage(g, e, px, py);

            img[static_cast<size_t>(r * W + c)] = 1.0 - transparent;
        }
    }
    return img;
}

std::vector<double> render_mouth_layer(const FaceParams& params, int H, int W) {
    params.validate();
    const Geometry g = Geometry::from(params.identity, H, W);
    std::vector<double> img(static_cast<size_t>(H * W), 0.0);
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c)
            img[static_cast<size_t>(r * W + c)] =
                mouth_coverage(g, params.emotion, c + 0.5, r + 0.5);
    return img;
}

MouthMask mouth_mask_for(const IdentityParams& identity, int H, int W) {
    identity.validate();
    const Geometry g = Geometry::from(identity, H, W);
    const double ext_y = 0.5 * g.curve_amp + g.mouth_vertical_extent_max() + 0.5 * kAA + 0.5;
    const double ext_x = g.mouth_halfw + g.lip_half_thickness() + 0.5 * kAA + 0.5;
    MouthMask m;
    m.r0 = std::max(0, static_cast<int>(std::floor(g.mouth_y - ext_y - 0.5)));
    m.r1 = std::min(H, static_cast<int>(std::ceil(g.mouth_y + ext_y - 0.5)) + 1);
    m.c0 = std::max(0, static_cast<int>(std::floor(g.cx - ext_x - 0.5)));
    m.c1 = std::min(W, static_cast<int>(std::ceil(g.cx + ext_x - 0.5)) + 1);
    return m;
}

void apply_mouth_mask(std::vector<double>& image, const MouthMask& mask, int W) {
    for (int r = mask.r0; r < mask.r1; ++r)
        for (int c = mask.c0; c < mask.c1; ++c) image[static_cast<size_t>(r * W + c)] = 0.0;
}

// ---- inversion ----------------------------------------------------------------

namespace {

struct SearchSpace {
    int dims;
    std::array<double, 8> lo, hi;
    bool with_identity;
};

SearchSpace emotion_space() {
    SearchSpace s;
    s.dims = 4;
    s.lo = {-1.0, 0.0, -1.0, -1.0, 0, 0, 0, 0};
    s.hi = {1.0, 1.0, 1.0, 1.0, 0, 0, 0, 0};
    s.with_identity = false;
    return s;
}

SearchSpace full_space() {
    SearchSpace s;
    s.dims = 8;
    s.lo = {-1.0, 0.0, -1.0, -1.0, 0.3, 0.3, 0.3, 0.3};
    s.hi = {1.0, 1.0, 1.0, 1.0, 0.7, 0.7, 0.7, 0.7};
    s.with_identity = true;
    return s;
}

FaceParams unpack(const std::array<double, 8>& x, const SearchSpace& space,
                  const IdentityParams& prior) {
    FaceParams p;
    p.emotion = EmotionParams::from_vec({x[0], x[1], x[2], x[3]});
    p.identity = space.with_identity ? IdentityParams::from_vec({x[4], x[5], x[6], x[7]}) : prior;
    return p;
}

// Bounded Nelder-Mead refinement; handles the diagonal valleys (mouth curve
// vs opening trade-offs) that axis-wise moves cannot traverse.
template <class Objective, class Clamp>
void nelder_mead(Objective& objective, Clamp& clamp_to_space, const SearchSpace& space,
                 std::array<double, 8>& x, double& fx, int& evals, int eval_cap) {
    const int n = space.dims;
    std::vector<std::pair<double, std::array<double, 8>>> simplex;
    simplex.reserve(static_cast<size_t>(n + 1));
    simplex.push_back({fx, x});
    for (int d = 0; d < n && evals < eval_cap; ++d) {
        std::array<double, 8> v = x;
        const double range = space.hi[static_cast<size_t>(d)] - space.lo[static_cast<size_t>(d)];
        v[static_cast<size_t>(d)] += 0.08 * range;
        clamp_to_space(v);
        simplex.push_back({objective(v), v});
    }
    if (simplex.size() != static_cast<size_t>(n + 1)) return;
    auto order = [&]() {
        std::sort(simplex.begin(), simplex.end(),
                  [](const auto& a, const auto& b) { return a.first < b.first; });
    };
    order();
    while (evals < eval_cap && simplex.back().first - simplex.front().first > 1e-16) {
        std::array<double, 8> centroid = x;
        for (int d = 0; d < n; ++d) {
            double acc = 0.0;
            for (int i = 0; i < n; ++i)
                acc += simplex[static_cast<size_t>(i)].second[static_cast<size_t>(d)];
            centroid[static_cast<size_t>(d)] = acc / n;
        }
        auto blend = [&](double coeff) {
            std::array<double, 8> v = x;
            for (int d = 0; d < n; ++d)
                v[static_cast<size_t>(d)] =
                    centroid[static_cast<size_t>(d)] +
                    coeff * (centroid[static_cast<size_t>(d)] -
                             simplex.back().second[static_cast<size_t>(d)]);
            clamp_to_space(v);
            return v;
        };
        auto refl = blend(1.0);
        const double f_refl = objective(refl);
        if (f_refl < simplex.front().first) {
            auto expd = blend(2.0);
            const double f_expd = objective(expd);
            simplex.back() =
                f_expd < f_refl ? std::make_pair(f_expd, expd) : std::make_pair(f_refl, refl);
        } else if (f_refl < simplex[static_cast<size_t>(n - 1)].first) {
            simplex.back() = {f_refl, refl};
        } else {
            auto contr = blend(f_refl < simplex.back().first ? 0.5 : -0.5);
            const double f_contr = objective(contr);
            if (f_contr < std::min(f_refl, simplex.back().first)) {
                simplex.back() = {f_contr, contr};
            } else {
                for (size_t i = 1; i < simplex.size() && evals < eval_cap; ++i) {
                    for (int d = 0; d < n; ++d)
                        simplex[i].second[static_cast<size_t>(d)] =
                            0.5 * (simplex[i].second[static_cast<size_t>(d)] +
                                   simplex[0].second[static_cast<size_t>(d)]);
                    simplex[i].first = objective(simplex[i].second);
                }
            }
        }
        order();
    }
    if (simplex.front().first < fx) {
        fx = simplex.front().first;
        x = simplex.front().second;
    }
}

InversionResult coordinate_search(const std::vector<double>& image, int H, int W,
                                  const IdentityParams& prior, const SearchSpace& space,
                                  const InversionBudget& budget) {
    check(static_cast<int>(image.size()) == H * W, "infer_params: image size mismatch");
    int evals = 0;
    // The pixel MSE is matched at full resolution and after a matched 3x3
    // binomial blur. Blurring both sides keeps the objective exactly zero at
    // the true parameters while attenuating iid pixel noise by ~2.7x, so the
    // inverter stops chasing noise; the unblurred term keeps sub-pixel
    // feature placement identifiable.
    auto blur3 = [H, W](const std::vector<double>& img) {
        std::vector<double> tmp(img.size()), out(img.size());
        for (int r = 0; r < H; ++r)
            for (int c = 0; c < W; ++c) {
                const double l = img[static_cast<size_t>(r * W + std::max(0, c - 1))];
                const double m = img[static_cast<size_t>(r * W + c)];
                const double rr = img[static_cast<size_t>(r * W + std::min(W - 1, c + 1))];
                tmp[static_cast<size_t>(r * W + c)] = 0.25 * l + 0.5 * m + 0.25 * rr;
            }
        for (int r = 0; r < H; ++r)
            for (int c = 0; c < W; ++c) {
                const double u = tmp[static_cast<size_t>(std::max(0, r - 1) * W + c)];
                const double m = tmp[static_cast<size_t>(r * W + c)];
                const double d = tmp[static_cast<size_t>(std::min(H - 1, r + 1) * W + c)];
                out[static_cast<size_t>(r * W + c)] = 0.25 * u + 0.5 * m + 0.25 * d;
            }
        return out;
    };
    const auto image_blurred = blur3(image);
    auto objective = [&](const std::array<double, 8>& v) {
        ++evals;
        const auto render = render_face(unpack(v, space, prior), H, W);
        double fine = 0.0;
        for (size_t i = 0; i < render.size(); ++i) {
            const double d = render[i] - image[i];
            fine += d * d;
        }
        const auto rb = blur3(render);
        double smooth = 0.0;
        for (size_t i = 0; i < rb.size(); ++i) {
            const double d = rb[i] - image_blurred[i];
            smooth += d * d;
        }
        return (0.25 * fine + 2.5 * smooth) / static_cast<double>(render.size());
    };
    auto clamp_to_space = [&](std::array<double, 8>& v) {
        for (int d = 0; d < space.dims; ++d)
            v[static_cast<size_t>(d)] = clamp(v[static_cast<size_t>(d)],
                                              space.lo[static_cast<size_t>(d)],
                                              space.hi[static_cast<size_t>(d)]);
    };

    auto cyclic_descent = [&](std::array<double, 8>& x, double& fx, double step0,
                              double min_step, int eval_cap) {
        double step = step0;
        while (step > min_step && evals < eval_cap) {
            bool improved = false;
            for (int d = 0; d < space.dims && evals < eval_cap; ++d) {
                const double range =
                    space.hi[static_cast<size_t>(d)] - space.lo[static_cast<size_t>(d)];
                for (int dir = -1; dir <= 1; dir += 2) {
                    std::array<double, 8> xt = x;
                    xt[static_cast<size_t>(d)] =
                        clamp(x[static_cast<size_t>(d)] + dir * step * range,
                              space.lo[static_cast<size_t>(d)], space.hi[static_cast<size_t>(d)]);
                    if (xt[static_cast<size_t>(d)] == x[static_cast<size_t>(d)]) continue;
                    const double f = objective(xt);
                    if (f < fx - 1e-15) {
                        fx = f;
                        x = xt;
                        improved = true;
                        break;
                    }
                }
            }
            if (!improved) step *= 0.5;
        }
    };

    // Phase 1 - basin identification: coarse cyclic descent from the neutral
    // point and the six anchors; the two best basins go on to refinement.
    std::vector<std::array<double, 4>> starts = {{0, 0, 0, 0}};
    for (const auto& anchor : EmotionSpec::standard().anchors) starts.push_back(anchor.vec());
    const int coarse_budget = budget.max_evals / 3;
    const int per_start = coarse_budget / static_cast<int>(starts.size());

    std::vector<std::pair<double, std::array<double, 8>>> basins;
    for (const auto& s0 : starts) {
        std::array<double, 8> x = {s0[0], s0[1], s0[2], s0[3], prior.face_width,
                                   prior.face_height, prior.eye_spacing, prior.eye_height};
        double local = objective(x);
        cyclic_descent(x, local, 0.0625, 0.02, std::min(budget.max_evals, evals - 1 + per_start));
        basins.push_back({local, x});
    }
    std::sort(basins.begin(), basins.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });

    std::array<double, 8> best_x = basins[0].second;
    double best = basins[0].first;
    const size_t refine_count = std::min<size_t>(3, basins.size());
    const int refine_budget = (budget.max_evals - evals) / static_cast<int>(refine_count);
    for (size_t bi = 0; bi < refine_count; ++bi) {
        std::array<double, 8> cand_x = basins[bi].second;
        double cand = basins[bi].first;
        const int cap = std::min(budget.max_evals, evals + refine_budget);
        nelder_mead(objective, clamp_to_space, space, cand_x, cand, evals,
                    cap - refine_budget / 6);
        cyclic_descent(cand_x, cand, 0.0625, budget.min_step, cap);
        if (cand < best) {
            best = cand;
            best_x = cand_x;
        }
    }

    InversionResult r;
    const FaceParams p = unpack(best_x, space, prior);
    r.emotion = p.emotion;
    r.identity = p.identity;
    r.mse = best;
    r.evals = evals;
    r.converged = best <= budget.converged_mse;
    return r;
}

}  // namespace

InversionResult infer_params(const std::vector<double>& image, int H, int W,
                             const IdentityParams& identity_prior, const InversionBudget& budget) {
    return coordinate_search(image, H, W, identity_prior, emotion_space(), budget);
}

InversionResult infer_params_full(const std::vector<double>& image, int H, int W,
                                  const IdentityParams& identity_prior,
                                  const InversionBudget& budget) {
    return coordinate_search(image, H, W, identity_prior, full_space(), budget);
}

Classification emotion_classify(const std::vector<double>& image, int H, int W,
                                const IdentityParams& identity_prior, const EmotionSpec& spec,
                                const InversionBudget& budget) {
    Classification out;
    out.inversion = infer_params(image, H, W, identity_prior, budget);
    const auto v = out.inversion.emotion.vec();
    double d_best = 1e300, d_second = 1e300;
    int best = 0;
    for (int i = 0; i < kNumBasicEmotions; ++i) {
        const auto a = spec.anchors[static_cast<size_t>(i)].vec();
        double d2 = 0.0;
        for (size_t k = 0; k < 4; ++k) d2 += (v[k] - a[k]) * (v[k] - a[k]);
        const double d = std::sqrt(d2);
        if (d < d_best) {
            d_second = d_best;
            d_best = d;
            best = i;
        } else if (d < d_second) {
            d_second = d;
        }
    }
    out.label = static_cast<Emotion>(best);
    out.confidence = d_second - d_best;
    return out;
}

SegmentProjection project_onto_anchor_segment(const EmotionParams& p, Emotion a, Emotion b,
                                              const EmotionSpec& spec) {
    const auto va = spec.anchor(a).vec();
    const auto vb = spec.anchor(b).vec();
    const auto vp = p.vec();
    double dot = 0.0, len2 = 0.0;
    for (size_t i = 0; i < 4; ++i) {
        dot += (vp[i] - va[i]) * (vb[i] - va[i]);
        len2 += (vb[i] - va[i]) * (vb[i] - va[i]);
    }
    SegmentProjection r;
    r.coeff = dot / len2;
    double res2 = 0.0;
    for (size_t i = 0; i < 4; ++i) {
        const double proj = va[i] + r.coeff * (vb[i] - va[i]);
        res2 += (vp[i] - proj) * (vp[i] - proj);
    }
    r.residual = std::sqrt(res2);
    return r;
}

// ---- dataset ------------------------------------------------------------------

namespace {

EmotionParams jitter_emotion(const EmotionParams& base, double jitter, Rng& rng) {
    auto v = base.vec();
    v[0] = clamp(v[0] + jitter * rng.uniform(-1, 1), -1.0, 1.0);
    v[1] = clamp(v[1] + jitter * rng.uniform(-1, 1), 0.0, 1.0);
    v[2] = clamp(v[2] + jitter * rng.uniform(-1, 1), -1.0, 1.0);
    v[3] = clamp(v[3] + jitter * rng.uniform(-1, 1), -1.0, 1.0);
    return EmotionParams::from_vec(v);
}

}  // namespace

Dataset build_dataset(const DatasetConfig& cfg) {
    check(cfg.n_identities >= 1 && cfg.per_emotion >= 1 && cfg.per_neutral >= 1,
          "build_dataset: every identity needs all emotions plus neutral");
    Dataset d;
    d.cfg = cfg;
    d.spec = EmotionSpec::standard();
    Rng rng(cfg.seed);

    d.pure_by_identity.resize(static_cast<size_t>(cfg.n_identities));
    d.neutral_by_identity.resize(static_cast<size_t>(cfg.n_identities));
    d.compound_by_identity.resize(static_cast<size_t>(cfg.n_identities));

    for (int id = 0; id < cfg.n_identities; ++id) {
        // Identity envelope: faces large enough that the parameter oracle
        // stays reliable at 16x16 (calibrated by the round-trip tests).
        IdentityParams idp;
        idp.face_width = rng.uniform(0.50, 0.68);
        idp.face_height = rng.uniform(0.50, 0.68);
        idp.eye_spacing = rng.uniform(0.35, 0.65);
        idp.eye_height = rng.uniform(0.35, 0.65);
        d.identities.push_back(idp);
        const MouthMask mask = mouth_mask_for(idp, cfg.H, cfg.W);

        auto push = [&](const EmotionParams& e, std::vector<double> weights, bool neutral,
                        int compound_index) {
            FaceSample s;
            s.params = {idp, e};
            s.image = render_face(s.params, cfg.H, cfg.W);
            s.label_weights = std::move(weights);
            s.is_neutral = neutral;
            s.compound_index = compound_index;
            s.identity_id = id;
            s.mask = mask;
            d.samples.push_back(std::move(s));
            return static_cast<int>(d.samples.size()) - 1;
        };

        for (int emo = 0; emo < kNumBasicEmotions; ++emo) {
            std::vector<double> w(kNumBasicEmotions, 0.0);
            w[static_cast<size_t>(emo)] = 1.0;
            for (int k = 0; k < cfg.per_emotion; ++k) {
                const EmotionParams e =
                    jitter_emotion(d.spec.anchors[static_cast<size_t>(emo)], cfg.emotion_jitter, rng);
                d.pure_by_identity[static_cast<size_t>(id)][static_cast<size_t>(emo)].push_back(
                    push(e, w, false, -1));
            }
        }
        for (int k = 0; k < cfg.per_neutral; ++k) {
            const EmotionParams e = jitter_emotion({}, 0.5 * cfg.emotion_jitter, rng);
            d.neutral_by_identity[static_cast<size_t>(id)].push_back(
                push(e, std::vector<double>(kNumBasicEmotions, 0.0), true, -1));
        }
        if (cfg.include_compounds) {
            const auto& pairs = compound_pairs();
            for (size_t ci = 0; ci < pairs.size(); ++ci) {
                std::vector<double> w(kNumBasicEmotions, 0.0);
                w[static_cast<size_t>(pairs[ci].a)] = cfg.compound_alpha;
                w[static_cast<size_t>(pairs[ci].b)] = 1.0 - cfg.compound_alpha;
                for (int k = 0; k < cfg.per_compound; ++k) {
                    const EmotionParams e = jitter_emotion(
                        d.spec.compound(pairs[ci].a, pairs[ci].b, cfg.compound_alpha),
                        cfg.emotion_jitter, rng);
                    d.compound_by_identity[static_cast<size_t>(id)][ci].push_back(
                        push(e, w, false, static_cast<int>(ci)));
                }
            }
        }
    }
    return d;
}

// ---- masked noisy emotion sampling ----------------------------------------------

DrawnSample sample_one(const Dataset& data, const SamplerConfig& cfg, int target_emotion,
                       Rng& rng) {
    check(cfg.p_noise >= 0.0 && cfg.p_noise <= 1.0, "sample_one: p_noise out of [0,1]");
    check(target_emotion >= 0 && target_emotion < kNumBasicEmotions,
          "sample_one: bad target emotion");
    const int id = static_cast<int>(rng.below(data.cfg.n_identities));
    check(!data.neutral_by_identity[static_cast<size_t>(id)].empty(),
          "sample_one: identity lacks neutral data");

    DrawnSample out;
    out.condition.assign(kNumBasicEmotions, 0.0);
    out.condition[static_cast<size_t>(target_emotion)] = 1.0;
    out.identity = data.identities[static_cast<size_t>(id)].vec();

    const bool substitute = rng.uniform() < cfg.p_noise;
    if (!substitute) {
        const auto& pool =
            data.pure_by_identity[static_cast<size_t>(id)][static_cast<size_t>(target_emotion)];
        const FaceSample& s = data.samples[static_cast<size_t>(pool[static_cast<size_t>(
            rng.below(static_cast<int64_t>(pool.size())))])];
        out.image = s.image;
        out.mask_applied = false;
        return out;
    }

    const bool use_neutral = rng.uniform() < cfg.neutral_fraction;
    const FaceSample* src = nullptr;
    if (use_neutral) {
        const auto& pool = data.neutral_by_identity[static_cast<size_t>(id)];
        src = &data.samples[static_cast<size_t>(
            pool[static_cast<size_t>(rng.below(static_cast<int64_t>(pool.size())))])];
    } else {
        int other = static_cast<int>(rng.below(kNumBasicEmotions - 1));
        if (other >= target_emotion) ++other;
        const auto& pool =
            data.pure_by_identity[static_cast<size_t>(id)][static_cast<size_t>(other)];
        src = &data.samples[static_cast<size_t>(
            pool[static_cast<size_t>(rng.below(static_cast<int64_t>(pool.size())))])];
    }
    out.image = src->image;
    apply_mouth_mask(out.image, src->mask, data.cfg.W);
    out.mask_applied = true;
    return out;
}

DrawnSample sample_labeled(const Dataset& data, bool compound_ok, Rng& rng) {
    const int id = static_cast<int>(rng.below(data.cfg.n_identities));
    const bool has_compounds =
        compound_ok && data.cfg.include_compounds &&
        !data.compound_by_identity[static_cast<size_t>(id)][0].empty();
    const int kinds = has_compounds ? kNumBasicEmotions + 4 : kNumBasicEmotions;
    const int kind = static_cast<int>(rng.below(kinds));
    const FaceSample* s = nullptr;
    if (kind < kNumBasicEmotions) {
        const auto& pool = data.pure_by_identity[static_cast<size_t>(id)][static_cast<size_t>(kind)];
        s = &data.samples[static_cast<size_t>(
            pool[static_cast<size_t>(rng.below(static_cast<int64_t>(pool.size())))])];
    } else {
        const auto& pool = data.compound_by_identity[static_cast<size_t>(id)]
                                                    [static_cast<size_t>(kind - kNumBasicEmotions)];
        s = &data.samples[static_cast<size_t>(
            pool[static_cast<size_t>(rng.below(static_cast<int64_t>(pool.size())))])];
    }
    DrawnSample out;
    out.image = s->image;
    out.condition = s->label_weights;
    out.identity = data.identities[static_cast<size_t>(id)].vec();
    out.mask_applied = false;
    return out;
}

// ---- file formats ----------------------------------------------------------------

void write_pgm(const std::string& path, const std::vector<double>& image, int H, int W) {
    check(static_cast<int>(image.size()) == H * W, "write_pgm: size mismatch");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    check(os.good(), "write_pgm: cannot open " + path);
    os << "P5\n" << W << " " << H << "\n255\n";
    for (double v : image) {
        const int byte = static_cast<int>(std::lround(clamp(v, 0.0, 1.0) * 255.0));
        os.put(static_cast<char>(byte));
    }
    check(os.good(), "write_pgm: write failed for " + path);
}

std::vector<double> read_pgm(const std::string& path, int& H, int& W) {
    std::ifstream is(path, std::ios::binary);
    check(is.good(), "read_pgm: cannot open " + path);
    std::string magic;
    is >> magic;
    check(magic == "P5", "read_pgm: not a binary PGM: " + path);
    int maxval = 0;
    is >> W >> H >> maxval;
    check(maxval == 255, "read_pgm: unsupported maxval");
    is.get();  // single whitespace after header
    std::vector<double> img(static_cast<size_t>(H * W));
    for (auto& v : img) {
        const int byte = is.get();
        check(byte >= 0, "read_pgm: truncated file " + path);
        v = byte / 255.0;
    }
    return img;
}

void write_dataset(const Dataset& data, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");
    std::ofstream manifest(fs::path(dir) / "manifest.jsonl", std::ios::trunc);
    check(manifest.good(), "write_dataset: cannot open manifest in " + dir);
    for (size_t i = 0; i < data.samples.size(); ++i) {
        const FaceSample& s = data.samples[i];
        char name[32];
        std::snprintf(name, sizeof(name), "images/%06zu.pgm", i);
        write_pgm((fs::path(dir) / name).string(), s.image, data.cfg.H, data.cfg.W);

        nlohmann::ordered_json rec;
        rec["id"] = i;
        rec["identity_id"] = s.identity_id;
        rec["weights"] = s.label_weights;
        rec["neutral"] = s.is_neutral;
        rec["compound_index"] = s.compound_index;
        rec["identity"] = s.params.identity.vec();
        rec["emotion"] = s.params.emotion.vec();
        rec["mask"] = {s.mask.r0, s.mask.r1, s.mask.c0, s.mask.c1};
        rec["image"] = name;
        manifest << rec.dump() << "\n";
    }
}

}  // namespace moee
