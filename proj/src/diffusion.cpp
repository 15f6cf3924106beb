#include "moee/diffusion.hpp"

#include <cmath>

namespace moee {

double DiffusionSchedule::continuous_rate(double u, double beta_min, double beta_max) {
    const double r = std::sqrt(beta_min) + u * (std::sqrt(beta_max) - std::sqrt(beta_min));
    return r * r;
}

DiffusionSchedule make_schedule(int T, double beta_min, double beta_max) {
    check(T >= 2, "make_schedule: T must be >= 2, got " + std::to_string(T));
    check(beta_min > 0.0 && beta_max > beta_min, "make_schedule: need 0 < beta_min < beta_max");
    DiffusionSchedule s;
    s.T = T;
    s.beta_min = beta_min;
    s.beta_max = beta_max;
    s.betas.resize(static_cast<size_t>(T));
    s.alphas.resize(static_cast<size_t>(T));
    s.alpha_bars.resize(static_cast<size_t>(T));
    double bar = 1.0;
    for (int i = 0; i < T; ++i) {
        const double u = static_cast<double>(i) / (T - 1);
        const double beta = DiffusionSchedule::continuous_rate(u, beta_min, beta_max) / T;
        check(beta < 1.0, "make_schedule: per-step beta >= 1; T too small for beta_max");
        s.betas[static_cast<size_t>(i)] = beta;
        s.alphas[static_cast<size_t>(i)] = 1.0 - beta;
        bar *= 1.0 - beta;
        s.alpha_bars[static_cast<size_t>(i)] = bar;
    }
    return s;
}

double time_weight(double t, int T) {
    check(t >= 0.0 && t <= static_cast<double>(T), "time_weight: t out of [0,T]");
    return std::cos(t * 3.14159265358979323846 / (2.0 * T));
}

namespace {

void check_t_range(const std::vector<int>& t_idx, const DiffusionSchedule& sched, int batch) {
    check(static_cast<int>(t_idx.size()) == batch, "timestep batch size mismatch");
    for (int t : t_idx)
        check(t >= 0 && t < sched.T,
              "timestep " + std::to_string(t) + " outside [0," + std::to_string(sched.T) + ")");
}

// [b,1] tensor of per-sample coefficients, for broadcasting against [b,D].
Tensor coeff_column(const std::vector<int>& t_idx, const DiffusionSchedule& sched,
                    double (*f)(double)) {
    std::vector<double> c(t_idx.size());
    for (size_t i = 0; i < t_idx.size(); ++i)
        c[i] = f(sched.alpha_bars[static_cast<size_t>(t_idx[i])]);
    return Tensor::from_data({static_cast<int>(t_idx.size()), 1}, std::move(c));
}

double sqrt_abar(double ab) { return std::sqrt(ab); }
double sqrt_1m_abar(double ab) { return std::sqrt(1.0 - ab); }
double inv_sqrt_abar(double ab) { return 1.0 / std::sqrt(ab); }
double ratio_1m_over(double ab) { return std::sqrt(1.0 - ab) / std::sqrt(ab); }

}  // namespace

Tensor q_sample(const Tensor& x0, const std::vector<int>& t_idx, const Tensor& eps,
                const DiffusionSchedule& sched) {
    check_same_shape(x0.shape(), eps.shape(), "q_sample");
    check(x0.rank() == 2, "q_sample: expected [b,D], got " + shape_str(x0.shape()));
    check_t_range(t_idx, sched, x0.dim(0));
    Tensor a = coeff_column(t_idx, sched, sqrt_abar);
    Tensor b = coeff_column(t_idx, sched, sqrt_1m_abar);
    return add(mul(x0, a), mul(eps, b));
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const DiffusionSchedule& sched) {
    return q_sample(x0, std::vector<int>(static_cast<size_t>(x0.dim(0)), t), eps, sched);
}

Tensor predict_x0(const Tensor& z_t, const Tensor& eps_pred, const std::vector<int>& t_idx,
                  const DiffusionSchedule& sched) {
    check_same_shape(z_t.shape(), eps_pred.shape(), "predict_x0");
    check(z_t.rank() == 2, "predict_x0: expected [b,D], got " + shape_str(z_t.shape()));
    check_t_range(t_idx, sched, z_t.dim(0));
    Tensor inv = coeff_column(t_idx, sched, inv_sqrt_abar);
    Tensor ratio = coeff_column(t_idx, sched, ratio_1m_over);
    return sub(mul(z_t, inv), mul(eps_pred, ratio));
}

Tensor predict_x0(const Tensor& z_t, const Tensor& eps_pred, int t,
                  const DiffusionSchedule& sched) {
    return predict_x0(z_t, eps_pred, std::vector<int>(static_cast<size_t>(z_t.dim(0)), t), sched);
}

Tensor latent_loss(const Tensor& eps, const Tensor& eps_pred) { return mse_loss(eps_pred, eps); }

// ---- perceptual extractor ----------------------------------------------------

PerceptualExtractor PerceptualExtractor::init(int hw, Rng& rng) {
    check(hw % 8 == 0, "PerceptualExtractor: image side must be divisible by 8");
    PerceptualExtractor p;
    p.hw = hw;
    p.channels = {1, 6, 10, 12};
    for (int level = 0; level < 3; ++level) {
        const int cin = p.channels[static_cast<size_t>(level)];
        const int cout = p.channels[static_cast<size_t>(level + 1)];
        p.mixes.push_back(Tensor::glorot(4 * cin, cout, rng));  // frozen
    }
    return p;
}

Tensor PerceptualExtractor::features(const Tensor& images) const {
    check(images.rank() == 2 && images.dim(1) == hw * hw,
          "PerceptualExtractor: expected [b," + std::to_string(hw * hw) + "], got " +
              shape_str(images.shape()));
    const int b = images.dim(0);
    Tensor x = reshape(images, {b, hw, hw, 1});
    std::vector<Tensor> levels;
    int side = hw;
    for (size_t level = 0; level < mixes.size(); ++level) {
        const int cin = channels[level];
        const int cout = channels[level + 1];
        const int half = side / 2;
        // [b,side,side,c] -> 2x2 patches -> [b, half*half, 4c]
        Tensor t = reshape(x, {b, half, 2, half, 2, cin});
        t = permute(t, {0, 1, 3, 2, 4, 5});
        t = reshape(t, {b, half * half, 4 * cin});
        t = tanh_t(matmul(t, mixes[level]));
        levels.push_back(reshape(t, {b, half * half * cout}));
        x = reshape(t, {b, half, half, cout});
        side = half;
    }
    return concat(levels, 1);
}

void PerceptualExtractor::collect(NamedParams& out, const std::string& prefix) const {
    for (size_t i = 0; i < mixes.size(); ++i)
        put_param(out, prefix + ".mix" + std::to_string(i), mixes[i]);
}

// ---- losses -------------------------------------------------------------------

Tensor spatial_loss(const Tensor& i_pred, const Tensor& i_gt, double t,
                    const DiffusionSchedule& sched, const LossConfig& cfg) {
    check(cfg.perceptual != nullptr, "spatial_loss: no perceptual extractor configured");
    const double w = time_weight(t, sched.T);
    Tensor pix = l1_loss(i_pred, i_gt);
    Tensor perc = mse_loss(cfg.perceptual->features(i_pred), cfg.perceptual->features(i_gt));
    return scale(add(pix, perc), w);
}

Tensor spatial_loss_batch(const Tensor& i_pred, const Tensor& i_gt,
                          const std::vector<int>& t_idx, const DiffusionSchedule& sched,
                          const LossConfig& cfg) {
    check(cfg.perceptual != nullptr, "spatial_loss_batch: no perceptual extractor configured");
    check_same_shape(i_pred.shape(), i_gt.shape(), "spatial_loss_batch");
    const int b = i_pred.dim(0);
    check_t_range(t_idx, sched, b);

    Tensor pix = mean_last(abs_t(sub(i_pred, i_gt)));  // [b]
    Tensor fp = cfg.perceptual->features(i_pred);
    Tensor fg = cfg.perceptual->features(i_gt);
    Tensor d = sub(fp, fg);
    Tensor perc = mean_last(mul(d, d));  // [b]

    std::vector<double> w(static_cast<size_t>(b));
    for (int i = 0; i < b; ++i)
        w[static_cast<size_t>(i)] = time_weight(static_cast<double>(t_idx[static_cast<size_t>(i)] + 1), sched.T);
    Tensor wt = Tensor::from_data({b}, std::move(w));
    return mean_all(mul(wt, add(pix, perc)));
}

LossBreakdown total_loss(const EpsModel& model, const Tensor& x0, const DiffusionSchedule& sched,
                         const LossConfig& cfg, Rng& rng) {
    check(x0.rank() == 2, "total_loss: expected [b,D] batch");
    const int b = x0.dim(0);
    std::vector<int> t_idx(static_cast<size_t>(b));
    for (auto& t : t_idx) t = static_cast<int>(rng.below(sched.T));
    Tensor eps = Tensor::randn(x0.shape(), rng);

    Tensor z_t = q_sample(x0, t_idx, eps, sched);
    Tensor eps_pred = model(z_t, t_idx);
    Tensor l_latent = latent_loss(eps, eps_pred);

    LossBreakdown out;
    if (cfg.lambda > 0.0) {
        Tensor i_pred = predict_x0(z_t, eps_pred, t_idx, sched);
        Tensor l_spatial = spatial_loss_batch(i_pred, x0, t_idx, sched, cfg);
        out.total = add(l_latent, scale(l_spatial, cfg.lambda));
        out.spatial = l_spatial.item();
    } else {
        out.total = l_latent;
        out.spatial = 0.0;
    }
    out.latent = l_latent.item();
    return out;
}

// ---- DDIM ---------------------------------------------------------------------

std::vector<int> ddim_timesteps(int T, int steps) {
    check(steps >= 1, "ddim: steps must be >= 1");
    check(steps <= T, "ddim: steps (" + std::to_string(steps) + ") exceed T (" +
                          std::to_string(T) + ")");
    std::vector<int> ts(static_cast<size_t>(steps));
    if (steps == 1) {
        ts[0] = T - 1;
        return ts;
    }
    for (int k = 0; k < steps; ++k)
        ts[static_cast<size_t>(k)] =
            static_cast<int>(std::llround(static_cast<double>(T - 1) * k / (steps - 1)));
    return ts;
}

Tensor ddim_sample(const EpsModel& model, const Shape& sample_shape,
                   const DiffusionSchedule& sched, int steps, double eta, Rng& noise_rng,
                   bool clip_x0) {
    check(sample_shape.size() == 2, "ddim_sample: expected [b,D] sample shape");
    const auto ts = ddim_timesteps(sched.T, steps);
    NoGradGuard no_grad;

    Tensor z = Tensor::randn(sample_shape, noise_rng);
    const int b = sample_shape[0];
    for (int k = steps - 1; k >= 0; --k) {
        const int t = ts[static_cast<size_t>(k)];
        const double abar_t = sched.alpha_bars[static_cast<size_t>(t)];
        const double abar_prev =
            k > 0 ? sched.alpha_bars[static_cast<size_t>(ts[static_cast<size_t>(k - 1)])] : 1.0;

        Tensor eps = model(z, std::vector<int>(static_cast<size_t>(b), t));
        // x0 estimate, clipped to the pixel range; early steps amplify any
        // prediction error by sqrt(1-abar)/sqrt(abar), so an unclipped
        // trajectory can leave the data manifold entirely.
        Tensor x0 = scale(sub(z, scale(eps, std::sqrt(1.0 - abar_t))), 1.0 / std::sqrt(abar_t));
        if (clip_x0) {
            for (double& v : x0.mutable_values()) v = std::min(1.0, std::max(0.0, v));
        }

        double sigma = 0.0;
        if (eta > 0.0 && abar_prev < 1.0) {
            sigma = eta * std::sqrt((1.0 - abar_prev) / (1.0 - abar_t)) *
                    std::sqrt(1.0 - abar_t / abar_prev);
        }
        const double dir_coeff = std::sqrt(std::max(0.0, 1.0 - abar_prev - sigma * sigma));
        z = add(scale(x0, std::sqrt(abar_prev)), scale(eps, dir_coeff));
        if (sigma > 0.0) z = add(z, scale(Tensor::randn(sample_shape, noise_rng), sigma));
    }
    return z;
}

}  // namespace moee
