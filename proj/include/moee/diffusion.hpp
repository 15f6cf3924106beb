#pragma once

#include <functional>
#include <vector>

#include "moee/params.hpp"
#include "moee/rng.hpp"
#include "moee/tensor.hpp"

namespace moee {

/// Discretized quadratic beta schedule. beta_min/beta_max are continuous
/// rates (the per-step values are the continuous curve divided by T, so a
/// rate of 20 stays a valid per-step beta for any usable T).
struct DiffusionSchedule {
    int T = 0;
    double beta_min = 0.05;
    double beta_max = 20.0;
    std::vector<double> betas;       // strictly increasing
    std::vector<double> alphas;      // 1 - beta
    std::vector<double> alpha_bars;  // cumulative products, strictly decreasing

    /// The continuous rate before discretization:
    /// beta(u) = (sqrt(beta_min) + u (sqrt(beta_max) - sqrt(beta_min)))^2.
    static double continuous_rate(double u, double beta_min, double beta_max);
};

DiffusionSchedule make_schedule(int T, double beta_min = 0.05, double beta_max = 20.0);

/// w(t) = cos(t pi / (2T)) on t in [0, T]: 1 at t=0, 0 at t=T, nonincreasing.
double time_weight(double t, int T);

/// z_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps; per-sample timestep indices
/// (0-based into the schedule).
Tensor q_sample(const Tensor& x0, const std::vector<int>& t_idx, const Tensor& eps,
                const DiffusionSchedule& sched);
Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const DiffusionSchedule& sched);

/// Inverts q_sample for a predicted noise: (z_t - sqrt(1-abar) eps)/sqrt(abar).
/// With the identity codec this is the predicted image.
Tensor predict_x0(const Tensor& z_t, const Tensor& eps_pred, const std::vector<int>& t_idx,
                  const DiffusionSchedule& sched);
Tensor predict_x0(const Tensor& z_t, const Tensor& eps_pred, int t,
                  const DiffusionSchedule& sched);

/// Mean squared error between true and predicted noise.
Tensor latent_loss(const Tensor& eps, const Tensor& eps_pred);

/// Frozen seeded stand-in for a pretrained perceptual feature extractor:
/// three levels of 2x2 patch mixes with tanh nonlinearities, concatenated
/// multi-scale. Differentiable in its input, parameters never trained.
struct PerceptualExtractor {
    int hw = 0;
    std::vector<Tensor> mixes;      // level k: [4*c_k, c_{k+1}]
    std::vector<int> channels;      // {1, c1, c2, c3}

    static PerceptualExtractor init(int hw, Rng& rng);
    /// images: [b, hw*hw] -> features [b, F]
    Tensor features(const Tensor& images) const;
    void collect(NamedParams& out, const std::string& prefix) const;
};

struct LossConfig {
    double lambda = 0.1;  // spatial-loss weight
    const PerceptualExtractor* perceptual = nullptr;
};

/// w(t) * ( L1(I_p, I_GT) + MSE(V(I_p), V(I_GT)) ); t uses the 1-based step
/// convention, valid on [0, T].
Tensor spatial_loss(const Tensor& i_pred, const Tensor& i_gt, double t,
                    const DiffusionSchedule& sched, const LossConfig& cfg);
/// Batch form with per-sample 0-based schedule indices; each sample is
/// weighted by w(idx + 1).
Tensor spatial_loss_batch(const Tensor& i_pred, const Tensor& i_gt,
                          const std::vector<int>& t_idx, const DiffusionSchedule& sched,
                          const LossConfig& cfg);

/// Conditional noise predictor: (z_t [b,D], per-sample schedule indices) ->
/// predicted eps [b,D]. The conditioning is bound into the closure.
using EpsModel = std::function<Tensor(const Tensor&, const std::vector<int>&)>;

struct LossBreakdown {
    Tensor total;
    double latent = 0.0;
    double spatial = 0.0;
};

/// Draws per-sample uniform timesteps and noise, then combines
/// L = L_latent + lambda * L_spatial.
LossBreakdown total_loss(const EpsModel& model, const Tensor& x0, const DiffusionSchedule& sched,
                         const LossConfig& cfg, Rng& rng);

/// Deterministic DDIM (eta = 0 by default) over an evenly spaced descending
/// subsequence of timesteps; same seed and config give bit-identical output.
/// clip_x0 clamps each step's denoised estimate to the [0,1] pixel range,
/// keeping the trajectory on the data manifold.
Tensor ddim_sample(const EpsModel& model, const Shape& sample_shape,
                   const DiffusionSchedule& sched, int steps, double eta, Rng& noise_rng,
                   bool clip_x0 = true);

/// The timestep subsequence used by ddim_sample (ascending), exposed for
/// tests.
std::vector<int> ddim_timesteps(int T, int steps);

}  // namespace moee
