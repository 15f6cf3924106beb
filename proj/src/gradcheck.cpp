#include "moee/gradcheck.hpp"

#include <chrono>
#include <cmath>
#include <functional>

#include "moee/attention.hpp"
#include "moee/denoiser.hpp"
#include "moee/diffusion.hpp"
#include "moee/emotion_latents.hpp"
#include "moee/moee.hpp"

namespace moee {

namespace {

double rel_err(double a, double b) {
    return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-2});
}

// Checks d loss / d p for every element of every tensor in `params` against
// central differences of `forward`.
double check_params(std::vector<Tensor> params, const std::function<Tensor()>& forward,
                    double eps, int* count = nullptr) {
    Tape tape;
    {
        Tape::Scope scope(tape);
        tape.backward(forward());
    }
    double worst = 0.0;
    for (Tensor& p : params) {
        check(p.has_grad(), "grad check: parameter received no gradient");
        const auto& g = p.grad();
        double* data = p.data();
        for (int64_t i = 0; i < p.numel(); ++i) {
            const double keep = data[i];
            data[i] = keep + eps;
            const double fp = forward().item();
            data[i] = keep - eps;
            const double fm = forward().item();
            data[i] = keep;
            const double numeric = (fp - fm) / (2.0 * eps);
            worst = std::max(worst, rel_err(g[static_cast<size_t>(i)], numeric));
            if (count) ++*count;
        }
    }
    return worst;
}

GradCheckBlock check_attention(int seed, double eps) {
    Rng rng(1000 + static_cast<uint64_t>(seed));
    AttentionParams p = AttentionParams::init(3, 4, 3, 3, rng);
    Tensor z = Tensor::randn({2, 3, 3}, rng);
    Tensor c = Tensor::randn({2, 2, 4}, rng);
    Tensor target = Tensor::randn({2, 3, 3}, rng);
    int n = 0;
    const double worst = check_params(
        {p.wq, p.wk, p.wv, p.wo},
        [&]() { return mse_loss(cross_attention(z, c, p), target); }, eps, &n);
    return {"attention", worst, n};
}

GradCheckBlock check_cross_attn_block(int seed, double eps) {
    Rng rng(2000 + static_cast<uint64_t>(seed));
    CrossAttnBlock blk = CrossAttnBlock::init(4, 3, 4, rng);
    Tensor h = Tensor::randn({2, 3, 4}, rng);
    Tensor c = Tensor::randn({2, 2, 3}, rng);
    Tensor target = Tensor::randn({2, 3, 4}, rng);
    int n = 0;
    const double worst = check_params(
        {blk.norm_gain, blk.norm_bias, blk.attn.wq, blk.attn.wk, blk.attn.wv, blk.attn.wo},
        [&]() { return mse_loss(blk.forward(h, c), target); }, eps, &n);
    return {"cross_attn_block", worst, n};
}

GradCheckBlock check_gates(int seed, double eps) {
    Rng rng(3000 + static_cast<uint64_t>(seed));
    const int d = 5, e = 3;
    LocalGate lg = LocalGate::init(d, e, rng);
    GlobalGate gg = GlobalGate::init(d, e, rng);
    Tensor x = Tensor::randn({2, 4, d}, rng);
    Tensor starget = Tensor::randn({2, 4, e}, rng, 0.3);
    Tensor gtarget = Tensor::randn({2, e}, rng, 0.3);
    int n = 0;
    auto forward = [&]() {
        return add(mse_loss(local_scores(x, lg), starget),
                   mse_loss(global_weights(x, gg), gtarget));
    };
    const double worst = check_params({lg.phi, gg.omega}, forward, eps, &n);
    return {"local_global_gates", worst, n};
}

GradCheckBlock check_experts_soft(int seed, double eps) {
    Rng rng(4000 + static_cast<uint64_t>(seed));
    const int e = 2, d = 4, dc = 3, da = 3;
    MoeeModule mod = MoeeModule::init(e, d, dc, da, rng);
    // random output projections so gradients reach every path
    for (auto& ex : mod.experts.experts) {
        Tensor w = Tensor::glorot(da, d, rng);
        ex.attn.wo.mutable_values() = w.values();
    }
    Tensor x = Tensor::randn({2, 3, d}, rng);
    Tensor latent = Tensor::randn({2, 2, dc}, rng);
    Tensor target = Tensor::randn({2, 3, d}, rng);
    std::vector<Tensor> params = {mod.local_gate.phi, mod.global_gate.omega};
    for (auto& ex : mod.experts.experts) {
        params.push_back(ex.norm_gain);
        params.push_back(ex.norm_bias);
        params.push_back(ex.attn.wq);
        params.push_back(ex.attn.wk);
        params.push_back(ex.attn.wv);
        params.push_back(ex.attn.wo);
    }
    int n = 0;
    const double worst = check_params(
        params,
        [&]() { return mse_loss(mod.forward(x, latent, RoutingMode::soft()), target); }, eps, &n);
    return {"experts_soft_mixture", worst, n};
}

GradCheckBlock check_emotion_latents(int seed, double eps) {
    Rng rng(5000 + static_cast<uint64_t>(seed));
    EmotionLatentsConfig cfg;
    cfg.t_emotion = 2;
    cfg.c_emotion = 4;
    cfg.c_bank = 5;
    cfg.bank_rows = 3;
    cfg.c_query = 3;
    cfg.d_attn = 3;
    cfg.mlp_hidden = 4;
    cfg.d_feat = 3;
    EmotionToLatents m = EmotionToLatents::init(cfg, rng);
    Tensor w = Tensor::from_data({2, kNumBasicEmotions},
                                 {0.2, 0.1, 0.3, 0.1, 0.2, 0.1, 0, 0, 0.5, 0.5, 0, 0});
    Tensor target = Tensor::randn({2, cfg.t_emotion, cfg.c_emotion}, rng);
    int n = 0;
    const double worst = check_params(
        {m.mlp_w1, m.mlp_b1, m.mlp_w2, m.mlp_b2, m.fc_label_w, m.fc_label_b, m.bank, m.attn.wq,
         m.attn.wk, m.attn.wv, m.attn.wo},
        [&]() { return mse_loss(m.forward_labels(w), target); }, eps, &n);
    return {"emotion_to_latents", worst, n};
}

DenoiserConfig tiny_denoiser_cfg() {
    DenoiserConfig cfg;
    cfg.image_hw = 8;
    cfg.patch = 4;
    cfg.d_model = 6;
    cfg.n_blocks = 2;
    cfg.mlp_hidden = 8;
    cfg.d_attn = 6;
    cfg.n_id_tokens = 2;
    cfg.d_id = 4;
    cfg.num_experts = 2;
    cfg.c_emotion = 4;
    cfg.d_attn_cond = 4;
    return cfg;
}

GradCheckBlock check_denoiser_trunk(int seed, double eps) {
    Rng rng(6000 + static_cast<uint64_t>(seed));
    DenoiserConfig cfg = tiny_denoiser_cfg();
    Denoiser den = Denoiser::init(cfg, rng);
    // exercise the mixture path too
    for (auto* site : {&den.site1, &den.site2})
        for (auto& ex : site->experts.experts) {
            Tensor w = Tensor::glorot(cfg.d_attn_cond, cfg.d_model, rng);
            ex.attn.wo.mutable_values() = w.values();
        }
    Tensor z = Tensor::randn({2, cfg.pixels()}, rng);
    Tensor ids = Tensor::uniform({2, 4}, rng, 0.4, 0.6);
    Tensor latent = Tensor::randn({2, 3, cfg.c_emotion}, rng);
    Tensor target = Tensor::randn({2, cfg.pixels()}, rng);
    std::vector<int> t_idx = {3, 11};
    int n = 0;
    const double worst = check_params(
        den.all_params(),
        [&]() {
            return mse_loss(
                den.forward(z, t_idx, ids, latent, RoutingMode::soft()), target);
        },
        eps, &n);
    return {"denoiser_trunk", worst, n};
}

GradCheckBlock check_losses(int seed, double eps) {
    Rng rng(7000 + static_cast<uint64_t>(seed));
    const auto sched = make_schedule(32);
    PerceptualExtractor percep = PerceptualExtractor::init(8, rng);
    LossConfig lcfg{0.3, &percep};

    // A tiny linear "model" whose weights we differentiate through both the
    // latent loss and the timestep-aware spatial loss.
    Tensor w = Tensor::glorot(64, 64, rng).set_requires_grad(true);
    Tensor x0 = Tensor::uniform({2, 64}, rng, 0, 1);
    Tensor eps_true = Tensor::randn({2, 64}, rng);
    std::vector<int> t_idx = {5, 20};

    auto forward = [&]() {
        Tensor z_t = q_sample(x0, t_idx, eps_true, sched);
        Tensor eps_pred = matmul(z_t, w);
        Tensor l_latent = latent_loss(eps_true, eps_pred);
        Tensor i_pred = predict_x0(z_t, eps_pred, t_idx, sched);
        Tensor l_spatial = spatial_loss_batch(i_pred, x0, t_idx, sched, lcfg);
        return add(l_latent, scale(l_spatial, lcfg.lambda));
    };
    int n = 0;
    const double worst = check_params({w}, forward, eps, &n);
    return {"latent_and_spatial_losses", worst, n};
}

}  // namespace

GradCheckReport run_grad_checks(int seeds_per_block, double eps) {
    const auto t0 = std::chrono::steady_clock::now();
    GradCheckReport report;
    using CheckFn = GradCheckBlock (*)(int, double);
    const std::pair<const char*, CheckFn> checks[] = {
        {"attention", &check_attention},
        {"cross_attn_block", &check_cross_attn_block},
        {"local_global_gates", &check_gates},
        {"experts_soft_mixture", &check_experts_soft},
        {"emotion_to_latents", &check_emotion_latents},
        {"denoiser_trunk", &check_denoiser_trunk},
        {"latent_and_spatial_losses", &check_losses},
    };
    for (const auto& [name, fn] : checks) {
        GradCheckBlock merged{name, 0.0, 0};
        for (int s = 0; s < seeds_per_block; ++s) {
            GradCheckBlock b = fn(s, eps);
            merged.max_rel_err = std::max(merged.max_rel_err, b.max_rel_err);
            merged.params_checked += b.params_checked;
        }
        report.worst = std::max(report.worst, merged.max_rel_err);
        report.blocks.push_back(merged);
    }
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

}  // namespace moee
