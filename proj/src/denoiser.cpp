#include "moee/denoiser.hpp"

#include <cmath>

namespace moee {

TrunkBlock TrunkBlock::init(int d_model, int d_attn, int mlp_hidden, Rng& rng) {
    TrunkBlock b;
    b.ln1_g = Tensor::full({d_model}, 1.0).set_requires_grad(true);
    b.ln1_b = Tensor::zeros({d_model}).set_requires_grad(true);
    b.self_attn = AttentionParams::init(d_model, d_model, d_attn, d_model, rng);
    b.ln2_g = Tensor::full({d_model}, 1.0).set_requires_grad(true);
    b.ln2_b = Tensor::zeros({d_model}).set_requires_grad(true);
    b.mlp_w1 = Tensor::glorot(d_model, mlp_hidden, rng).set_requires_grad(true);
    b.mlp_b1 = Tensor::zeros({mlp_hidden}).set_requires_grad(true);
    b.mlp_w2 = Tensor::glorot(mlp_hidden, d_model, rng).set_requires_grad(true);
    b.mlp_b2 = Tensor::zeros({d_model}).set_requires_grad(true);
    return b;
}

Tensor TrunkBlock::forward(const Tensor& h) const {
    Tensor u = layer_norm(h, ln1_g, ln1_b);
    Tensor h2 = add(h, cross_attention(u, u, self_attn));
    Tensor v = layer_norm(h2, ln2_g, ln2_b);
    Tensor m = add(matmul(tanh_t(add(matmul(v, mlp_w1), mlp_b1)), mlp_w2), mlp_b2);
    return add(h2, m);
}

void TrunkBlock::collect(NamedParams& out, const std::string& prefix) const {
    put_param(out, prefix + ".ln1_g", ln1_g);
    put_param(out, prefix + ".ln1_b", ln1_b);
    self_attn.collect(out, prefix + ".attn");
    put_param(out, prefix + ".ln2_g", ln2_g);
    put_param(out, prefix + ".ln2_b", ln2_b);
    put_param(out, prefix + ".mlp_w1", mlp_w1);
    put_param(out, prefix + ".mlp_b1", mlp_b1);
    put_param(out, prefix + ".mlp_w2", mlp_w2);
    put_param(out, prefix + ".mlp_b2", mlp_b2);
}

void TrunkBlock::set_trainable(bool v) {
    for (const Tensor* t : {&ln1_g, &ln1_b, &ln2_g, &ln2_b, &mlp_w1, &mlp_b1, &mlp_w2, &mlp_b2})
        const_cast<Tensor*>(t)->set_requires_grad(v);
    const_cast<AttentionParams&>(self_attn).set_trainable(v);
}

Tensor time_embedding(const std::vector<int>& t_idx, int d) {
    check(d % 2 == 0, "time_embedding: dim must be even");
    const int b = static_cast<int>(t_idx.size());
    const int half = d / 2;
    std::vector<double> emb(static_cast<size_t>(b * d));
    for (int bi = 0; bi < b; ++bi) {
        const double t = static_cast<double>(t_idx[static_cast<size_t>(bi)]);
        for (int i = 0; i < half; ++i) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / half);
            emb[static_cast<size_t>(bi * d + 2 * i)] = std::sin(t * freq);
            emb[static_cast<size_t>(bi * d + 2 * i + 1)] = std::cos(t * freq);
        }
    }
    return Tensor::from_data({b, d}, std::move(emb));
}

Denoiser Denoiser::init(const DenoiserConfig& cfg, Rng& rng) {
    check(cfg.image_hw % cfg.patch == 0, "Denoiser: patch must divide image side");
    check(cfg.n_blocks >= 2, "Denoiser: need at least 2 trunk blocks");
    Denoiser d;
    d.cfg = cfg;
    const int pp = cfg.patch * cfg.patch;
    d.patch_w = Tensor::glorot(pp, cfg.d_model, rng).set_requires_grad(true);
    d.patch_b = Tensor::zeros({cfg.d_model}).set_requires_grad(true);
    d.pos_embed = Tensor::randn({cfg.n_tokens(), cfg.d_model}, rng, 0.02).set_requires_grad(true);
    for (int i = 0; i < cfg.n_blocks; ++i)
        d.blocks.push_back(TrunkBlock::init(cfg.d_model, cfg.d_attn, cfg.mlp_hidden, rng));
    d.id_proj_w =
        Tensor::glorot(4, cfg.n_id_tokens * cfg.d_id, rng).set_requires_grad(true);
    d.id_proj_b = Tensor::zeros({cfg.n_id_tokens * cfg.d_id}).set_requires_grad(true);
    d.id_block = CrossAttnBlock::init(cfg.d_model, cfg.d_id, cfg.d_attn, rng, true);
    if (cfg.wiring == EmotionWiring::Moee) {
        d.site1 = MoeeModule::init(cfg.num_experts, cfg.d_model, cfg.c_emotion, cfg.d_attn_cond, rng);
        d.site2 = MoeeModule::init(cfg.num_experts, cfg.d_model, cfg.c_emotion, cfg.d_attn_cond, rng);
    } else if (cfg.wiring == EmotionWiring::PlainBlock) {
        d.plain_emo = CrossAttnBlock::init(cfg.d_model, cfg.c_emotion, cfg.d_attn_cond, rng, true);
    }
    d.out_ln_g = Tensor::full({cfg.d_model}, 1.0).set_requires_grad(true);
    d.out_ln_b = Tensor::zeros({cfg.d_model}).set_requires_grad(true);
    d.out_w = Tensor::glorot(cfg.d_model, pp, rng).set_requires_grad(true);
    d.out_b = Tensor::zeros({pp}).set_requires_grad(true);
    return d;
}

Tensor Denoiser::forward(const Tensor& z, const std::vector<int>& t_idx, const Tensor& id_params,
                         const Tensor& emotion_latent, const RoutingMode& mode,
                         RoutingTrace* trace1, RoutingTrace* trace2) const {
    check(z.rank() == 2 && z.dim(1) == cfg.pixels(),
          "Denoiser: expected [b," + std::to_string(cfg.pixels()) + "], got " +
              shape_str(z.shape()));
    const int b = z.dim(0);
    check(id_params.rank() == 2 && id_params.dim(0) == b && id_params.dim(1) == 4,
          "Denoiser: id_params must be [b,4]");
    const int s = cfg.tokens_per_side();
    const int p = cfg.patch;

    // patchify: [b, hw*hw] -> [b, n_tokens, p*p]
    Tensor h = reshape(z, {b, s, p, s, p});
    h = permute(h, {0, 1, 3, 2, 4});
    h = reshape(h, {b, cfg.n_tokens(), p * p});

    h = add(add(matmul(h, patch_w), patch_b), pos_embed);
    h = add(h, reshape(time_embedding(t_idx, cfg.d_model), {b, 1, cfg.d_model}));

    const bool use_emotion = emotion_latent.defined() && cfg.wiring != EmotionWiring::None;
    const int mid = cfg.n_blocks / 2 - 1;
    for (int i = 0; i < cfg.n_blocks; ++i) {
        h = blocks[static_cast<size_t>(i)].forward(h);
        if (i == mid) {
            Tensor id_tokens = reshape(add(matmul(id_params, id_proj_w), id_proj_b),
                                       {b, cfg.n_id_tokens, cfg.d_id});
            h = id_block.forward(h, id_tokens);
            if (use_emotion) {
                if (cfg.wiring == EmotionWiring::Moee)
                    h = site1.forward(h, emotion_latent, mode, trace1);
                else
                    h = plain_emo.forward(h, emotion_latent);
            }
        }
    }
    if (use_emotion && cfg.wiring == EmotionWiring::Moee)
        h = site2.forward(h, emotion_latent, mode, trace2);

    h = layer_norm(h, out_ln_g, out_ln_b);
    h = add(matmul(h, out_w), out_b);  // [b, n_tokens, p*p]

    // unpatchify
    h = reshape(h, {b, s, s, p, p});
    h = permute(h, {0, 1, 3, 2, 4});
    return reshape(h, {b, cfg.pixels()});
}

void Denoiser::collect(NamedParams& out, const std::string& prefix) const {
    put_param(out, prefix + ".patch_w", patch_w);
    put_param(out, prefix + ".patch_b", patch_b);
    put_param(out, prefix + ".pos_embed", pos_embed);
    for (size_t i = 0; i < blocks.size(); ++i)
        blocks[i].collect(out, prefix + ".trunk" + std::to_string(i));
    put_param(out, prefix + ".id_proj_w", id_proj_w);
    put_param(out, prefix + ".id_proj_b", id_proj_b);
    id_block.collect(out, prefix + ".id_block");
    if (cfg.wiring == EmotionWiring::Moee) {
        site1.collect(out, prefix + ".moee1");
        site2.collect(out, prefix + ".moee2");
    } else if (cfg.wiring == EmotionWiring::PlainBlock) {
        plain_emo.collect(out, prefix + ".plain_emo");
    }
    put_param(out, prefix + ".out_ln_g", out_ln_g);
    put_param(out, prefix + ".out_ln_b", out_ln_b);
    put_param(out, prefix + ".out_w", out_w);
    put_param(out, prefix + ".out_b", out_b);
}

std::vector<Tensor> Denoiser::base_params() const {
    NamedParams named;
    put_param(named, "patch_w", patch_w);
    put_param(named, "patch_b", patch_b);
    put_param(named, "pos_embed", pos_embed);
    for (size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(named, "t");
    put_param(named, "id_proj_w", id_proj_w);
    put_param(named, "id_proj_b", id_proj_b);
    id_block.collect(named, "id");
    put_param(named, "out_ln_g", out_ln_g);
    put_param(named, "out_ln_b", out_ln_b);
    put_param(named, "out_w", out_w);
    put_param(named, "out_b", out_b);
    std::vector<Tensor> out;
    for (auto& [n, t] : named) out.push_back(t);
    return out;
}

std::vector<Tensor> Denoiser::expert_params(int i) const {
    check(cfg.wiring == EmotionWiring::Moee, "expert_params: not a mixture denoiser");
    NamedParams named;
    site1.experts.experts[static_cast<size_t>(i)].collect(named, "a");
    site2.experts.experts[static_cast<size_t>(i)].collect(named, "b");
    std::vector<Tensor> out;
    for (auto& [n, t] : named) out.push_back(t);
    return out;
}

std::vector<Tensor> Denoiser::gate_params() const {
    check(cfg.wiring == EmotionWiring::Moee, "gate_params: not a mixture denoiser");
    return {site1.local_gate.phi, site1.global_gate.omega, site2.local_gate.phi,
            site2.global_gate.omega};
}

std::vector<Tensor> Denoiser::plain_emo_params() const {
    check(cfg.wiring == EmotionWiring::PlainBlock, "plain_emo_params: wrong wiring");
    NamedParams named;
    plain_emo.collect(named, "p");
    std::vector<Tensor> out;
    for (auto& [n, t] : named) out.push_back(t);
    return out;
}

std::vector<Tensor> Denoiser::all_params() const {
    NamedParams named;
    collect(named, "d");
    std::vector<Tensor> out;
    for (auto& [n, t] : named) out.push_back(t);
    return out;
}

void Denoiser::set_all_trainable(bool v) {
    for (Tensor t : all_params()) t.set_requires_grad(v);
}

}  // namespace moee
