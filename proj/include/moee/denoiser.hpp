#pragma once

#include <optional>

#include "moee/attention.hpp"
#include "moee/moee.hpp"

namespace moee {

/// How emotion conditioning is wired into the denoiser:
///  - Moee: a mixture module after the middle and final trunk blocks,
///  - PlainBlock: one plain cross-attention block at the middle site (the
///    no-mixture ablation),
///  - None: no emotion pathway at all.
enum class EmotionWiring { Moee, PlainBlock, None };

struct DenoiserConfig {
    int image_hw = 16;
    int patch = 4;
    int d_model = 32;
    int n_blocks = 4;
    int mlp_hidden = 64;
    int d_attn = 32;
    int n_id_tokens = 4;
    int d_id = 16;
    int num_experts = kNumBasicEmotions;
    int c_emotion = 64;   // must match the emotion-latents output channels
    int d_attn_cond = 32;
    EmotionWiring wiring = EmotionWiring::Moee;

    int tokens_per_side() const { return image_hw / patch; }
    int n_tokens() const { return tokens_per_side() * tokens_per_side(); }
    int pixels() const { return image_hw * image_hw; }
};

/// Pre-LN self-attention + MLP residual block.
struct TrunkBlock {
    Tensor ln1_g, ln1_b;
    AttentionParams self_attn;
    Tensor ln2_g, ln2_b;
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;

    static TrunkBlock init(int d_model, int d_attn, int mlp_hidden, Rng& rng);
    Tensor forward(const Tensor& h) const;
    void collect(NamedParams& out, const std::string& prefix) const;
    void set_trainable(bool v);
};

/// Sinusoidal embedding of per-sample schedule indices: [b, d] constant.
Tensor time_embedding(const std::vector<int>& t_idx, int d);

/// Conditional noise predictor over patch tokens. Pipeline:
/// patchify -> embed + positions + time embedding -> trunk blocks with the
/// identity cross-attention block and emotion conditioning sites interleaved
/// (after the middle and final blocks) -> norm -> project -> unpatchify.
struct Denoiser {
    DenoiserConfig cfg;

    Tensor patch_w, patch_b;  // [p*p, d_model], [d_model]
    Tensor pos_embed;         // [n_tokens, d_model]
    std::vector<TrunkBlock> blocks;
    Tensor id_proj_w, id_proj_b;  // identity params -> n_id_tokens tokens
    CrossAttnBlock id_block;
    MoeeModule site1, site2;      // wiring == Moee
    CrossAttnBlock plain_emo;     // wiring == PlainBlock
    Tensor out_ln_g, out_ln_b, out_w, out_b;

    static Denoiser init(const DenoiserConfig& cfg, Rng& rng);

    /// z: [b, pixels]; id_params: [b, 4]; emotion_latent may be undefined
    /// (stage-1 training and the None wiring skip the emotion pathway).
    Tensor forward(const Tensor& z, const std::vector<int>& t_idx, const Tensor& id_params,
                   const Tensor& emotion_latent, const RoutingMode& mode,
                   RoutingTrace* trace1 = nullptr, RoutingTrace* trace2 = nullptr) const;

    void collect(NamedParams& out, const std::string& prefix) const;

    /// Parameter groups for stage-wise freezing.
    std::vector<Tensor> base_params() const;           // trunk + embeddings + id + head
    std::vector<Tensor> expert_params(int i) const;    // expert i at both sites
    std::vector<Tensor> gate_params() const;           // local + global gates, both sites
    std::vector<Tensor> plain_emo_params() const;
    std::vector<Tensor> all_params() const;

    void set_all_trainable(bool v);
};

}  // namespace moee
