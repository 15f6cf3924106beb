#pragma once

#include "moee/params.hpp"
#include "moee/rng.hpp"
#include "moee/tensor.hpp"

namespace moee {

/// Single-head cross-attention projections. d_attn is both the key
/// dimensionality and the sqrt scaling divisor; the output projection maps
/// the attended values to d_out (usually the query model dim).
struct AttentionParams {
    Tensor wq;  // [d_model, d_attn]
    Tensor wk;  // [d_cond,  d_attn]
    Tensor wv;  // [d_cond,  d_attn]
    Tensor wo;  // [d_attn,  d_out]
    int d_attn = 0;

    /// Glorot-init projections; zero_out_proj additionally zeroes wo so the
    /// module starts as an exact residual no-op.
    static AttentionParams init(int d_model, int d_cond, int d_attn, int d_out, Rng& rng,
                                bool zero_out_proj = false);

    void collect(NamedParams& out, const std::string& prefix) const;
    void set_trainable(bool v);
};

/// softmax((Z Wq)(C Wk)^T / sqrt(d_attn)) (C Wv) Wo.
/// Z: [b, n, d_model]; C: [b, m, d_cond] or unbatched [m, d_cond].
/// If probs_out is non-null it receives the [b, n, m] attention rows.
Tensor cross_attention(const Tensor& z, const Tensor& cond, const AttentionParams& p,
                       Tensor* probs_out = nullptr);

/// Pre-LayerNorm cross-attention block with skip connection: the hidden
/// state is the query, normalized before attention, and the attended result
/// is added back onto the input.
struct CrossAttnBlock {
    Tensor norm_gain;  // [d_model]
    Tensor norm_bias;  // [d_model]
    AttentionParams attn;

    static CrossAttnBlock init(int d_model, int d_cond, int d_attn, Rng& rng,
                               bool zero_out_proj = false);

    /// hidden + branch(hidden, cond)
    Tensor forward(const Tensor& hidden, const Tensor& cond) const;
    /// cross_attention(layer_norm(hidden), cond) without the skip; mixture
    /// modules add their own residual.
    Tensor branch(const Tensor& hidden, const Tensor& cond) const;

    void collect(NamedParams& out, const std::string& prefix) const;
    void set_trainable(bool v);
};

}  // namespace moee
