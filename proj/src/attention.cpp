#include "moee/attention.hpp"

#include <cmath>

namespace moee {

AttentionParams AttentionParams::init(int d_model, int d_cond, int d_attn, int d_out, Rng& rng,
                                      bool zero_out_proj) {
    check(d_attn >= 1, "AttentionParams: d_attn must be >= 1");
    AttentionParams p;
    p.wq = Tensor::glorot(d_model, d_attn, rng).set_requires_grad(true);
    p.wk = Tensor::glorot(d_cond, d_attn, rng).set_requires_grad(true);
    p.wv = Tensor::glorot(d_cond, d_attn, rng).set_requires_grad(true);
    p.wo = zero_out_proj ? Tensor::zeros({d_attn, d_out}).set_requires_grad(true)
                         : Tensor::glorot(d_attn, d_out, rng).set_requires_grad(true);
    p.d_attn = d_attn;
    return p;
}

void AttentionParams::collect(NamedParams& out, const std::string& prefix) const {
    put_param(out, prefix + ".wq", wq);
    put_param(out, prefix + ".wk", wk);
    put_param(out, prefix + ".wv", wv);
    put_param(out, prefix + ".wo", wo);
}

void AttentionParams::set_trainable(bool v) {
    wq.set_requires_grad(v);
    wk.set_requires_grad(v);
    wv.set_requires_grad(v);
    wo.set_requires_grad(v);
}

Tensor cross_attention(const Tensor& z, const Tensor& cond, const AttentionParams& p,
                       Tensor* probs_out) {
    check(z.rank() == 3, "cross_attention: query must be [b,n,d_model], got " +
                             shape_str(z.shape()));
    check(cond.rank() == 2 || cond.rank() == 3,
          "cross_attention: condition must be [m,d_cond] or [b,m,d_cond], got " +
              shape_str(cond.shape()));
    const int d_model = z.dim(2);
    const int d_cond = cond.dim(cond.rank() - 1);
    const int m = cond.dim(cond.rank() - 2);
    check(m >= 1, "cross_attention: need at least one condition token");
    if (p.wq.dim(0) != d_model)
        throw ContractError("cross_attention: query dim mismatch, wq " + shape_str(p.wq.shape()) +
                            " vs z " + shape_str(z.shape()));
    if (p.wk.dim(0) != d_cond)
        throw ContractError("cross_attention: condition dim mismatch, wk " +
                            shape_str(p.wk.shape()) + " vs cond " + shape_str(cond.shape()));

    Tensor q = matmul(z, p.wq);                        // [b,n,da]
    Tensor k = matmul(cond, p.wk);                     // [(b,)m,da]
    Tensor v = matmul(cond, p.wv);                     // [(b,)m,da]
    Tensor scores = scale(matmul(q, transpose_last2(k)), 1.0 / std::sqrt(double(p.d_attn)));
    Tensor probs = softmax(scores);                    // [b,n,m]
    if (probs_out) *probs_out = probs;
    return matmul(matmul(probs, v), p.wo);             // [b,n,d_out]
}

CrossAttnBlock CrossAttnBlock::init(int d_model, int d_cond, int d_attn, Rng& rng,
                                    bool zero_out_proj) {
    CrossAttnBlock b;
    b.norm_gain = Tensor::full({d_model}, 1.0).set_requires_grad(true);
    b.norm_bias = Tensor::zeros({d_model}).set_requires_grad(true);
    b.attn = AttentionParams::init(d_model, d_cond, d_attn, d_model, rng, zero_out_proj);
    return b;
}

Tensor CrossAttnBlock::branch(const Tensor& hidden, const Tensor& cond) const {
    return cross_attention(layer_norm(hidden, norm_gain, norm_bias), cond, attn);
}

Tensor CrossAttnBlock::forward(const Tensor& hidden, const Tensor& cond) const {
    return add(hidden, branch(hidden, cond));
}

void CrossAttnBlock::collect(NamedParams& out, const std::string& prefix) const {
    put_param(out, prefix + ".norm_gain", norm_gain);
    put_param(out, prefix + ".norm_bias", norm_bias);
    attn.collect(out, prefix + ".attn");
}

void CrossAttnBlock::set_trainable(bool v) {
    norm_gain.set_requires_grad(v);
    norm_bias.set_requires_grad(v);
    attn.set_trainable(v);
}

}  // namespace moee
