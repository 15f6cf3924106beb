#include "moee/moee.hpp"

#include <cmath>

namespace moee {

LocalGate LocalGate::init(int d, int e, Rng& rng) {
    return {Tensor::glorot(d, e, rng).set_requires_grad(true)};
}
void LocalGate::collect(NamedParams& out, const std::string& prefix) const {
    put_param(out, prefix + ".phi", phi);
}

GlobalGate GlobalGate::init(int d, int e, Rng& rng) {
    return {Tensor::glorot(d, e, rng).set_requires_grad(true)};
}
void GlobalGate::collect(NamedParams& out, const std::string& prefix) const {
    put_param(out, prefix + ".omega", omega);
}

ExpertSet ExpertSet::init(int e, int d_model, int d_cond, int d_attn, Rng& rng) {
    check(e >= 1, "ExpertSet: need at least one expert");
    ExpertSet s;
    s.experts.reserve(static_cast<size_t>(e));
    // Expert output projections zero-init: the mixture starts as an exact
    // identity on X, so a frozen base model is unperturbed until the experts
    // are trained.
    for (int i = 0; i < e; ++i)
        s.experts.push_back(CrossAttnBlock::init(d_model, d_cond, d_attn, rng, true));
    return s;
}
void ExpertSet::collect(NamedParams& out, const std::string& prefix) const {
    for (size_t i = 0; i < experts.size(); ++i)
        experts[i].collect(out, prefix + ".expert" + std::to_string(i));
}
void ExpertSet::set_trainable(bool v) {
    for (auto& ex : experts) ex.set_trainable(v);
}

double RoutingTrace::mean_entropy() const {
    if (batch == 0 || num_experts == 0) return 0.0;
    double total = 0.0;
    for (int b = 0; b < batch; ++b) {
        double h = 0.0;
        for (int i = 0; i < num_experts; ++i) {
            const double p = g[static_cast<size_t>(b * num_experts + i)];
            if (p > 0.0) h -= p * std::log(p);
        }
        total += h;
    }
    return total / batch;
}

Tensor local_scores(const Tensor& x, const LocalGate& gate) {
    check(x.rank() == 3, "local_scores: expected [b,n,d], got " + shape_str(x.shape()));
    if (x.dim(2) != gate.phi.dim(0))
        throw ContractError("local_scores: feature dim mismatch, x " + shape_str(x.shape()) +
                            " vs phi " + shape_str(gate.phi.shape()));
    return sigmoid(matmul(x, gate.phi));  // [b,n,e]
}

Tensor global_weights(const Tensor& x, const GlobalGate& gate) {
    check(x.rank() == 3, "global_weights: expected [b,n,d], got " + shape_str(x.shape()));
    if (x.dim(2) != gate.omega.dim(0))
        throw ContractError("global_weights: feature dim mismatch, x " + shape_str(x.shape()) +
                            " vs omega " + shape_str(gate.omega.shape()));
    return softmax(matmul(mean_tokens(x), gate.omega));  // [b,e]
}

namespace {

void fill_trace(RoutingTrace* trace, const Tensor& g, int b, int e) {
    if (!trace) return;
    trace->g = g.values();
    trace->batch = b;
    trace->num_experts = e;
}

}  // namespace

Tensor moee_forward(const Tensor& x, const Tensor& emotion_latent, const ExpertSet& experts,
                    const LocalGate& lg, const GlobalGate& gg, const RoutingMode& mode,
                    RoutingTrace* trace) {
    check(x.rank() == 3, "moee_forward: expected [b,n,d], got " + shape_str(x.shape()));
    const int b = x.dim(0);
    const int e = experts.size();

    Tensor s = local_scores(x, lg);  // [b,n,e]

    // Expert contribution: the token scores scale the expert's normalized
    // query tokens. Scaling before the norm would cancel (LayerNorm is
    // scale-invariant per token) and leave phi without gradient.
    auto expert_contrib = [&](int i, const Tensor& si) {
        const CrossAttnBlock& ex = experts.experts[static_cast<size_t>(i)];
        Tensor normed = layer_norm(x, ex.norm_gain, ex.norm_bias);
        return cross_attention(mul(normed, si), emotion_latent, ex.attn);
    };

    if (mode.kind == RoutingMode::Kind::Hard) {
        check(mode.expert >= 0 && mode.expert < e,
              "moee_forward: hard routing index " + std::to_string(mode.expert) +
                  " outside [0," + std::to_string(e) + ")");
        if (trace) {
            std::vector<double> g(static_cast<size_t>(b * e), 0.0);
            for (int bi = 0; bi < b; ++bi) g[static_cast<size_t>(bi * e + mode.expert)] = 1.0;
            trace->g = std::move(g);
            trace->batch = b;
            trace->num_experts = e;
        }
        const int i = mode.expert;
        Tensor si = slice_last(s, i, i + 1);  // [b,n,1]
        return add(x, expert_contrib(i, si));
    }

    Tensor g;  // [b,e]
    if (mode.kind == RoutingMode::Kind::Soft) {
        g = global_weights(x, gg);
    } else {
        check(static_cast<int>(mode.frozen_g.size()) == e,
              "moee_forward: frozen g has " + std::to_string(mode.frozen_g.size()) +
                  " entries for " + std::to_string(e) + " experts");
        double sum = 0.0;
        for (double v : mode.frozen_g) {
            check(v >= 0.0, "moee_forward: frozen g entry negative");
            sum += v;
        }
        check(std::fabs(sum - 1.0) <= 1e-6,
              "moee_forward: frozen g off the simplex (sum = " + std::to_string(sum) + ")");
        std::vector<double> tiled(static_cast<size_t>(b * e));
        for (int bi = 0; bi < b; ++bi)
            for (int i = 0; i < e; ++i) tiled[static_cast<size_t>(bi * e + i)] = mode.frozen_g[static_cast<size_t>(i)];
        g = Tensor::from_data({b, e}, std::move(tiled));
    }
    fill_trace(trace, g, b, e);

    Tensor out = x;
    for (int i = 0; i < e; ++i) {
        Tensor si = slice_last(s, i, i + 1);                       // [b,n,1]
        Tensor gi = reshape(slice_last(g, i, i + 1), {b, 1, 1});   // [b,1,1]
        out = add(out, mul(expert_contrib(i, si), gi));
    }
    return out;
}

MoeeModule MoeeModule::init(int e, int d_model, int d_cond, int d_attn, Rng& rng) {
    MoeeModule m;
    m.experts = ExpertSet::init(e, d_model, d_cond, d_attn, rng);
    m.local_gate = LocalGate::init(d_model, e, rng);
    m.global_gate = GlobalGate::init(d_model, e, rng);
    return m;
}

void MoeeModule::collect(NamedParams& out, const std::string& prefix) const {
    experts.collect(out, prefix);
    local_gate.collect(out, prefix + ".local_gate");
    global_gate.collect(out, prefix + ".global_gate");
}

void MoeeModule::set_trainable(bool v) {
    experts.set_trainable(v);
    local_gate.set_trainable(v);
    global_gate.set_trainable(v);
}

}  // namespace moee
