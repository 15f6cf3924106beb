#pragma once

#include <optional>
#include <vector>

#include "moee/attention.hpp"
#include "moee/emotions.hpp"

namespace moee {

/// Per-token gating: sigmoid(X . phi) gives one score per token per expert.
struct LocalGate {
    Tensor phi;  // [d, e]
    static LocalGate init(int d, int e, Rng& rng);
    void collect(NamedParams& out, const std::string& prefix) const;
    void set_trainable(bool v) { phi.set_requires_grad(v); }
};

/// Whole-input gating: softmax(mean-pooled X . omega) gives one weight per
/// expert, on the simplex.
struct GlobalGate {
    Tensor omega;  // [d, e]
    static GlobalGate init(int d, int e, Rng& rng);
    void collect(NamedParams& out, const std::string& prefix) const;
    void set_trainable(bool v) { omega.set_requires_grad(v); }
};

/// Ordered expert list; index i is the expert for emotion_name(i) when
/// e == kNumBasicEmotions (tests may use smaller e).
struct ExpertSet {
    std::vector<CrossAttnBlock> experts;
    static ExpertSet init(int e, int d_model, int d_cond, int d_attn, Rng& rng);
    int size() const { return static_cast<int>(experts.size()); }
    void collect(NamedParams& out, const std::string& prefix) const;
    void set_trainable(bool v);
};

/// How expert outputs are combined:
///  - Soft: g from the global gate (all experts run),
///  - Hard(i): one-hot on expert i (only that expert runs),
///  - Frozen(v): externally supplied simplex weights (compound-control
///    experiments); validated to sum to 1 within 1e-6.
struct RoutingMode {
    enum class Kind { Soft, Hard, Frozen };
    Kind kind = Kind::Soft;
    int expert = -1;
    std::vector<double> frozen_g;

    static RoutingMode soft() { return {Kind::Soft, -1, {}}; }
    static RoutingMode hard(int i) { return {Kind::Hard, i, {}}; }
    static RoutingMode frozen(std::vector<double> g) {
        return {Kind::Frozen, -1, std::move(g)};
    }
    /// Constant g = 1/e (global-soft-assignment ablation).
    static RoutingMode uniform(int e) {
        return frozen(std::vector<double>(static_cast<size_t>(e), 1.0 / e));
    }
};

/// Diagnostics captured during a forward pass; exported to the metrics
/// stream for routing analysis.
struct RoutingTrace {
    std::vector<double> g;  // flattened [b, e] global weights actually used
    int batch = 0;
    int num_experts = 0;
    double mean_entropy() const;
};

Tensor local_scores(const Tensor& x, const LocalGate& gate);
Tensor global_weights(const Tensor& x, const GlobalGate& gate);

/// X' = X + sum_i g_i * E_i(X (.) s_i) with s from the local gate and g from
/// the routing mode. s_i multiplies each token's full feature vector by that
/// token's score for expert i. Hard routing evaluates only the selected
/// expert; summation order is fixed by expert index.
Tensor moee_forward(const Tensor& x, const Tensor& emotion_latent, const ExpertSet& experts,
                    const LocalGate& lg, const GlobalGate& gg, const RoutingMode& mode,
                    RoutingTrace* trace = nullptr);

/// One conditioning site: experts plus both gates over a fixed feature dim.
struct MoeeModule {
    ExpertSet experts;
    LocalGate local_gate;
    GlobalGate global_gate;

    static MoeeModule init(int e, int d_model, int d_cond, int d_attn, Rng& rng);
    Tensor forward(const Tensor& x, const Tensor& emotion_latent, const RoutingMode& mode,
                   RoutingTrace* trace = nullptr) const {
        return moee_forward(x, emotion_latent, experts, local_gate, global_gate, mode, trace);
    }
    void collect(NamedParams& out, const std::string& prefix) const;
    void set_trainable(bool v);
};

}  // namespace moee
