#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "moee/moee.hpp"
#include "testutil.hpp"

using namespace moee;
using namespace moee::testutil;

namespace {

// ---- independent brute-force evaluation of the soft mixture ----------------
// X' = X + sum_i g_i * E_i(X (.) s_i), written with plain loops and no tensor
// engine, so it cannot share a bug with the production path.

struct FlatBlock {
    std::vector<double> gain, bias, wq, wk, wv, wo;
};

std::vector<double> brute_layer_norm(const std::vector<double>& x, int rows, int d,
                                     const std::vector<double>& gain,
                                     const std::vector<double>& bias, double eps) {
    std::vector<double> y(x.size());
    for (int r = 0; r < rows; ++r) {
        double mu = 0.0;
        for (int i = 0; i < d; ++i) mu += x[static_cast<size_t>(r * d + i)];
        mu /= d;
        double var = 0.0;
        for (int i = 0; i < d; ++i) {
            const double dd = x[static_cast<size_t>(r * d + i)] - mu;
            var += dd * dd;
        }
        var /= d;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int i = 0; i < d; ++i)
            y[static_cast<size_t>(r * d + i)] =
                (x[static_cast<size_t>(r * d + i)] - mu) * inv * gain[static_cast<size_t>(i)] +
                bias[static_cast<size_t>(i)];
    }
    return y;
}

std::vector<double> brute_mm(const std::vector<double>& a, int r, int k,
                             const std::vector<double>& b, int c) {
    std::vector<double> o(static_cast<size_t>(r * c), 0.0);
    for (int i = 0; i < r; ++i)
        for (int l = 0; l < k; ++l)
            for (int j = 0; j < c; ++j)
                o[static_cast<size_t>(i * c + j)] +=
                    a[static_cast<size_t>(i * k + l)] * b[static_cast<size_t>(l * c + j)];
    return o;
}

// One batch element. x: [n,d]; latent: [m,dc].
std::vector<double> brute_moee(const std::vector<double>& x, int n, int d,
                               const std::vector<double>& latent, int m, int dc,
                               const std::vector<double>& phi, const std::vector<double>& omega,
                               const std::vector<FlatBlock>& blocks, int da,
                               const std::vector<double>* forced_g) {
    const int e = static_cast<int>(blocks.size());
    // s = sigmoid(x phi): [n,e]
    auto xphi = brute_mm(x, n, d, phi, e);
    std::vector<double> s(xphi.size());
    for (size_t i = 0; i < s.size(); ++i) s[i] = 1.0 / (1.0 + std::exp(-xphi[i]));
    // g = softmax(mean(x) omega): [e]
    std::vector<double> pooled(static_cast<size_t>(d), 0.0);
    for (int t = 0; t < n; ++t)
        for (int i = 0; i < d; ++i) pooled[static_cast<size_t>(i)] += x[static_cast<size_t>(t * d + i)] / n;
    std::vector<double> g(static_cast<size_t>(e));
    if (forced_g) {
        g = *forced_g;
    } else {
        auto logits = brute_mm(pooled, 1, d, omega, e);
        double mx = logits[0];
        for (double v : logits) mx = std::max(mx, v);
        double sum = 0.0;
        for (int i = 0; i < e; ++i) {
            g[static_cast<size_t>(i)] = std::exp(logits[static_cast<size_t>(i)] - mx);
            sum += g[static_cast<size_t>(i)];
        }
        for (auto& v : g) v /= sum;
    }

    std::vector<double> out = x;
    for (int i = 0; i < e; ++i) {
        const FlatBlock& blk = blocks[static_cast<size_t>(i)];
        // normalize, then gate each token by its score for this expert
        auto normed = brute_layer_norm(x, n, d, blk.gain, blk.bias, 1e-5);
        for (int t = 0; t < n; ++t)
            for (int j = 0; j < d; ++j)
                normed[static_cast<size_t>(t * d + j)] *= s[static_cast<size_t>(t * e + i)];
        auto q = brute_mm(normed, n, d, blk.wq, da);
        auto k = brute_mm(latent, m, dc, blk.wk, da);
        auto v = brute_mm(latent, m, dc, blk.wv, da);
        std::vector<double> att(static_cast<size_t>(n * m));
        for (int t = 0; t < n; ++t) {
            double mx = -1e300;
            for (int j = 0; j < m; ++j) {
                double sc = 0.0;
                for (int l = 0; l < da; ++l)
                    sc += q[static_cast<size_t>(t * da + l)] * k[static_cast<size_t>(j * da + l)];
                sc /= std::sqrt(static_cast<double>(da));
                att[static_cast<size_t>(t * m + j)] = sc;
                mx = std::max(mx, sc);
            }
            double sum = 0.0;
            for (int j = 0; j < m; ++j) {
                att[static_cast<size_t>(t * m + j)] =
                    std::exp(att[static_cast<size_t>(t * m + j)] - mx);
                sum += att[static_cast<size_t>(t * m + j)];
            }
            for (int j = 0; j < m; ++j) att[static_cast<size_t>(t * m + j)] /= sum;
        }
        auto av = brute_mm(att, n, m, v, da);
        auto contrib = brute_mm(av, n, da, blk.wo, d);
        for (size_t idx = 0; idx < out.size(); ++idx)
            out[idx] += g[static_cast<size_t>(i)] * contrib[idx];
    }
    return out;
}

FlatBlock flatten(const CrossAttnBlock& b) {
    return {b.norm_gain.values(), b.norm_bias.values(), b.attn.wq.values(),
            b.attn.wv.defined() ? b.attn.wk.values() : std::vector<double>{},
            b.attn.wv.values(), b.attn.wo.values()};
}

struct Setup {
    MoeeModule mod;
    Tensor x, latent;
    int e, n, d, m, dc, da;
};

Setup make_setup(int e, uint64_t seed, bool random_wo = true) {
    Rng rng(seed);
    const int n = 3, d = 4, m = 2, dc = 3, da = 3;
    Setup s{MoeeModule::init(e, d, dc, da, rng),
            Tensor::randn({2, n, d}, rng),
            Tensor::randn({2, m, dc}, rng),
            e, n, d, m, dc, da};
    if (random_wo) {
        Rng wrng(seed + 999);
        for (auto& ex : s.mod.experts.experts) {
            Tensor w = Tensor::glorot(da, d, wrng);
            ex.attn.wo.mutable_values() = w.values();
        }
    }
    return s;
}

}  // namespace

TEST_CASE("local_scores: zero phi gives 0.5, deterministic per token, direct formula") {
    Rng rng(41);
    const int d = 4, e = 3;
    LocalGate zero{Tensor::zeros({d, e}).set_requires_grad(true)};
    Tensor x = Tensor::randn({1, 3, d}, rng);
    Tensor s = local_scores(x, zero);
    for (int64_t i = 0; i < s.numel(); ++i) CHECK(s.at(i) == 0.5);

    // identical tokens -> identical score rows
    std::vector<double> tok(static_cast<size_t>(d));
    for (int i = 0; i < d; ++i) tok[static_cast<size_t>(i)] = rng.uniform(-1, 1);
    std::vector<double> two = tok;
    two.insert(two.end(), tok.begin(), tok.end());
    LocalGate g = LocalGate::init(d, e, rng);
    Tensor s2 = local_scores(Tensor::from_data({1, 2, d}, two), g);
    for (int i = 0; i < e; ++i) CHECK(s2.at(i) == s2.at(e + i));

    // direct sigmoid(X phi)
    Tensor xr = Tensor::randn({1, 2, d}, rng);
    Tensor sr = local_scores(xr, g);
    for (int t = 0; t < 2; ++t)
        for (int i = 0; i < e; ++i) {
            double z = 0.0;
            for (int j = 0; j < d; ++j) z += xr.at(t * d + j) * g.phi.at(j * e + i);
            CHECK(std::fabs(sr.at(t * e + i) - 1.0 / (1.0 + std::exp(-z))) < 1e-12);
        }

    // bounds
    for (int64_t i = 0; i < sr.numel(); ++i) {
        CHECK(sr.at(i) > 0.0);
        CHECK(sr.at(i) < 1.0);
    }
}

TEST_CASE("global_weights: zero omega uniform, simplex, direct formula") {
    Rng rng(42);
    const int d = 4, e = 6;
    GlobalGate zero{Tensor::zeros({d, e}).set_requires_grad(true)};
    Tensor x = Tensor::randn({2, 3, d}, rng);
    Tensor g0 = global_weights(x, zero);
    for (int64_t i = 0; i < g0.numel(); ++i) CHECK(g0.at(i) == doctest::Approx(1.0 / 6).epsilon(1e-14));

    GlobalGate gg = GlobalGate::init(d, e, rng);
    Tensor g = global_weights(x, gg);
    for (int b = 0; b < 2; ++b) {
        double sum = 0.0;
        for (int i = 0; i < e; ++i) {
            CHECK(g.at(b * e + i) > 0.0);
            sum += g.at(b * e + i);
        }
        CHECK(std::fabs(sum - 1.0) < 1e-9);
    }

    // direct composition: softmax(mean(x) omega)
    for (int b = 0; b < 2; ++b) {
        std::vector<double> pooled(static_cast<size_t>(d), 0.0);
        for (int t = 0; t < 3; ++t)
            for (int j = 0; j < d; ++j)
                pooled[static_cast<size_t>(j)] += x.at((b * 3 + t) * d + j) / 3.0;
        std::vector<double> logits(static_cast<size_t>(e), 0.0);
        for (int i = 0; i < e; ++i)
            for (int j = 0; j < d; ++j)
                logits[static_cast<size_t>(i)] += pooled[static_cast<size_t>(j)] * gg.omega.at(j * e + i);
        double mx = logits[0];
        for (double v : logits) mx = std::max(mx, v);
        double sum = 0.0;
        std::vector<double> ex(static_cast<size_t>(e));
        for (int i = 0; i < e; ++i) {
            ex[static_cast<size_t>(i)] = std::exp(logits[static_cast<size_t>(i)] - mx);
            sum += ex[static_cast<size_t>(i)];
        }
        for (int i = 0; i < e; ++i)
            CHECK(std::fabs(g.at(b * e + i) - ex[static_cast<size_t>(i)] / sum) < 1e-12);
    }
}

TEST_CASE("moee_forward: zero-init expert projections give the identity in all modes") {
    Rng rng(43);
    const int e = 4;
    MoeeModule mod = MoeeModule::init(e, 4, 3, 3, rng);  // zero wo by construction
    Tensor x = Tensor::randn({2, 3, 4}, rng);
    Tensor latent = Tensor::randn({2, 2, 3}, rng);
    for (const RoutingMode& mode :
         {RoutingMode::soft(), RoutingMode::hard(2), RoutingMode::uniform(e)}) {
        Tensor out = mod.forward(x, latent, mode);
        CHECK(out.values() == x.values());
    }
}

TEST_CASE("routing equivalence: Hard(i) equals Soft with forced one-hot g") {
    for (uint64_t seed : {7ULL, 8ULL, 9ULL}) {
        Setup s = make_setup(3, seed);
        for (int i = 0; i < s.e; ++i) {
            Tensor hard = s.mod.forward(s.x, s.latent, RoutingMode::hard(i));
            std::vector<double> onehot(static_cast<size_t>(s.e), 0.0);
            onehot[static_cast<size_t>(i)] = 1.0;
            Tensor forced = s.mod.forward(s.x, s.latent, RoutingMode::frozen(onehot));
            CHECK(max_abs_diff(hard.values(), forced.values()) < 1e-12);
        }
    }
}

TEST_CASE("frozen g off the simplex is a contract error") {
    Setup s = make_setup(3, 77);
    CHECK_THROWS_AS(s.mod.forward(s.x, s.latent, RoutingMode::frozen({0.5, 0.4, 0.2})),
                    ContractError);
    CHECK_THROWS_AS(s.mod.forward(s.x, s.latent, RoutingMode::frozen({0.5, 0.5})), ContractError);
    // 1e-6 slack is allowed
    CHECK_NOTHROW(s.mod.forward(s.x, s.latent, RoutingMode::frozen({0.5, 0.3, 0.2000005})));
}

TEST_CASE("soft mixture matches the independent brute-force evaluation (e = 2, 3)") {
    for (int e : {2, 3}) {
        for (uint64_t seed : {100ULL, 200ULL, 300ULL}) {
            Setup s = make_setup(e, seed);
            std::vector<FlatBlock> blocks;
            for (const auto& ex : s.mod.experts.experts) {
                FlatBlock fb;
                fb.gain = ex.norm_gain.values();
                fb.bias = ex.norm_bias.values();
                fb.wq = ex.attn.wq.values();
                fb.wk = ex.attn.wk.values();
                fb.wv = ex.attn.wv.values();
                fb.wo = ex.attn.wo.values();
                blocks.push_back(fb);
            }
            Tensor out = s.mod.forward(s.x, s.latent, RoutingMode::soft());
            for (int b = 0; b < 2; ++b) {
                std::vector<double> xb(s.x.values().begin() + b * s.n * s.d,
                                       s.x.values().begin() + (b + 1) * s.n * s.d);
                std::vector<double> lb(s.latent.values().begin() + b * s.m * s.dc,
                                       s.latent.values().begin() + (b + 1) * s.m * s.dc);
                auto expect = brute_moee(xb, s.n, s.d, lb, s.m, s.dc, s.mod.local_gate.phi.values(),
                                         s.mod.global_gate.omega.values(), blocks, s.da, nullptr);
                std::vector<double> got(out.values().begin() + b * s.n * s.d,
                                        out.values().begin() + (b + 1) * s.n * s.d);
                CHECK(max_abs_diff(got, expect) < 1e-12);
            }
        }
    }
}

TEST_CASE("permuting experts together with gate columns leaves X' unchanged") {
    Setup s = make_setup(3, 55);
    std::vector<double> frozen = {0.2, 0.5, 0.3};
    Tensor base = s.mod.forward(s.x, s.latent, RoutingMode::frozen(frozen));

    const std::vector<int> perm = {2, 0, 1};
    MoeeModule permuted = s.mod;
    permuted.experts.experts.clear();
    for (int i : perm) permuted.experts.experts.push_back(s.mod.experts.experts[static_cast<size_t>(i)]);
    auto permute_cols = [&](const Tensor& w) {
        const int d = w.dim(0), e = w.dim(1);
        std::vector<double> out(static_cast<size_t>(d * e));
        for (int r = 0; r < d; ++r)
            for (int c = 0; c < e; ++c)
                out[static_cast<size_t>(r * e + c)] = w.at(r * e + perm[static_cast<size_t>(c)]);
        return Tensor::from_data({d, e}, out);
    };
    permuted.local_gate.phi = permute_cols(s.mod.local_gate.phi);
    permuted.global_gate.omega = permute_cols(s.mod.global_gate.omega);
    std::vector<double> pg = {frozen[static_cast<size_t>(perm[0])],
                              frozen[static_cast<size_t>(perm[1])],
                              frozen[static_cast<size_t>(perm[2])]};
    Tensor out = permuted.forward(s.x, s.latent, RoutingMode::frozen(pg));
    CHECK(max_abs_diff(base.values(), out.values()) < 1e-12);

    // soft mode: permuting omega columns permutes g identically
    Tensor soft_base = s.mod.forward(s.x, s.latent, RoutingMode::soft());
    Tensor soft_perm = permuted.forward(s.x, s.latent, RoutingMode::soft());
    CHECK(max_abs_diff(soft_base.values(), soft_perm.values()) < 1e-12);
}

TEST_CASE("routing trace: g entropy and w/o-GS wiring") {
    Setup s = make_setup(3, 66);
    RoutingTrace trace;
    s.mod.forward(s.x, s.latent, RoutingMode::uniform(3), &trace);
    for (double v : trace.g) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));
    CHECK(trace.mean_entropy() == doctest::Approx(std::log(3.0)).epsilon(1e-12));

    RoutingTrace hard_trace;
    s.mod.forward(s.x, s.latent, RoutingMode::hard(1), &hard_trace);
    CHECK(hard_trace.mean_entropy() == doctest::Approx(0.0));
}

TEST_CASE("gradients flow to gates and all experts in soft mode") {
    Rng rng(67);
    for (int seed = 0; seed < 10; ++seed) {
        Setup s = make_setup(2, 400 + static_cast<uint64_t>(seed));
        s.x.set_requires_grad(true);
        s.latent.set_requires_grad(true);
        Tensor target = Tensor::randn({2, s.n, s.d}, rng);
        auto f = [&]() {
            return mse_loss(s.mod.forward(s.x, s.latent, RoutingMode::soft()), target).item();
        };
        Tape tape;
        {
            Tape::Scope scope(tape);
            tape.backward(mse_loss(s.mod.forward(s.x, s.latent, RoutingMode::soft()), target));
        }
        Tensor& phi = s.mod.local_gate.phi;
        Tensor& omega = s.mod.global_gate.omega;
        CHECK(max_grad_err(phi, phi.grad(), f) < 1e-4);
        CHECK(max_grad_err(omega, omega.grad(), f) < 1e-4);
        CHECK(max_grad_err(s.x, s.x.grad(), f) < 1e-4);
        CHECK(max_grad_err(s.latent, s.latent.grad(), f) < 1e-4);

        double phi_mag = 0.0, omega_mag = 0.0;
        for (double v : phi.grad()) phi_mag += std::fabs(v);
        for (double v : omega.grad()) omega_mag += std::fabs(v);
        CHECK(phi_mag > 0.0);
        CHECK(omega_mag > 0.0);
        for (const auto& ex : s.mod.experts.experts) {
            double m = 0.0;
            for (double v : ex.attn.wv.grad()) m += std::fabs(v);
            CHECK(m > 0.0);
            CHECK(max_grad_err(const_cast<Tensor&>(ex.attn.wq), ex.attn.wq.grad(), f) < 1e-4);
            CHECK(max_grad_err(const_cast<Tensor&>(ex.attn.wo), ex.attn.wo.grad(), f) < 1e-4);
        }
    }
}

TEST_CASE("hard routing evaluates only the selected expert") {
    // Poison a non-selected expert with NaN weights: Hard(0) must not see it.
    Setup s = make_setup(2, 68);
    s.mod.experts.experts[1].attn.wq.mutable_values().assign(
        s.mod.experts.experts[1].attn.wq.values().size(), std::nan(""));
    Tensor out = s.mod.forward(s.x, s.latent, RoutingMode::hard(0));
    CHECK(!out.has_nonfinite());
}
