#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "moee/optim.hpp"
#include "moee/tensor.hpp"
#include "testutil.hpp"

using namespace moee;
using namespace moee::testutil;

TEST_CASE("matmul: identity and hand product") {
    Tensor i2 = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    CHECK(matmul(i2, a).values() == a.values());

    Tensor r = matmul(Tensor::from_data({1, 2}, {1, 2}), Tensor::from_data({2, 1}, {3, 4}));
    CHECK(r.item() == 11.0);
}

TEST_CASE("matmul: shape error names both operands") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 3});
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2,3]"), ContractError);
}

TEST_CASE("matmul gradients vs finite differences") {
    Rng rng(101);
    for (int seed = 0; seed < 10; ++seed) {
        Tensor a = Tensor::randn({3, 4}, rng).set_requires_grad(true);
        Tensor b = Tensor::randn({4, 2}, rng).set_requires_grad(true);
        Tape tape;
        {
            Tape::Scope scope(tape);
            Tensor loss = sum_all(matmul(a, b));
            tape.backward(loss);
        }
        auto f = [&]() { return sum_all(matmul(a, b)).item(); };
        CHECK(max_grad_err(a, a.grad(), f) < 1e-6);
        CHECK(max_grad_err(b, b.grad(), f) < 1e-6);
    }
}

TEST_CASE("batched matmul broadcasting and gradient") {
    Rng rng(102);
    Tensor a = Tensor::randn({2, 3, 4}, rng).set_requires_grad(true);
    Tensor w = Tensor::randn({4, 5}, rng).set_requires_grad(true);
    Tape tape;
    Tensor loss;
    {
        Tape::Scope scope(tape);
        Tensor prod = matmul(a, w);
        REQUIRE(prod.shape() == Shape{2, 3, 5});
        loss = mse_loss(prod, Tensor::zeros({2, 3, 5}));
        tape.backward(loss);
    }
    auto f = [&]() { return mse_loss(matmul(a, w), Tensor::zeros({2, 3, 5})).item(); };
    CHECK(max_grad_err(a, a.grad(), f) < 1e-6);
    CHECK(max_grad_err(w, w.grad(), f) < 1e-6);
}

TEST_CASE("softmax: symmetry, stabilization, direct formula") {
    Tensor s = softmax(Tensor::from_data({2}, {0, 0}));
    CHECK(s.at(0) == 0.5);
    CHECK(s.at(1) == 0.5);

    Tensor big = softmax(Tensor::from_data({3}, {1000, 1000, 1000}));
    for (int i = 0; i < 3; ++i) {
        CHECK(std::isfinite(big.at(i)));
        CHECK(big.at(i) == doctest::Approx(1.0 / 3.0));
    }

    Tensor x = Tensor::from_data({3}, {1, 2, 3});
    Tensor y = softmax(x);
    double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    for (int i = 0; i < 3; ++i)
        CHECK(std::fabs(y.at(i) - std::exp(1.0 + i) / z) < 1e-12);
}

TEST_CASE("softmax rows sum to one and lie in [0,1]") {
    Rng rng(103);
    Tensor x = Tensor::randn({4, 6, 5}, rng, 3.0);
    Tensor y = softmax(x);
    for (int r = 0; r < 24; ++r) {
        double s = 0.0;
        for (int i = 0; i < 5; ++i) {
            const double v = y.at(r * 5 + i);
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            s += v;
        }
        CHECK(std::fabs(s - 1.0) < 1e-9);
    }
}

TEST_CASE("softmax along a non-terminal axis") {
    Rng rng(104);
    Tensor x = Tensor::randn({2, 3, 4}, rng);
    Tensor y = softmax(x, 1);
    for (int b = 0; b < 2; ++b)
        for (int d = 0; d < 4; ++d) {
            double s = 0.0;
            for (int t = 0; t < 3; ++t) s += y.at((b * 3 + t) * 4 + d);
            CHECK(std::fabs(s - 1.0) < 1e-9);
        }
    CHECK_THROWS_AS(softmax(x, 3), ContractError);
}

TEST_CASE("sigmoid: midpoint, saturation, strict range, gradient") {
    CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);

    Tensor sat = sigmoid(Tensor::from_data({4}, {-1e6, -750.0, 750.0, 1e6}));
    for (int i = 0; i < 4; ++i) {
        CHECK(std::isfinite(sat.at(i)));
        CHECK(sat.at(i) > 0.0);
        CHECK(sat.at(i) < 1.0);
    }

    Rng rng(105);
    for (int seed = 0; seed < 10; ++seed) {
        Tensor x = Tensor::randn({6}, rng).set_requires_grad(true);
        Tape tape;
        {
            Tape::Scope scope(tape);
            tape.backward(sum_all(sigmoid(x)));
        }
        // analytic dy/dx = y(1-y)
        for (int i = 0; i < 6; ++i) {
            const double y = sigmoid(x).at(i);
            CHECK(rel_err(x.grad()[static_cast<size_t>(i)], y * (1 - y)) < 1e-9);
        }
        auto f = [&]() { return sum_all(sigmoid(x)).item(); };
        CHECK(max_grad_err(x, x.grad(), f) < 1e-6);
    }
}

TEST_CASE("layer_norm: constant slice, direct formula, gradient") {
    Tensor g1 = Tensor::from_data({3}, {1, 1, 1});
    Tensor b0 = Tensor::zeros({3});

    Tensor flat = layer_norm(Tensor::from_data({1, 3}, {5, 5, 5}), g1, b0, 1e-8);
    for (int i = 0; i < 3; ++i) CHECK(std::fabs(flat.at(i)) < 1e-12);

    Tensor y = layer_norm(Tensor::from_data({1, 3}, {1, 2, 3}), g1, b0, 1e-14);
    const double r = std::sqrt(1.5);
    CHECK(std::fabs(y.at(0) + r) < 1e-6);
    CHECK(std::fabs(y.at(1)) < 1e-9);
    CHECK(std::fabs(y.at(2) - r) < 1e-6);

    Rng rng(106);
    for (int seed = 0; seed < 10; ++seed) {
        Tensor x = Tensor::randn({2, 4}, rng).set_requires_grad(true);
        Tensor g = Tensor::uniform({4}, rng, 0.5, 1.5).set_requires_grad(true);
        Tensor b = Tensor::randn({4}, rng, 0.1).set_requires_grad(true);
        Tape tape;
        {
            Tape::Scope scope(tape);
            tape.backward(mse_loss(layer_norm(x, g, b), Tensor::zeros({2, 4})));
        }
        auto f = [&]() { return mse_loss(layer_norm(x, g, b), Tensor::zeros({2, 4})).item(); };
        CHECK(max_grad_err(x, x.grad(), f) < 1e-5);
        CHECK(max_grad_err(g, g.grad(), f) < 1e-5);
        CHECK(max_grad_err(b, b.grad(), f) < 1e-5);
    }
}

TEST_CASE("mean_tokens: single token, hand mean, gradient distribution") {
    Tensor one = Tensor::from_data({1, 1, 3}, {7, 8, 9});
    CHECK(mean_tokens(one).values() == std::vector<double>{7, 8, 9});

    Tensor x = Tensor::from_data({1, 2, 2}, {1, 3, 5, 7});
    Tensor m = mean_tokens(x);
    CHECK(m.at(0) == doctest::Approx(3.0));
    CHECK(m.at(1) == doctest::Approx(5.0));

    Rng rng(107);
    Tensor v = Tensor::randn({2, 3, 4}, rng).set_requires_grad(true);
    Tape tape;
    {
        Tape::Scope scope(tape);
        tape.backward(mse_loss(mean_tokens(v), Tensor::zeros({2, 4})));
    }
    auto f = [&]() { return mse_loss(mean_tokens(v), Tensor::zeros({2, 4})).item(); };
    CHECK(max_grad_err(v, v.grad(), f) < 1e-6);
}

TEST_CASE("backward: non-scalar loss is a contract error") {
    Tensor x = Tensor::zeros({2}).set_requires_grad(true);
    Tape tape;
    Tape::Scope scope(tape);
    Tensor y = add(x, x);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
}

TEST_CASE("diamond graph accumulates both paths") {
    Rng rng(108);
    Tensor x = Tensor::randn({3}, rng).set_requires_grad(true);
    Tensor y = Tensor::randn({3}, rng).set_requires_grad(true);
    auto build = [&]() {
        Tensor u = add(x, y);        // shared subexpression
        Tensor v = mul(u, u);        // path 1
        Tensor w = add(u, scale(u, 2.0));  // path 2
        return sum_all(add(v, w));
    };
    Tape tape;
    {
        Tape::Scope scope(tape);
        tape.backward(build());
    }
    auto f = [&]() { return build().item(); };
    CHECK(max_grad_err(x, x.grad(), f) < 1e-6);
    CHECK(max_grad_err(y, y.grad(), f) < 1e-6);
}

TEST_CASE("repeated backward accumulates leaf grads") {
    Tensor x = Tensor::from_data({1}, {2.0}).set_requires_grad(true);
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = mul(x, x);
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(4.0));
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(8.0));
}

TEST_CASE("broadcast add/mul and their gradients") {
    Rng rng(109);
    Tensor x = Tensor::randn({2, 3, 4}, rng).set_requires_grad(true);
    Tensor w = Tensor::randn({2, 3, 1}, rng).set_requires_grad(true);  // per-token scalar
    Tensor c = Tensor::randn({1}, rng).set_requires_grad(true);
    Tape tape;
    {
        Tape::Scope scope(tape);
        tape.backward(mse_loss(add(mul(x, w), c), Tensor::zeros({2, 3, 4})));
    }
    auto f = [&]() { return mse_loss(add(mul(x, w), c), Tensor::zeros({2, 3, 4})).item(); };
    CHECK(max_grad_err(x, x.grad(), f) < 1e-6);
    CHECK(max_grad_err(w, w.grad(), f) < 1e-6);
    CHECK(max_grad_err(c, c.grad(), f) < 1e-6);

    CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({4, 3})), ContractError);
}

TEST_CASE("shape ops: reshape, permute, concat, slice_last round trips") {
    Rng rng(110);
    Tensor x = Tensor::randn({2, 3, 4}, rng).set_requires_grad(true);

    Tensor r = reshape(x, {6, 4});
    CHECK(r.values() == x.values());

    Tensor p = permute(x, {2, 0, 1});
    CHECK(p.shape() == Shape{4, 2, 3});
    CHECK(p.at(0) == x.at(0));
    // element [d, b, n] == x[b, n, d]
    CHECK(p.at((3 * 2 + 1) * 3 + 2) == x.at((1 * 3 + 2) * 4 + 3));

    Tensor t = transpose_last2(x);
    CHECK(t.shape() == Shape{2, 4, 3});

    Tensor c = concat({x, x}, 1);
    CHECK(c.shape() == Shape{2, 6, 4});

    Tensor s = slice_last(x, 1, 3);
    CHECK(s.shape() == Shape{2, 3, 2});
    CHECK(s.at(0) == x.at(1));

    Tape tape;
    {
        Tape::Scope scope(tape);
        Tensor y = concat({slice_last(x, 0, 2), slice_last(x, 2, 4)}, 2);
        Tensor loss = mse_loss(permute(reshape(y, {2, 3, 4}), {0, 2, 1}),
                               Tensor::zeros({2, 4, 3}));
        tape.backward(loss);
    }
    auto f = [&]() {
        Tensor y = concat({slice_last(x, 0, 2), slice_last(x, 2, 4)}, 2);
        return mse_loss(permute(reshape(y, {2, 3, 4}), {0, 2, 1}), Tensor::zeros({2, 4, 3})).item();
    };
    CHECK(max_grad_err(x, x.grad(), f) < 1e-6);
}

TEST_CASE("losses: mse and l1 with gradients") {
    Rng rng(111);
    Tensor a = Tensor::randn({3, 3}, rng).set_requires_grad(true);
    Tensor b = Tensor::randn({3, 3}, rng);

    CHECK(mse_loss(b, b).item() == 0.0);
    CHECK(l1_loss(b, b).item() == 0.0);
    Tensor shifted = add_scalar(b, 1.0);
    CHECK(mse_loss(shifted, b).item() == doctest::Approx(1.0));
    CHECK(l1_loss(shifted, b).item() == doctest::Approx(1.0));

    Tape tape;
    {
        Tape::Scope scope(tape);
        tape.backward(add(mse_loss(a, b), l1_loss(a, b)));
    }
    auto f = [&]() { return mse_loss(a, b).item() + l1_loss(a, b).item(); };
    CHECK(max_grad_err(a, a.grad(), f) < 1e-5);
}

TEST_CASE("unary ops: exp, cos, abs, tanh gradients") {
    Rng rng(112);
    Tensor x = Tensor::randn({5}, rng).set_requires_grad(true);
    auto build = [&]() {
        return sum_all(add(add(exp_t(scale(x, 0.3)), cos_t(x)), add(abs_t(x), tanh_t(x))));
    };
    Tape tape;
    {
        Tape::Scope scope(tape);
        tape.backward(build());
    }
    auto f = [&]() { return build().item(); };
    CHECK(max_grad_err(x, x.grad(), f) < 1e-6);
}

TEST_CASE("forward pass is bit-deterministic") {
    auto run = [](uint64_t seed) {
        Rng rng(seed);
        Tensor x = Tensor::randn({4, 8}, rng);
        Tensor w = Tensor::randn({8, 8}, rng);
        Tensor g = Tensor::full({8}, 1.0);
        Tensor b = Tensor::zeros({8});
        return softmax(layer_norm(matmul(x, w), g, b)).values();
    };
    CHECK(run(42) == run(42));
    CHECK(run(42) != run(43));
}

TEST_CASE("tensor invariants: positive dims, finite detection") {
    CHECK_THROWS_AS(Tensor::zeros({2, 0}), ContractError);
    Tensor x = Tensor::from_data({2}, {1.0, 2.0});
    CHECK(!x.has_nonfinite());
    x.mutable_values()[1] = std::nan("");
    CHECK(x.has_nonfinite());
}

TEST_CASE("adamw: zero grad no-op, descent, step-1 hand formula") {
    // zero gradient, zero weight decay -> parameters unchanged
    Tensor w = Tensor::from_data({2}, {1.5, -0.5}).set_requires_grad(true);
    AdamW opt({w}, {.lr = 0.1, .weight_decay = 0.0});
    opt.step();
    CHECK(w.values() == std::vector<double>{1.5, -0.5});

    // one step on f(w) = w^2 from w=1 decreases f
    Tensor u = Tensor::from_data({1}, {1.0}).set_requires_grad(true);
    AdamW opt2({u}, {.lr = 0.05});
    Tape tape;
    {
        Tape::Scope scope(tape);
        tape.backward(mul(u, u));
    }
    opt2.step();
    CHECK(u.item() * u.item() < 1.0);

    // bias-corrected first step matches the hand formula to 1e-12
    const double g = 0.37, lr = 0.01, wd = 0.02, eps = 1e-8;
    Tensor v = Tensor::from_data({1}, {2.0}).set_requires_grad(true);
    v.grad_ref()[0] = g;
    AdamW opt3({v}, {.lr = lr, .beta1 = 0.9, .beta2 = 0.999, .eps = eps, .weight_decay = wd});
    opt3.step();
    const double expect = 2.0 - lr * (g / (std::fabs(g) + eps) + wd * 2.0);
    CHECK(std::fabs(v.item() - expect) < 1e-12);
    CHECK(opt3.step_count() == 1);
}
