#include "moee/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "moee/kernels.hpp"

namespace moee {

using detail::TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

namespace {

thread_local Tape* g_active_tape = nullptr;

NodePtr make_node(const Shape& shape) {
    for (int d : shape) check(d > 0, "tensor dims must be positive, got " + shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    n->shape = shape;
    n->data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
    return n;
}

Tensor wrap(NodePtr n) { return Tensor(std::move(n)); }

bool recording(std::initializer_list<const Tensor*> ins) {
    if (!g_active_tape) return false;
    for (const Tensor* t : ins)
        if (t->requires_grad()) return true;
    return false;
}

// Row-major element strides.
std::vector<int64_t> strides_of(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[static_cast<size_t>(i)] = acc;
        acc *= s[static_cast<size_t>(i)];
    }
    return st;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* what) {
    const size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (size_t i = 0; i < rank; ++i) {
        const int da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const int db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ContractError(std::string(what) + ": shapes not broadcastable " + shape_str(a) +
                                " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// Strides for reading `in` as if broadcast to `out` (0 on broadcast dims).
std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
    const auto st = strides_of(in);
    std::vector<int64_t> r(out.size(), 0);
    const size_t off = out.size() - in.size();
    for (size_t i = 0; i < in.size(); ++i)
        r[off + i] = (in[i] == 1 && out[off + i] != 1) ? 0 : st[i];
    return r;
}

// Odometer over `out`, calling f(linear_out, off_a, off_b).
template <class F>
void for_each_bcast2(const Shape& out, const std::vector<int64_t>& sa,
                     const std::vector<int64_t>& sb, F&& f) {
    const int rank = static_cast<int>(out.size());
    const int64_t n = numel_of(out);
    if (rank == 0) {
        f(0, 0, 0);
        return;
    }
    std::vector<int64_t> idx(static_cast<size_t>(rank), 0);
    int64_t oa = 0, ob = 0;
    for (int64_t i = 0; i < n; ++i) {
        f(i, oa, ob);
        for (int d = rank - 1; d >= 0; --d) {
            ++idx[static_cast<size_t>(d)];
            oa += sa[static_cast<size_t>(d)];
            ob += sb[static_cast<size_t>(d)];
            if (idx[static_cast<size_t>(d)] < out[static_cast<size_t>(d)]) break;
            oa -= sa[static_cast<size_t>(d)] * out[static_cast<size_t>(d)];
            ob -= sb[static_cast<size_t>(d)] * out[static_cast<size_t>(d)];
            idx[static_cast<size_t>(d)] = 0;
        }
    }
}

enum class Bin { Add, Sub, Mul };

Tensor binary_op(const Tensor& a, const Tensor& b, Bin kind, const char* name) {
    check(a.defined() && b.defined(), std::string(name) + ": undefined tensor");
    const bool same = a.shape() == b.shape();
    const Shape oshape = same ? a.shape() : broadcast_shape(a.shape(), b.shape(), name);
    NodePtr out = make_node(oshape);
    const auto& ka = kern::ops();
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out->data.data();
    const int64_t n = numel_of(oshape);

    if (same) {
        switch (kind) {
            case Bin::Add: ka.add(pa, pb, po, static_cast<size_t>(n)); break;
            case Bin::Sub: ka.sub(pa, pb, po, static_cast<size_t>(n)); break;
            case Bin::Mul: ka.mul(pa, pb, po, static_cast<size_t>(n)); break;
        }
    } else {
        const auto sa = broadcast_strides(a.shape(), oshape);
        const auto sb = broadcast_strides(b.shape(), oshape);
        switch (kind) {
            case Bin::Add:
                for_each_bcast2(oshape, sa, sb,
                                [&](int64_t i, int64_t ia, int64_t ib) { po[i] = pa[ia] + pb[ib]; });
                break;
            case Bin::Sub:
                for_each_bcast2(oshape, sa, sb,
                                [&](int64_t i, int64_t ia, int64_t ib) { po[i] = pa[ia] - pb[ib]; });
                break;
            case Bin::Mul:
                for_each_bcast2(oshape, sa, sb,
                                [&](int64_t i, int64_t ia, int64_t ib) { po[i] = pa[ia] * pb[ib]; });
                break;
        }
    }

    if (recording({&a, &b})) {
        out->requires_grad = true;
        NodePtr an = a.node(), bn = b.node(), on = out;
        out->tape_pos = g_active_tape->record(out, [an, bn, on, kind, same]() {
            const auto& g = on->grad;
            const double* pga = an->data.data();
            const double* pgb = bn->data.data();
            if (same) {
                const size_t n2 = g.size();
                if (an->requires_grad) {
                    an->ensure_grad();
                    double* da = an->grad.data();
                    switch (kind) {
                        case Bin::Add:
                        case Bin::Sub: kern::ops().acc(g.data(), da, n2); break;
                        case Bin::Mul:
                            for (size_t i = 0; i < n2; ++i) da[i] += g[i] * pgb[i];
                            break;
                    }
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    double* db = bn->grad.data();
                    switch (kind) {
                        case Bin::Add: kern::ops().acc(g.data(), db, n2); break;
                        case Bin::Sub:
                            for (size_t i = 0; i < n2; ++i) db[i] -= g[i];
                            break;
                        case Bin::Mul:
                            for (size_t i = 0; i < n2; ++i) db[i] += g[i] * pga[i];
                            break;
                    }
                }
            } else {
                const auto sa = broadcast_strides(an->shape, on->shape);
                const auto sb = broadcast_strides(bn->shape, on->shape);
                if (an->requires_grad) an->ensure_grad();
                if (bn->requires_grad) bn->ensure_grad();
                for_each_bcast2(on->shape, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) {
                    const double gi = g[static_cast<size_t>(i)];
                    if (an->requires_grad) {
                        switch (kind) {
                            case Bin::Add:
                            case Bin::Sub: an->grad[static_cast<size_t>(ia)] += gi; break;
                            case Bin::Mul:
                                an->grad[static_cast<size_t>(ia)] += gi * pgb[ib];
                                break;
                        }
                    }
                    if (bn->requires_grad) {
                        switch (kind) {
                            case Bin::Add: bn->grad[static_cast<size_t>(ib)] += gi; break;
                            case Bin::Sub: bn->grad[static_cast<size_t>(ib)] -= gi; break;
                            case Bin::Mul:
                                bn->grad[static_cast<size_t>(ib)] += gi * pga[ia];
                                break;
                        }
                    }
                });
            }
        });
    }
    return wrap(out);
}

// Unary elementwise: forward fn(x) -> y, backward dfn(x, y) -> dy/dx.
template <class FwdF, class BwdF>
Tensor unary_op(const Tensor& a, FwdF fwd, BwdF partial) {
    NodePtr out = make_node(a.shape());
    const double* pa = a.data();
    double* po = out->data.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
    if (recording({&a})) {
        out->requires_grad = true;
        NodePtr an = a.node(), on = out;
        out->tape_pos = g_active_tape->record(out, [an, on, partial]() {
            if (!an->requires_grad) return;
            an->ensure_grad();
            const size_t n2 = on->grad.size();
            for (size_t i = 0; i < n2; ++i)
                an->grad[i] += on->grad[i] * partial(an->data[i], on->data[i]);
        });
    }
    return wrap(out);
}

double stable_sigmoid(double x) {
    // Clamp keeps outputs strictly inside (0,1) for every finite input:
    // exp(-36) ~ 2.3e-16 still moves the quotient off 0 and 1.
    if (x > 36.0) x = 36.0;
    if (x < -36.0) x = -36.0;
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(const Shape& shape) { return wrap(make_node(shape)); }

Tensor Tensor::full(const Shape& shape, double v) {
    NodePtr n = make_node(shape);
    std::fill(n->data.begin(), n->data.end(), v);
    return wrap(n);
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> values) {
    NodePtr n = make_node(shape);
    check(static_cast<int64_t>(values.size()) == numel_of(shape),
          "from_data: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
    n->data = std::move(values);
    return wrap(n);
}

Tensor Tensor::randn(const Shape& shape, Rng& rng, double stdev) {
    NodePtr n = make_node(shape);
    for (auto& v : n->data) v = rng.gaussian() * stdev;
    return wrap(n);
}

Tensor Tensor::uniform(const Shape& shape, Rng& rng, double lo, double hi) {
    NodePtr n = make_node(shape);
    for (auto& v : n->data) v = rng.uniform(lo, hi);
    return wrap(n);
}

Tensor Tensor::glorot(int fan_in, int fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    return uniform({fan_in, fan_out}, rng, -limit, limit);
}

double Tensor::item() const {
    check(numel() == 1, "item(): tensor has shape " + shape_str(shape()));
    return n_->data[0];
}

bool Tensor::has_nonfinite() const {
    for (double v : n_->data)
        if (!std::isfinite(v)) return true;
    return false;
}

// ---- Tape -------------------------------------------------------------------

Tape* Tape::active() { return g_active_tape; }

int Tape::record(NodePtr out, std::function<void()> pull) {
    entries_.push_back({std::move(out), std::move(pull)});
    return static_cast<int>(entries_.size()) - 1;
}

void Tape::backward(const Tensor& loss) {
    check(loss.numel() == 1,
          "backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    NodePtr ln = loss.node();
    if (ln->tape_pos < 0) {  // leaf: nothing upstream
        ln->ensure_grad();
        ln->grad[0] += 1.0;
        return;
    }
    // Intermediate grads are per-pass scratch; only leaves accumulate across
    // repeated backward calls.
    for (int i = 0; i <= ln->tape_pos; ++i) entries_[static_cast<size_t>(i)].out->grad.clear();
    ln->ensure_grad();
    ln->grad[0] = 1.0;
    for (int i = ln->tape_pos; i >= 0; --i) {
        Entry& e = entries_[static_cast<size_t>(i)];
        if (!e.out->grad.empty()) e.pull();
    }
}

Tape::Scope::Scope(Tape& t) : prev_(g_active_tape) { g_active_tape = &t; }
Tape::Scope::~Scope() { g_active_tape = prev_; }

NoGradGuard::NoGradGuard() : prev_(g_active_tape) { g_active_tape = nullptr; }
NoGradGuard::~NoGradGuard() { g_active_tape = prev_; }

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, Bin::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, Bin::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, Bin::Mul, "mul"); }

Tensor neg(const Tensor& a) {
    return unary_op(
        a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& a, double c) {
    return unary_op(
        a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
    return unary_op(
        a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor exp_t(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor cos_t(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); });
}

Tensor abs_t(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::fabs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        a, [](double x) { return stable_sigmoid(x); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh_t(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::tanh(x); },
        [](double, double y) { return 1.0 - y * y; });
}

// ---- matmul -----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    check(a.rank() >= 2 && b.rank() >= 2,
          "matmul: operands must have rank >= 2, got " + shape_str(a.shape()) + " and " +
              shape_str(b.shape()));
    const int m = a.dim(a.rank() - 2);
    const int k = a.dim(a.rank() - 1);
    const int k2 = b.dim(b.rank() - 2);
    const int p = b.dim(b.rank() - 1);
    if (k != k2)
        throw ContractError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                            " x " + shape_str(b.shape()));

    const Shape abatch(a.shape().begin(), a.shape().end() - 2);
    const Shape bbatch(b.shape().begin(), b.shape().end() - 2);
    const Shape obatch = broadcast_shape(abatch, bbatch, "matmul");
    Shape oshape = obatch;
    oshape.push_back(m);
    oshape.push_back(p);

    const int64_t nbatch = numel_of(obatch);
    // Per-batch base offsets into a and b (0-stride on broadcast dims).
    std::vector<int64_t> aoffs(static_cast<size_t>(nbatch), 0);
    std::vector<int64_t> boffs(static_cast<size_t>(nbatch), 0);
    {
        auto sa = broadcast_strides(abatch, obatch);
        auto sb = broadcast_strides(bbatch, obatch);
        for (auto& s : sa) s *= static_cast<int64_t>(m) * k;
        for (auto& s : sb) s *= static_cast<int64_t>(k) * p;
        for_each_bcast2(obatch, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) {
            aoffs[static_cast<size_t>(i)] = ia;
            boffs[static_cast<size_t>(i)] = ib;
        });
    }

    NodePtr out = make_node(oshape);
    {
        const double* pa = a.data();
        const double* pb = b.data();
        double* po = out->data.data();
        for (int64_t bi = 0; bi < nbatch; ++bi)
            kern::gemm_acc(pa + aoffs[static_cast<size_t>(bi)], pb + boffs[static_cast<size_t>(bi)],
                           po + bi * m * p, static_cast<size_t>(m), static_cast<size_t>(k),
                           static_cast<size_t>(p));
    }

    if (recording({&a, &b})) {
        out->requires_grad = true;
        NodePtr an = a.node(), bn = b.node(), on = out;
        out->tape_pos = g_active_tape->record(
            out, [an, bn, on, aoffs = std::move(aoffs), boffs = std::move(boffs), m, k, p]() {
                const int64_t nbatch = static_cast<int64_t>(aoffs.size());
                const auto& ko = kern::ops();
                const double* gout = on->grad.data();
                if (an->requires_grad) {
                    an->ensure_grad();
                    // dA[i,l] = dot(dC[i,:], B[l,:])
                    for (int64_t bi = 0; bi < nbatch; ++bi) {
                        const double* gc = gout + bi * m * p;
                        const double* pb = bn->data.data() + boffs[static_cast<size_t>(bi)];
                        double* da = an->grad.data() + aoffs[static_cast<size_t>(bi)];
                        for (int i = 0; i < m; ++i)
                            for (int l = 0; l < k; ++l)
                                da[static_cast<int64_t>(i) * k + l] +=
                                    ko.dot(gc + static_cast<int64_t>(i) * p,
                                           pb + static_cast<int64_t>(l) * p,
                                           static_cast<size_t>(p));
                    }
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    // dB[l,:] += A[i,l] * dC[i,:]
                    for (int64_t bi = 0; bi < nbatch; ++bi) {
                        const double* gc = gout + bi * m * p;
                        const double* pa = an->data.data() + aoffs[static_cast<size_t>(bi)];
                        double* db = bn->grad.data() + boffs[static_cast<size_t>(bi)];
                        for (int i = 0; i < m; ++i)
                            for (int l = 0; l < k; ++l)
                                ko.axpy(pa[static_cast<int64_t>(i) * k + l],
                                        gc + static_cast<int64_t>(i) * p,
                                        db + static_cast<int64_t>(l) * p, static_cast<size_t>(p));
                    }
                }
            });
    }
    return wrap(out);
}

// ---- softmax / layer_norm / pooling ------------------------------------------

Tensor softmax(const Tensor& a, int axis) {
    const int rank = a.rank();
    int ax = axis < 0 ? rank + axis : axis;
    check(ax >= 0 && ax < rank,
          "softmax: axis " + std::to_string(axis) + " invalid for shape " + shape_str(a.shape()));
    if (ax != rank - 1) {
        // Move the axis last, apply, move back; both permutes are recorded ops.
        std::vector<int> fwd;
        for (int i = 0; i < rank; ++i)
            if (i != ax) fwd.push_back(i);
        fwd.push_back(ax);
        std::vector<int> inv(static_cast<size_t>(rank));
        for (int i = 0; i < rank; ++i) inv[static_cast<size_t>(fwd[static_cast<size_t>(i)])] = i;
        return permute(softmax(permute(a, fwd), -1), inv);
    }

    const int L = a.dim(rank - 1);
    const int64_t rows = a.numel() / L;
    NodePtr out = make_node(a.shape());
    const auto& ko = kern::ops();
    const double* px = a.data();
    double* py = out->data.data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* x = px + r * L;
        double* y = py + r * L;
        const double mx = ko.max_val(x, static_cast<size_t>(L));
        double s = 0.0;
        for (int i = 0; i < L; ++i) {
            y[i] = std::exp(x[i] - mx);
            s += y[i];
        }
        const double inv = 1.0 / s;
        for (int i = 0; i < L; ++i) y[i] *= inv;
    }

    if (recording({&a})) {
        out->requires_grad = true;
        NodePtr an = a.node(), on = out;
        out->tape_pos = g_active_tape->record(out, [an, on, L]() {
            if (!an->requires_grad) return;
            an->ensure_grad();
            const int64_t rows = static_cast<int64_t>(on->data.size()) / L;
            for (int64_t r = 0; r < rows; ++r) {
                const double* y = on->data.data() + r * L;
                const double* g = on->grad.data() + r * L;
                double* dx = an->grad.data() + r * L;
                const double dotgy = kern::ops().dot(g, y, static_cast<size_t>(L));
                for (int i = 0; i < L; ++i) dx[i] += y[i] * (g[i] - dotgy);
            }
        });
    }
    return wrap(out);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const int rank = x.rank();
    check(rank >= 1, "layer_norm: rank must be >= 1");
    const int L = x.dim(rank - 1);
    check(gain.rank() == 1 && gain.dim(0) == L,
          "layer_norm: gain shape " + shape_str(gain.shape()) + " does not match axis length " +
              std::to_string(L));
    check(bias.rank() == 1 && bias.dim(0) == L,
          "layer_norm: bias shape " + shape_str(bias.shape()) + " does not match axis length " +
              std::to_string(L));

    const int64_t rows = x.numel() / L;
    NodePtr out = make_node(x.shape());
    std::vector<double> mu(static_cast<size_t>(rows)), inv(static_cast<size_t>(rows));
    {
        const double* px = x.data();
        const double* pg = gain.data();
        const double* pb = bias.data();
        double* py = out->data.data();
        for (int64_t r = 0; r < rows; ++r) {
            const double* xr = px + r * L;
            double* yr = py + r * L;
            const double m = kern::ops().sum(xr, static_cast<size_t>(L)) / L;
            double var = 0.0;
            for (int i = 0; i < L; ++i) {
                const double d = xr[i] - m;
                var += d * d;
            }
            var /= L;
            const double iv = 1.0 / std::sqrt(var + eps);
            mu[static_cast<size_t>(r)] = m;
            inv[static_cast<size_t>(r)] = iv;
            for (int i = 0; i < L; ++i) yr[i] = (xr[i] - m) * iv * pg[i] + pb[i];
        }
    }

    if (recording({&x, &gain, &bias})) {
        out->requires_grad = true;
        NodePtr xn = x.node(), gn = gain.node(), bn = bias.node(), on = out;
        out->tape_pos = g_active_tape->record(
            out, [xn, gn, bn, on, L, mu = std::move(mu), inv = std::move(inv)]() {
                const int64_t rows = static_cast<int64_t>(on->data.size()) / L;
                const double* pg = gn->data.data();
                if (xn->requires_grad) xn->ensure_grad();
                if (gn->requires_grad) gn->ensure_grad();
                if (bn->requires_grad) bn->ensure_grad();
                for (int64_t r = 0; r < rows; ++r) {
                    const double* xr = xn->data.data() + r * L;
                    const double* gr = on->grad.data() + r * L;
                    const double m = mu[static_cast<size_t>(r)];
                    const double iv = inv[static_cast<size_t>(r)];
                    if (gn->requires_grad || bn->requires_grad) {
                        for (int i = 0; i < L; ++i) {
                            const double xhat = (xr[i] - m) * iv;
                            if (gn->requires_grad) gn->grad[static_cast<size_t>(i)] += gr[i] * xhat;
                            if (bn->requires_grad) bn->grad[static_cast<size_t>(i)] += gr[i];
                        }
                    }
                    if (xn->requires_grad) {
                        // dxhat = g * gain;  dx = iv*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                        double s1 = 0.0, s2 = 0.0;
                        for (int i = 0; i < L; ++i) {
                            const double dxh = gr[i] * pg[i];
                            const double xhat = (xr[i] - m) * iv;
                            s1 += dxh;
                            s2 += dxh * xhat;
                        }
                        s1 /= L;
                        s2 /= L;
                        double* dx = xn->grad.data() + r * L;
                        for (int i = 0; i < L; ++i) {
                            const double dxh = gr[i] * pg[i];
                            const double xhat = (xr[i] - m) * iv;
                            dx[i] += iv * (dxh - s1 - xhat * s2);
                        }
                    }
                }
            });
    }
    return wrap(out);
}

Tensor mean_tokens(const Tensor& x) {
    check(x.rank() == 3, "mean_tokens: expected [b,n,d], got " + shape_str(x.shape()));
    const int b = x.dim(0), n = x.dim(1), d = x.dim(2);
    NodePtr out = make_node({b, d});
    {
        const double* px = x.data();
        double* po = out->data.data();
        const double invn = 1.0 / n;
        for (int bi = 0; bi < b; ++bi) {
            double* orow = po + static_cast<int64_t>(bi) * d;
            for (int t = 0; t < n; ++t)
                kern::ops().axpy(invn, px + (static_cast<int64_t>(bi) * n + t) * d, orow,
                                 static_cast<size_t>(d));
        }
    }
    if (recording({&x})) {
        out->requires_grad = true;
        NodePtr xn = x.node(), on = out;
        out->tape_pos = g_active_tape->record(out, [xn, on, b, n, d]() {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            const double invn = 1.0 / n;
            for (int bi = 0; bi < b; ++bi)
                for (int t = 0; t < n; ++t)
                    kern::ops().axpy(invn, on->grad.data() + static_cast<int64_t>(bi) * d,
                                     xn->grad.data() + (static_cast<int64_t>(bi) * n + t) * d,
                                     static_cast<size_t>(d));
        });
    }
    return wrap(out);
}

Tensor mean_last(const Tensor& x) {
    check(x.rank() >= 2, "mean_last: rank must be >= 2, got " + shape_str(x.shape()));
    const int L = x.dim(x.rank() - 1);
    Shape oshape(x.shape().begin(), x.shape().end() - 1);
    const int64_t rows = numel_of(oshape);
    NodePtr out = make_node(oshape);
    for (int64_t r = 0; r < rows; ++r)
        out->data[static_cast<size_t>(r)] =
            kern::ops().sum(x.data() + r * L, static_cast<size_t>(L)) / L;
    if (recording({&x})) {
        out->requires_grad = true;
        NodePtr xn = x.node(), on = out;
        out->tape_pos = g_active_tape->record(out, [xn, on, L, rows]() {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            const double invL = 1.0 / L;
            for (int64_t r = 0; r < rows; ++r) {
                const double gi = on->grad[static_cast<size_t>(r)] * invL;
                double* dx = xn->grad.data() + r * L;
                for (int i = 0; i < L; ++i) dx[i] += gi;
            }
        });
    }
    return wrap(out);
}

Tensor sum_all(const Tensor& x) {
    NodePtr out = make_node({1});
    out->data[0] = kern::ops().sum(x.data(), static_cast<size_t>(x.numel()));
    if (recording({&x})) {
        out->requires_grad = true;
        NodePtr xn = x.node(), on = out;
        out->tape_pos = g_active_tape->record(out, [xn, on]() {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            const double g = on->grad[0];
            for (auto& v : xn->grad) v += g;
        });
    }
    return wrap(out);
}

Tensor mean_all(const Tensor& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.numel())); }

// ---- shape ops ---------------------------------------------------------------

Tensor reshape(const Tensor& x, const Shape& shape) {
    check(numel_of(shape) == x.numel(),
          "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    NodePtr out = make_node(shape);
    out->data = x.values();
    if (recording({&x})) {
        out->requires_grad = true;
        NodePtr xn = x.node(), on = out;
        out->tape_pos = g_active_tape->record(out, [xn, on]() {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            kern::ops().acc(on->grad.data(), xn->grad.data(), on->grad.size());
        });
    }
    return wrap(out);
}

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
    const int rank = x.rank();
    check(static_cast<int>(axes.size()) == rank,
          "permute: axes size " + std::to_string(axes.size()) + " for rank " +
              std::to_string(rank));
    std::vector<bool> seen(static_cast<size_t>(rank), false);
    for (int a : axes) {
        check(a >= 0 && a < rank && !seen[static_cast<size_t>(a)], "permute: invalid axes");
        seen[static_cast<size_t>(a)] = true;
    }
    Shape oshape(static_cast<size_t>(rank));
    for (int i = 0; i < rank; ++i) oshape[static_cast<size_t>(i)] = x.dim(axes[static_cast<size_t>(i)]);

    const auto xst = strides_of(x.shape());
    std::vector<int64_t> ost(static_cast<size_t>(rank));  // input stride per output axis
    for (int i = 0; i < rank; ++i)
        ost[static_cast<size_t>(i)] = xst[static_cast<size_t>(axes[static_cast<size_t>(i)])];

    NodePtr out = make_node(oshape);
    {
        const double* px = x.data();
        double* po = out->data.data();
        std::vector<int64_t> zero(static_cast<size_t>(rank), 0);
        for_each_bcast2(oshape, ost, zero,
                        [&](int64_t i, int64_t ix, int64_t) { po[i] = px[ix]; });
    }
    if (recording({&x})) {
        out->requires_grad = true;
        NodePtr xn = x.node(), on = out;
        out->tape_pos = g_active_tape->record(out, [xn, on, ost, oshape]() {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            std::vector<int64_t> zero(oshape.size(), 0);
            for_each_bcast2(oshape, ost, zero, [&](int64_t i, int64_t ix, int64_t) {
                xn->grad[static_cast<size_t>(ix)] += on->grad[static_cast<size_t>(i)];
            });
        });
    }
    return wrap(out);
}

Tensor transpose_last2(const Tensor& x) {
    const int rank = x.rank();
    check(rank >= 2, "transpose_last2: rank must be >= 2");
    std::vector<int> axes(static_cast<size_t>(rank));
    for (int i = 0; i < rank; ++i) axes[static_cast<size_t>(i)] = i;
    std::swap(axes[static_cast<size_t>(rank - 2)], axes[static_cast<size_t>(rank - 1)]);
    return permute(x, axes);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    check(!parts.empty(), "concat: no inputs");
    const int rank = parts[0].rank();
    int ax = axis < 0 ? rank + axis : axis;
    check(ax >= 0 && ax < rank, "concat: invalid axis");
    Shape oshape = parts[0].shape();
    int total = 0;
    for (const Tensor& p : parts) {
        check(p.rank() == rank, "concat: rank mismatch");
        for (int i = 0; i < rank; ++i)
            check(i == ax || p.dim(i) == oshape[static_cast<size_t>(i)],
                  "concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                      shape_str(parts[0].shape()));
        total += p.dim(ax);
    }
    oshape[static_cast<size_t>(ax)] = total;

    int64_t outer = 1, inner = 1;
    for (int i = 0; i < ax; ++i) outer *= oshape[static_cast<size_t>(i)];
    for (int i = ax + 1; i < rank; ++i) inner *= oshape[static_cast<size_t>(i)];

    NodePtr out = make_node(oshape);
    {
        double* po = out->data.data();
        const int64_t orow = static_cast<int64_t>(total) * inner;
        int64_t off = 0;
        for (const Tensor& p : parts) {
            const int64_t prow = static_cast<int64_t>(p.dim(ax)) * inner;
            const double* pp = p.data();
            for (int64_t o = 0; o < outer; ++o)
                std::copy(pp + o * prow, pp + (o + 1) * prow, po + o * orow + off);
            off += prow;
        }
    }

    bool any = false;
    for (const Tensor& p : parts) any = any || p.requires_grad();
    if (g_active_tape && any) {
        out->requires_grad = true;
        std::vector<NodePtr> ins;
        std::vector<int> axdims;
        for (const Tensor& p : parts) {
            ins.push_back(p.node());
            axdims.push_back(p.dim(ax));
        }
        NodePtr on = out;
        out->tape_pos =
            g_active_tape->record(out, [ins, axdims, on, outer, inner, total]() {
                const int64_t orow = static_cast<int64_t>(total) * inner;
                int64_t off = 0;
                for (size_t pi = 0; pi < ins.size(); ++pi) {
                    const int64_t prow = static_cast<int64_t>(axdims[pi]) * inner;
                    if (ins[pi]->requires_grad) {
                        ins[pi]->ensure_grad();
                        for (int64_t o = 0; o < outer; ++o)
                            kern::ops().acc(on->grad.data() + o * orow + off,
                                            ins[pi]->grad.data() + o * prow,
                                            static_cast<size_t>(prow));
                    }
                    off += prow;
                }
            });
    }
    return wrap(out);
}

Tensor slice_last(const Tensor& x, int from, int to) {
    const int rank = x.rank();
    const int L = x.dim(rank - 1);
    check(0 <= from && from < to && to <= L,
          "slice_last: [" + std::to_string(from) + "," + std::to_string(to) + ") invalid for " +
              shape_str(x.shape()));
    Shape oshape = x.shape();
    oshape[static_cast<size_t>(rank - 1)] = to - from;
    const int w = to - from;
    const int64_t rows = x.numel() / L;
    NodePtr out = make_node(oshape);
    for (int64_t r = 0; r < rows; ++r)
        std::copy(x.data() + r * L + from, x.data() + r * L + to, out->data.data() + r * w);
    if (recording({&x})) {
        out->requires_grad = true;
        NodePtr xn = x.node(), on = out;
        out->tape_pos = g_active_tape->record(out, [xn, on, L, w, from, rows]() {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (int64_t r = 0; r < rows; ++r)
                kern::ops().acc(on->grad.data() + r * w, xn->grad.data() + r * L + from,
                                static_cast<size_t>(w));
        });
    }
    return wrap(out);
}

// ---- losses -----------------------------------------------------------------

Tensor mse_loss(const Tensor& a, const Tensor& b) {
    check_same_shape(a.shape(), b.shape(), "mse_loss");
    const int64_t n = a.numel();
    NodePtr out = make_node({1});
    out->data[0] = kern::ops().sq_diff_sum(a.data(), b.data(), static_cast<size_t>(n)) / n;
    if (recording({&a, &b})) {
        out->requires_grad = true;
        NodePtr an = a.node(), bn = b.node(), on = out;
        out->tape_pos = g_active_tape->record(out, [an, bn, on, n]() {
            const double g = on->grad[0] * 2.0 / n;
            if (an->requires_grad) an->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                const double d = (an->data[static_cast<size_t>(i)] - bn->data[static_cast<size_t>(i)]) * g;
                if (an->requires_grad) an->grad[static_cast<size_t>(i)] += d;
                if (bn->requires_grad) bn->grad[static_cast<size_t>(i)] -= d;
            }
        });
    }
    return wrap(out);
}

Tensor l1_loss(const Tensor& a, const Tensor& b) {
    check_same_shape(a.shape(), b.shape(), "l1_loss");
    const int64_t n = a.numel();
    NodePtr out = make_node({1});
    out->data[0] = kern::ops().abs_diff_sum(a.data(), b.data(), static_cast<size_t>(n)) / n;
    if (recording({&a, &b})) {
        out->requires_grad = true;
        NodePtr an = a.node(), bn = b.node(), on = out;
        out->tape_pos = g_active_tape->record(out, [an, bn, on, n]() {
            const double g = on->grad[0] / n;
            if (an->requires_grad) an->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                const double d = an->data[static_cast<size_t>(i)] - bn->data[static_cast<size_t>(i)];
                const double s = d > 0.0 ? g : (d < 0.0 ? -g : 0.0);
                if (an->requires_grad) an->grad[static_cast<size_t>(i)] += s;
                if (bn->requires_grad) bn->grad[static_cast<size_t>(i)] -= s;
            }
        });
    }
    return wrap(out);
}

}  // namespace moee
