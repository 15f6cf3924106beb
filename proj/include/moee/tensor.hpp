#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "moee/common.hpp"
#include "moee/rng.hpp"

namespace moee {

class Tape;

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until touched; data.size() once active
    bool requires_grad = false;
    int tape_pos = -1;  // index of the tape entry that produced this node

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

}  // namespace detail

/// Value-semantic handle to an n-dimensional double array. Copying a Tensor
/// copies the handle, not the storage; handles are safe to move between
/// threads. All arithmetic runs in 64-bit floats so that central
/// finite-difference checks are meaningful.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape);
    static Tensor full(const Shape& shape, double v);
    static Tensor scalar(double v) { return full({1}, v); }
    static Tensor from_data(const Shape& shape, std::vector<double> values);
    static Tensor randn(const Shape& shape, Rng& rng, double stdev = 1.0);
    static Tensor uniform(const Shape& shape, Rng& rng, double lo, double hi);
    /// Glorot-style scaled uniform for a [fan_in x fan_out] projection.
    static Tensor glorot(int fan_in, int fan_out, Rng& rng);

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(n_->shape.size()); }
    int64_t numel() const { return static_cast<int64_t>(n_->data.size()); }

    const std::vector<double>& values() const { return n_->data; }
    std::vector<double>& mutable_values() { return n_->data; }
    double* data() { return n_->data.data(); }
    const double* data() const { return n_->data.data(); }
    double item() const;
    double at(int64_t i) const { return n_->data[static_cast<size_t>(i)]; }

    bool requires_grad() const { return n_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        n_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return !n_->grad.empty(); }
    const std::vector<double>& grad() const { return n_->grad; }
    std::vector<double>& grad_ref() {
        n_->ensure_grad();
        return n_->grad;
    }
    void zero_grad() {
        if (!n_->grad.empty()) n_->grad.assign(n_->data.size(), 0.0);
    }

    /// Same values, no autograd history.
    Tensor detach() const { return from_data(n_->shape, n_->data); }

    bool has_nonfinite() const;

    std::shared_ptr<detail::TensorNode> node() const { return n_; }

    /// Internal: wraps an existing node (op implementations only).
    explicit Tensor(std::shared_ptr<detail::TensorNode> n) : n_(std::move(n)) {}

private:
    std::shared_ptr<detail::TensorNode> n_;
};

/// Dynamic record-on-execute tape. Ops executed while a Tape is active (and
/// touching at least one requires_grad input) append one entry each; entries
/// are therefore already in topological order, and backward() replays them in
/// reverse exactly once per entry.
class Tape {
public:
    struct Entry {
        std::shared_ptr<detail::TensorNode> out;
        std::function<void()> pull;  // accumulates into the inputs' grads
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active();

    size_t size() const { return entries_.size(); }
    void clear() { entries_.clear(); }

    /// Scalar loss only; populates .grad on every requires_grad node that the
    /// loss depends on. Repeated calls accumulate.
    void backward(const Tensor& loss);

    /// Used by op implementations.
    int record(std::shared_ptr<detail::TensorNode> out, std::function<void()> pull);

    /// RAII activation.
    class Scope {
    public:
        explicit Scope(Tape& t);
        ~Scope();
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

private:
    std::vector<Entry> entries_;
};

/// Suspends recording (pure inference) inside a scope even if a tape is
/// active; cheaper sampling/eval paths use this.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    Tape* prev_;
};

// ---- ops ------------------------------------------------------------------
// Elementwise binaries broadcast numpy-style (shapes aligned from the right;
// each dim equal or 1).

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

Tensor exp_t(const Tensor& a);
Tensor cos_t(const Tensor& a);
Tensor abs_t(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh_t(const Tensor& a);

/// Batched matrix product [.., m, k] x [.., k, p] -> [.., m, p]; leading
/// (batch) dims broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Numerically stabilized softmax along `axis` (default last).
Tensor softmax(const Tensor& a, int axis = -1);

/// Normalizes the last axis to zero mean / unit variance, then applies the
/// affine transform. gain/bias shape: [last_dim].
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// [b, n, d] -> [b, d], arithmetic mean over the token axis.
Tensor mean_tokens(const Tensor& x);

/// [..., L] -> [...]: mean over the last axis (keeps a trailing 1 off).
Tensor mean_last(const Tensor& x);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<int>& axes);
Tensor transpose_last2(const Tensor& x);
Tensor concat(const std::vector<Tensor>& parts, int axis);
/// Slice [from, to) along the last axis.
Tensor slice_last(const Tensor& x, int from, int to);

Tensor mse_loss(const Tensor& a, const Tensor& b);
Tensor l1_loss(const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

}  // namespace moee
