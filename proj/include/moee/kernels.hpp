#pragma once

#include <cstddef>

namespace moee::kern {

/// Double-precision inner-loop kernels. Every kernel has a scalar reference
/// implementation and, on x86-64, an AVX2 variant selected at runtime.
///
/// Equivalence contract, checked by tests/test_kernels.cpp:
///  - elementwise kernels (add/sub/mul/div/scale/axpy) are bit-identical to
///    the scalar reference (the AVX2 paths use the same unfused mul/add
///    sequence per element),
///  - reduction kernels (sum/dot/sq_sum/sq_diff_sum/abs_diff_sum) may
///    reassociate and must agree within a small relative tolerance,
///  - max_val is bit-identical.
struct Ops {
    // out[i] = a[i] OP b[i]
    void (*add)(const double* a, const double* b, double* out, size_t n);
    void (*sub)(const double* a, const double* b, double* out, size_t n);
    void (*mul)(const double* a, const double* b, double* out, size_t n);
    // out[i] = a[i] * c
    void (*scale)(const double* a, double c, double* out, size_t n);
    // out[i] += a[i] * c
    void (*axpy)(double c, const double* a, double* out, size_t n);
    // out[i] += a[i]
    void (*acc)(const double* a, double* out, size_t n);

    double (*dot)(const double* a, const double* b, size_t n);
    double (*sum)(const double* a, size_t n);
    double (*max_val)(const double* a, size_t n);
    double (*sq_sum)(const double* a, size_t n);
    double (*sq_diff_sum)(const double* a, const double* b, size_t n);
    double (*abs_diff_sum)(const double* a, const double* b, size_t n);
};

enum class Backend { Auto, Scalar, Avx2 };

/// Active kernel table. Chosen once at first use: AVX2 when the CPU supports
/// it, unless overridden by set_backend() or the MOEE_KERNELS environment
/// variable ("scalar" or "avx2").
const Ops& ops();

const Ops& scalar_ops();
bool avx2_supported();

/// Force a backend (tests use this to compare variants). Backend::Auto
/// restores runtime detection.
void set_backend(Backend b);
Backend active_backend();
const char* backend_name();

/// Row-major matrix product: c[m x p] += a[m x k] * b[k x p].
/// Accumulation order over k is fixed and independent of the backend, so the
/// result is bit-identical between scalar and AVX2.
void gemm_acc(const double* a, const double* b, double* c, size_t m, size_t k, size_t p);

}  // namespace moee::kern
