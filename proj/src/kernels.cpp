#include "moee/kernels.hpp"

#include <cstdlib>
#include <cstring>

namespace moee::kern {

#ifdef MOEE_HAVE_AVX2
const Ops& avx2_ops();  // defined in kernels_avx2.cpp
#endif

namespace {

Backend g_requested = Backend::Auto;

bool cpu_has_avx2() {
#if defined(MOEE_HAVE_AVX2) && defined(__GNUC__)
    return __builtin_cpu_supports("avx2");
#else
    return false;
#endif
}

Backend resolve() {
    if (g_requested != Backend::Auto) return g_requested;
    if (const char* env = std::getenv("MOEE_KERNELS")) {
        if (std::strcmp(env, "scalar") == 0) return Backend::Scalar;
        if (std::strcmp(env, "avx2") == 0) return Backend::Avx2;
    }
    return cpu_has_avx2() ? Backend::Avx2 : Backend::Scalar;
}

}  // namespace

bool avx2_supported() { return cpu_has_avx2(); }

void set_backend(Backend b) { g_requested = b; }

Backend active_backend() {
    Backend b = resolve();
#ifndef MOEE_HAVE_AVX2
    b = Backend::Scalar;
#endif
    return b;
}

const Ops& ops() {
#ifdef MOEE_HAVE_AVX2
    if (active_backend() == Backend::Avx2) return avx2_ops();
#endif
    return scalar_ops();
}

const char* backend_name() {
    return active_backend() == Backend::Avx2 ? "avx2" : "scalar";
}

void gemm_acc(const double* a, const double* b, double* c, size_t m, size_t k, size_t p) {
    // c[i,:] += sum_l a[i,l] * b[l,:]; the per-element accumulation order over
    // l is the same in every backend (axpy vectorizes across the p axis).
    const Ops& o = ops();
    for (size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * p;
        for (size_t l = 0; l < k; ++l) o.axpy(arow[l], b + l * p, crow, p);
    }
}

}  // namespace moee::kern
