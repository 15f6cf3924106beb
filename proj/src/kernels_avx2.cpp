// AVX2 variants of the inner-loop kernels (4 doubles per lane group).
// Elementwise kernels use unfused mul/add so each element goes through the
// same rounding sequence as the scalar reference; the equivalence tests
// assert bit-identical output for them. Reductions use 4 parallel
// accumulators plus a scalar tail, which reassociates the sum.

#ifdef MOEE_HAVE_AVX2

#include <immintrin.h>

#include <cmath>

#include "moee/kernels.hpp"

namespace moee::kern {

namespace {

void v_add(const double* a, const double* b, double* out, size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) out[i] = a[i] + b[i];
}
void v_sub(const double* a, const double* b, double* out, size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) out[i] = a[i] - b[i];
}
void v_mul(const double* a, const double* b, double* out, size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) out[i] = a[i] * b[i];
}
void v_scale(const double* a, double c, double* out, size_t n) {
    const __m256d vc = _mm256_set1_pd(c);
    size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), vc));
    for (; i < n; ++i) out[i] = a[i] * c;
}
void v_axpy(double c, const double* a, double* out, size_t n) {
    const __m256d vc = _mm256_set1_pd(c);
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        // mul then add (no fma) to match the scalar rounding exactly
        const __m256d prod = _mm256_mul_pd(_mm256_loadu_pd(a + i), vc);
        _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(out + i), prod));
    }
    for (; i < n; ++i) out[i] += a[i] * c;
}
void v_acc(const double* a, double* out, size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(out + i), _mm256_loadu_pd(a + i)));
    for (; i < n; ++i) out[i] += a[i];
}

double hsum(__m256d v) {
    const __m128d lo = _mm256_castpd256_pd128(v);
    const __m128d hi = _mm256_extractf128_pd(v, 1);
    const __m128d s = _mm_add_pd(lo, hi);
    return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

double v_dot(const double* a, const double* b, size_t n) {
    __m256d acc = _mm256_setzero_pd();
    size_t i = 0;
    for (; i + 4 <= n; i += 4)
        acc = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc);
    double r = hsum(acc);
    for (; i < n; ++i) r += a[i] * b[i];
    return r;
}
double v_sum(const double* a, size_t n) {
    __m256d acc = _mm256_setzero_pd();
    size_t i = 0;
    for (; i + 4 <= n; i += 4) acc = _mm256_add_pd(acc, _mm256_loadu_pd(a + i));
    double r = hsum(acc);
    for (; i < n; ++i) r += a[i];
    return r;
}
double v_max(const double* a, size_t n) {
    if (n < 8) {
        double m = a[0];
        for (size_t i = 1; i < n; ++i)
            if (a[i] > m) m = a[i];
        return m;
    }
    __m256d acc = _mm256_loadu_pd(a);
    size_t i = 4;
    for (; i + 4 <= n; i += 4) acc = _mm256_max_pd(acc, _mm256_loadu_pd(a + i));
    alignas(32) double lanes[4];
    _mm256_store_pd(lanes, acc);
    double m = lanes[0];
    for (int l = 1; l < 4; ++l)
        if (lanes[l] > m) m = lanes[l];
    for (; i < n; ++i)
        if (a[i] > m) m = a[i];
    return m;
}
double v_sq_sum(const double* a, size_t n) {
    __m256d acc = _mm256_setzero_pd();
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d x = _mm256_loadu_pd(a + i);
        acc = _mm256_fmadd_pd(x, x, acc);
    }
    double r = hsum(acc);
    for (; i < n; ++i) r += a[i] * a[i];
    return r;
}
double v_sq_diff_sum(const double* a, const double* b, size_t n) {
    __m256d acc = _mm256_setzero_pd();
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d d = _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i));
        acc = _mm256_fmadd_pd(d, d, acc);
    }
    double r = hsum(acc);
    for (; i < n; ++i) {
        const double d = a[i] - b[i];
        r += d * d;
    }
    return r;
}
double v_abs_diff_sum(const double* a, const double* b, size_t n) {
    const __m256d signmask = _mm256_set1_pd(-0.0);
    __m256d acc = _mm256_setzero_pd();
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d d = _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i));
        acc = _mm256_add_pd(acc, _mm256_andnot_pd(signmask, d));
    }
    double r = hsum(acc);
    for (; i < n; ++i) r += std::fabs(a[i] - b[i]);
    return r;
}

}  // namespace

const Ops& avx2_ops() {
    static const Ops table = {
        v_add, v_sub, v_mul, v_scale, v_axpy,       v_acc,
        v_dot, v_sum, v_max, v_sq_sum, v_sq_diff_sum, v_abs_diff_sum,
    };
    return table;
}

}  // namespace moee::kern

#endif  // MOEE_HAVE_AVX2
