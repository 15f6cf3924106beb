#include <cmath>

#include "moee/kernels.hpp"

namespace moee::kern {

namespace {

void s_add(const double* a, const double* b, double* out, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}
void s_sub(const double* a, const double* b, double* out, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}
void s_mul(const double* a, const double* b, double* out, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}
void s_scale(const double* a, double c, double* out, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = a[i] * c;
}
void s_axpy(double c, const double* a, double* out, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] += a[i] * c;
}
void s_acc(const double* a, double* out, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] += a[i];
}

double s_dot(const double* a, const double* b, size_t n) {
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}
double s_sum(const double* a, size_t n) {
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) acc += a[i];
    return acc;
}
double s_max(const double* a, size_t n) {
    double m = a[0];
    for (size_t i = 1; i < n; ++i)
        if (a[i] > m) m = a[i];
    return m;
}
double s_sq_sum(const double* a, size_t n) {
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) acc += a[i] * a[i];
    return acc;
}
double s_sq_diff_sum(const double* a, const double* b, size_t n) {
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}
double s_abs_diff_sum(const double* a, const double* b, size_t n) {
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) acc += std::fabs(a[i] - b[i]);
    return acc;
}

}  // namespace

const Ops& scalar_ops() {
    static const Ops table = {
        s_add, s_sub,    s_mul, s_scale, s_axpy,       s_acc,
        s_dot, s_sum,    s_max, s_sq_sum, s_sq_diff_sum, s_abs_diff_sum,
    };
    return table;
}

}  // namespace moee::kern
