#include "moee/optim.hpp"

#include <cmath>

namespace moee {

AdamW::AdamW(std::vector<Tensor> params, Hyper hyper) : hyper_(hyper) {
    slots_.reserve(params.size());
    for (Tensor& p : params) {
        check(p.requires_grad(), "AdamW: parameter without requires_grad");
        Slot s;
        s.param = p;
        s.m.assign(static_cast<size_t>(p.numel()), 0.0);
        s.v.assign(static_cast<size_t>(p.numel()), 0.0);
        slots_.push_back(std::move(s));
    }
}

void AdamW::step() {
    ++step_count_;
    const double b1 = hyper_.beta1, b2 = hyper_.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_count_));
    for (Slot& s : slots_) {
        double* p = s.param.data();
        const size_t n = s.m.size();
        const bool has_g = s.param.has_grad();
        const double* g = has_g ? s.param.grad().data() : nullptr;
        for (size_t i = 0; i < n; ++i) {
            const double gi = has_g ? g[i] : 0.0;
            s.m[i] = b1 * s.m[i] + (1.0 - b1) * gi;
            s.v[i] = b2 * s.v[i] + (1.0 - b2) * gi * gi;
            const double mhat = s.m[i] / bc1;
            const double vhat = s.v[i] / bc2;
            p[i] -= hyper_.lr * (mhat / (std::sqrt(vhat) + hyper_.eps) +
                                 hyper_.weight_decay * p[i]);
        }
    }
}

void AdamW::zero_grad() {
    for (Slot& s : slots_) s.param.zero_grad();
}

}  // namespace moee
