#pragma once

#include <vector>

#include "moee/tensor.hpp"

namespace moee {

/// Decoupled-weight-decay Adam with bias correction. One state per trained
/// parameter tensor; step count is shared and strictly increasing.
class AdamW {
public:
    struct Hyper {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.0;
    };

    AdamW(std::vector<Tensor> params, Hyper hyper);

    /// Applies one update from the accumulated grads, then leaves grads
    /// untouched (callers zero them). Parameters with no grad are only
    /// decayed.
    void step();

    void zero_grad();

    int64_t step_count() const { return step_count_; }
    const Hyper& hyper() const { return hyper_; }
    Hyper& hyper() { return hyper_; }

private:
    struct Slot {
        Tensor param;
        std::vector<double> m;
        std::vector<double> v;
    };
    std::vector<Slot> slots_;
    Hyper hyper_;
    int64_t step_count_ = 0;
};

}  // namespace moee
