#pragma once

#include <string>
#include <vector>

#include "moee/tensor.hpp"

namespace moee {

/// Central finite-difference verification of every parameterized block at
/// tiny dimensions. The oracle re-runs the forward pass only, so it is
/// independent of each analytic backward it checks.
struct GradCheckBlock {
    std::string name;
    double max_rel_err = 0.0;
    int params_checked = 0;
};

struct GradCheckReport {
    std::vector<GradCheckBlock> blocks;
    double worst = 0.0;
    double seconds = 0.0;
    bool passed(double threshold = 1e-4) const { return worst < threshold; }
};

GradCheckReport run_grad_checks(int seeds_per_block = 10, double eps = 1e-5);

}  // namespace moee
