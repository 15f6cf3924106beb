#pragma once

#include <string>
#include <utility>
#include <vector>

#include "moee/tensor.hpp"

namespace moee {

/// Flat name -> tensor registry used for checkpointing, freezing and
/// optimizer wiring. Names are dot-separated paths ("trunk.0.attn.wq").
using NamedParams = std::vector<std::pair<std::string, Tensor>>;

inline void put_param(NamedParams& out, const std::string& name, const Tensor& t) {
    out.emplace_back(name, t);
}

}  // namespace moee
