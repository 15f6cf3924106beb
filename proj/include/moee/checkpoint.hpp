#pragma once

#include <map>
#include <string>
#include <vector>

#include "moee/tensor.hpp"

namespace moee {

/// Versioned container of named parameter tensors.
///
/// Layout (all integers little-endian):
///   magic "MOEECKPT" (8 bytes) | u32 version (1) | u8 endian tag (1 = LE)
///   u32 tensor count
///   per tensor: u32 name length | UTF-8 name | u32 rank | u64 dims...
///               u8 dtype tag (1 = float64) | raw LE float64 payload
/// Round-trips are bit-exact.
class Checkpoint {
public:
    static constexpr uint32_t kVersion = 1;

    void put(const std::string& name, const Tensor& t);
    bool has(const std::string& name) const { return entries_.count(name) != 0; }
    /// Throws ContractError if absent.
    Tensor get(const std::string& name) const;
    std::vector<std::string> names() const;
    size_t size() const { return entries_.size(); }

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);

private:
    struct Entry {
        Shape shape;
        std::vector<double> data;
    };
    std::map<std::string, Entry> entries_;  // sorted: deterministic file bytes
};

}  // namespace moee
