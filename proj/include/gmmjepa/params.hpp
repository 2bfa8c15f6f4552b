#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gmmjepa/tensor.hpp"

namespace gmmjepa {

/// Named trainable parameters. Iteration follows insertion order, so two
/// stores built by the same code visit parameters identically.
class ParamStore {
 public:
  ParamStore() = default;
  explicit ParamStore(std::uint64_t seed) : seed_(seed) {}

  const tensor::Var& add(std::string name, tensor::DenseArray init);
  const tensor::Var& get(std::string_view name) const;
  bool contains(std::string_view name) const;

  const std::vector<std::pair<std::string, tensor::Var>>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  std::size_t numel() const;
  std::uint64_t seed() const { return seed_; }

  void zero_grad();

  /// Copies every parameter whose name starts with `prefix` into constant
  /// (non-differentiable) nodes.
  ParamStore frozen_copy(std::string_view prefix = {}) const;

 private:
  std::uint64_t seed_ = 0;
  std::vector<std::pair<std::string, tensor::Var>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  double max_abs_analytic = 0.0;
  double max_abs_numeric = 0.0;
  std::size_t checked = 0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::vector<GradCheckEntry> entries;
  bool passed = false;
};

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  // Denominator floor for the relative error |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  // 0 checks every element; otherwise an evenly strided subset per parameter.
  std::size_t max_elems_per_param = 0;
};

using LossBuilder = std::function<tensor::Var(const ParamStore&)>;

/// Compares analytic gradients with central differences. Throws if two builds
/// of the loss disagree bitwise (non-deterministic builder).
GradCheckReport grad_check(const LossBuilder& f, ParamStore& params, const GradCheckOptions& opt = {});

}  // namespace gmmjepa
