#include <algorithm>
#include <bit>
#include <cmath>
#include <stdexcept>

#include "gmmjepa/params.hpp"

namespace gmmjepa {

using tensor::DenseArray;
using tensor::Var;

const Var& ParamStore::add(std::string name, DenseArray init) {
  if (index_.contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  index_.emplace(name, items_.size());
  items_.emplace_back(std::move(name), tensor::parameter(std::move(init)));
  return items_.back().second;
}

const Var& ParamStore::get(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + std::string(name));
  return items_[it->second].second;
}

bool ParamStore::contains(std::string_view name) const { return index_.contains(std::string(name)); }

std::size_t ParamStore::numel() const {
  std::size_t n = 0;
  for (const auto& [_, v] : items_) n += v->value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, v] : items_) v->zero_grad();
}

ParamStore ParamStore::frozen_copy(std::string_view prefix) const {
  ParamStore out(seed_);
  for (const auto& [name, v] : items_) {
    if (!name.starts_with(prefix)) continue;
    out.index_.emplace(name, out.items_.size());
    out.items_.emplace_back(name, tensor::constant(v->value));
  }
  return out;
}

GradCheckReport grad_check(const LossBuilder& f, ParamStore& params, const GradCheckOptions& opt) {
  const double l0 = f(params)->value.item();
  const double l1 = f(params)->value.item();
  if (std::bit_cast<std::uint64_t>(l0) != std::bit_cast<std::uint64_t>(l1)) {
    throw std::runtime_error("grad_check: loss builder is not deterministic");
  }

  params.zero_grad();
  Var loss = f(params);
  tensor::backward(loss);

  GradCheckReport report;
  for (const auto& [name, var] : params.items()) {
    GradCheckEntry e;
    e.name = name;
    const std::size_t n = var->value.size();
    const std::size_t step =
        (opt.max_elems_per_param == 0 || n <= opt.max_elems_per_param) ? 1 : n / opt.max_elems_per_param;
    for (std::size_t i = 0; i < n; i += step) {
      const double analytic = var->has_grad() ? var->grad[i] : 0.0;
      const double saved = var->value[i];
      var->value[i] = saved + opt.eps;
      const double lp = f(params)->value.item();
      var->value[i] = saved - opt.eps;
      const double lm = f(params)->value.item();
      var->value[i] = saved;
      const double numeric = (lp - lm) / (2.0 * opt.eps);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), opt.floor});
      const double rel = std::abs(analytic - numeric) / denom;
      e.max_abs_analytic = std::max(e.max_abs_analytic, std::abs(analytic));
      e.max_abs_numeric = std::max(e.max_abs_numeric, std::abs(numeric));
      ++e.checked;
      if (rel > e.max_rel_err) e.max_rel_err = rel;
      if (rel > report.max_rel_err || report.worst_param.empty()) {
        if (rel >= report.max_rel_err) {
          report.max_rel_err = rel;
          report.worst_param = name;
          report.worst_index = i;
        }
      }
    }
    report.entries.push_back(std::move(e));
  }
  report.passed = report.max_rel_err < opt.tol;
  return report;
}

}  // namespace gmmjepa
