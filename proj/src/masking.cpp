#include "gmmjepa/masking.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace gmmjepa::masking {

void MaskSpec::validate() const {
  if (!(ratio_min > 0.0 && ratio_min <= ratio_max && ratio_max <= 1.0)) {
    throw std::invalid_argument("mask: need 0 < ratio_min <= ratio_max <= 1");
  }
  if (!(span_min >= 1 && span_min <= span_max)) throw std::invalid_argument("mask: need 1 <= span_min <= span_max");
}

MaskVector sample_block_mask(std::size_t T, const MaskSpec& spec, Rng& rng) {
  spec.validate();
  if (T == 0) throw std::invalid_argument("sample_block_mask: T must be >= 1");
  MaskVector m;
  m.keep.assign(T, true);
  m.target_ratio = uniform(rng, spec.ratio_min, spec.ratio_max);
  if (m.target_ratio > spec.ratio_max) m.target_ratio = spec.ratio_max;
  const double Td = static_cast<double>(T);

  if (T < spec.span_min) {
    const auto len = std::min<std::size_t>(T, static_cast<std::size_t>(std::ceil(m.target_ratio * Td)));
    const auto start = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(T - len)));
    m.spans.push_back({start, len});
    for (std::size_t i = start; i < start + len; ++i) m.keep[i] = false;
  } else {
    const auto cap = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(spec.ratio_max * Td + 1e-9)));
    const auto need = std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(m.target_ratio * Td - 1e-9)), 1, cap);
    std::size_t count = 0;
    while (count < need) {
      const auto drawn = static_cast<std::size_t>(
          uniform_int(rng, static_cast<std::int64_t>(spec.span_min), static_cast<std::int64_t>(spec.span_max)));
      const std::size_t len = std::min(drawn, T);
      const auto start = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(T - len)));
      m.spans.push_back({start, drawn});
      std::vector<std::size_t> added;
      for (std::size_t i = start; i < start + len; ++i) {
        if (m.keep[i]) {
          m.keep[i] = false;
          added.push_back(i);
        }
      }
      count += added.size();
      // Trim the newest span back from its end to respect the ceiling.
      while (count > cap && !added.empty()) {
        m.keep[added.back()] = true;
        added.pop_back();
        --count;
        m.trimmed = true;
      }
    }
  }
  for (std::size_t i = 0; i < T; ++i)
    if (!m.keep[i]) m.masked.push_back(i);
  return m;
}

tensor::Var apply_mask(const tensor::Var& z, const MaskVector& m, const tensor::Var& token) {
  using tensor::DenseArray;
  const auto& s = z->shape();
  if (s.size() != 2 || s[0] != m.size() || token->value.size() != s[1]) {
    throw tensor::TensorError("apply_mask: shape mismatch " + tensor::shape_str(s) + " vs mask length " +
                              std::to_string(m.size()) + " and token " + tensor::shape_str(token->shape()));
  }
  const std::size_t T = s[0], C = s[1];
  DenseArray keep({T, C}), drop({T, C});
  for (std::size_t t = 0; t < T; ++t) {
    const double k = m.keep[t] ? 1.0 : 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      keep.at(t, c) = k;
      drop.at(t, c) = 1.0 - k;
    }
  }
  return tensor::add(tensor::mul(z, tensor::constant(std::move(keep))),
                     tensor::mul(tensor::constant(std::move(drop)), token));
}

}  // namespace gmmjepa::masking
