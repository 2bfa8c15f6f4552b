#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "gmmjepa/rng.hpp"
#include "gmmjepa/tensor.hpp"

namespace gmmjepa::masking {

struct MaskSpec {
  std::size_t span_min = 10;
  std::size_t span_max = 25;
  double ratio_min = 0.40;
  double ratio_max = 0.65;

  void validate() const;
};

struct Span {
  std::size_t start = 0;
  std::size_t length = 0;  // as drawn, before clipping to T or trimming
};

struct MaskVector {
  std::vector<bool> keep;          // true = visible, false = masked
  std::vector<std::size_t> masked; // sorted masked frame indices
  std::vector<Span> spans;
  double target_ratio = 0.0;
  bool trimmed = false;

  std::size_t size() const { return keep.size(); }
  double masked_fraction() const {
    return keep.empty() ? 0.0 : static_cast<double>(masked.size()) / static_cast<double>(keep.size());
  }
};

/// Unions random spans until the masked fraction reaches a ratio drawn once
/// from [ratio_min, ratio_max]; the last span is trimmed if it overshoots
/// ratio_max. For T < span_min a single span of ceil(r*T) frames is used.
MaskVector sample_block_mask(std::size_t T, const MaskSpec& spec, Rng& rng);

/// Kept rows come from z, masked rows are replaced by the mask token.
/// z: [T, C], token: [C].
tensor::Var apply_mask(const tensor::Var& z, const MaskVector& m, const tensor::Var& token);

}  // namespace gmmjepa::masking
