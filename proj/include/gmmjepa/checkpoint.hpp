#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "gmmjepa/params.hpp"
#include "json.hpp"

namespace gmmjepa {

/// Adam moments aligned with the online store's parameter order.
struct OptimizerState {
  std::uint64_t step = 0;
  std::vector<tensor::DenseArray> m;
  std::vector<tensor::DenseArray> v;
  std::size_t consecutive_skips = 0;
  std::size_t skipped_total = 0;

  static OptimizerState zeros_like(const ParamStore& p);
};

struct Checkpoint {
  nlohmann::json config;
  nlohmann::json state;
  ParamStore online;  // trainable parameters
  ParamStore target;  // constant nodes
  OptimizerState opt;
};

// Layout: "GJEPACKP", u32 version, JSON {config, state}, then three named
// array sections (online, target, optimizer moments). Each array is written
// as name, u8 dtype (4 or 8 bytes), u32 rank, u64 dims, little-endian data.
// 32-bit arrays are used when the run's precision is F32, which is lossless
// because every stored value is already float-representable.
void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& config, const nlohmann::json& state,
                     const ParamStore& online, const ParamStore& target, const OptimizerState& opt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace gmmjepa
