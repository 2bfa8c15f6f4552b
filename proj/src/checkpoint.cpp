#include "gmmjepa/checkpoint.hpp"

#include <stdexcept>

#include "gmmjepa/binio.hpp"

namespace gmmjepa {

namespace {

constexpr std::string_view kMagic = "GJEPACKP";
constexpr std::uint32_t kVersion = 1;

void write_array(binio::Writer& w, const std::string& name, const tensor::DenseArray& a, bool f32) {
  w.str(name);
  w.u8(f32 ? 4 : 8);
  w.u32(static_cast<std::uint32_t>(a.rank()));
  for (auto d : a.shape()) w.u64(d);
  if (f32) {
    w.f32s_from(a.data());
  } else {
    w.f64s(a.data());
  }
}

std::pair<std::string, tensor::DenseArray> read_array(binio::Reader& r) {
  std::string name = r.str();
  const auto dtype = r.u8();
  if (dtype != 4 && dtype != 8) throw binio::FormatError("checkpoint: bad dtype for " + name);
  const auto rank = r.u32();
  if (rank > 8) throw binio::FormatError("checkpoint: bad rank for " + name);
  tensor::Shape s(rank);
  for (auto& d : s) d = r.u64();
  const std::size_t n = tensor::shape_numel(s);
  std::vector<double> data;
  if (dtype == 8) {
    data = r.f64s(n);
  } else {
    const auto f = r.f32s(n);
    data.assign(f.begin(), f.end());
  }
  return {std::move(name), tensor::DenseArray(std::move(s), std::move(data))};
}

void write_store(binio::Writer& w, const ParamStore& p, bool f32) {
  w.u64(p.size());
  for (const auto& [name, v] : p.items()) write_array(w, name, v->value, f32);
}

}  // namespace

OptimizerState OptimizerState::zeros_like(const ParamStore& p) {
  OptimizerState s;
  for (const auto& [_, v] : p.items()) {
    s.m.emplace_back(v->shape(), 0.0);
    s.v.emplace_back(v->shape(), 0.0);
  }
  return s;
}

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& config, const nlohmann::json& state,
                     const ParamStore& online, const ParamStore& target, const OptimizerState& opt) {
  if (opt.m.size() != online.size() || opt.v.size() != online.size()) {
    throw std::invalid_argument("save_checkpoint: optimizer state does not match parameters");
  }
  const bool f32 = tensor::precision() == tensor::Precision::F32;
  binio::Writer w;
  w.magic(kMagic);
  w.u32(kVersion);
  w.str(nlohmann::json{{"config", config}, {"state", state}}.dump());
  write_store(w, online, f32);
  write_store(w, target, f32);
  w.u64(opt.step);
  w.u64(opt.consecutive_skips);
  w.u64(opt.skipped_total);
  for (std::size_t i = 0; i < online.size(); ++i) {
    write_array(w, online.items()[i].first + ".m", opt.m[i], f32);
    write_array(w, online.items()[i].first + ".v", opt.v[i], f32);
  }
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  w.save(tmp);
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto r = binio::Reader::from_file(path);
  r.expect_magic(kMagic);
  const auto version = r.u32();
  if (version != kVersion) throw binio::FormatError("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint c;
  auto head = nlohmann::json::parse(r.str());
  c.config = head.at("config");
  c.state = head.at("state");

  const auto n_online = r.u64();
  for (std::uint64_t i = 0; i < n_online; ++i) {
    auto [name, a] = read_array(r);
    c.online.add(std::move(name), std::move(a));
  }
  ParamStore target_params;
  const auto n_target = r.u64();
  for (std::uint64_t i = 0; i < n_target; ++i) {
    auto [name, a] = read_array(r);
    target_params.add(std::move(name), std::move(a));
  }
  c.target = target_params.frozen_copy();

  c.opt.step = r.u64();
  c.opt.consecutive_skips = r.u64();
  c.opt.skipped_total = r.u64();
  for (std::uint64_t i = 0; i < n_online; ++i) {
    auto [mn, m] = read_array(r);
    auto [vn, v] = read_array(r);
    if (mn != c.online.items()[i].first + ".m" || vn != c.online.items()[i].first + ".v") {
      throw binio::FormatError("checkpoint: optimizer state out of order at " + mn);
    }
    c.opt.m.push_back(std::move(m));
    c.opt.v.push_back(std::move(v));
  }
  if (!r.at_end()) throw binio::FormatError("checkpoint: trailing bytes in " + path.string());
  return c;
}

}  // namespace gmmjepa
