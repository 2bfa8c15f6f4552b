// Little-endian binary helpers shared by the model, checkpoint and dump formats.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gmmjepa::binio {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.append(c, n);
  }
  void magic(std::string_view m) { bytes(m.data(), m.size()); }
  template <class T>
  void pod(T v) {
    bytes(&v, sizeof(T));
  }
  void u8(std::uint8_t v) { pod(v); }
  void u32(std::uint32_t v) { pod(v); }
  void u64(std::uint64_t v) { pod(v); }
  void f64(double v) { pod(v); }
  void str(std::string_view s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
  void f64s(std::span<const double> v) { bytes(v.data(), v.size() * sizeof(double)); }
  void f32s_from(std::span<const double> v) {
    for (double x : v) pod(static_cast<float>(x));
  }

  const std::string& buffer() const { return buf_; }

  void save(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
    f.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!f) throw std::runtime_error("write failed for " + path.string());
  }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string data, std::string origin = {}) : data_(std::move(data)), origin_(std::move(origin)) {}

  static Reader from_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path.string());
    std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return Reader(std::move(s), path.string());
  }

  void bytes(void* p, std::size_t n) {
    if (pos_ + n > data_.size()) throw FormatError("truncated data in " + origin_);
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  void expect_magic(std::string_view m) {
    std::string got(m.size(), '\0');
    bytes(got.data(), got.size());
    if (got != m) throw FormatError("bad magic in " + origin_ + ": expected " + std::string(m));
  }
  template <class T>
  T pod() {
    T v;
    bytes(&v, sizeof(T));
    return v;
  }
  std::uint8_t u8() { return pod<std::uint8_t>(); }
  std::uint32_t u32() { return pod<std::uint32_t>(); }
  std::uint64_t u64() { return pod<std::uint64_t>(); }
  double f64() { return pod<double>(); }
  std::string str() {
    const auto n = u64();
    if (n > remaining()) throw FormatError("truncated string in " + origin_);
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  std::vector<double> f64s(std::size_t n) {
    if (n > remaining() / sizeof(double)) throw FormatError("truncated array in " + origin_);
    std::vector<double> v(n);
    bytes(v.data(), n * sizeof(double));
    return v;
  }
  std::vector<float> f32s(std::size_t n) {
    if (n > remaining() / sizeof(float)) throw FormatError("truncated array in " + origin_);
    std::vector<float> v(n);
    bytes(v.data(), n * sizeof(float));
    return v;
  }

  std::size_t remaining() const { return data_.size() - pos_; }
  bool at_end() const { return pos_ == data_.size(); }
  const std::string& origin() const { return origin_; }

 private:
  std::string data_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace gmmjepa::binio
