#pragma once

#include "pmt/tensor.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace pmt {

enum class Dtype : std::uint8_t { F32 = 0, F64 = 1, U32 = 2 };

inline std::size_t dtype_size(Dtype d) {
  switch (d) {
    case Dtype::F32: return 4;
    case Dtype::F64: return 8;
    case Dtype::U32: return 4;
  }
  throw std::invalid_argument("unknown dtype code");
}

struct ContainerEntry {
  std::string name;
  Dtype dtype = Dtype::F32;
  std::vector<std::uint64_t> dims;
  std::vector<unsigned char> payload;

  std::uint64_t numel() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

/// Binary multi-tensor file: magic "PMTC", version, entry count, then per
/// entry a named, typed, shaped little-endian payload. Entry order is
/// preserved, so save -> load -> save is byte-identical.
class Container {
 public:
  static constexpr std::uint32_t kMagic = 0x43544d50u;  // "PMTC" little-endian
  static constexpr std::uint32_t kVersion = 1;

  void put_f32(const std::string& name, const Shape& dims, const float* data);
  void put_f64(const std::string& name, const Shape& dims, const double* data);
  void put_u32(const std::string& name, const Shape& dims, const std::uint32_t* data);

  void put(const std::string& name, const Tensor<float>& t) {
    put_f32(name, t.shape(), t.data());
  }
  void put(const std::string& name, const Tensor<double>& t) {
    put_f64(name, t.shape(), t.data());
  }
  void put_u64_scalar(const std::string& name, std::uint64_t v);
  void put_u32_scalar(const std::string& name, std::uint32_t v);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const ContainerEntry& at(const std::string& name) const;

  Tensor<float> get_f32(const std::string& name) const;
  Tensor<double> get_f64(const std::string& name) const;
  std::vector<std::uint32_t> get_u32(const std::string& name) const;
  std::uint64_t get_u64_scalar(const std::string& name) const;
  std::uint32_t get_u32_scalar(const std::string& name) const;

  const std::vector<ContainerEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::vector<unsigned char> serialize() const;
  static Container parse(const unsigned char* data, std::size_t size);

  void save(const std::string& path) const;
  static Container load(const std::string& path);

 private:
  void add_entry(ContainerEntry e);

  std::vector<ContainerEntry> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace pmt
