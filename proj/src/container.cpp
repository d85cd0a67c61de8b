#include "pmt/container.hpp"

#include <cstring>
#include <fstream>

namespace pmt {

namespace {

void append_u16(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xff));
  out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
}

void append_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

void append_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

struct Reader {
  const unsigned char* p;
  std::size_t n;
  std::size_t off = 0;

  void need(std::size_t k) const {
    if (off + k > n)
      throw std::runtime_error("container truncated at byte " + std::to_string(off) +
                               " (need " + std::to_string(k) + " more of " + std::to_string(n) +
                               ")");
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(p[off] | (p[off + 1] << 8));
    off += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[off + i]) << (8 * i);
    off += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[off + i]) << (8 * i);
    off += 8;
    return v;
  }
  std::uint8_t u8() {
    need(1);
    return p[off++];
  }
  void bytes(unsigned char* dst, std::size_t k) {
    need(k);
    std::memcpy(dst, p + off, k);
    off += k;
  }
};

std::vector<std::uint64_t> to_dims(const Shape& s) {
  std::vector<std::uint64_t> d;
  d.reserve(s.size());
  for (Index v : s) {
    if (v < 0) throw std::invalid_argument("negative extent in container entry shape");
    d.push_back(static_cast<std::uint64_t>(v));
  }
  return d;
}

Shape to_shape(const std::vector<std::uint64_t>& dims) {
  Shape s;
  s.reserve(dims.size());
  for (auto d : dims) s.push_back(static_cast<Index>(d));
  return s;
}

}  // namespace

void Container::add_entry(ContainerEntry e) {
  if (index_.count(e.name))
    throw std::invalid_argument("duplicate container entry name: " + e.name);
  if (e.payload.size() != e.numel() * dtype_size(e.dtype))
    throw std::invalid_argument("container payload length mismatch for entry: " + e.name);
  index_[e.name] = entries_.size();
  entries_.push_back(std::move(e));
}

void Container::put_f32(const std::string& name, const Shape& dims, const float* data) {
  ContainerEntry e;
  e.name = name;
  e.dtype = Dtype::F32;
  e.dims = to_dims(dims);
  e.payload.resize(e.numel() * 4);
  std::memcpy(e.payload.data(), data, e.payload.size());
  add_entry(std::move(e));
}

void Container::put_f64(const std::string& name, const Shape& dims, const double* data) {
  ContainerEntry e;
  e.name = name;
  e.dtype = Dtype::F64;
  e.dims = to_dims(dims);
  e.payload.resize(e.numel() * 8);
  std::memcpy(e.payload.data(), data, e.payload.size());
  add_entry(std::move(e));
}

void Container::put_u32(const std::string& name, const Shape& dims, const std::uint32_t* data) {
  ContainerEntry e;
  e.name = name;
  e.dtype = Dtype::U32;
  e.dims = to_dims(dims);
  e.payload.resize(e.numel() * 4);
  std::memcpy(e.payload.data(), data, e.payload.size());
  add_entry(std::move(e));
}

void Container::put_u64_scalar(const std::string& name, std::uint64_t v) {
  std::uint32_t parts[2] = {static_cast<std::uint32_t>(v & 0xffffffffu),
                            static_cast<std::uint32_t>(v >> 32)};
  put_u32(name, Shape{2}, parts);
}

void Container::put_u32_scalar(const std::string& name, std::uint32_t v) {
  put_u32(name, Shape{1}, &v);
}

const ContainerEntry& Container::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("container entry not found: " + name);
  return entries_[it->second];
}

Tensor<float> Container::get_f32(const std::string& name) const {
  const auto& e = at(name);
  if (e.dtype != Dtype::F32)
    throw std::runtime_error("container entry " + name + " is not f32");
  Tensor<float> t(to_shape(e.dims));
  std::memcpy(t.data(), e.payload.data(), e.payload.size());
  return t;
}

Tensor<double> Container::get_f64(const std::string& name) const {
  const auto& e = at(name);
  if (e.dtype != Dtype::F64)
    throw std::runtime_error("container entry " + name + " is not f64");
  Tensor<double> t(to_shape(e.dims));
  std::memcpy(t.data(), e.payload.data(), e.payload.size());
  return t;
}

std::vector<std::uint32_t> Container::get_u32(const std::string& name) const {
  const auto& e = at(name);
  if (e.dtype != Dtype::U32)
    throw std::runtime_error("container entry " + name + " is not u32");
  std::vector<std::uint32_t> v(e.numel());
  std::memcpy(v.data(), e.payload.data(), e.payload.size());
  return v;
}

std::uint64_t Container::get_u64_scalar(const std::string& name) const {
  auto v = get_u32(name);
  if (v.size() != 2)
    throw std::runtime_error("container entry " + name + " is not a packed u64");
  return static_cast<std::uint64_t>(v[0]) | (static_cast<std::uint64_t>(v[1]) << 32);
}

std::uint32_t Container::get_u32_scalar(const std::string& name) const {
  auto v = get_u32(name);
  if (v.size() != 1)
    throw std::runtime_error("container entry " + name + " is not a u32 scalar");
  return v[0];
}

std::vector<unsigned char> Container::serialize() const {
  std::vector<unsigned char> out;
  append_u32(out, kMagic);
  append_u32(out, kVersion);
  append_u32(out, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& e : entries_) {
    if (e.name.size() > 0xffff)
      throw std::invalid_argument("container entry name too long: " + e.name);
    append_u16(out, static_cast<std::uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    out.push_back(static_cast<unsigned char>(e.dtype));
    out.push_back(static_cast<unsigned char>(e.dims.size()));
    for (auto d : e.dims) append_u64(out, d);
    out.insert(out.end(), e.payload.begin(), e.payload.end());
  }
  return out;
}

Container Container::parse(const unsigned char* data, std::size_t size) {
  Reader r{data, size};
  std::uint32_t magic = r.u32();
  if (magic != kMagic) throw std::runtime_error("container magic mismatch (not a PMTC file)");
  std::uint32_t version = r.u32();
  if (version != kVersion)
    throw std::runtime_error("container version mismatch: file has " + std::to_string(version) +
                             ", expected " + std::to_string(kVersion));
  std::uint32_t count = r.u32();
  Container c;
  for (std::uint32_t i = 0; i < count; ++i) {
    ContainerEntry e;
    std::uint16_t name_len = r.u16();
    e.name.resize(name_len);
    r.bytes(reinterpret_cast<unsigned char*>(e.name.data()), name_len);
    std::uint8_t dt = r.u8();
    if (dt > 2)
      throw std::runtime_error("container entry " + e.name + " has unknown dtype code " +
                               std::to_string(dt));
    e.dtype = static_cast<Dtype>(dt);
    std::uint8_t nd = r.u8();
    e.dims.resize(nd);
    for (std::uint8_t d = 0; d < nd; ++d) e.dims[d] = r.u64();
    e.payload.resize(e.numel() * dtype_size(e.dtype));
    r.bytes(e.payload.data(), e.payload.size());
    c.add_entry(std::move(e));
  }
  return c;
}

void Container::save(const std::string& path) const {
  auto bytes = serialize();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

Container Container::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw std::runtime_error("cannot open container file: " + path);
  auto size = static_cast<std::size_t>(f.tellg());
  f.seekg(0);
  std::vector<unsigned char> bytes(size);
  f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  if (!f) throw std::runtime_error("read failed: " + path);
  return parse(bytes.data(), size);
}

}  // namespace pmt
