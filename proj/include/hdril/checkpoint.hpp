#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "hdril/errors.hpp"
#include "hdril/tensor.hpp"

namespace hdril::ckpt {

using ad::Shape;
using ad::Tensor;

inline constexpr char kMagic[8] = {'H', 'D', 'R', 'I', 'L', 'C', 'K', '\0'};
inline constexpr std::uint32_t kVersion = 1;

struct Record {
  std::string name;
  Tensor value;
};

namespace detail {

template <class U>
void put(std::ostream& os, U v) {
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), sizeof b);
}

template <class U>
U get(std::istream& is) {
  unsigned char b[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof b)) throw CheckpointError("checkpoint truncated");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void write(std::ostream& os, const std::vector<Record>& records) {
  os.write(kMagic, sizeof kMagic);
  detail::put<std::uint32_t>(os, kVersion);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(r.name.size()));
    os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(r.value.rank()));
    for (std::size_t e : r.value.shape) detail::put<std::uint64_t>(os, e);
    for (double v : r.value.data) detail::put<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw CheckpointError("checkpoint write failed");
}

inline std::vector<Record> read(std::istream& is) {
  char magic[sizeof kMagic];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw CheckpointError("not a checkpoint (bad magic)");
  const auto version = detail::get<std::uint32_t>(is);
  if (version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto count = detail::get<std::uint32_t>(is);
  std::vector<Record> out;
  for (std::uint32_t k = 0; k < count; ++k) {
    Record r;
    const auto len = detail::get<std::uint32_t>(is);
    if (len > (1u << 16)) throw CheckpointError("implausible record name length");
    r.name.resize(len);
    if (!is.read(r.name.data(), len)) throw CheckpointError("checkpoint truncated");
    const auto rank = detail::get<std::uint32_t>(is);
    if (rank > 8) throw CheckpointError("implausible rank for '" + r.name + "'");
    Shape shape(rank);
    std::uint64_t n = 1;
    for (auto& e : shape) {
      e = detail::get<std::uint64_t>(is);
      n *= e;
    }
    if (n > (1ull << 32)) throw CheckpointError("implausible size for '" + r.name + "'");
    std::vector<double> values(n);
    for (double& v : values) v = std::bit_cast<double>(detail::get<std::uint64_t>(is));
    r.value = Tensor(std::move(shape), std::move(values));
    out.push_back(std::move(r));
  }
  return out;
}

inline void save(const std::string& path, const std::vector<Record>& records) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot write " + path);
  write(f, records);
}

inline std::vector<Record> load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingFileError("cannot read " + path);
  return read(f);
}

/// Name -> tensor view with typed lookups for "meta/..." scalars.
class Index {
 public:
  explicit Index(const std::vector<Record>& records) {
    for (const auto& r : records)
      if (!map_.emplace(r.name, &r.value).second) throw CheckpointError("duplicate record '" + r.name + "'");
  }

  const Tensor& at(const std::string& name) const {
    const auto it = map_.find(name);
    if (it == map_.end()) throw CheckpointError("checkpoint lacks '" + name + "'");
    return *it->second;
  }
  bool has(const std::string& name) const { return map_.count(name) != 0; }
  double scalar(const std::string& name) const {
    const Tensor& t = at(name);
    if (t.size() != 1) throw CheckpointError("'" + name + "' is not a scalar");
    return t.data[0];
  }
  std::size_t count(const std::string& name) const { return static_cast<std::size_t>(scalar(name)); }
  bool flag(const std::string& name) const { return scalar(name) != 0.0; }

  /// Copies into `dst`, which must already have the stored shape.
  void fill(const std::string& name, Tensor& dst) const {
    const Tensor& t = at(name);
    if (t.shape != dst.shape)
      throw CheckpointError("shape of '" + name + "' is " + ad::shape_string(t.shape) + ", expected " + ad::shape_string(dst.shape));
    dst.data = t.data;
  }

 private:
  std::map<std::string, const Tensor*> map_;
};

inline Record scalar_record(const std::string& name, double v) { return {name, Tensor::scalar(v)}; }

}  // namespace hdril::ckpt
