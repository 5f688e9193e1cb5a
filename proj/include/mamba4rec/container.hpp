#pragma once

// Binary tensor container shared by checkpoints and the dataset cache.
//
//   "SSM4REC1"                      8-byte magic
//   u64 count
//   count x record:
//     u64 name_length, name bytes (UTF-8)
//     u64 rank, rank x u64 extents
//     numel x f32 payload
//
// All integers and floats are little-endian.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "mamba4rec/errors.hpp"
#include "mamba4rec/tensor.hpp"

namespace m4r {

inline constexpr std::string_view kContainerMagic = "SSM4REC1";

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<float> values;

  friend bool operator==(const TensorRecord&, const TensorRecord&) = default;
};

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f32(std::ostream& os, float f) {
  const auto v = std::bit_cast<std::uint32_t>(f);
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint64_t get_u64(std::istream& is, const std::string& path) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw IoError(path + ": truncated container");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void write_container(const std::string& path, const std::vector<TensorRecord>& records) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(kContainerMagic.data(), static_cast<std::streamsize>(kContainerMagic.size()));
  detail::put_u64(os, records.size());
  for (const auto& r : records) {
    if (numel(r.shape) != r.values.size()) {
      throw DimensionError("record " + r.name + ": payload does not match shape");
    }
    detail::put_u64(os, r.name.size());
    os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    detail::put_u64(os, r.shape.size());
    for (auto e : r.shape) detail::put_u64(os, e);
    for (float f : r.values) detail::put_f32(os, f);
  }
  if (!os) throw IoError("write failed: " + path);
}

inline std::vector<TensorRecord> read_container(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::string_view(magic, 8) != kContainerMagic) {
    throw IoError(path + ": bad magic, not an SSM4REC1 container");
  }
  const auto count = detail::get_u64(is, path);
  std::vector<TensorRecord> records;
  for (std::uint64_t i = 0; i < count; ++i) {
    TensorRecord r;
    const auto len = detail::get_u64(is, path);
    if (len > (1u << 20)) throw IoError(path + ": implausible record name length");
    r.name.resize(len);
    if (!is.read(r.name.data(), static_cast<std::streamsize>(len))) {
      throw IoError(path + ": truncated record name");
    }
    const auto rank = detail::get_u64(is, path);
    if (rank > 16) throw IoError(path + ": implausible rank for " + r.name);
    for (std::uint64_t k = 0; k < rank; ++k) r.shape.push_back(detail::get_u64(is, path));
    r.values.resize(numel(r.shape));
    std::vector<unsigned char> raw(r.values.size() * 4);
    if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
      throw IoError(path + ": truncated payload for " + r.name);
    }
    for (std::size_t k = 0; k < r.values.size(); ++k) {
      std::uint32_t v = 0;
      for (int j = 0; j < 4; ++j) v |= static_cast<std::uint32_t>(raw[4 * k + j]) << (8 * j);
      r.values[k] = std::bit_cast<float>(v);
    }
    records.push_back(std::move(r));
  }
  return records;
}

// Arbitrary bytes stored one per f32 element (exact for 0..255).
inline TensorRecord bytes_record(std::string name, std::string_view bytes) {
  TensorRecord r{std::move(name), {std::max<std::size_t>(1, bytes.size())}, {}};
  r.values.reserve(r.shape[0]);
  for (unsigned char ch : bytes) r.values.push_back(static_cast<float>(ch));
  if (bytes.empty()) r.values.push_back(0.0f);
  return r;
}

inline std::string record_bytes(const TensorRecord& r) {
  std::string s;
  for (float f : r.values) s.push_back(static_cast<char>(static_cast<unsigned char>(f)));
  while (!s.empty() && s.back() == '\0') s.pop_back();
  return s;
}

inline const TensorRecord* find_record(const std::vector<TensorRecord>& records,
                                       std::string_view name) {
  for (const auto& r : records) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

// 64-bit FNV-1a; stable across platforms, used for cache keys and config ids.
class Fnv1a {
 public:
  void update(std::string_view bytes) {
    for (unsigned char ch : bytes) {
      h_ ^= ch;
      h_ *= 0x100000001b3ULL;
    }
  }
  std::uint64_t digest() const { return h_; }
  std::string hex() const {
    static constexpr char digits[] = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 0; i < 16; ++i) s[15 - i] = digits[(h_ >> (4 * i)) & 0xF];
    return s;
  }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

}  // namespace m4r
