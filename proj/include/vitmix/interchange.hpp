#pragma once

// TensorFileV1: a named-tensor container with explicit little-endian layout.
//
//   "VMIX"                 4 bytes
//   version     u32        = 1
//   count       u32
//   count x {
//     name_len  u32, name (UTF-8, name_len bytes)
//     dtype     u8         0 = float32, 1 = float64
//     ndim      u8
//     dims      u64 x ndim
//     payload   element_size * prod(dims) bytes, little-endian
//   }
//
// Writers emit tensors in lexicographic name order so equal inputs give equal
// bytes. Readers widen float32 payloads to float64.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "vitmix/errors.hpp"
#include "vitmix/tensor.hpp"

namespace vitmix {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

struct TensorRecord {
  std::string name;
  Tensor tensor;
  DType dtype = DType::F64;
};

using TensorMap = std::map<std::string, Tensor>;

inline constexpr std::array<char, 4> kTensorFileMagic = {'V', 'M', 'I', 'X'};
inline constexpr std::uint32_t kTensorFileVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}

  std::size_t remaining() const noexcept { return in_.size() - pos_; }
  bool has(std::size_t n) const noexcept { return remaining() >= n; }

  std::uint8_t u8() { return in_[pos_++]; }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  std::span<const std::uint8_t> take(std::size_t n) {
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::uint64_t get(int n) {
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

inline std::size_t dtype_size(DType t) { return t == DType::F32 ? 4 : 8; }

}  // namespace detail

inline std::vector<std::uint8_t> encode_tensors(std::span<const TensorRecord> records) {
  std::vector<const TensorRecord*> sorted;
  std::set<std::string> names;
  for (const TensorRecord& r : records) {
    if (!names.insert(r.name).second) throw ArgumentError("duplicate tensor name '" + r.name + "'");
    if (r.tensor.empty()) throw ArgumentError("tensor '" + r.name + "' is empty");
    if (r.tensor.rank() > 255) throw ArgumentError("tensor '" + r.name + "' has more than 255 dimensions");
    sorted.push_back(&r);
  }
  std::sort(sorted.begin(), sorted.end(), [](const auto* a, const auto* b) { return a->name < b->name; });

  detail::ByteWriter w;
  w.bytes(kTensorFileMagic.data(), kTensorFileMagic.size());
  w.u32(kTensorFileVersion);
  w.u32(static_cast<std::uint32_t>(sorted.size()));
  for (const TensorRecord* r : sorted) {
    w.u32(static_cast<std::uint32_t>(r->name.size()));
    w.bytes(r->name.data(), r->name.size());
    w.u8(static_cast<std::uint8_t>(r->dtype));
    w.u8(static_cast<std::uint8_t>(r->tensor.rank()));
    for (std::size_t e : r->tensor.shape()) w.u64(e);
    for (double v : r->tensor.values()) {
      if (r->dtype == DType::F32)
        w.f32(static_cast<float>(v));
      else
        w.f64(v);
    }
  }
  return w.take();
}

inline std::vector<std::uint8_t> encode_tensors(const TensorMap& tensors, DType dtype = DType::F64) {
  std::vector<TensorRecord> records;
  for (const auto& [name, t] : tensors) records.push_back({name, t, dtype});
  return encode_tensors(records);
}

inline TensorMap decode_tensors(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (!r.has(4) || std::memcmp(bytes.data(), kTensorFileMagic.data(), 4) != 0)
    throw FormatError("not a tensor file: bad magic");
  r.take(4);
  if (!r.has(8)) throw CorruptionError("tensor file header truncated");
  const std::uint32_t version = r.u32();
  if (version != kTensorFileVersion) throw FormatError("unsupported tensor file version " + std::to_string(version));
  const std::uint32_t count = r.u32();

  TensorMap out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string where = "tensor #" + std::to_string(i);
    if (!r.has(4)) throw CorruptionError(where + ": truncated before name");
    const std::uint32_t name_len = r.u32();
    if (!r.has(name_len)) throw CorruptionError(where + ": truncated name");
    const auto name_bytes = r.take(name_len);
    std::string name(name_bytes.begin(), name_bytes.end());
    const std::string label = "tensor '" + name + "'";
    if (name.empty()) throw CorruptionError(where + ": empty name");
    if (!r.has(2)) throw CorruptionError(label + ": truncated header");
    const std::uint8_t dtype_raw = r.u8();
    if (dtype_raw > 1) throw FormatError(label + ": unknown dtype " + std::to_string(dtype_raw));
    const auto dtype = static_cast<DType>(dtype_raw);
    const std::uint8_t ndim = r.u8();
    if (!r.has(8ull * ndim)) throw CorruptionError(label + ": truncated dims");
    Shape shape;
    std::uint64_t elements = 1;
    for (std::uint8_t k = 0; k < ndim; ++k) {
      const std::uint64_t e = r.u64();
      if (e == 0) throw CorruptionError(label + ": zero extent");
      if (elements > r.remaining() / e) throw CorruptionError(label + ": payload truncated");
      elements *= e;
      shape.push_back(static_cast<std::size_t>(e));
    }
    const std::size_t esize = detail::dtype_size(dtype);
    if (elements > r.remaining() / esize) throw CorruptionError(label + ": payload truncated");
    const auto payload = r.take(elements * esize);
    std::vector<double> data(elements);
    detail::ByteReader pr(payload);
    for (auto& v : data) {
      v = dtype == DType::F32 ? static_cast<double>(std::bit_cast<float>(pr.u32())) : std::bit_cast<double>(pr.u64());
      if (!std::isfinite(v)) throw CorruptionError(label + ": non-finite value");
    }
    if (out.count(name)) throw CorruptionError(label + ": duplicate name");
    out.emplace(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (r.remaining() != 0) throw CorruptionError("tensor file has " + std::to_string(r.remaining()) + " trailing bytes");
  return out;
}

inline void write_tensor_file(const std::filesystem::path& path, std::span<const TensorRecord> records) {
  const auto bytes = encode_tensors(records);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write to '" + path.string() + "' failed");
}

inline void write_tensor_file(const std::filesystem::path& path, const TensorMap& tensors,
                              DType dtype = DType::F64) {
  std::vector<TensorRecord> records;
  for (const auto& [name, t] : tensors) records.push_back({name, t, dtype});
  write_tensor_file(path, records);
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IngestionError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline TensorMap read_tensor_file(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return decode_tensors(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const CorruptionError& e) {
    throw CorruptionError(path.string() + ": " + e.what());
  }
}

}  // namespace vitmix
