#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>
#include <vector>

#include "mpn/error.hpp"
#include "mpn/tensor.hpp"

namespace mpn {

// MPNT layout: "MPNT", u32 version, u32 rank, u64 extents[rank], then
// f64 values in row-major order. All integers and floats little-endian.
inline constexpr std::array<char, 4> kTensorMagic{'M', 'P', 'N', 'T'};
inline constexpr std::uint32_t kTensorVersion = 1;

namespace detail {

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.append(bytes.data(), bytes.size());
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos, const std::string& what) {
  if (pos + sizeof(T) > in.size()) throw IoError(what + ": truncated tensor file");
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), in.data() + pos, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  pos += sizeof(T);
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

}  // namespace detail

inline std::string encode_tensor(const Tensor& t) {
  std::string out(kTensorMagic.begin(), kTensorMagic.end());
  detail::put_le<std::uint32_t>(out, kTensorVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) detail::put_le<std::uint64_t>(out, d);
  for (double v : t.data()) detail::put_le<double>(out, v);
  return out;
}

inline Tensor decode_tensor(const std::string& bytes, const std::string& what = "tensor") {
  if (bytes.size() < 12 || !std::equal(kTensorMagic.begin(), kTensorMagic.end(), bytes.begin()))
    throw IoError(what + ": missing MPNT magic");
  std::size_t pos = 4;
  const auto version = detail::get_le<std::uint32_t>(bytes, pos, what);
  if (version != kTensorVersion) throw IoError(what + ": unsupported MPNT version " + std::to_string(version));
  const auto rank = detail::get_le<std::uint32_t>(bytes, pos, what);
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<std::size_t>(detail::get_le<std::uint64_t>(bytes, pos, what));
  const std::size_t n = shape_numel(shape);
  if (bytes.size() - pos != n * sizeof(double))
    throw IoError(what + ": payload size does not match shape " + shape_str(shape));
  std::vector<double> data(n);
  for (auto& v : data) v = detail::get_le<double>(bytes, pos, what);
  return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const Tensor& t, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  const std::string bytes = encode_tensor(t);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_tensor(bytes, path.string());
}

}  // namespace mpn
