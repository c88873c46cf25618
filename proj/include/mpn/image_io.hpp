#pragma once

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "mpn/error.hpp"

namespace mpn {

/// 8-bit single-channel image, row-major.
struct GrayImage {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> pixels;

  GrayImage() = default;
  GrayImage(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), pixels(h * w, fill) {}
  std::uint8_t& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
  bool operator==(const GrayImage&) const = default;
};

/// 8-bit interleaved RGB image, row-major.
struct RgbImage {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> pixels;  // h * w * 3

  RgbImage() = default;
  RgbImage(std::size_t h, std::size_t w) : height(h), width(w), pixels(h * w * 3, 0) {}
  bool operator==(const RgbImage&) const = default;
};

namespace detail {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

// Parses "P5/P6 <w> <h> <maxval>" with '#' comments; returns payload offset.
inline std::size_t parse_netpbm_header(const std::string& bytes, const char* magic, std::size_t& w,
                                       std::size_t& h, const std::string& path) {
  if (bytes.size() < 2 || bytes.compare(0, 2, magic) != 0)
    throw IoError(path + ": expected binary " + std::string(magic) + " image");
  std::size_t pos = 2;
  auto next_number = [&]() -> std::size_t {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    std::size_t v = 0;
    const std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos])))
      v = v * 10 + static_cast<std::size_t>(bytes[pos++] - '0');
    if (pos == start) throw IoError(path + ": malformed header");
    return v;
  };
  w = next_number();
  h = next_number();
  const std::size_t maxval = next_number();
  if (maxval != 255) throw IoError(path + ": only maxval 255 is supported");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw IoError(path + ": malformed header");
  return pos + 1;
}

}  // namespace detail

inline GrayImage read_pgm(const std::filesystem::path& path) {
  const std::string bytes = detail::read_file(path);
  GrayImage img;
  const std::size_t off = detail::parse_netpbm_header(bytes, "P5", img.width, img.height, path.string());
  if (bytes.size() - off != img.width * img.height) throw IoError(path.string() + ": truncated PGM payload");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(off), bytes.end());
  return img;
}

inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  std::string bytes = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  bytes.append(img.pixels.begin(), img.pixels.end());
  detail::write_file(path, bytes);
}

inline RgbImage read_ppm(const std::filesystem::path& path) {
  const std::string bytes = detail::read_file(path);
  RgbImage img;
  const std::size_t off = detail::parse_netpbm_header(bytes, "P6", img.width, img.height, path.string());
  if (bytes.size() - off != img.width * img.height * 3) throw IoError(path.string() + ": truncated PPM payload");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(off), bytes.end());
  return img;
}

inline void write_ppm(const std::filesystem::path& path, const RgbImage& img) {
  std::string bytes = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  bytes.append(img.pixels.begin(), img.pixels.end());
  detail::write_file(path, bytes);
}

}  // namespace mpn
