#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tsuda {

/// Row-major single-channel 2-D grid.
template <typename T>
struct Grid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<T> values;

  Grid() = default;
  Grid(std::size_t h, std::size_t w, T fill = T{}) : height(h), width(w), values(h * w, fill) {}

  T& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
  const T& at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
  std::size_t size() const { return values.size(); }
  bool same_dims(const auto& other) const { return height == other.height && width == other.width; }

  bool operator==(const Grid&) const = default;
};

/// Grayscale image, intensities nominally in [0, 1].
using Raster = Grid<float>;

/// Binary segmentation mask, 1 = instrument, 0 = background.
using BinaryMask = Grid<std::uint8_t>;

inline void clamp01(Raster& image) {
  for (auto& v : image.values) v = std::clamp(v, 0.0f, 1.0f);
}

inline std::size_t foreground_count(const BinaryMask& mask) {
  return static_cast<std::size_t>(std::count_if(mask.values.begin(), mask.values.end(), [](auto v) { return v != 0; }));
}

inline bool is_empty(const BinaryMask& mask) { return foreground_count(mask) == 0; }

namespace detail {

struct PgmImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> bytes;
};

inline void write_pgm(const std::filesystem::path& path, std::size_t w, std::size_t h,
                      const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out << "P5\n" << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

// Reads the next header token, skipping whitespace and '#' comments.
inline std::string pgm_token(std::istream& in, const std::string& path) {
  std::string tok;
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = in.get();
  }
  while (c != EOF && !std::isspace(c)) {
    tok.push_back(static_cast<char>(c));
    c = in.get();
  }
  if (tok.empty()) throw std::runtime_error("malformed PGM header in '" + path + "': unexpected end of file");
  return tok;
}

inline std::size_t pgm_number(std::istream& in, const std::string& path, const char* field) {
  const std::string tok = pgm_token(in, path);
  if (!std::all_of(tok.begin(), tok.end(), [](char ch) { return ch >= '0' && ch <= '9'; }) || tok.size() > 9)
    throw std::runtime_error("malformed PGM header in '" + path + "': bad " + field + " '" + tok + "'");
  return std::stoul(tok);
}

inline PgmImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  const std::string p = path.string();
  if (pgm_token(in, p) != "P5") throw std::runtime_error("malformed PGM header in '" + p + "': magic is not P5");
  PgmImage img;
  img.width = pgm_number(in, p, "width");
  img.height = pgm_number(in, p, "height");
  const std::size_t maxval = pgm_number(in, p, "maxval");
  if (img.width == 0 || img.height == 0) throw std::runtime_error("malformed PGM header in '" + p + "': zero size");
  if (maxval != 255) throw std::runtime_error("unsupported PGM maxval " + std::to_string(maxval) + " in '" + p + "'");
  img.bytes.resize(img.width * img.height);
  in.read(reinterpret_cast<char*>(img.bytes.data()), static_cast<std::streamsize>(img.bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != img.bytes.size())
    throw std::runtime_error("truncated PGM payload in '" + p + "': expected " + std::to_string(img.bytes.size()) +
                             " bytes, got " + std::to_string(in.gcount()));
  return img;
}

}  // namespace detail

/// Binary PGM (P5, maxval 255); values quantized by round(v * 255).
inline void write_raster(const std::filesystem::path& path, const Raster& image) {
  std::vector<std::uint8_t> bytes(image.size());
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = static_cast<std::uint8_t>(std::lround(std::clamp(image.values[i], 0.0f, 1.0f) * 255.0f));
  detail::write_pgm(path, image.width, image.height, bytes);
}

inline Raster read_raster(const std::filesystem::path& path) {
  auto pgm = detail::read_pgm(path);
  Raster r(pgm.height, pgm.width);
  for (std::size_t i = 0; i < r.size(); ++i) r.values[i] = static_cast<float>(pgm.bytes[i]) / 255.0f;
  return r;
}

/// Masks are stored as PGM with values {0, 255}.
inline void write_mask(const std::filesystem::path& path, const BinaryMask& mask) {
  std::vector<std::uint8_t> bytes(mask.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = mask.values[i] ? 255 : 0;
  detail::write_pgm(path, mask.width, mask.height, bytes);
}

inline BinaryMask read_mask(const std::filesystem::path& path) {
  auto pgm = detail::read_pgm(path);
  BinaryMask m(pgm.height, pgm.width);
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (pgm.bytes[i] != 0 && pgm.bytes[i] != 255)
      throw std::runtime_error("mask '" + path.string() + "' contains non-binary value " +
                               std::to_string(pgm.bytes[i]));
    m.values[i] = pgm.bytes[i] ? 1 : 0;
  }
  return m;
}

}  // namespace tsuda
