#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tsuda/raster.hpp"
#include "tsuda/rng.hpp"

namespace tsuda {

enum class IntensityOp { brightness_contrast, posterize, solarize, gamma, hist_equalize, clahe_approx };
enum class CorruptionOp { gaussian_noise, motion_blur, block_compress, pixel_dropout, fog, emboss };

inline constexpr std::array kIntensityOps = {IntensityOp::brightness_contrast, IntensityOp::posterize,
                                             IntensityOp::solarize,            IntensityOp::gamma,
                                             IntensityOp::hist_equalize,       IntensityOp::clahe_approx};
inline constexpr std::array kCorruptionOps = {CorruptionOp::gaussian_noise, CorruptionOp::motion_blur,
                                              CorruptionOp::block_compress, CorruptionOp::pixel_dropout,
                                              CorruptionOp::fog,            CorruptionOp::emboss};

inline constexpr std::string_view name(IntensityOp op) {
  switch (op) {
    case IntensityOp::brightness_contrast: return "brightness_contrast";
    case IntensityOp::posterize: return "posterize";
    case IntensityOp::solarize: return "solarize";
    case IntensityOp::gamma: return "gamma";
    case IntensityOp::hist_equalize: return "hist_equalize";
    case IntensityOp::clahe_approx: return "clahe_approx";
  }
  return "?";
}

inline constexpr std::string_view name(CorruptionOp op) {
  switch (op) {
    case CorruptionOp::gaussian_noise: return "gaussian_noise";
    case CorruptionOp::motion_blur: return "motion_blur";
    case CorruptionOp::block_compress: return "block_compress";
    case CorruptionOp::pixel_dropout: return "pixel_dropout";
    case CorruptionOp::fog: return "fog";
    case CorruptionOp::emboss: return "emboss";
  }
  return "?";
}

inline IntensityOp parse_intensity_op(std::string_view s) {
  for (auto op : kIntensityOps)
    if (name(op) == s) return op;
  throw std::invalid_argument("unknown intensity perturbation '" + std::string(s) + "'");
}

inline CorruptionOp parse_corruption_op(std::string_view s) {
  for (auto op : kCorruptionOps)
    if (name(op) == s) return op;
  throw std::invalid_argument("unknown corruption perturbation '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Pixel-intensity perturbations. Pure value maps; output clamped to [0, 1].

/// v' = contrast * (v - 0.5) + 0.5 + brightness
inline Raster brightness_contrast(Raster img, float brightness, float contrast) {
  for (auto& v : img.values) v = contrast * (v - 0.5f) + 0.5f + brightness;
  clamp01(img);
  return img;
}

/// Quantizes to `levels` evenly spaced values in [0, 1].
inline Raster posterize(Raster img, int levels) {
  if (levels < 2) throw std::invalid_argument("posterize: levels must be >= 2");
  const float l = static_cast<float>(levels);
  for (auto& v : img.values) {
    const float q = std::min(std::floor(std::clamp(v, 0.0f, 1.0f) * l), l - 1.0f);
    v = q / (l - 1.0f);
  }
  return img;
}

/// Inverts pixels strictly above `threshold`.
inline Raster solarize(Raster img, float threshold) {
  for (auto& v : img.values)
    if (v > threshold) v = 1.0f - v;
  clamp01(img);
  return img;
}

inline Raster gamma_shift(Raster img, float gamma) {
  for (auto& v : img.values) v = std::pow(std::clamp(v, 0.0f, 1.0f), gamma);
  return img;
}

namespace detail {

inline constexpr int kHistBins = 256;

inline int hist_bin(float v) { return std::clamp(static_cast<int>(v * (kHistBins - 1) + 0.5f), 0, kHistBins - 1); }

// Maps bins through the normalized CDF of `hist`. Returns identity for a
// single-valued histogram.
inline std::array<float, kHistBins> equalize_lut(const std::array<double, kHistBins>& hist) {
  std::array<float, kHistBins> lut{};
  double total = 0, first = -1;
  for (double h : hist) {
    if (first < 0 && h > 0) first = h;
    total += h;
  }
  double cdf = 0;
  for (int b = 0; b < kHistBins; ++b) {
    cdf += hist[static_cast<std::size_t>(b)];
    const double denom = total - first;
    lut[static_cast<std::size_t>(b)] =
        denom > 0 ? static_cast<float>(std::clamp((cdf - first) / denom, 0.0, 1.0))
                  : static_cast<float>(b) / static_cast<float>(kHistBins - 1);
  }
  return lut;
}

}  // namespace detail

/// Global histogram equalization over 256 bins.
inline Raster hist_equalize(Raster img) {
  std::array<double, detail::kHistBins> hist{};
  for (float v : img.values) hist[static_cast<std::size_t>(detail::hist_bin(v))] += 1;
  const auto lut = detail::equalize_lut(hist);
  for (auto& v : img.values) v = lut[static_cast<std::size_t>(detail::hist_bin(v))];
  return img;
}

/// Tile-wise clipped histogram equalization with bilinear blending between
/// tile mappings (a reduced CLAHE).
inline Raster clahe_approx(Raster img, std::size_t tiles = 4, double clip_factor = 2.0) {
  const std::size_t th = std::max<std::size_t>(1, img.height / tiles);
  const std::size_t tw = std::max<std::size_t>(1, img.width / tiles);
  const std::size_t ny = (img.height + th - 1) / th, nx = (img.width + tw - 1) / tw;
  std::vector<std::array<float, detail::kHistBins>> luts(ny * nx);
  for (std::size_t ty = 0; ty < ny; ++ty) {
    for (std::size_t tx = 0; tx < nx; ++tx) {
      std::array<double, detail::kHistBins> hist{};
      double count = 0;
      for (std::size_t y = ty * th; y < std::min(img.height, (ty + 1) * th); ++y)
        for (std::size_t x = tx * tw; x < std::min(img.width, (tx + 1) * tw); ++x) {
          hist[static_cast<std::size_t>(detail::hist_bin(img.at(y, x)))] += 1;
          count += 1;
        }
      const double limit = clip_factor * count / detail::kHistBins;
      double excess = 0;
      for (auto& h : hist)
        if (h > limit) {
          excess += h - limit;
          h = limit;
        }
      for (auto& h : hist) h += excess / detail::kHistBins;
      // CDF over all bins so a flat tile keeps its level instead of collapsing.
      std::array<float, detail::kHistBins> lut{};
      double cdf = 0;
      for (int b = 0; b < detail::kHistBins; ++b) {
        cdf += hist[static_cast<std::size_t>(b)];
        lut[static_cast<std::size_t>(b)] = static_cast<float>(std::clamp(cdf / count, 0.0, 1.0));
      }
      luts[ty * nx + tx] = lut;
    }
  }
  Raster out = img;
  for (std::size_t y = 0; y < img.height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) / static_cast<double>(th) - 0.5, 0.0,
                                 static_cast<double>(ny - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(ny - 1, y0 + 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < img.width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) / static_cast<double>(tw) - 0.5, 0.0,
                                   static_cast<double>(nx - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(nx - 1, x0 + 1);
      const double wx = fx - static_cast<double>(x0);
      const auto b = static_cast<std::size_t>(detail::hist_bin(img.at(y, x)));
      const double v = (1 - wy) * ((1 - wx) * luts[y0 * nx + x0][b] + wx * luts[y0 * nx + x1][b]) +
                       wy * ((1 - wx) * luts[y1 * nx + x0][b] + wx * luts[y1 * nx + x1][b]);
      out.at(y, x) = static_cast<float>(v);
    }
  }
  clamp01(out);
  return out;
}

// ---------------------------------------------------------------------------
// Pixel-corruption perturbations.

inline Raster gaussian_noise(Raster img, float sigma, Rng& rng) {
  for (auto& v : img.values) v += static_cast<float>(rng.normal(0.0, sigma));
  clamp01(img);
  return img;
}

/// Box blur along a line of `length` pixels at `angle_deg` (0, 45, 90, 135).
inline Raster motion_blur(const Raster& img, int length, int angle_deg) {
  if (length < 1 || length % 2 == 0) throw std::invalid_argument("motion_blur: length must be odd and positive");
  int dx = 0, dy = 0;
  switch (angle_deg) {
    case 0: dx = 1; break;
    case 45: dx = 1; dy = -1; break;
    case 90: dy = 1; break;
    case 135: dx = 1; dy = 1; break;
    default: throw std::invalid_argument("motion_blur: angle must be one of 0, 45, 90, 135");
  }
  Raster out(img.height, img.width);
  const int half = length / 2;
  const auto h = static_cast<int>(img.height), w = static_cast<int>(img.width);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float acc = 0;
      for (int t = -half; t <= half; ++t) {
        const int sy = std::clamp(y + t * dy, 0, h - 1), sx = std::clamp(x + t * dx, 0, w - 1);
        acc += img.at(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
      }
      out.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = acc / static_cast<float>(length);
    }
  return out;
}

/// Blocky compression artefact: each `block`x`block` tile is quantized to
/// `levels` values spanning the tile's own range.
inline Raster block_compress(Raster img, std::size_t block = 8, int levels = 16) {
  for (std::size_t by = 0; by < img.height; by += block)
    for (std::size_t bx = 0; bx < img.width; bx += block) {
      const std::size_t y1 = std::min(img.height, by + block), x1 = std::min(img.width, bx + block);
      float lo = 1e30f, hi = -1e30f;
      for (std::size_t y = by; y < y1; ++y)
        for (std::size_t x = bx; x < x1; ++x) {
          lo = std::min(lo, img.at(y, x));
          hi = std::max(hi, img.at(y, x));
        }
      const float range = hi - lo;
      if (range <= 0) continue;
      const float step = range / static_cast<float>(levels - 1);
      for (std::size_t y = by; y < y1; ++y)
        for (std::size_t x = bx; x < x1; ++x) img.at(y, x) = lo + std::round((img.at(y, x) - lo) / step) * step;
    }
  clamp01(img);
  return img;
}

inline Raster pixel_dropout(Raster img, double rate, Rng& rng) {
  for (auto& v : img.values)
    if (rng.bernoulli(rate)) v = 0.0f;
  return img;
}

namespace detail {

// Smooth random field in [0, 1]: bilinear interpolation of a coarse grid.
inline Raster smooth_field(std::size_t h, std::size_t w, std::size_t cells, Rng& rng) {
  std::vector<float> grid((cells + 1) * (cells + 1));
  for (auto& g : grid) g = static_cast<float>(rng.uniform());
  Raster out(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    const double fy = static_cast<double>(y) / static_cast<double>(std::max<std::size_t>(1, h - 1)) * cells;
    const auto gy = std::min<std::size_t>(static_cast<std::size_t>(fy), cells - 1);
    const double ty = fy - static_cast<double>(gy);
    for (std::size_t x = 0; x < w; ++x) {
      const double fx = static_cast<double>(x) / static_cast<double>(std::max<std::size_t>(1, w - 1)) * cells;
      const auto gx = std::min<std::size_t>(static_cast<std::size_t>(fx), cells - 1);
      const double tx = fx - static_cast<double>(gx);
      const double v = (1 - ty) * ((1 - tx) * grid[gy * (cells + 1) + gx] + tx * grid[gy * (cells + 1) + gx + 1]) +
                       ty * ((1 - tx) * grid[(gy + 1) * (cells + 1) + gx] + tx * grid[(gy + 1) * (cells + 1) + gx + 1]);
      out.at(y, x) = static_cast<float>(v);
    }
  }
  return out;
}

}  // namespace detail

/// Adds amplitude * smooth field.
inline Raster fog(Raster img, float amplitude, Rng& rng) {
  const Raster field = detail::smooth_field(img.height, img.width, 4, rng);
  for (std::size_t i = 0; i < img.size(); ++i) img.values[i] += amplitude * field.values[i];
  clamp01(img);
  return img;
}

/// Blends the image with its emboss response (re-centred at 0.5).
inline Raster emboss(const Raster& img, float strength) {
  static constexpr float k[3][3] = {{-1, -1, 0}, {-1, 0, 1}, {0, 1, 1}};
  Raster out(img.height, img.width);
  const auto h = static_cast<int>(img.height), w = static_cast<int>(img.width);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float e = 0;
      for (int i = -1; i <= 1; ++i)
        for (int j = -1; j <= 1; ++j)
          e += k[i + 1][j + 1] * img.at(static_cast<std::size_t>(std::clamp(y + i, 0, h - 1)),
                                        static_cast<std::size_t>(std::clamp(x + j, 0, w - 1)));
      const auto idx = static_cast<std::size_t>(y) * img.width + static_cast<std::size_t>(x);
      out.values[idx] = (1.0f - strength) * img.values[idx] + strength * std::clamp(0.5f + e, 0.0f, 1.0f);
    }
  clamp01(out);
  return out;
}

// ---------------------------------------------------------------------------
// Randomized application with the configured parameter ranges.

inline Raster apply_intensity(IntensityOp op, const Raster& img, Rng& rng) {
  switch (op) {
    case IntensityOp::brightness_contrast: {
      const auto b = static_cast<float>(rng.uniform(-0.2, 0.2));
      const auto c = static_cast<float>(std::exp(rng.uniform(std::log(0.8), std::log(1.25))));
      return brightness_contrast(img, b, c);
    }
    case IntensityOp::posterize: return posterize(img, rng.between(4, 16));
    case IntensityOp::solarize: return solarize(img, static_cast<float>(rng.uniform(0.75, 1.0)));
    case IntensityOp::gamma: return gamma_shift(img, static_cast<float>(rng.uniform(0.7, 1.5)));
    case IntensityOp::hist_equalize: return hist_equalize(img);
    case IntensityOp::clahe_approx: return clahe_approx(img, 4, 2.0);
  }
  return img;
}

inline Raster apply_corruption(CorruptionOp op, const Raster& img, Rng& rng) {
  switch (op) {
    case CorruptionOp::gaussian_noise: return gaussian_noise(img, static_cast<float>(rng.uniform(0.01, 0.08)), rng);
    case CorruptionOp::motion_blur: {
      const int length = 3 + 2 * rng.between(0, 2);
      const int angle = 45 * rng.between(0, 3);
      return motion_blur(img, length, angle);
    }
    case CorruptionOp::block_compress: return block_compress(img, 8, 16);
    case CorruptionOp::pixel_dropout: return pixel_dropout(img, rng.uniform(0.01, 0.05), rng);
    case CorruptionOp::fog: return fog(img, static_cast<float>(rng.uniform(0.1, 0.3)), rng);
    case CorruptionOp::emboss: return emboss(img, static_cast<float>(rng.uniform(0.2, 0.5)));
  }
  return img;
}

/// Families for the unlabeled-image perturbation.
struct PerturbSpec {
  std::vector<IntensityOp> intensity_family{kIntensityOps.begin(), kIntensityOps.end()};
  std::vector<CorruptionOp> corruption_family{kCorruptionOps.begin(), kCorruptionOps.end()};
  std::uint64_t rng_seed = 0;
};

/// One intensity perturbation followed by one corruption, each drawn
/// uniformly from its family. Never moves pixels.
inline Raster perturb_unlabeled(const Raster& image, const PerturbSpec& spec) {
  if (spec.intensity_family.empty() || spec.corruption_family.empty())
    throw std::invalid_argument("perturb_unlabeled: perturbation families must be non-empty");
  Rng rng(spec.rng_seed);
  const auto iop = spec.intensity_family[rng.below(spec.intensity_family.size())];
  const auto cop = spec.corruption_family[rng.below(spec.corruption_family.size())];
  Raster out = apply_intensity(iop, image, rng);
  out = apply_corruption(cop, out, rng);
  clamp01(out);
  return out;
}

// ---------------------------------------------------------------------------
// Geometry (used only for labeled augmentation).

template <typename T>
Grid<T> hflip(const Grid<T>& g) {
  Grid<T> out(g.height, g.width);
  for (std::size_t y = 0; y < g.height; ++y)
    for (std::size_t x = 0; x < g.width; ++x) out.at(y, x) = g.at(y, g.width - 1 - x);
  return out;
}

template <typename T>
Grid<T> vflip(const Grid<T>& g) {
  Grid<T> out(g.height, g.width);
  for (std::size_t y = 0; y < g.height; ++y)
    for (std::size_t x = 0; x < g.width; ++x) out.at(y, x) = g.at(g.height - 1 - y, x);
  return out;
}

/// Quarter turn counter-clockwise.
template <typename T>
Grid<T> rot90(const Grid<T>& g) {
  Grid<T> out(g.width, g.height);
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x) out.at(y, x) = g.at(x, g.width - 1 - y);
  return out;
}

struct AugmentSpec {
  bool hflip = true;
  bool vflip = true;
  bool rot90 = true;
  std::vector<IntensityOp> intensity_family{kIntensityOps.begin(), kIntensityOps.end()};
  std::uint64_t rng_seed = 0;
};

/// Random flips / quarter turns applied identically to image and mask, then
/// one intensity perturbation on the image only.
inline std::pair<Raster, BinaryMask> augment_labeled(const Raster& image, const BinaryMask& mask,
                                                     const AugmentSpec& spec) {
  if (!image.same_dims(mask)) throw std::invalid_argument("augment_labeled: image and mask dimensions differ");
  Rng rng(spec.rng_seed);
  Raster img = image;
  BinaryMask m = mask;
  if (spec.hflip && rng.bernoulli(0.5)) {
    img = hflip(img);
    m = hflip(m);
  }
  if (spec.vflip && rng.bernoulli(0.5)) {
    img = vflip(img);
    m = vflip(m);
  }
  if (spec.rot90) {
    const auto turns = rng.below(4);
    for (std::uint64_t i = 0; i < turns; ++i) {
      img = rot90(img);
      m = rot90(m);
    }
  }
  if (!spec.intensity_family.empty()) {
    const auto op = spec.intensity_family[rng.below(spec.intensity_family.size())];
    img = apply_intensity(op, img, rng);
  }
  return {std::move(img), std::move(m)};
}

// ---------------------------------------------------------------------------

struct CircleParams {
  double cy = 0, cx = 0, radius = 0;
};

/// Draws the endoscope field of view: centre jittered by up to 5% of the
/// width, radius uniform in [0.45, 0.55] * min(H, W).
inline CircleParams draw_circle(std::size_t h, std::size_t w, Rng& rng) {
  CircleParams c;
  const double jitter = 0.05 * static_cast<double>(w);
  c.cy = (static_cast<double>(h) - 1) / 2 + rng.uniform(-jitter, jitter);
  c.cx = (static_cast<double>(w) - 1) / 2 + rng.uniform(-jitter, jitter);
  c.radius = rng.uniform(0.45, 0.55) * static_cast<double>(std::min(h, w));
  return c;
}

inline void apply_circle(Raster& image, BinaryMask& mask, const CircleParams& c) {
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x) {
      const double dy = static_cast<double>(y) - c.cy, dx = static_cast<double>(x) - c.cx;
      if (dy * dy + dx * dx > c.radius * c.radius) {
        image.at(y, x) = 0.0f;
        mask.at(y, x) = 0;
      }
    }
}

/// Blacks out everything outside a randomly placed circular field of view.
inline std::pair<Raster, BinaryMask> apply_circular_mask(Raster image, BinaryMask mask, Rng& rng) {
  if (!image.same_dims(mask)) throw std::invalid_argument("apply_circular_mask: image and mask dimensions differ");
  apply_circle(image, mask, draw_circle(image.height, image.width, rng));
  return {std::move(image), std::move(mask)};
}

}  // namespace tsuda
