#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsuda/perturb.hpp"
#include "tsuda/raster.hpp"
#include "tsuda/rng.hpp"

namespace tsuda {

enum class Domain { sim, real };

inline std::string_view name(Domain d) { return d == Domain::sim ? "sim" : "real"; }

inline Domain parse_domain(std::string_view s) {
  if (s == "sim") return Domain::sim;
  if (s == "real") return Domain::real;
  throw std::invalid_argument("unknown domain '" + std::string(s) + "'");
}

/// Generator knobs for one domain of the benchmark.
struct DomainParams {
  std::size_t height = 64;
  std::size_t width = 64;
  double empty_rate = 0.0;
  double two_instrument_rate = 0.5;
  double counterexample_rate = 0.0;
  // Instrument grey level range.
  double tool_lo = 0.75;
  double tool_hi = 0.9;
  // Background: mean grey level range and texture amplitude.
  double background_lo = 0.25;
  double background_hi = 0.5;
  double texture = 0.0;
  bool specular = false;
  bool vignette = false;
  bool blur = false;
  double noise = 0.0;

  static DomainParams sim() {
    DomainParams p;
    p.noise = 0.03;
    return p;
  }

  static DomainParams real() {
    DomainParams p;
    p.empty_rate = 0.2;
    p.counterexample_rate = 0.15;
    p.tool_lo = 0.6;
    p.tool_hi = 0.8;
    p.background_lo = 0.3;
    p.background_hi = 0.45;
    p.texture = 0.12;
    p.specular = true;
    p.vignette = true;
    p.blur = true;
    p.noise = 0.12;
    return p;
  }

  void validate() const {
    auto rate = [](double r, const char* what) {
      if (!(r >= 0.0 && r <= 1.0)) throw std::invalid_argument(std::string("DomainParams: ") + what + " must lie in [0, 1]");
    };
    rate(empty_rate, "empty_rate");
    rate(two_instrument_rate, "two_instrument_rate");
    rate(counterexample_rate, "counterexample_rate");
    if (height < 8 || width < 8) throw std::invalid_argument("DomainParams: image must be at least 8x8");
  }
};

struct SampleMeta {
  std::string id;
  Domain domain = Domain::sim;
  std::string split = "train";
  int instrument_count = 0;
  bool has_counterexample = false;
};

struct Sample {
  Raster image;
  std::optional<BinaryMask> mask;
  SampleMeta meta;
};

namespace detail {

inline float smoothstep(float e0, float e1, float x) {
  const float t = std::clamp((x - e0) / (e1 - e0), 0.0f, 1.0f);
  return t * t * (3 - 2 * t);
}

// Sum of value-noise octaves, normalized to roughly [0, 1].
inline Raster value_noise(std::size_t h, std::size_t w, std::size_t base_cells, int octaves, Rng& rng) {
  Raster out(h, w);
  float amp = 1.0f, total = 0.0f;
  std::size_t cells = base_cells;
  for (int o = 0; o < octaves; ++o) {
    const Raster layer = smooth_field(h, w, cells, rng);
    for (std::size_t i = 0; i < out.size(); ++i) out.values[i] += amp * layer.values[i];
    total += amp;
    amp *= 0.5f;
    cells *= 2;
  }
  for (auto& v : out.values) v /= total;
  return out;
}

struct Capsule {
  double y0, x0, y1, x1;  // shaft from entry point (0) to tip (1)
  double radius;
  double tip_radius;
  double tip_fraction;
};

// Distance-based coverage test for a shaft with a flared tip section.
inline bool capsule_covers(const Capsule& c, double y, double x, double* along = nullptr) {
  const double dy = c.y1 - c.y0, dx = c.x1 - c.x0;
  const double len2 = dy * dy + dx * dx;
  double t = len2 > 0 ? ((y - c.y0) * dy + (x - c.x0) * dx) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double py = c.y0 + t * dy, px = c.x0 + t * dx;
  const double d2 = (y - py) * (y - py) + (x - px) * (x - px);
  const double r = t >= 1.0 - c.tip_fraction ? c.tip_radius : c.radius;
  if (along) *along = t;
  return d2 <= r * r;
}

inline Capsule draw_capsule(std::size_t h, std::size_t w, Rng& rng) {
  const double W = static_cast<double>(w), H = static_cast<double>(h);
  const double cy = (H - 1) / 2, cx = (W - 1) / 2;
  const double entry_angle = rng.uniform(0.0, 6.283185307179586);
  const double entry_r = rng.uniform(0.42, 0.5) * std::min(H, W);
  Capsule c{};
  c.y0 = cy + entry_r * std::sin(entry_angle);
  c.x0 = cx + entry_r * std::cos(entry_angle);
  // Points inward, with up to +-35 degrees of deviation from the centre line.
  const double dir = entry_angle + 3.141592653589793 + rng.uniform(-0.61, 0.61);
  const double length = rng.uniform(0.4, 0.8) * W;
  c.y1 = c.y0 + length * std::sin(dir);
  c.x1 = c.x0 + length * std::cos(dir);
  c.radius = rng.uniform(0.04, 0.10) * W / 2;
  c.tip_radius = c.radius * rng.uniform(1.4, 1.8);
  c.tip_fraction = rng.uniform(0.1, 0.2);
  return c;
}

inline BinaryMask rasterize(const Capsule& c, std::size_t h, std::size_t w) {
  BinaryMask m(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (capsule_covers(c, static_cast<double>(y), static_cast<double>(x))) m.at(y, x) = 1;
  return m;
}

// True if any foreground of `a` is within one pixel (8-neighbourhood) of `b`.
inline bool touches(const BinaryMask& a, const BinaryMask& b) {
  for (std::size_t y = 0; y < a.height; ++y)
    for (std::size_t x = 0; x < a.width; ++x) {
      if (!a.at(y, x)) continue;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
          if (yy < 0 || xx < 0 || yy >= static_cast<long>(b.height) || xx >= static_cast<long>(b.width)) continue;
          if (b.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx))) return true;
        }
    }
  return false;
}

inline std::size_t visible_count(const BinaryMask& m, const CircleParams& circle) {
  std::size_t n = 0;
  for (std::size_t y = 0; y < m.height; ++y)
    for (std::size_t x = 0; x < m.width; ++x) {
      const double dy = static_cast<double>(y) - circle.cy, dx = static_cast<double>(x) - circle.cx;
      if (m.at(y, x) && dy * dy + dx * dx <= circle.radius * circle.radius) ++n;
    }
  return n;
}

// Places `count` mutually disjoint capsules, each keeping at least
// `min_visible` pixels inside the field of view. Re-draws until satisfied.
inline std::vector<Capsule> place_instruments(int count, std::size_t h, std::size_t w, const CircleParams& circle,
                                              Rng& rng, std::vector<BinaryMask>& masks) {
  const std::size_t min_visible = std::max<std::size_t>(12, h * w / 200);
  std::vector<Capsule> tools;
  masks.clear();
  for (int attempt = 0; attempt < 1000 && static_cast<int>(tools.size()) < count; ++attempt) {
    Capsule c = draw_capsule(h, w, rng);
    BinaryMask m = rasterize(c, h, w);
    if (visible_count(m, circle) < min_visible) continue;
    bool clash = false;
    for (const auto& other : masks) clash = clash || touches(m, other);
    if (clash) continue;
    tools.push_back(c);
    masks.push_back(std::move(m));
  }
  if (static_cast<int>(tools.size()) != count) throw std::runtime_error("could not place instruments");
  return tools;
}

inline void fill_ellipse(Raster& img, BinaryMask* mask, double cy, double cx, double ry, double rx, double angle,
                         float value, float blend) {
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
      const double u = (dx * ca + dy * sa) / rx, v = (-dx * sa + dy * ca) / ry;
      const double r2 = u * u + v * v;
      if (r2 > 1.0) continue;
      const float soft = blend * (1.0f - static_cast<float>(r2) * 0.3f);
      img.at(y, x) = (1.0f - soft) * img.at(y, x) + soft * value;
      if (mask) mask->at(y, x) = 0;
    }
}

inline Raster box_blur3(const Raster& img) {
  Raster out(img.height, img.width);
  const auto h = static_cast<int>(img.height), w = static_cast<int>(img.width);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float acc = 0;
      for (int i = -1; i <= 1; ++i)
        for (int j = -1; j <= 1; ++j)
          acc += img.at(static_cast<std::size_t>(std::clamp(y + i, 0, h - 1)),
                        static_cast<std::size_t>(std::clamp(x + j, 0, w - 1)));
      out.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = acc / 9.0f;
    }
  return out;
}

enum Stream : std::uint64_t { kLayout = 1, kBackground, kTools, kArtifacts, kCircle, kNoise, kCounter };

}  // namespace detail

/// Renders one sample. The circular field of view is applied to both
/// domains; simulated frames are always non-empty.
inline Sample generate_sample(Domain domain, std::uint64_t seed, const DomainParams& p) {
  p.validate();
  const std::size_t h = p.height, w = p.width;
  Rng layout(derive_seed(seed, detail::kLayout));
  Rng bg_rng(derive_seed(seed, detail::kBackground));
  Rng tool_rng(derive_seed(seed, detail::kTools));
  Rng art_rng(derive_seed(seed, detail::kArtifacts));
  Rng circle_rng(derive_seed(seed, detail::kCircle));
  Rng noise_rng(derive_seed(seed, detail::kNoise));
  Rng counter_rng(derive_seed(seed, detail::kCounter));

  // Layout draws come first and in fixed order so changing one rate does
  // not reshuffle the rest of the frame.
  const bool empty = domain == Domain::real && layout.uniform() < p.empty_rate;
  const int tools_wanted = layout.uniform() < p.two_instrument_rate ? 2 : 1;
  const bool counter = layout.uniform() < p.counterexample_rate;
  const CircleParams circle = draw_circle(h, w, circle_rng);

  Raster img(h, w);
  const float bg_mean = static_cast<float>(bg_rng.uniform(p.background_lo, p.background_hi));
  if (domain == Domain::sim) {
    const float tone_a = bg_mean - 0.06f, tone_b = bg_mean + 0.06f;
    const Raster field = detail::smooth_field(h, w, 3, bg_rng);
    for (std::size_t i = 0; i < img.size(); ++i) {
      const float t = detail::smoothstep(0.45f, 0.55f, field.values[i]);
      img.values[i] = (1 - t) * tone_a + t * tone_b;
    }
  } else {
    const Raster tex = detail::value_noise(h, w, 4, 4, bg_rng);
    for (std::size_t i = 0; i < img.size(); ++i)
      img.values[i] = bg_mean + static_cast<float>(p.texture) * (2.0f * tex.values[i] - 1.0f);
  }

  BinaryMask mask(h, w);
  int rendered = 0;
  if (!empty) {
    std::vector<BinaryMask> tool_masks;
    const auto tools = detail::place_instruments(tools_wanted, h, w, circle, tool_rng, tool_masks);
    for (const auto& c : tools) {
      const float base = static_cast<float>(tool_rng.uniform(p.tool_lo, p.tool_hi));
      // Real tools get a shading ramp along the shaft and a faint texture.
      const float ramp = domain == Domain::real ? static_cast<float>(tool_rng.uniform(-0.12, 0.12)) : 0.0f;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          double along = 0;
          if (!detail::capsule_covers(c, static_cast<double>(y), static_cast<double>(x), &along)) continue;
          float v = base + ramp * static_cast<float>(along - 0.5);
          if (domain == Domain::real) v += static_cast<float>(tool_rng.normal(0.0, 0.03));
          img.at(y, x) = v;
          mask.at(y, x) = 1;
        }
    }
    rendered = static_cast<int>(tools.size());
  }

  if (counter) {
    const double cy = counter_rng.uniform(0.25, 0.75) * static_cast<double>(h);
    const double cx = counter_rng.uniform(0.25, 0.75) * static_cast<double>(w);
    const double ry = counter_rng.uniform(0.08, 0.14) * static_cast<double>(h);
    const double rx = counter_rng.uniform(0.05, 0.10) * static_cast<double>(w);
    const double angle = counter_rng.uniform(0.0, 3.141592653589793);
    const auto value = static_cast<float>(counter_rng.uniform(0.75, 0.9));
    detail::fill_ellipse(img, &mask, cy, cx, ry, rx, angle, value, 1.0f);
  }

  if (p.specular) {
    const int spots = art_rng.between(2, 5);
    for (int s = 0; s < spots; ++s) {
      const double cy = art_rng.uniform(0.15, 0.85) * static_cast<double>(h);
      const double cx = art_rng.uniform(0.15, 0.85) * static_cast<double>(w);
      const double ry = art_rng.uniform(0.8, 2.5), rx = art_rng.uniform(0.8, 2.5);
      detail::fill_ellipse(img, nullptr, cy, cx, ry, rx, 0.0, static_cast<float>(art_rng.uniform(0.92, 1.0)), 0.9f);
    }
  }
  if (p.vignette) {
    const double cy = (static_cast<double>(h) - 1) / 2, cx = (static_cast<double>(w) - 1) / 2;
    const double rmax2 = cy * cy + cx * cx;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double d2 = (static_cast<double>(y) - cy) * (static_cast<double>(y) - cy) +
                          (static_cast<double>(x) - cx) * (static_cast<double>(x) - cx);
        img.at(y, x) *= static_cast<float>(1.0 - 0.4 * d2 / rmax2);
      }
  }
  if (p.blur) img = detail::box_blur3(img);
  if (p.noise > 0)
    for (auto& v : img.values) v += static_cast<float>(noise_rng.normal(0.0, p.noise));
  clamp01(img);
  apply_circle(img, mask, circle);

  Sample s;
  s.image = std::move(img);
  s.mask = std::move(mask);
  s.meta.domain = domain;
  s.meta.instrument_count = rendered;
  s.meta.has_counterexample = counter;
  return s;
}

inline Sample gen_sim_sample(std::uint64_t seed, const DomainParams& params) {
  return generate_sample(Domain::sim, seed, params);
}

/// Real-domain sample; the mask is kept only when `keep_mask` (evaluation
/// and validation splits).
inline Sample gen_real_sample(std::uint64_t seed, const DomainParams& params, bool keep_mask = true) {
  Sample s = generate_sample(Domain::real, seed, params);
  if (!keep_mask) s.mask.reset();
  return s;
}

inline std::string sample_id(std::size_t index) {
  std::ostringstream os;
  os << std::setw(5) << std::setfill('0') << index;
  return os.str();
}

/// In-memory dataset with audited mask access.
class Dataset {
 public:
  Dataset() = default;
  Dataset(std::string name, std::vector<Sample> samples) : name_(std::move(name)), samples_(std::move(samples)) {}

  const std::string& name() const { return name_; }
  std::size_t size() const { return samples_.size(); }
  bool empty() const { return samples_.empty(); }

  const Raster& image(std::size_t i) const { return samples_.at(i).image; }
  const SampleMeta& meta(std::size_t i) const { return samples_.at(i).meta; }
  bool has_mask(std::size_t i) const { return samples_.at(i).mask.has_value(); }

  /// Every call is counted; see mask_reads().
  const BinaryMask& mask(std::size_t i) const {
    const auto& s = samples_.at(i);
    if (!s.mask) throw std::runtime_error("dataset '" + name_ + "': sample " + s.meta.id + " has no mask");
    ++mask_reads_;
    return *s.mask;
  }

  std::size_t mask_reads() const { return mask_reads_; }
  bool any_mask() const {
    return std::any_of(samples_.begin(), samples_.end(), [](const Sample& s) { return s.mask.has_value(); });
  }
  bool all_masks() const {
    return std::all_of(samples_.begin(), samples_.end(), [](const Sample& s) { return s.mask.has_value(); });
  }

  const Sample& sample(std::size_t i) const { return samples_.at(i); }

 private:
  std::string name_;
  std::vector<Sample> samples_;
  mutable std::size_t mask_reads_ = 0;
};

inline constexpr const char* kManifestHeader = "id,domain,split,instrument_count,has_counterexample";

/// A real-domain training split must never carry labels.
inline bool split_is_unlabeled(Domain domain, const std::string& split) {
  return domain == Domain::real && split == "train";
}

/// Builds `n` samples in memory. Per-sample seeds are derived from (seed, id).
inline Dataset make_dataset(const std::string& name, std::size_t n, Domain domain, const std::string& split,
                            std::uint64_t seed, const DomainParams& params) {
  if (n < 1) throw std::invalid_argument("make_dataset: n must be >= 1");
  std::vector<Sample> samples;
  samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Sample s = generate_sample(domain, derive_seed(seed, i), params);
    if (split_is_unlabeled(domain, split)) s.mask.reset();
    s.meta.id = sample_id(i);
    s.meta.split = split;
    samples.push_back(std::move(s));
  }
  return Dataset(name, std::move(samples));
}

/// Layout: <dir>/images/<id>.pgm, <dir>/masks/<id>.pgm (labeled splits
/// only), <dir>/manifest.csv.
inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) throw std::runtime_error("cannot create dataset directory '" + dir.string() + "': " + ec.message());
  if (ds.any_mask()) {
    fs::create_directories(dir / "masks", ec);
    if (ec) throw std::runtime_error("cannot create '" + (dir / "masks").string() + "': " + ec.message());
  }
  std::ofstream manifest(dir / "manifest.csv", std::ios::binary);
  if (!manifest) throw std::runtime_error("cannot write manifest in '" + dir.string() + "'");
  manifest << kManifestHeader << '\n';
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& s = ds.sample(i);
    write_raster(dir / "images" / (s.meta.id + ".pgm"), s.image);
    if (s.mask) write_mask(dir / "masks" / (s.meta.id + ".pgm"), *s.mask);
    manifest << s.meta.id << ',' << name(s.meta.domain) << ',' << s.meta.split << ',' << s.meta.instrument_count
             << ',' << (s.meta.has_counterexample ? 1 : 0) << '\n';
  }
  if (!manifest) throw std::runtime_error("manifest write failed in '" + dir.string() + "'");
}

inline Dataset gen_dataset(const std::filesystem::path& dir, std::size_t n, Domain domain, const std::string& split,
                           std::uint64_t seed, const DomainParams& params) {
  Dataset ds = make_dataset(dir.filename().string(), n, domain, split, seed, params);
  save_dataset(ds, dir);
  return ds;
}

/// Loads a dataset directory. Refuses a real training split that has masks
/// on disk.
inline Dataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::ifstream manifest(dir / "manifest.csv");
  if (!manifest) throw std::runtime_error("no manifest.csv in '" + dir.string() + "'");
  std::string line;
  std::getline(manifest, line);
  if (line != kManifestHeader) throw std::runtime_error("unexpected manifest header in '" + dir.string() + "'");
  std::vector<Sample> samples;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 5) throw std::runtime_error("malformed manifest row '" + line + "' in '" + dir.string() + "'");
    Sample s;
    s.meta.id = f[0];
    s.meta.domain = parse_domain(f[1]);
    s.meta.split = f[2];
    s.meta.instrument_count = std::stoi(f[3]);
    s.meta.has_counterexample = f[4] == "1";
    s.image = read_raster(dir / "images" / (s.meta.id + ".pgm"));
    const fs::path mask_path = dir / "masks" / (s.meta.id + ".pgm");
    if (fs::exists(mask_path)) {
      if (split_is_unlabeled(s.meta.domain, s.meta.split))
        throw std::runtime_error("contamination: real training split '" + dir.string() + "' contains mask " +
                                 mask_path.string());
      s.mask = read_mask(mask_path);
    }
    samples.push_back(std::move(s));
  }
  return Dataset(dir.filename().string(), std::move(samples));
}

}  // namespace tsuda
