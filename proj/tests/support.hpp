#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <queue>
#include <string>
#include <vector>

#include "tsuda/raster.hpp"
#include "tsuda/rng.hpp"
#include "tsuda/tensor.hpp"

namespace tsuda::testing {

template <typename T = float>
BasicTensor<T> random_tensor(Shape dims, std::uint64_t seed, double lo = -1.0, double hi = 1.0,
                             bool requires_grad = false) {
  Rng rng(seed);
  auto t = BasicTensor<T>::zeros(std::move(dims), requires_grad);
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

/// Direct cross-correlation, accumulated in double.
inline std::vector<double> conv_oracle(const Tensor& in, const Tensor& k, const Tensor& b, std::size_t pad) {
  const std::size_t n = in.dim(0), cin = in.dim(1), h = in.dim(2), w = in.dim(3);
  const std::size_t cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t oh = h + 2 * pad - kh + 1, ow = w + 2 * pad - kw + 1;
  std::vector<double> out(n * cout * oh * ow);
  for (std::size_t bi = 0; bi < n; ++bi)
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          double acc = b[co];
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t dy = 0; dy < kh; ++dy)
              for (std::size_t dx = 0; dx < kw; ++dx) {
                const long iy = static_cast<long>(y + dy) - static_cast<long>(pad);
                const long ix = static_cast<long>(x + dx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                acc += static_cast<double>(in[((bi * cin + ci) * h + iy) * w + ix]) *
                       k[((co * cin + ci) * kh + dy) * kw + dx];
              }
          out[((bi * cout + co) * oh + y) * ow + x] = acc;
        }
  return out;
}

/// 4-connected foreground components.
inline int connected_components(const BinaryMask& m) {
  std::vector<int> label(m.size(), 0);
  int count = 0;
  for (std::size_t start = 0; start < m.size(); ++start) {
    if (!m.values[start] || label[start]) continue;
    ++count;
    std::queue<std::size_t> q;
    q.push(start);
    label[start] = count;
    while (!q.empty()) {
      const std::size_t p = q.front();
      q.pop();
      const std::size_t y = p / m.width, x = p % m.width;
      auto visit = [&](std::size_t ny, std::size_t nx) {
        const std::size_t np = ny * m.width + nx;
        if (m.values[np] && !label[np]) {
          label[np] = count;
          q.push(np);
        }
      };
      if (y > 0) visit(y - 1, x);
      if (y + 1 < m.height) visit(y + 1, x);
      if (x > 0) visit(y, x - 1);
      if (x + 1 < m.width) visit(y, x + 1);
    }
  }
  return count;
}

/// Two-sample Kolmogorov-Smirnov statistic.
inline double ks_statistic(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::size_t i = 0, j = 0;
  double d = 0;
  while (i < a.size() && j < b.size()) {
    const double v = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= v) ++i;
    while (j < b.size() && b[j] <= v) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / a.size() - static_cast<double>(j) / b.size()));
  }
  return d;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("tsuda_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace tsuda::testing
