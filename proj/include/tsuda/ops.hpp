#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "tsuda/tensor.hpp"

namespace tsuda {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
bool should_record(const BasicTape<T>* tape, std::initializer_list<const BasicTensor<T>*> inputs) {
  if (tape == nullptr) return false;
  for (const auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

template <typename T>
void require_rank(const BasicTensor<T>& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank)
    throw std::invalid_argument(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                                ", got dims " + to_string(t.dims()));
}

template <typename T>
void require_same_dims(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.dims() != b.dims())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + to_string(a.dims()) + " vs " +
                                to_string(b.dims()));
}

// Unfolds output rows [y0, y1) of one image [C,H,W] into columns
// [C*kh*kw, (y1-y0)*Wo], zero padded.
template <typename T>
void im2col(const T* img, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t pad, std::size_t y0, std::size_t y1, std::size_t ow, T* col) {
  const std::size_t oh = y1 - y0;
  const auto ih = static_cast<long>(h);
  const auto iw = static_cast<long>(w);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        T* row = col + ((c * kh + ki) * kw + kj) * oh * ow;
        const long dx = static_cast<long>(kj) - static_cast<long>(pad);
        const long x0 = std::clamp(-dx, 0L, static_cast<long>(ow));
        const long x1 = std::clamp(iw - dx, x0, static_cast<long>(ow));
        for (std::size_t oy = 0; oy < oh; ++oy) {
          T* dst = row + oy * ow;
          const long iy = static_cast<long>(y0 + oy + ki) - static_cast<long>(pad);
          if (iy < 0 || iy >= ih) {
            std::fill(dst, dst + ow, T(0));
            continue;
          }
          const T* src = img + (c * h + static_cast<std::size_t>(iy)) * w;
          std::fill(dst, dst + x0, T(0));
          if (x1 > x0) std::memcpy(dst + x0, src + x0 + dx, static_cast<std::size_t>(x1 - x0) * sizeof(T));
          std::fill(dst + x1, dst + ow, T(0));
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds columns back into an image gradient.
template <typename T>
void col2im_add(const T* col, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
                std::size_t pad, std::size_t y0, std::size_t y1, std::size_t ow, T* img) {
  const std::size_t oh = y1 - y0;
  const auto ih = static_cast<long>(h);
  const auto iw = static_cast<long>(w);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const T* row = col + ((c * kh + ki) * kw + kj) * oh * ow;
        const long dx = static_cast<long>(kj) - static_cast<long>(pad);
        const long x0 = std::clamp(-dx, 0L, static_cast<long>(ow));
        const long x1 = std::clamp(iw - dx, x0, static_cast<long>(ow));
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(y0 + oy + ki) - static_cast<long>(pad);
          if (iy < 0 || iy >= ih) continue;
          const T* src = row + oy * ow;
          T* dst = img + (c * h + static_cast<std::size_t>(iy)) * w;
          for (long x = x0; x < x1; ++x) dst[x + dx] += src[x];
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation, stride 1, zero padding, bias over output channels.
///
/// Lowered to im2col + GEMM, processed in bands of output rows so the
/// unfolded block stays cache resident.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel, const BasicTensor<T>& bias,
                      std::size_t padding, BasicTape<T>* tape = nullptr) {
  using detail::RowMat;
  using Stride = Eigen::OuterStride<>;
  detail::require_rank(input, 4, "conv2d", "input");
  detail::require_rank(kernel, 4, "conv2d", "kernel");
  detail::require_rank(bias, 1, "conv2d", "bias");
  const std::size_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  detail::require(kernel.dim(1) == cin, "conv2d: input channel axis (dim 1) is " + std::to_string(cin) +
                                            " but kernel expects " + std::to_string(kernel.dim(1)));
  detail::require(bias.dim(0) == cout, "conv2d: bias length " + std::to_string(bias.dim(0)) +
                                           " does not match kernel output channel axis (dim 0) " +
                                           std::to_string(cout));
  detail::require(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel height/width axes must be odd, got " +
                                                  to_string(kernel.dims()));
  detail::require(h + 2 * padding >= kh, "conv2d: height axis too small for kernel");
  detail::require(w + 2 * padding >= kw, "conv2d: width axis too small for kernel");
  const std::size_t oh = h + 2 * padding - kh + 1, ow = w + 2 * padding - kw + 1;
  const std::size_t k = cin * kh * kw, hw = oh * ow;
  const bool direct = (kh == 1 && kw == 1 && padding == 0);
  const std::size_t band = direct ? oh : std::max<std::size_t>(1, 512 / ow);
  const auto lk = static_cast<long>(k), lcout = static_cast<long>(cout), lhw = static_cast<long>(hw);

  auto out = BasicTensor<T>::zeros({n, cout, oh, ow});
  Eigen::Map<const RowMat<T>> wm(kernel.data().data(), lcout, lk);
  Buffer<T> col(direct ? 0 : k * band * ow);
  for (std::size_t b = 0; b < n; ++b) {
    const T* img = input.data().data() + b * cin * h * w;
    T* obase = out.data().data() + b * cout * hw;
    for (std::size_t y0 = 0; y0 < oh; y0 += band) {
      const std::size_t y1 = std::min(oh, y0 + band);
      const auto len = static_cast<long>((y1 - y0) * ow);
      if (direct) {
        Eigen::Map<const RowMat<T>, 0, Stride> cm(img + y0 * ow, lk, len, Stride(lhw));
        Eigen::Map<RowMat<T>, 0, Stride> om(obase + y0 * ow, lcout, len, Stride(lhw));
        om.noalias() = wm * cm;
      } else {
        detail::im2col(img, cin, h, w, kh, kw, padding, y0, y1, ow, col.data());
        Eigen::Map<const RowMat<T>> cm(col.data(), lk, len);
        Eigen::Map<RowMat<T>, 0, Stride> om(obase + y0 * ow, lcout, len, Stride(lhw));
        om.noalias() = wm * cm;
      }
    }
    Eigen::Map<RowMat<T>> om(obase, lcout, lhw);
    for (std::size_t c = 0; c < cout; ++c) om.row(static_cast<long>(c)).array() += bias[c];
  }

  if (detail::should_record(tape, {&input, &kernel, &bias})) {
    out.set_requires_grad(true);
    tape->record("conv2d", {input, kernel, bias}, out,
                 [input, kernel, bias, out, padding, n, cin, h, w, cout, kh, kw, oh, ow, k, hw, direct, band]() {
                   const auto lk = static_cast<long>(k), lcout = static_cast<long>(cout);
                   const auto lhw = static_cast<long>(hw);
                   const bool need_w = kernel.requires_grad(), need_in = input.requires_grad();
                   Buffer<T> col(direct || !need_w ? 0 : k * band * ow);
                   Buffer<T> gcol(direct || !need_in ? 0 : k * band * ow);
                   Eigen::Map<const RowMat<T>> wm(kernel.data().data(), lcout, lk);
                   for (std::size_t b = 0; b < n; ++b) {
                     const T* gobase = out.grad().data() + b * cout * hw;
                     if (bias.requires_grad()) {
                       auto gb = bias.ensure_grad();
                       Eigen::Map<const RowMat<T>> go(gobase, lcout, lhw);
                       for (std::size_t c = 0; c < cout; ++c) gb[c] += go.row(static_cast<long>(c)).sum();
                     }
                     const T* img = input.data().data() + b * cin * h * w;
                     T* gin = need_in ? input.ensure_grad().data() + b * cin * h * w : nullptr;
                     for (std::size_t y0 = 0; y0 < oh; y0 += band) {
                       const std::size_t y1 = std::min(oh, y0 + band);
                       const auto len = static_cast<long>((y1 - y0) * ow);
                       Eigen::Map<const RowMat<T>, 0, Stride> go(gobase + y0 * ow, lcout, len, Stride(lhw));
                       if (need_w) {
                         Eigen::Map<RowMat<T>> gw(kernel.ensure_grad().data(), lcout, lk);
                         if (direct) {
                           Eigen::Map<const RowMat<T>, 0, Stride> cm(img + y0 * ow, lk, len, Stride(lhw));
                           gw.noalias() += go * cm.transpose();
                         } else {
                           detail::im2col(img, cin, h, w, kh, kw, padding, y0, y1, ow, col.data());
                           Eigen::Map<const RowMat<T>> cm(col.data(), lk, len);
                           gw.noalias() += go * cm.transpose();
                         }
                       }
                       if (need_in) {
                         if (direct) {
                           Eigen::Map<RowMat<T>, 0, Stride> gi(gin + y0 * ow, lk, len, Stride(lhw));
                           gi.noalias() += wm.transpose() * go;
                         } else {
                           Eigen::Map<RowMat<T>> gc(gcol.data(), lk, len);
                           gc.noalias() = wm.transpose() * go;
                           detail::col2im_add(gcol.data(), cin, h, w, kh, kw, padding, y0, y1, ow, gin);
                         }
                       }
                     }
                   }
                 });
  }
  return out;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input, BasicTape<T>* tape = nullptr) {
  auto out = BasicTensor<T>::zeros(input.dims());
  const auto x = input.data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  if (detail::should_record(tape, {&input})) {
    out.set_requires_grad(true);
    tape->record("relu", {input}, out, [input, out]() mutable {
      auto gi = input.ensure_grad();
      const auto go = out.grad();
      const auto x = input.data();
      for (std::size_t i = 0; i < x.size(); ++i)
        if (x[i] > T(0)) gi[i] += go[i];
    });
  }
  return out;
}

/// 2x2 non-overlapping max pooling. Ties go to the first element in
/// row-major scan order of the window.
template <typename T>
BasicTensor<T> maxpool2(const BasicTensor<T>& input, BasicTape<T>* tape = nullptr) {
  detail::require_rank(input, 4, "maxpool2", "input");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  detail::require(h % 2 == 0, "maxpool2: height axis (dim 2) must be even, got " + std::to_string(h));
  detail::require(w % 2 == 0, "maxpool2: width axis (dim 3) must be even, got " + std::to_string(w));
  const std::size_t oh = h / 2, ow = w / 2;
  auto out = BasicTensor<T>::zeros({n, c, oh, ow});
  std::vector<std::size_t> argmax(out.size());
  const auto x = input.data();
  auto y = out.data();
  for (std::size_t p = 0; p < n * c; ++p) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t base = p * h * w + 2 * oy * w + 2 * ox;
        const std::size_t cand[4] = {base, base + 1, base + w, base + w + 1};
        std::size_t best = cand[0];
        for (int q = 1; q < 4; ++q)
          if (x[cand[q]] > x[best]) best = cand[q];
        const std::size_t o = p * oh * ow + oy * ow + ox;
        y[o] = x[best];
        argmax[o] = best;
      }
    }
  }
  if (detail::should_record(tape, {&input})) {
    out.set_requires_grad(true);
    tape->record("maxpool2", {input}, out, [input, out, argmax = std::move(argmax)]() mutable {
      auto gi = input.ensure_grad();
      const auto go = out.grad();
      for (std::size_t o = 0; o < go.size(); ++o) gi[argmax[o]] += go[o];
    });
  }
  return out;
}

/// Nearest-neighbour 2x upsampling.
template <typename T>
BasicTensor<T> upsample2(const BasicTensor<T>& input, BasicTape<T>* tape = nullptr) {
  detail::require_rank(input, 4, "upsample2", "input");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t oh = 2 * h, ow = 2 * w;
  auto out = BasicTensor<T>::zeros({n, c, oh, ow});
  const auto x = input.data();
  auto y = out.data();
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) y[(p * oh + oy) * ow + ox] = x[(p * h + oy / 2) * w + ox / 2];
  if (detail::should_record(tape, {&input})) {
    out.set_requires_grad(true);
    tape->record("upsample2", {input}, out, [input, out, n, c, h, w]() mutable {
      auto gi = input.ensure_grad();
      const auto go = out.grad();
      const std::size_t oh = 2 * h, ow = 2 * w;
      for (std::size_t p = 0; p < n * c; ++p)
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) gi[(p * h + oy / 2) * w + ox / 2] += go[(p * oh + oy) * ow + ox];
    });
  }
  return out;
}

/// Concatenates two [N,C,H,W] tensors along the channel axis.
template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b, BasicTape<T>* tape = nullptr) {
  detail::require_rank(a, 4, "concat_channels", "first input");
  detail::require_rank(b, 4, "concat_channels", "second input");
  detail::require(a.dim(0) == b.dim(0), "concat_channels: batch axis (dim 0) mismatch");
  detail::require(a.dim(2) == b.dim(2), "concat_channels: height axis (dim 2) mismatch");
  detail::require(a.dim(3) == b.dim(3), "concat_channels: width axis (dim 3) mismatch");
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  auto out = BasicTensor<T>::zeros({n, ca + cb, a.dim(2), a.dim(3)});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data().data() + i * ca * hw, ca * hw, out.data().data() + i * (ca + cb) * hw);
    std::copy_n(b.data().data() + i * cb * hw, cb * hw, out.data().data() + i * (ca + cb) * hw + ca * hw);
  }
  if (detail::should_record(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record("concat_channels", {a, b}, out, [a, b, out, n, ca, cb, hw]() mutable {
      const auto go = out.grad();
      for (std::size_t i = 0; i < n; ++i) {
        const T* src = go.data() + i * (ca + cb) * hw;
        if (a.requires_grad()) {
          T* dst = a.ensure_grad().data() + i * ca * hw;
          for (std::size_t j = 0; j < ca * hw; ++j) dst[j] += src[j];
        }
        if (b.requires_grad()) {
          T* dst = b.ensure_grad().data() + i * cb * hw;
          for (std::size_t j = 0; j < cb * hw; ++j) dst[j] += src[ca * hw + j];
        }
      }
    });
  }
  return out;
}

/// Per-pixel softmax over a two-channel axis, max-subtracted.
template <typename T>
BasicTensor<T> softmax_channel(const BasicTensor<T>& logits, BasicTape<T>* tape = nullptr) {
  detail::require_rank(logits, 4, "softmax_channel", "logits");
  detail::require(logits.dim(1) == 2, "softmax_channel: channel axis (dim 1) must be 2, got " +
                                          std::to_string(logits.dim(1)));
  const std::size_t n = logits.dim(0), hw = logits.dim(2) * logits.dim(3);
  auto out = BasicTensor<T>::zeros(logits.dims());
  const auto z = logits.data();
  auto p = out.data();
  for (std::size_t b = 0; b < n; ++b) {
    const std::size_t o0 = b * 2 * hw, o1 = o0 + hw;
    for (std::size_t i = 0; i < hw; ++i) {
      const T m = std::max(z[o0 + i], z[o1 + i]);
      const T e0 = std::exp(z[o0 + i] - m), e1 = std::exp(z[o1 + i] - m);
      const T s = e0 + e1;
      p[o0 + i] = e0 / s;
      p[o1 + i] = e1 / s;
    }
  }
  if (detail::should_record(tape, {&logits})) {
    out.set_requires_grad(true);
    tape->record("softmax_channel", {logits}, out, [logits, out, n, hw]() mutable {
      auto gz = logits.ensure_grad();
      const auto gp = out.grad();
      const auto p = out.data();
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t o0 = b * 2 * hw, o1 = o0 + hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const T dot = gp[o0 + i] * p[o0 + i] + gp[o1 + i] * p[o1 + i];
          gz[o0 + i] += p[o0 + i] * (gp[o0 + i] - dot);
          gz[o1 + i] += p[o1 + i] * (gp[o1 + i] - dot);
        }
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b, BasicTape<T>* tape = nullptr) {
  detail::require_same_dims(a, b, "add");
  auto out = BasicTensor<T>::zeros(a.dims());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  if (detail::should_record(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record("add", {a, b}, out, [a, b, out]() mutable {
      const auto go = out.grad();
      if (a.requires_grad()) {
        auto g = a.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
      }
      if (b.requires_grad()) {
        auto g = b.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor, BasicTape<T>* tape = nullptr) {
  auto out = BasicTensor<T>::zeros(a.dims());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * a[i];
  if (detail::should_record(tape, {&a})) {
    out.set_requires_grad(true);
    tape->record("scale", {a}, out, [a, out, factor]() mutable {
      const auto go = out.grad();
      auto g = a.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * go[i];
    });
  }
  return out;
}

/// Elementwise product.
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b, BasicTape<T>* tape = nullptr) {
  detail::require_same_dims(a, b, "mul");
  auto out = BasicTensor<T>::zeros(a.dims());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  if (detail::should_record(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record("mul", {a, b}, out, [a, b, out]() mutable {
      const auto go = out.grad();
      if (a.requires_grad()) {
        auto g = a.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * b[i];
      }
      if (b.requires_grad()) {
        auto g = b.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * a[i];
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a, BasicTape<T>* tape = nullptr) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  auto out = BasicTensor<T>::scalar(acc);
  if (detail::should_record(tape, {&a})) {
    out.set_requires_grad(true);
    tape->record("sum", {a}, out, [a, out]() mutable {
      const T go = out.grad()[0];
      auto g = a.ensure_grad();
      for (auto& v : g) v += go;
    });
  }
  return out;
}

}  // namespace tsuda
