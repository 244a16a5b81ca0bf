#pragma once

#include <algorithm>
#include <stdexcept>
#include <vector>

#include "tsuda/raster.hpp"
#include "tsuda/tensor.hpp"

namespace tsuda {

/// Stacks grayscale rasters into an [N,1,H,W] tensor.
inline Tensor stack_images(const std::vector<const Raster*>& images) {
  if (images.empty()) throw std::invalid_argument("stack_images: empty batch");
  const std::size_t h = images[0]->height, w = images[0]->width;
  auto out = Tensor::zeros({images.size(), 1, h, w});
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->height != h || images[i]->width != w)
      throw std::invalid_argument("stack_images: images in a batch must share dimensions");
    std::copy(images[i]->values.begin(), images[i]->values.end(), out.data().begin() + static_cast<long>(i * h * w));
  }
  return out;
}

/// One-hot [N,2,H,W] target; channel 1 is foreground.
inline Tensor one_hot(const std::vector<const BinaryMask*>& masks) {
  if (masks.empty()) throw std::invalid_argument("one_hot: empty batch");
  const std::size_t h = masks[0]->height, w = masks[0]->width, hw = h * w;
  auto out = Tensor::zeros({masks.size(), 2, h, w});
  for (std::size_t i = 0; i < masks.size(); ++i) {
    if (masks[i]->height != h || masks[i]->width != w)
      throw std::invalid_argument("one_hot: masks in a batch must share dimensions");
    for (std::size_t p = 0; p < hw; ++p) {
      const bool fg = masks[i]->values[p] != 0;
      out[i * 2 * hw + p] = fg ? 0.0f : 1.0f;
      out[i * 2 * hw + hw + p] = fg ? 1.0f : 0.0f;
    }
  }
  return out;
}

/// Per-pixel argmax of [N,2,H,W] scores; exact ties go to background.
inline std::vector<BinaryMask> argmax_masks(const Tensor& scores) {
  if (scores.rank() != 4 || scores.dim(1) != 2)
    throw std::invalid_argument("argmax_masks: expected [N,2,H,W], got " + to_string(scores.dims()));
  const std::size_t n = scores.dim(0), h = scores.dim(2), w = scores.dim(3), hw = h * w;
  const auto& logits = scores;
  std::vector<BinaryMask> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    BinaryMask m(h, w);
    for (std::size_t p = 0; p < hw; ++p) m.values[p] = logits[i * 2 * hw + hw + p] > logits[i * 2 * hw + p] ? 1 : 0;
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace tsuda
