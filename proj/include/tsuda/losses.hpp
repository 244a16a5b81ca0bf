#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "tsuda/ops.hpp"
#include "tsuda/tensor.hpp"

namespace tsuda {

inline constexpr double kLogClamp = 1e-7;
inline constexpr double kJaccardEps = 1e-6;

/// Mean per-pixel cross-entropy between softmax(logits) and a (soft or
/// one-hot) target distribution. The target is treated as a constant.
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, const BasicTensor<T>& target,
                             BasicTape<T>* tape = nullptr) {
  detail::require_rank(logits, 4, "cross_entropy", "logits");
  detail::require_same_dims(logits, target, "cross_entropy");
  detail::require(logits.dim(1) == 2, "cross_entropy: channel axis (dim 1) must be 2");
  const std::size_t n = logits.dim(0), hw = logits.dim(2) * logits.dim(3);
  const T eps = T(kLogClamp);
  const auto z = logits.data();
  const auto t = target.data();
  T acc = 0;
  for (std::size_t b = 0; b < n; ++b) {
    const std::size_t o0 = b * 2 * hw, o1 = o0 + hw;
    for (std::size_t i = 0; i < hw; ++i) {
      const T m = std::max(z[o0 + i], z[o1 + i]);
      const T e0 = std::exp(z[o0 + i] - m), e1 = std::exp(z[o1 + i] - m);
      const T s = e0 + e1;
      acc -= t[o0 + i] * std::log(std::max(e0 / s, eps)) + t[o1 + i] * std::log(std::max(e1 / s, eps));
    }
  }
  const T count = static_cast<T>(n * hw);
  auto out = BasicTensor<T>::scalar(acc / count);
  if (detail::should_record(tape, {&logits})) {
    out.set_requires_grad(true);
    tape->record("cross_entropy", {logits}, out, [logits, target, out, n, hw, count, eps]() mutable {
      const T go = out.grad()[0] / count;
      auto gz = logits.ensure_grad();
      const auto z = logits.data();
      const auto t = target.data();
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t o0 = b * 2 * hw, o1 = o0 + hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const T m = std::max(z[o0 + i], z[o1 + i]);
          const T e0 = std::exp(z[o0 + i] - m), e1 = std::exp(z[o1 + i] - m);
          const T s = e0 + e1;
          const T p0 = e0 / s, p1 = e1 / s;
          // Clamped classes contribute no gradient through the log.
          const T a0 = p0 > eps ? t[o0 + i] : T(0);
          const T a1 = p1 > eps ? t[o1 + i] : T(0);
          const T mass = a0 + a1;
          gz[o0 + i] += go * (p0 * mass - a0);
          gz[o1 + i] += go * (p1 * mass - a1);
        }
      }
    });
  }
  return out;
}

/// 1 - soft IoU on the foreground channel (index 1), pooled over the batch.
template <typename T>
BasicTensor<T> soft_jaccard_loss(const BasicTensor<T>& probs, const BasicTensor<T>& target,
                                 BasicTape<T>* tape = nullptr) {
  detail::require_rank(probs, 4, "soft_jaccard_loss", "probs");
  detail::require_same_dims(probs, target, "soft_jaccard_loss");
  detail::require(probs.dim(1) == 2, "soft_jaccard_loss: channel axis (dim 1) must be 2");
  const std::size_t n = probs.dim(0), hw = probs.dim(2) * probs.dim(3);
  const T eps = T(kJaccardEps);
  T inter = 0, sp = 0, st = 0;
  for (std::size_t b = 0; b < n; ++b) {
    const std::size_t o1 = (2 * b + 1) * hw;
    for (std::size_t i = 0; i < hw; ++i) {
      const T p = probs[o1 + i], t = target[o1 + i];
      inter += p * t;
      sp += p;
      st += t;
    }
  }
  const T uni = sp + st - inter + eps;
  auto out = BasicTensor<T>::scalar(T(1) - (inter + eps) / uni);
  if (detail::should_record(tape, {&probs})) {
    out.set_requires_grad(true);
    tape->record("soft_jaccard_loss", {probs}, out, [probs, target, out, n, hw, inter, uni, eps]() mutable {
      const T go = out.grad()[0];
      auto gp = probs.ensure_grad();
      const T num = inter + eps;
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t o1 = (2 * b + 1) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const T t = target[o1 + i];
          // d/dp of -(I+eps)/U with dI/dp = t, dU/dp = 1 - t
          gp[o1 + i] += go * -(t * uni - num * (T(1) - t)) / (uni * uni);
        }
      }
    });
  }
  return out;
}

template <typename T>
struct CompositeLoss {
  BasicTensor<T> total;
  T cross_entropy = 0;
  T jaccard = 0;
};

/// Equal-weight sum of cross-entropy and soft Jaccard.
template <typename T>
CompositeLoss<T> composite_loss(const BasicTensor<T>& logits, const BasicTensor<T>& target,
                                BasicTape<T>* tape = nullptr) {
  auto ce = cross_entropy(logits, target, tape);
  auto probs = softmax_channel(logits, tape);
  auto jac = soft_jaccard_loss(probs, target, tape);
  CompositeLoss<T> out;
  out.cross_entropy = ce.item();
  out.jaccard = jac.item();
  out.total = add(ce, jac, tape);
  return out;
}

/// Composite loss against a detached teacher distribution. Gradient flows
/// only into the student logits.
template <typename T>
CompositeLoss<T> consistency_loss(const BasicTensor<T>& student_logits, const BasicTensor<T>& teacher_probs,
                                  BasicTape<T>* tape = nullptr) {
  if (teacher_probs.requires_grad())
    throw std::invalid_argument("consistency_loss: teacher distribution must be detached from the tape");
  if (tape != nullptr && tape->references(teacher_probs))
    throw std::invalid_argument("consistency_loss: teacher distribution was recorded on the student tape");
  return composite_loss(student_logits, teacher_probs, tape);
}

/// Per-pixel argmax of a probability tensor turned into a one-hot target.
template <typename T>
BasicTensor<T> harden(const BasicTensor<T>& probs) {
  detail::require_rank(probs, 4, "harden", "probs");
  const std::size_t n = probs.dim(0), hw = probs.dim(2) * probs.dim(3);
  auto out = BasicTensor<T>::zeros(probs.dims());
  for (std::size_t b = 0; b < n; ++b) {
    const std::size_t o0 = b * 2 * hw, o1 = o0 + hw;
    for (std::size_t i = 0; i < hw; ++i) {
      const bool fg = probs[o1 + i] > probs[o0 + i];
      out[o0 + i] = fg ? T(0) : T(1);
      out[o1 + i] = fg ? T(1) : T(0);
    }
  }
  return out;
}

struct LossTerms {
  double l_sl = 0;
  double l_cl = 0;
  double w = 0;
  double total = 0;
};

struct RampSchedule {
  std::int64_t total_steps = 1;
  double w_max = 1.0;
};

/// Linear ramp w(t) = w_max * t / T.
inline double ramp_weight(std::int64_t step, const RampSchedule& schedule) {
  if (schedule.total_steps <= 0) throw std::invalid_argument("ramp_weight: total_steps must be positive");
  if (step < 0 || step > schedule.total_steps)
    throw std::out_of_range("ramp_weight: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(schedule.total_steps) + "]");
  return schedule.w_max * static_cast<double>(step) / static_cast<double>(schedule.total_steps);
}

}  // namespace tsuda
