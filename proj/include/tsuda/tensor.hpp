#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <new>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace tsuda {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

/// 64-byte aligned allocation. Vectorized reductions pick their split point
/// from the buffer address, so a fixed alignment keeps results bitwise
/// reproducible from run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kAlign})); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{kAlign}); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

inline std::string to_string(const Shape& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
  os << ']';
  return os.str();
}

/// Dense row-major tensor with an optional gradient buffer.
///
/// Copies share storage (handle semantics), which is what lets the tape
/// refer to the same buffers the caller holds. Use clone() for a deep copy.
/// The scalar type is a parameter so the same kernels can be instantiated in
/// double for gradient verification; training uses Tensor (float).
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  BasicTensor(Shape dims, const std::vector<T>& data, bool requires_grad = false)
      : BasicTensor(std::move(dims), Buffer<T>(data.begin(), data.end()), requires_grad) {}

  BasicTensor(Shape dims, std::initializer_list<T> data, bool requires_grad = false)
      : BasicTensor(std::move(dims), Buffer<T>(data), requires_grad) {}

  BasicTensor(Shape dims, Buffer<T> data, bool requires_grad = false) : s_(std::make_shared<Storage>()) {
    for (std::size_t d : dims)
      if (d == 0) throw std::invalid_argument("tensor dims must be positive, got " + to_string(dims));
    if (numel(dims) != data.size())
      throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                  " does not match dims " + to_string(dims));
    s_->dims = std::move(dims);
    s_->data = std::move(data);
    s_->requires_grad = requires_grad;
  }

  static BasicTensor zeros(Shape dims, bool requires_grad = false) {
    const std::size_t n = numel(dims);
    return BasicTensor(std::move(dims), Buffer<T>(n, T(0)), requires_grad);
  }

  static BasicTensor full(Shape dims, T value, bool requires_grad = false) {
    const std::size_t n = numel(dims);
    return BasicTensor(std::move(dims), Buffer<T>(n, value), requires_grad);
  }

  static BasicTensor scalar(T value, bool requires_grad = false) {
    return BasicTensor({1}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& dims() const { return s_->dims; }
  std::size_t dim(std::size_t axis) const { return s_->dims.at(axis); }
  std::size_t rank() const { return s_->dims.size(); }
  std::size_t size() const { return s_->data.size(); }

  std::span<T> data() { return s_->data; }
  std::span<const T> data() const { return s_->data; }
  T& operator[](std::size_t i) { return s_->data[i]; }
  const T& operator[](std::size_t i) const { return s_->data[i]; }

  T item() const {
    if (size() != 1) throw std::logic_error("item() on tensor with dims " + to_string(dims()));
    return s_->data[0];
  }

  bool requires_grad() const { return s_ && s_->requires_grad; }
  void set_requires_grad(bool v) { s_->requires_grad = v; }

  bool has_grad() const { return !s_->grad.empty(); }
  std::span<T> grad() { return s_->grad; }
  std::span<const T> grad() const { return s_->grad; }

  /// Allocates a zero gradient buffer if none exists and returns it.
  /// Const because gradients live in the shared storage, not the handle.
  std::span<T> ensure_grad() const {
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), T(0));
    return s_->grad;
  }
  void zero_grad() {
    if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), T(0));
  }
  void clear_grad() {
    s_->grad.clear();
    s_->grad.shrink_to_fit();
  }

  BasicTensor clone() const { return BasicTensor(s_->dims, s_->data, s_->requires_grad); }

  template <typename U>
  BasicTensor<U> cast() const {
    Buffer<U> out(s_->data.begin(), s_->data.end());
    return BasicTensor<U>(s_->dims, std::move(out), s_->requires_grad);
  }

  bool same_storage(const BasicTensor& other) const { return s_ == other.s_; }

 private:
  struct Storage {
    Shape dims;
    Buffer<T> data;
    Buffer<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> s_;
};

using Tensor = BasicTensor<float>;

/// Ordered record of differentiable operations.
///
/// Entries are appended in execution order, so inputs of an entry are always
/// leaves or outputs of earlier entries. backward() walks the list in exact
/// reverse order.
template <typename T>
class BasicTape {
 public:
  using TensorT = BasicTensor<T>;

  struct Entry {
    std::string op;
    std::vector<TensorT> inputs;
    TensorT output;
    std::function<void()> backward;
  };

  void record(std::string op, std::vector<TensorT> inputs, TensorT output, std::function<void()> backward) {
    entries_.push_back({std::move(op), std::move(inputs), std::move(output), std::move(backward)});
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<Entry>& entries() const { return entries_; }

  /// True if `t` is an input or output of any recorded entry.
  bool references(const TensorT& t) const {
    for (const auto& e : entries_) {
      if (e.output.same_storage(t)) return true;
      for (const auto& in : e.inputs)
        if (in.same_storage(t)) return true;
    }
    return false;
  }

  bool produced(const TensorT& t) const {
    for (const auto& e : entries_)
      if (e.output.same_storage(t)) return true;
    return false;
  }

  void clear() { entries_.clear(); }

 private:
  std::vector<Entry> entries_;
};

using Tape = BasicTape<float>;

/// Propagates d(loss)/d(x) into every requires_grad tensor reachable from
/// `loss`. Leaf gradients accumulate across calls; intermediate gradient
/// buffers are released afterwards.
template <typename T>
void backward(BasicTape<T>& tape, BasicTensor<T>& loss) {
  if (loss.size() != 1)
    throw std::invalid_argument("backward needs a scalar loss, got dims " + to_string(loss.dims()));
  if (!tape.produced(loss)) throw std::invalid_argument("backward: loss was not recorded on this tape");

  loss.ensure_grad()[0] += T(1);
  const auto& entries = tape.entries();
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->backward();
  }
  for (const auto& e : entries) {
    auto out = e.output;
    out.clear_grad();
  }
}

}  // namespace tsuda
