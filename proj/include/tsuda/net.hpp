#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tsuda/ops.hpp"
#include "tsuda/rng.hpp"
#include "tsuda/tensor.hpp"

namespace tsuda {

struct NetConfig {
  std::size_t input_channels = 1;
  std::size_t base_width = 8;
  std::size_t depth = 3;
  std::size_t classes = 2;

  void validate() const {
    if (input_channels < 1) throw std::invalid_argument("NetConfig: input_channels must be >= 1");
    if (base_width < 1) throw std::invalid_argument("NetConfig: base_width must be >= 1");
    if (depth < 1) throw std::invalid_argument("NetConfig: depth must be >= 1");
    if (classes != 2) throw std::invalid_argument("NetConfig: classes must be 2");
  }

  /// Channel width at resolution level `level` (0 = full resolution,
  /// `depth` = bottleneck).
  std::size_t width(std::size_t level) const { return base_width << level; }

  /// Spatial dims must be multiples of this.
  std::size_t spatial_multiple() const { return std::size_t{1} << depth; }

  bool operator==(const NetConfig&) const = default;
};

/// Named, ordered parameter set of the segmentation network.
template <typename T>
class BasicModelParams {
 public:
  using TensorT = BasicTensor<T>;

  BasicModelParams() = default;
  explicit BasicModelParams(NetConfig config) : config_(config) {}

  const NetConfig& config() const { return config_; }

  void add(std::string name, TensorT tensor) {
    for (const auto& [n, _] : entries_)
      if (n == name) throw std::invalid_argument("ModelParams: duplicate parameter name '" + name + "'");
    entries_.emplace_back(std::move(name), std::move(tensor));
  }

  std::size_t size() const { return entries_.size(); }
  const std::string& name(std::size_t i) const { return entries_.at(i).first; }
  TensorT& tensor(std::size_t i) { return entries_.at(i).second; }
  const TensorT& tensor(std::size_t i) const { return entries_.at(i).second; }

  TensorT& at(const std::string& name) {
    for (auto& [n, t] : entries_)
      if (n == name) return t;
    throw std::out_of_range("ModelParams: no parameter named '" + name + "'");
  }
  const TensorT& at(const std::string& name) const { return const_cast<BasicModelParams*>(this)->at(name); }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.size();
    return n;
  }

  /// Same architecture: config, names, order, and dims all match.
  bool compatible(const BasicModelParams& other) const {
    if (!(config_ == other.config_) || entries_.size() != other.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].first != other.entries_[i].first) return false;
      if (entries_[i].second.dims() != other.entries_[i].second.dims()) return false;
    }
    return true;
  }

  void set_requires_grad(bool v) {
    for (auto& [_, t] : entries_) t.set_requires_grad(v);
  }

  void zero_grad() {
    for (auto& [_, t] : entries_) t.zero_grad();
  }

  template <typename U>
  BasicModelParams<U> cast() const {
    BasicModelParams<U> out(config_);
    for (const auto& [n, t] : entries_) out.add(n, t.template cast<U>());
    return out;
  }

 private:
  NetConfig config_;
  std::vector<std::pair<std::string, TensorT>> entries_;
};

using ModelParams = BasicModelParams<float>;

namespace detail {

template <typename T>
BasicTensor<T> he_normal(Shape dims, std::size_t fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  auto t = BasicTensor<T>::zeros(std::move(dims));
  for (auto& v : t.data()) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

template <typename T>
void add_conv(BasicModelParams<T>& params, const std::string& prefix, std::size_t cout, std::size_t cin,
              std::size_t k, Rng& rng) {
  params.add(prefix + ".weight", he_normal<T>({cout, cin, k, k}, cin * k * k, rng));
  params.add(prefix + ".bias", BasicTensor<T>::zeros({cout}));
}

}  // namespace detail

/// U-shaped encoder-decoder with skip connections.
///
/// Layout: enc{0..depth-1} (3x3, width base*2^k), bottleneck (3x3, width
/// base*2^depth), dec{depth-1..0} (3x3 over upsampled+skip, width base*2^k),
/// head (1x1 to two logit channels). He-normal weights, zero biases.
template <typename T = float>
BasicModelParams<T> build_net(const NetConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(derive_seed(seed, 0x6e6574));
  BasicModelParams<T> params(config);
  std::size_t cin = config.input_channels;
  for (std::size_t k = 0; k < config.depth; ++k) {
    detail::add_conv(params, "enc" + std::to_string(k), config.width(k), cin, 3, rng);
    cin = config.width(k);
  }
  detail::add_conv(params, "bottleneck", config.width(config.depth), cin, 3, rng);
  for (std::size_t k = config.depth; k-- > 0;) {
    detail::add_conv(params, "dec" + std::to_string(k), config.width(k), config.width(k + 1) + config.width(k), 3,
                     rng);
  }
  detail::add_conv(params, "head", config.classes, config.width(0), 1, rng);
  return params;
}

/// Runs the network on [N,C,H,W]; records on `tape` when it is non-null.
template <typename T>
BasicTensor<T> forward(const BasicModelParams<T>& params, const BasicTensor<T>& batch, BasicTape<T>* tape = nullptr) {
  const NetConfig& cfg = params.config();
  detail::require_rank(batch, 4, "forward", "batch");
  detail::require(batch.dim(1) == cfg.input_channels,
                  "forward: channel axis (dim 1) is " + std::to_string(batch.dim(1)) + ", network expects " +
                      std::to_string(cfg.input_channels));
  const std::size_t m = cfg.spatial_multiple();
  if (batch.dim(2) % m != 0 || batch.dim(3) % m != 0)
    throw std::invalid_argument("forward: spatial size " + std::to_string(batch.dim(2)) + "x" +
                                std::to_string(batch.dim(3)) + " must be a multiple of " + std::to_string(m));

  auto conv = [&](const std::string& name, const BasicTensor<T>& x, std::size_t pad) {
    return conv2d(x, params.at(name + ".weight"), params.at(name + ".bias"), pad, tape);
  };

  std::vector<BasicTensor<T>> skips;
  BasicTensor<T> x = batch;
  for (std::size_t k = 0; k < cfg.depth; ++k) {
    x = relu(conv("enc" + std::to_string(k), x, 1), tape);
    skips.push_back(x);
    x = maxpool2(x, tape);
  }
  x = relu(conv("bottleneck", x, 1), tape);
  for (std::size_t k = cfg.depth; k-- > 0;) {
    x = concat_channels(upsample2(x, tape), skips[k], tape);
    x = relu(conv("dec" + std::to_string(k), x, 1), tape);
  }
  return conv("head", x, 0);
}

template <typename T>
BasicModelParams<T> clone_params(const BasicModelParams<T>& source) {
  BasicModelParams<T> out(source.config());
  for (const auto& [n, t] : source) out.add(n, BasicTensor<T>(t.dims(), Buffer<T>(t.data().begin(), t.data().end()),
                                                              t.requires_grad()));
  return out;
}

/// teacher <- alpha * teacher + (1 - alpha) * student, elementwise.
template <typename T>
void ema_update(BasicModelParams<T>& teacher, const BasicModelParams<T>& student, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("ema_update: alpha must lie in [0, 1]");
  if (!teacher.compatible(student)) throw std::invalid_argument("ema_update: teacher and student descriptors differ");
  const T a = static_cast<T>(alpha);
  const T b = static_cast<T>(1.0 - alpha);
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    auto dst = teacher.tensor(i).data();
    const auto src = student.tensor(i).data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = a * dst[j] + b * src[j];
  }
}

/// Copies parameter values (not gradients) from `source` into `target`.
template <typename T>
void assign_params(BasicModelParams<T>& target, const BasicModelParams<T>& source) {
  if (!target.compatible(source)) throw std::invalid_argument("assign_params: descriptors differ");
  for (std::size_t i = 0; i < target.size(); ++i) {
    auto dst = target.tensor(i).data();
    const auto src = source.tensor(i).data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

struct AdamConfig {
  double lr = 1e-4;
  double weight_decay = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment buffers, one per parameter tensor.
template <typename T>
struct BasicAdamState {
  std::int64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

using AdamState = BasicAdamState<float>;

/// Adam with decoupled weight decay (theta -= lr*wd*theta before the moment
/// step). Gradients are zeroed afterwards.
template <typename T>
void adam_step(BasicModelParams<T>& params, const AdamConfig& cfg, BasicAdamState<T>& state) {
  if (state.m.empty()) {
    for (const auto& [_, t] : params) {
      state.m.emplace_back(t.size(), T(0));
      state.v.emplace_back(t.size(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: optimizer state does not match params");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!params.tensor(i).has_grad())
      throw std::logic_error("adam_step: parameter '" + params.name(i) + "' has no gradient");

  ++state.step;
  const T lr = static_cast<T>(cfg.lr);
  const T decay = static_cast<T>(1.0 - cfg.lr * cfg.weight_decay);
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(state.step)));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(state.step)));
  const T eps = static_cast<T>(cfg.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params.tensor(i);
    auto w = t.data();
    auto g = t.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      w[j] *= decay;
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      const T mhat = m[j] / c1;
      const T vhat = v[j] / c2;
      w[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
    t.zero_grad();
  }
}

}  // namespace tsuda
