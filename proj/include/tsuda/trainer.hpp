#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "tsuda/batch.hpp"
#include "tsuda/checkpoint.hpp"
#include "tsuda/losses.hpp"
#include "tsuda/metrics.hpp"
#include "tsuda/net.hpp"
#include "tsuda/perturb.hpp"
#include "tsuda/rng.hpp"
#include "tsuda/synthdata.hpp"

namespace tsuda {

enum class Mode { teacher_student, student_as_teacher, lower_baseline, upper_baseline };

inline constexpr std::array kModes = {Mode::upper_baseline, Mode::teacher_student, Mode::student_as_teacher,
                                      Mode::lower_baseline};

inline std::string_view name(Mode m) {
  switch (m) {
    case Mode::teacher_student: return "teacher_student";
    case Mode::student_as_teacher: return "student_as_teacher";
    case Mode::lower_baseline: return "lower_baseline";
    case Mode::upper_baseline: return "upper_baseline";
  }
  return "?";
}

inline Mode parse_mode(std::string_view s) {
  for (Mode m : kModes)
    if (name(m) == s) return m;
  throw std::invalid_argument("unknown mode '" + std::string(s) +
                              "' (expected teacher_student, student_as_teacher, lower_baseline or upper_baseline)");
}

inline bool uses_consistency(Mode m) { return m == Mode::teacher_student || m == Mode::student_as_teacher; }

/// Which view of the unlabeled image the teacher labels. With teacher_clean
/// the teacher sees x and the student P(x); teacher_perturbed swaps them.
enum class ConsistencyDirection { teacher_clean, teacher_perturbed };

inline std::string_view name(ConsistencyDirection d) {
  return d == ConsistencyDirection::teacher_clean ? "teacher_clean" : "teacher_perturbed";
}

inline ConsistencyDirection parse_direction(std::string_view s) {
  if (s == "teacher_clean") return ConsistencyDirection::teacher_clean;
  if (s == "teacher_perturbed") return ConsistencyDirection::teacher_perturbed;
  throw std::invalid_argument("unknown consistency_direction '" + std::string(s) +
                              "' (expected teacher_clean or teacher_perturbed)");
}

struct TrainConfig {
  Mode mode = Mode::teacher_student;
  double alpha = 0.95;
  std::size_t batch_size = 8;
  std::size_t epochs = 50;
  double lr = 1e-4;
  double weight_decay = 1e-6;
  double w_max = 1.0;
  ConsistencyDirection consistency_direction = ConsistencyDirection::teacher_clean;
  bool harden_targets = false;
  std::uint64_t seed = 1;
  NetConfig net;
  /// rng_seed fields are ignored; per-sample seeds derive from `seed`.
  AugmentSpec augment;
  PerturbSpec perturb;

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0, 1]");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (!(lr > 0)) throw std::invalid_argument("lr must be positive");
    if (!(weight_decay >= 0)) throw std::invalid_argument("weight_decay must be >= 0");
    if (!(w_max >= 0)) throw std::invalid_argument("w_max must be >= 0");
    net.validate();
  }

  AdamConfig adam() const { return AdamConfig{.lr = lr, .weight_decay = weight_decay}; }
};

struct StepRecord {
  std::int64_t step = 0;
  double l_sl = 0;
  double l_cl = 0;
  double w = 0;
  double total = 0;
  double grad_norm = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::optional<double> student_dice;
  std::optional<double> teacher_dice;
};

struct TrainHistory {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
};

/// Everything needed to continue training from a step boundary.
struct TrainState {
  TrainConfig config;
  ModelParams student;
  ModelParams teacher;
  AdamState adam;
  std::int64_t step = 0;
  RampSchedule ramp;
};

struct LabeledBatch {
  std::vector<const Raster*> images;
  std::vector<const BinaryMask*> masks;
};

struct UnlabeledBatch {
  std::vector<const Raster*> images;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::int64_t step, const std::string& what)
      : std::runtime_error("non-finite loss at step " + std::to_string(step) + ": " + what), step_(step) {}
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

namespace detail {

inline constexpr std::uint64_t kAugStream = 0x617567;
inline constexpr std::uint64_t kPerturbStream = 0x707274;
inline constexpr std::uint64_t kSimOrderStream = 0x73696d;
inline constexpr std::uint64_t kRealOrderStream = 0x7265616c;

inline std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
  return p;
}

inline double grad_norm(const ModelParams& params) {
  double ss = 0;
  for (const auto& [_, t] : params)
    if (t.has_grad())
      for (float g : t.grad()) ss += static_cast<double>(g) * g;
  return std::sqrt(ss);
}

}  // namespace detail

inline std::size_t steps_per_epoch(std::size_t labeled_size, std::size_t batch_size) {
  return (labeled_size + batch_size - 1) / batch_size;
}

/// Fresh state: student built from the seed, teacher a clone of it.
inline TrainState init_state(const TrainConfig& cfg, std::size_t labeled_size) {
  cfg.validate();
  if (labeled_size == 0) throw std::invalid_argument("labeled dataset is empty");
  TrainState s{cfg, build_net(cfg.net, cfg.seed), ModelParams(cfg.net), {}, 0, {}};
  s.student.set_requires_grad(true);
  s.teacher = clone_params(s.student);
  s.teacher.set_requires_grad(false);
  s.ramp = RampSchedule{static_cast<std::int64_t>(cfg.epochs * steps_per_epoch(labeled_size, cfg.batch_size)),
                        cfg.w_max};
  return s;
}

/// One iteration of the joint loop: augmented supervised loss, perturbed
/// consistency loss against the (detached) teacher, Adam step on the
/// student, then the teacher update. `real` is ignored by the baselines.
inline LossTerms train_step(TrainState& state, const LabeledBatch& sim, const UnlabeledBatch& real,
                            StepRecord* record = nullptr) {
  const TrainConfig& cfg = state.config;
  if (sim.images.empty() || sim.images.size() != sim.masks.size())
    throw std::invalid_argument("train_step: labeled batch is empty or images/masks differ in count");
  const std::int64_t t = state.step;
  Tape tape;

  std::vector<Raster> aug_images;
  std::vector<BinaryMask> aug_masks;
  const std::uint64_t aug_seed = derive_seed(cfg.seed, detail::kAugStream, static_cast<std::uint64_t>(t));
  for (std::size_t i = 0; i < sim.images.size(); ++i) {
    AugmentSpec spec = cfg.augment;
    spec.rng_seed = derive_seed(aug_seed, i);
    auto [img, mask] = augment_labeled(*sim.images[i], *sim.masks[i], spec);
    aug_images.push_back(std::move(img));
    aug_masks.push_back(std::move(mask));
  }
  std::vector<const Raster*> img_ptrs;
  std::vector<const BinaryMask*> mask_ptrs;
  for (std::size_t i = 0; i < aug_images.size(); ++i) {
    img_ptrs.push_back(&aug_images[i]);
    mask_ptrs.push_back(&aug_masks[i]);
  }
  const auto supervised = composite_loss(forward(state.student, stack_images(img_ptrs), &tape), one_hot(mask_ptrs),
                                         &tape);

  LossTerms terms;
  terms.l_sl = supervised.total.item();
  Tensor total = supervised.total;
  if (uses_consistency(cfg.mode)) {
    if (real.images.empty()) throw std::invalid_argument("train_step: consistency modes need an unlabeled batch");
    const std::uint64_t p_seed = derive_seed(cfg.seed, detail::kPerturbStream, static_cast<std::uint64_t>(t));
    std::vector<Raster> perturbed;
    for (std::size_t i = 0; i < real.images.size(); ++i) {
      PerturbSpec spec = cfg.perturb;
      spec.rng_seed = derive_seed(p_seed, i);
      perturbed.push_back(perturb_unlabeled(*real.images[i], spec));
    }
    std::vector<const Raster*> perturbed_ptrs;
    for (const auto& p : perturbed) perturbed_ptrs.push_back(&p);
    const Tensor clean = stack_images(real.images);
    const Tensor noisy = stack_images(perturbed_ptrs);
    const bool teacher_clean = cfg.consistency_direction == ConsistencyDirection::teacher_clean;

    const ModelParams& labeler = cfg.mode == Mode::teacher_student ? state.teacher : state.student;
    Tensor pseudo = softmax_channel(forward(labeler, teacher_clean ? clean : noisy));
    if (cfg.harden_targets) pseudo = harden(pseudo);
    const auto consistency =
        consistency_loss(forward(state.student, teacher_clean ? noisy : clean, &tape), pseudo, &tape);
    terms.l_cl = consistency.total.item();
    terms.w = ramp_weight(t, state.ramp);
    total = add(total, scale(consistency.total, static_cast<float>(terms.w), &tape), &tape);
  }
  terms.total = total.item();
  if (!std::isfinite(terms.total) || !std::isfinite(terms.l_sl) || !std::isfinite(terms.l_cl))
    throw TrainingDiverged(t, "l_sl=" + std::to_string(terms.l_sl) + " l_cl=" + std::to_string(terms.l_cl));

  backward(tape, total);
  const double gnorm = detail::grad_norm(state.student);
  if (!std::isfinite(gnorm)) throw TrainingDiverged(t, "gradient norm is not finite");
  adam_step(state.student, cfg.adam(), state.adam);
  if (cfg.mode == Mode::teacher_student)
    ema_update(state.teacher, state.student, cfg.alpha);
  else
    assign_params(state.teacher, state.student);
  ++state.step;

  if (record) *record = StepRecord{t, terms.l_sl, terms.l_cl, terms.w, terms.total, gnorm};
  return terms;
}

struct TrainOptions {
  /// Labeled real split scored after every epoch; may be null.
  const Dataset* validation = nullptr;
  /// Continue from this state instead of a fresh one.
  const TrainState* resume = nullptr;
  /// When set, a resumable checkpoint is written here after every epoch.
  std::optional<std::filesystem::path> checkpoint_path;
  std::function<void(const EpochRecord&, const TrainState&)> on_epoch;
};

struct TrainResult {
  ModelParams student;
  ModelParams teacher;
  TrainHistory history;
  TrainState state;
};

void save_checkpoint(const std::filesystem::path& path, const TrainState& state);

/// Runs the configured mode to completion. `labeled` is the simulated set
/// (or, for upper_baseline, the labeled real training set); `unlabeled` is
/// the real training split and must carry no masks. An epoch is one pass
/// over `labeled`; the unlabeled stream cycles with its own shuffle.
inline TrainResult train(const TrainConfig& cfg, const Dataset& labeled, const Dataset* unlabeled,
                         const TrainOptions& opts = {}) {
  cfg.validate();
  if (!labeled.all_masks()) throw std::invalid_argument("train: labeled dataset '" + labeled.name() + "' lacks masks");
  const bool consistency = uses_consistency(cfg.mode);
  if (consistency) {
    if (unlabeled == nullptr || unlabeled->empty())
      throw std::invalid_argument("train: mode " + std::string(name(cfg.mode)) + " needs an unlabeled real dataset");
    if (unlabeled->any_mask())
      throw std::runtime_error("contamination: unlabeled dataset '" + unlabeled->name() + "' contains labels");
  }

  TrainState state = opts.resume ? *opts.resume : init_state(cfg, labeled.size());
  const std::size_t spe = steps_per_epoch(labeled.size(), cfg.batch_size);
  if (state.ramp.total_steps != static_cast<std::int64_t>(cfg.epochs * spe))
    throw std::invalid_argument("train: resumed state does not match epochs * steps_per_epoch");
  state.student.set_requires_grad(true);

  const std::size_t b = cfg.batch_size;
  const std::size_t n_sim = labeled.size();
  const std::size_t n_real = consistency ? unlabeled->size() : 0;
  std::vector<std::size_t> real_order;
  std::uint64_t real_cycle = UINT64_MAX;

  TrainHistory history;
  for (std::size_t epoch = static_cast<std::size_t>(state.step) / spe; epoch < cfg.epochs; ++epoch) {
    const auto sim_order = detail::permutation(n_sim, derive_seed(cfg.seed, detail::kSimOrderStream, epoch));
    for (std::size_t k = static_cast<std::size_t>(state.step) % spe; k < spe; ++k) {
      LabeledBatch lb;
      for (std::size_t i = k * b; i < std::min(n_sim, (k + 1) * b); ++i) {
        lb.images.push_back(&labeled.image(sim_order[i]));
        lb.masks.push_back(&labeled.mask(sim_order[i]));
      }
      UnlabeledBatch ub;
      if (consistency) {
        for (std::size_t i = 0; i < b; ++i) {
          const std::uint64_t q = static_cast<std::uint64_t>(state.step) * b + i;
          if (q / n_real != real_cycle) {
            real_cycle = q / n_real;
            real_order = detail::permutation(n_real, derive_seed(cfg.seed, detail::kRealOrderStream, real_cycle));
          }
          ub.images.push_back(&unlabeled->image(real_order[q % n_real]));
        }
      }
      StepRecord rec;
      train_step(state, lb, ub, &rec);
      history.steps.push_back(rec);
    }

    EpochRecord er{epoch, std::nullopt, std::nullopt};
    if (opts.validation) {
      er.student_dice = evaluate(state.student, *opts.validation).mean_dice;
      er.teacher_dice = cfg.mode == Mode::teacher_student ? evaluate(state.teacher, *opts.validation).mean_dice
                                                          : er.student_dice;
    }
    history.epochs.push_back(er);
    if (opts.checkpoint_path) save_checkpoint(*opts.checkpoint_path, state);
    if (opts.on_epoch) opts.on_epoch(er, state);
  }

  state.student.zero_grad();
  return TrainResult{clone_params(state.student), clone_params(state.teacher), std::move(history), std::move(state)};
}

// ---------------------------------------------------------------------------
// Checkpoints and history files.

namespace detail {

inline Tensor step_tensor(std::int64_t step) {
  const auto s = static_cast<std::uint64_t>(step);
  return Tensor({2}, {static_cast<float>(s & 0xffffff), static_cast<float>(s >> 24)});
}

inline std::int64_t step_value(const Tensor& t) {
  if (t.dims() != Shape{2}) throw std::runtime_error("checkpoint: malformed meta.step");
  return static_cast<std::int64_t>(static_cast<std::uint64_t>(t[0]) | (static_cast<std::uint64_t>(t[1]) << 24));
}

}  // namespace detail

/// Stores student, teacher, Adam moments and the step counter as one
/// TSUDA1 file with prefixed tensor names.
inline void save_checkpoint(const std::filesystem::path& path, const TrainState& state) {
  NamedTensors t;
  append_params(t, state.student, "student.");
  append_params(t, state.teacher, "teacher.");
  for (std::size_t i = 0; i < state.adam.m.size(); ++i) {
    const auto& dims = state.student.tensor(i).dims();
    t.emplace_back("adam.m." + state.student.name(i), Tensor(dims, state.adam.m[i]));
    t.emplace_back("adam.v." + state.student.name(i), Tensor(dims, state.adam.v[i]));
  }
  t.emplace_back("meta.step", detail::step_tensor(state.step));
  t.emplace_back("meta.adam_step", detail::step_tensor(state.adam.step));
  write_tensors(path, t);
}

/// Restores a state written by save_checkpoint for the given config and
/// labeled-set size. Fails if the stored network does not match cfg.net.
inline TrainState load_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg,
                                  std::size_t labeled_size) {
  const NamedTensors t = read_tensors(path);
  TrainState s = init_state(cfg, labeled_size);
  s.student = params_from(t, cfg.net, "student.", path.string());
  s.student.set_requires_grad(true);
  s.teacher = params_from(t, cfg.net, "teacher.", path.string());
  bool have_step = false;
  for (const auto& [n, v] : t) {
    if (n == "meta.step") {
      s.step = detail::step_value(v);
      have_step = true;
    } else if (n == "meta.adam_step") {
      s.adam.step = detail::step_value(v);
    }
  }
  if (!have_step) throw std::runtime_error("checkpoint '" + path.string() + "' has no meta.step");
  if (s.step > s.ramp.total_steps)
    throw std::runtime_error("checkpoint '" + path.string() + "' is at step " + std::to_string(s.step) +
                             ", beyond the configured " + std::to_string(s.ramp.total_steps));
  if (s.adam.step > 0) {
    for (std::size_t i = 0; i < s.student.size(); ++i) {
      const std::string& pn = s.student.name(i);
      auto find = [&](const std::string& key) -> const Tensor& {
        for (const auto& [n, v] : t)
          if (n == key) return v;
        throw std::runtime_error("checkpoint '" + path.string() + "' is missing '" + key + "'");
      };
      const Tensor& m = find("adam.m." + pn);
      const Tensor& v = find("adam.v." + pn);
      if (m.dims() != s.student.tensor(i).dims() || v.dims() != s.student.tensor(i).dims())
        throw std::runtime_error("checkpoint '" + path.string() + "': optimizer moments for '" + pn +
                                 "' have wrong dims");
      s.adam.m.emplace_back(m.data().begin(), m.data().end());
      s.adam.v.emplace_back(v.data().begin(), v.data().end());
    }
  }
  return s;
}

inline std::string format_loss(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline void write_step_history(const TrainHistory& h, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << "step,l_sl,l_cl,w,total,grad_norm\n";
  for (const auto& r : h.steps)
    out << r.step << ',' << format_loss(r.l_sl) << ',' << format_loss(r.l_cl) << ',' << format_loss(r.w) << ','
        << format_loss(r.total) << ',' << format_loss(r.grad_norm) << '\n';
}

inline void write_epoch_history(const TrainHistory& h, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << "epoch,student_dice,teacher_dice\n";
  auto cell = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  for (const auto& r : h.epochs) out << r.epoch << ',' << cell(r.student_dice) << ',' << cell(r.teacher_dice) << '\n';
}

/// Sample variance of the last `window` defined values of a series.
inline std::optional<double> tail_variance(const std::vector<std::optional<double>>& series, std::size_t window) {
  std::vector<double> xs;
  for (auto it = series.rbegin(); it != series.rend() && xs.size() < window; ++it)
    if (*it) xs.push_back(**it);
  if (xs.size() < 2) return std::nullopt;
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  double ss = 0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return ss / static_cast<double>(xs.size() - 1);
}

}  // namespace tsuda
