#pragma once

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tsuda/checkpoint.hpp"
#include "tsuda/config.hpp"
#include "tsuda/metrics.hpp"
#include "tsuda/synthdata.hpp"
#include "tsuda/trainer.hpp"

namespace tsuda {

namespace fs = std::filesystem;

using Logger = std::function<void(const std::string&)>;

/// Error carrying the (mode, seed) of a failed sub-run.
class RunError : public std::runtime_error {
 public:
  RunError(Mode mode, std::uint64_t seed, const std::string& what)
      : std::runtime_error("run " + std::string(name(mode)) + " seed " + std::to_string(seed) + " failed: " + what),
        mode_(mode),
        seed_(seed) {}
  Mode mode() const { return mode_; }
  std::uint64_t seed() const { return seed_; }

 private:
  Mode mode_;
  std::uint64_t seed_;
};

struct Datasets {
  Dataset sim_train;
  Dataset real_train;
  Dataset real_train_labeled;
  Dataset real_val;
  Dataset real_eval;
};

inline constexpr const char* kDatasetNames[] = {"sim_train", "real_train", "real_train_labeled", "real_val",
                                                "real_eval"};

namespace detail {

inline constexpr std::uint64_t kEmptyVariantStream = 0x656d70;

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline bool non_empty_dir(const fs::path& p) { return fs::is_directory(p) && !fs::is_empty(p); }

/// Config lines that determine dataset contents.
inline std::string data_stamp(const ExperimentConfig& cfg) {
  std::istringstream in(resolved_config(cfg));
  std::string out;
  for (std::string line; std::getline(in, line);) {
    const std::string key = line.substr(0, line.find(' '));
    if (key.rfind("n_", 0) == 0 || key.rfind("sim.", 0) == 0 || key.rfind("real.", 0) == 0 || key == "data_seed" ||
        key == "height" || key == "width")
      out += line + "\n";
  }
  return out;
}

inline std::uint64_t dataset_seed(const ExperimentConfig& cfg, std::size_t which) {
  return derive_seed(cfg.data_seed, 0x64617461, which);
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y%m%d-%H%M%S");
  return os.str();
}

inline std::string cell(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

}  // namespace detail

/// Writes the five benchmark splits under cfg.data_dir. Refuses to touch a
/// non-empty directory unless `force`.
inline void cmd_generate(const ExperimentConfig& cfg, bool force, const Logger& log = {}) {
  cfg.validate();
  const fs::path dir = cfg.data_dir;
  if (detail::non_empty_dir(dir)) {
    if (!force) throw std::runtime_error("output directory '" + dir.string() + "' is not empty (use --force)");
    for (const char* n : kDatasetNames) fs::remove_all(dir / n);
    fs::remove(dir / "dataset.cfg");
  }
  fs::create_directories(dir);
  struct Spec {
    const char* name;
    std::size_t n;
    Domain domain;
    const char* split;
    const DomainParams* params;
  };
  const Spec specs[] = {{"sim_train", cfg.n_sim_train, Domain::sim, "train", &cfg.sim},
                        {"real_train", cfg.n_real_train, Domain::real, "train", &cfg.real},
                        {"real_train_labeled", cfg.n_real_train_labeled, Domain::real, "train_labeled", &cfg.real},
                        {"real_val", cfg.n_real_val, Domain::real, "val", &cfg.real},
                        {"real_eval", cfg.n_real_eval, Domain::real, "eval", &cfg.real}};
  for (std::size_t i = 0; i < std::size(specs); ++i) {
    const auto& s = specs[i];
    gen_dataset(dir / s.name, s.n, s.domain, s.split, detail::dataset_seed(cfg, i), *s.params);
    if (log) log("generated " + std::string(s.name) + " (" + std::to_string(s.n) + " samples)");
  }
  detail::write_text(dir / "dataset.cfg", detail::data_stamp(cfg));
}

/// Generates the data directory if it is absent; otherwise checks that it
/// was produced from the same data settings.
inline void ensure_datasets(const ExperimentConfig& cfg, const Logger& log = {}) {
  const fs::path stamp = cfg.data_dir / "dataset.cfg";
  if (!fs::exists(stamp)) {
    cmd_generate(cfg, false, log);
    return;
  }
  if (detail::read_text(stamp) != detail::data_stamp(cfg))
    throw std::runtime_error("data directory '" + cfg.data_dir.string() +
                             "' was generated with different settings (rerun generate with --force)");
}

inline Datasets load_datasets(const fs::path& dir) {
  return Datasets{load_dataset(dir / "sim_train"), load_dataset(dir / "real_train"),
                  load_dataset(dir / "real_train_labeled"), load_dataset(dir / "real_val"),
                  load_dataset(dir / "real_eval")};
}

/// Real-domain evaluation set with a given fraction of instrument-free
/// frames: `n` instrument frames followed by enough empty frames to reach
/// `rate`. The instrument frames are shared by every rate.
inline Dataset empty_rate_variant(const DomainParams& real, std::size_t n, std::uint64_t seed, double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("empty_rate_variant: rate must lie in [0, 1)");
  DomainParams full = real, empty = real;
  full.empty_rate = 0.0;
  empty.empty_rate = 1.0;
  Dataset base = make_dataset("real_eval", n, Domain::real, "eval", seed, full);
  const auto extra = static_cast<std::size_t>(std::llround(static_cast<double>(n) * rate / (1.0 - rate)));
  std::vector<Sample> samples;
  for (std::size_t i = 0; i < n; ++i) samples.push_back(base.sample(i));
  for (std::size_t j = 0; j < extra; ++j) {
    Sample s = generate_sample(Domain::real, derive_seed(seed, detail::kEmptyVariantStream, j), empty);
    s.meta.id = sample_id(n + j);
    s.meta.split = "eval";
    samples.push_back(std::move(s));
  }
  char label[32];
  std::snprintf(label, sizeof label, "real_eval_empty%.2f", rate);
  return Dataset(label, std::move(samples));
}

struct RunOutcome {
  Mode mode{};
  std::uint64_t seed = 0;
  TrainResult result;
  EvalReport teacher_eval;
  EvalReport student_eval;
};

inline TrainConfig run_config(const ExperimentConfig& cfg, Mode mode, std::uint64_t seed) {
  TrainConfig tc = cfg.train;
  tc.mode = mode;
  tc.seed = seed;
  return tc;
}

/// Trains one (mode, seed) and writes checkpoints and history into run_dir.
inline TrainResult run_train(const ExperimentConfig& cfg, const Datasets& data, Mode mode, std::uint64_t seed,
                             const fs::path& run_dir, const Logger& log = {}) {
  const TrainConfig tc = run_config(cfg, mode, seed);
  fs::create_directories(run_dir / "checkpoints");
  const Dataset& labeled = mode == Mode::upper_baseline ? data.real_train_labeled : data.sim_train;
  TrainOptions opts;
  opts.validation = &data.real_val;
  opts.checkpoint_path = run_dir / "checkpoints" / "state.tsuda";
  opts.on_epoch = [&](const EpochRecord& e, const TrainState& s) {
    if (log)
      log(std::string(name(mode)) + " seed " + std::to_string(seed) + " epoch " + std::to_string(e.epoch + 1) + "/" +
          std::to_string(tc.epochs) + " step " + std::to_string(s.step) + " teacher_dice " +
          detail::cell(e.teacher_dice));
  };
  TrainResult r;
  try {
    r = train(tc, labeled, mode == Mode::upper_baseline ? nullptr : &data.real_train, opts);
  } catch (const std::exception& e) {
    throw RunError(mode, seed, e.what());
  }
  save_params(run_dir / "checkpoints" / "teacher.tsuda", r.teacher);
  save_params(run_dir / "checkpoints" / "student.tsuda", r.student);
  write_step_history(r.history, run_dir / "history.csv");
  write_epoch_history(r.history, run_dir / "epochs.csv");
  return r;
}

/// Scores a model on a labeled dataset and writes eval.csv / summary.json.
inline EvalReport run_evaluate(const ModelParams& model, const Dataset& ds, std::uint64_t seed, const fs::path& dir,
                               const std::optional<EvalReport>& student = std::nullopt) {
  EvalReport rep = evaluate(model, ds, seed);
  fs::create_directories(dir);
  write_eval_csv(rep, dir / "eval.csv");
  nlohmann::json j = summary_json(rep);
  j["dataset"] = ds.name();
  if (student) j["student"] = summary_json(*student);
  std::ofstream out(dir / "summary.json", std::ios::binary);
  out << j.dump(2) << '\n';
  return rep;
}

inline void cmd_train(const ExperimentConfig& cfg, Mode mode, std::uint64_t seed, const fs::path& out, bool force,
                      const Logger& log = {}) {
  cfg.validate();
  const fs::path run_dir = out / std::string(name(mode)) / ("seed" + std::to_string(seed));
  if (detail::non_empty_dir(run_dir) && !force)
    throw std::runtime_error("output directory '" + run_dir.string() + "' is not empty (use --force)");
  ensure_datasets(cfg, log);
  const Datasets data = load_datasets(cfg.data_dir);
  fs::create_directories(out);
  detail::write_text(out / "config.txt", cfg.source_text);
  run_train(cfg, data, mode, seed, run_dir, log);
}

inline EvalReport cmd_evaluate(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& dataset_dir,
                               const fs::path& out) {
  cfg.validate();
  const ModelParams model = load_params(checkpoint, cfg.train.net);
  const Dataset ds = load_dataset(dataset_dir);
  if (!ds.all_masks())
    throw std::runtime_error("dataset '" + dataset_dir.string() + "' has unlabeled samples; evaluate needs masks");
  return run_evaluate(model, ds, 0, out);
}

struct ComparisonRow {
  Mode mode{};
  RunSummary summary;
  std::vector<std::optional<double>> per_seed;
};

struct StabilityRow {
  std::uint64_t seed = 0;
  std::optional<double> teacher_var;
  std::optional<double> student_var;
  bool teacher_not_worse() const { return teacher_var && student_var && *teacher_var <= *student_var; }
};

struct EmptyFrameRow {
  double rate = 0;
  std::size_t images = 0;
  std::size_t included = 0;
  std::optional<double> mean_dice;
};

struct ComparisonResult {
  fs::path dir;
  std::vector<ComparisonRow> rows;
  std::vector<StabilityRow> stability;
  std::vector<EmptyFrameRow> empty_frames;
  std::vector<RunOutcome> runs;

  const ComparisonRow& row(Mode m) const {
    for (const auto& r : rows)
      if (r.mode == m) return r;
    throw std::out_of_range("no comparison row for mode " + std::string(name(m)));
  }
};

inline constexpr double kEmptyFrameRates[] = {0.0, 0.2, 0.4};
inline constexpr std::size_t kStabilityWindow = 10;

namespace detail {

inline void write_comparison(const ComparisonResult& c, const std::vector<std::uint64_t>& seeds) {
  std::ofstream csv(c.dir / "comparison.csv", std::ios::binary);
  csv << "mode,mean_dice,std_dice,runs";
  for (auto s : seeds) csv << ",seed" << s;
  csv << '\n';
  std::ofstream txt(c.dir / "comparison.txt", std::ios::binary);
  txt << std::left << std::setw(20) << "mode" << std::right << std::setw(10) << "mean" << std::setw(10) << "std";
  for (auto s : seeds) txt << std::setw(10) << ("seed" + std::to_string(s));
  txt << '\n';
  for (const auto& r : c.rows) {
    csv << name(r.mode) << ',' << cell(r.summary.mean) << ',' << format_double(r.summary.stddev) << ','
        << r.summary.runs;
    txt << std::left << std::setw(20) << name(r.mode) << std::right << std::setw(10)
        << (r.summary.mean ? format_double(*r.summary.mean).substr(0, 8) : "n/a") << std::setw(10)
        << format_double(r.summary.stddev).substr(0, 8);
    for (const auto& v : r.per_seed) {
      csv << ',' << cell(v);
      txt << std::setw(10) << (v ? format_double(*v).substr(0, 8) : "n/a");
    }
    csv << '\n';
    txt << '\n';
  }
}

inline void write_curves(const ComparisonResult& c) {
  std::ofstream out(c.dir / "curves.csv", std::ios::binary);
  out << "mode,seed,epoch,student_dice,teacher_dice\n";
  for (const auto& run : c.runs)
    for (const auto& e : run.result.history.epochs)
      out << name(run.mode) << ',' << run.seed << ',' << e.epoch << ',' << cell(e.student_dice) << ','
          << cell(e.teacher_dice) << '\n';
}

inline void write_stability(const ComparisonResult& c) {
  std::ofstream out(c.dir / "stability.csv", std::ios::binary);
  out << "seed,teacher_var,student_var,teacher_le_student\n";
  for (const auto& s : c.stability)
    out << s.seed << ',' << (s.teacher_var ? format_loss(*s.teacher_var) : "") << ','
        << (s.student_var ? format_loss(*s.student_var) : "") << ',' << (s.teacher_not_worse() ? 1 : 0) << '\n';
}

inline void write_empty_frames(const ComparisonResult& c) {
  std::ofstream out(c.dir / "empty_frames.csv", std::ios::binary);
  out << "empty_rate,images,included,mean_dice\n";
  for (const auto& e : c.empty_frames)
    out << format_double(e.rate) << ',' << e.images << ',' << e.included << ',' << cell(e.mean_dice) << '\n';
}

}  // namespace detail

/// Every mode for every seed, each evaluated on real_eval (teacher weights),
/// plus the stability statistic and the empty-frame sweep on the first
/// teacher_student model. `out` empty means cfg.out_dir/<UTC timestamp>.
inline ComparisonResult cmd_compare(const ExperimentConfig& cfg, const fs::path& out, bool force,
                                    const Logger& log = {}) {
  cfg.validate();
  ComparisonResult c;
  c.dir = out.empty() ? cfg.out_dir / detail::utc_timestamp() : out;
  if (detail::non_empty_dir(c.dir)) {
    if (!force) throw std::runtime_error("output directory '" + c.dir.string() + "' is not empty (use --force)");
    fs::remove_all(c.dir);
  }
  fs::create_directories(c.dir);
  detail::write_text(c.dir / "config.txt", cfg.source_text);
  detail::write_text(c.dir / "config.resolved.txt", resolved_config(cfg));

  ensure_datasets(cfg, log);
  const Datasets data = load_datasets(cfg.data_dir);

  for (Mode mode : kModes) {
    ComparisonRow row{mode, {}, {}};
    std::vector<EvalReport> reports;
    for (std::uint64_t seed : cfg.seeds) {
      const fs::path run_dir = c.dir / std::string(name(mode)) / ("seed" + std::to_string(seed));
      RunOutcome o{mode, seed, run_train(cfg, data, mode, seed, run_dir, log), {}, {}};
      try {
        o.student_eval = evaluate(o.result.student, data.real_eval, seed);
        o.teacher_eval = run_evaluate(o.result.teacher, data.real_eval, seed, run_dir, o.student_eval);
      } catch (const std::exception& e) {
        throw RunError(mode, seed, e.what());
      }
      if (log)
        log(std::string(name(mode)) + " seed " + std::to_string(seed) + " real_eval dice " +
            detail::cell(o.teacher_eval.mean_dice));
      row.per_seed.push_back(o.teacher_eval.mean_dice);
      reports.push_back(o.teacher_eval);
      o.result.state = TrainState{};
      c.runs.push_back(std::move(o));
    }
    row.summary = multi_run_mean(reports);
    c.rows.push_back(std::move(row));
  }

  const RunOutcome* reference = nullptr;
  for (const auto& run : c.runs) {
    if (run.mode != Mode::teacher_student) continue;
    if (!reference) reference = &run;
    std::vector<std::optional<double>> teacher, student;
    for (const auto& e : run.result.history.epochs) {
      teacher.push_back(e.teacher_dice);
      student.push_back(e.student_dice);
    }
    c.stability.push_back(
        {run.seed, tail_variance(teacher, kStabilityWindow), tail_variance(student, kStabilityWindow)});
  }
  if (reference) {
    for (double rate : kEmptyFrameRates) {
      const Dataset ds = empty_rate_variant(cfg.real, cfg.n_real_eval, detail::dataset_seed(cfg, 4), rate);
      const EvalReport rep = evaluate(reference->result.teacher, ds, reference->seed);
      c.empty_frames.push_back({rate, ds.size(), rep.included, rep.mean_dice});
    }
  }

  detail::write_comparison(c, cfg.seeds);
  detail::write_curves(c);
  detail::write_stability(c);
  detail::write_empty_frames(c);
  return c;
}

}  // namespace tsuda
