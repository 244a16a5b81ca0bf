#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tsuda/batch.hpp"
#include "tsuda/net.hpp"
#include "tsuda/ops.hpp"
#include "tsuda/synthdata.hpp"

namespace tsuda {

/// Per-image dice under the exclusion protocol: both-empty pairs carry no
/// score; an empty ground truth with any predicted pixel scores 0.
struct DiceRecord {
  std::string id;
  bool gt_empty = false;
  bool pred_empty = false;
  std::optional<double> dice;
  std::size_t intersection = 0;
  std::size_t pred_area = 0;
  std::size_t gt_area = 0;
  int instrument_count = 0;
  bool has_counterexample = false;

  bool included() const { return dice.has_value(); }
};

inline DiceRecord dice_image(const BinaryMask& pred, const BinaryMask& gt) {
  if (!pred.same_dims(gt))
    throw std::invalid_argument("dice_image: prediction is " + std::to_string(pred.height) + "x" +
                                std::to_string(pred.width) + " but ground truth is " + std::to_string(gt.height) +
                                "x" + std::to_string(gt.width));
  DiceRecord r;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred.values[i] != 0, g = gt.values[i] != 0;
    r.pred_area += p;
    r.gt_area += g;
    r.intersection += p && g;
  }
  r.gt_empty = r.gt_area == 0;
  r.pred_empty = r.pred_area == 0;
  if (!(r.gt_empty && r.pred_empty))
    r.dice = 2.0 * static_cast<double>(r.intersection) / static_cast<double>(r.pred_area + r.gt_area);
  return r;
}

struct DiceStats {
  std::size_t included = 0;
  std::size_t excluded = 0;
  std::optional<double> mean;
};

struct EvalReport {
  std::vector<DiceRecord> records;
  std::optional<double> mean_dice;
  std::size_t included = 0;
  std::size_t excluded = 0;
  /// Pixels pooled over all images; reported for comparison only.
  std::optional<double> pooled_dice;
  std::map<int, DiceStats> by_instrument_count;
  std::map<bool, DiceStats> by_counterexample;
  std::uint64_t run_seed = 0;
};

namespace detail {

inline void accumulate(DiceStats& s, const DiceRecord& r, std::map<const DiceStats*, double>& sums) {
  if (r.included()) {
    ++s.included;
    sums[&s] += *r.dice;
  } else {
    ++s.excluded;
  }
}

}  // namespace detail

/// Aggregates records. Sums run in sample-id order, so the result does not
/// depend on the order records were produced in.
inline EvalReport summarize(std::vector<DiceRecord> records, std::uint64_t run_seed = 0) {
  std::sort(records.begin(), records.end(), [](const DiceRecord& a, const DiceRecord& b) { return a.id < b.id; });
  EvalReport rep;
  rep.run_seed = run_seed;
  std::map<const DiceStats*, double> sums;
  double total = 0;
  std::size_t inter = 0, areas = 0;
  for (const auto& r : records) {
    if (r.included()) {
      ++rep.included;
      total += *r.dice;
    } else {
      ++rep.excluded;
    }
    inter += r.intersection;
    areas += r.pred_area + r.gt_area;
    detail::accumulate(rep.by_instrument_count[r.instrument_count], r, sums);
    detail::accumulate(rep.by_counterexample[r.has_counterexample], r, sums);
  }
  if (rep.included > 0) rep.mean_dice = total / static_cast<double>(rep.included);
  if (areas > 0) rep.pooled_dice = 2.0 * static_cast<double>(inter) / static_cast<double>(areas);
  for (auto& [_, s] : rep.by_instrument_count)
    if (s.included) s.mean = sums[&s] / static_cast<double>(s.included);
  for (auto& [_, s] : rep.by_counterexample)
    if (s.included) s.mean = sums[&s] / static_cast<double>(s.included);
  rep.records = std::move(records);
  return rep;
}

/// Per-pixel argmax of softmax(logits) for one image; ties go to background.
inline BinaryMask predict_mask(const ModelParams& model, const Raster& image) {
  const Tensor logits = forward(model, stack_images({&image}));
  return argmax_masks(softmax_channel(logits)).front();
}

inline std::vector<BinaryMask> predict_masks(const ModelParams& model, const std::vector<const Raster*>& images,
                                             std::size_t batch = 16) {
  std::vector<BinaryMask> out;
  out.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); i += batch) {
    std::vector<const Raster*> chunk(images.begin() + static_cast<long>(i),
                                     images.begin() + static_cast<long>(std::min(images.size(), i + batch)));
    auto masks = argmax_masks(softmax_channel(forward(model, stack_images(chunk))));
    for (auto& m : masks) out.push_back(std::move(m));
  }
  return out;
}

/// Scores `model` on every sample of a labeled dataset.
inline EvalReport evaluate(const ModelParams& model, const Dataset& ds, std::uint64_t run_seed = 0) {
  std::vector<const Raster*> images;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (!ds.has_mask(i))
      throw std::invalid_argument("evaluate: sample " + ds.meta(i).id + " of '" + ds.name() + "' has no mask");
    images.push_back(&ds.image(i));
  }
  const auto preds = predict_masks(model, images);
  std::vector<DiceRecord> records;
  records.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    DiceRecord r = dice_image(preds[i], ds.mask(i));
    r.id = ds.meta(i).id;
    r.instrument_count = ds.meta(i).instrument_count;
    r.has_counterexample = ds.meta(i).has_counterexample;
    records.push_back(std::move(r));
  }
  return summarize(std::move(records), run_seed);
}

struct RunSummary {
  std::optional<double> mean;
  double stddev = 0;
  std::size_t runs = 0;
  std::size_t runs_with_score = 0;
};

/// Mean and sample standard deviation of per-run mean dice. Runs with no
/// included images are counted but contribute no score.
inline RunSummary multi_run_mean(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("multi_run_mean: need at least one report");
  RunSummary s;
  s.runs = reports.size();
  std::vector<double> means;
  for (const auto& r : reports)
    if (r.mean_dice) means.push_back(*r.mean_dice);
  s.runs_with_score = means.size();
  if (means.empty()) return s;
  double sum = 0;
  for (double m : means) sum += m;
  const double mean = sum / static_cast<double>(means.size());
  s.mean = mean;
  if (means.size() > 1) {
    double ss = 0;
    for (double m : means) ss += (m - mean) * (m - mean);
    s.stddev = std::sqrt(ss / static_cast<double>(means.size() - 1));
  }
  return s;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline void write_eval_csv(const EvalReport& rep, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << "id,gt_empty,pred_empty,dice,instrument_count,has_counterexample\n";
  for (const auto& r : rep.records) {
    out << r.id << ',' << (r.gt_empty ? 1 : 0) << ',' << (r.pred_empty ? 1 : 0) << ','
        << (r.dice ? format_double(*r.dice) : std::string()) << ',' << r.instrument_count << ','
        << (r.has_counterexample ? 1 : 0) << '\n';
  }
}

inline nlohmann::json to_json(const DiceStats& s) {
  nlohmann::json j;
  j["included"] = s.included;
  j["excluded"] = s.excluded;
  j["mean_dice"] = s.mean ? nlohmann::json(*s.mean) : nlohmann::json(nullptr);
  return j;
}

inline nlohmann::json summary_json(const EvalReport& rep) {
  nlohmann::json j;
  j["mean_dice"] = rep.mean_dice ? nlohmann::json(*rep.mean_dice) : nlohmann::json(nullptr);
  j["included"] = rep.included;
  j["excluded"] = rep.excluded;
  j["images"] = rep.records.size();
  j["pooled_dice"] = rep.pooled_dice ? nlohmann::json(*rep.pooled_dice) : nlohmann::json(nullptr);
  j["run_seed"] = rep.run_seed;
  for (const auto& [k, s] : rep.by_instrument_count) j["by_instrument_count"][std::to_string(k)] = to_json(s);
  for (const auto& [k, s] : rep.by_counterexample) j["by_counterexample"][k ? "1" : "0"] = to_json(s);
  return j;
}

inline void write_summary_json(const EvalReport& rep, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << summary_json(rep).dump(2) << '\n';
}

}  // namespace tsuda
