#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "tsuda/experiment.hpp"

namespace {

void log_line(const std::string& msg) { std::cerr << "tsuda: " << msg << '\n'; }

// One-line, machine-parsable failure: "error: <kind>: <message>".
int fail(const char* kind, const std::string& msg) {
  std::string flat = msg;
  for (auto& ch : flat)
    if (ch == '\n') ch = ' ';
  std::cerr << "error: " << kind << ": " << flat << '\n';
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Teacher-student sim-to-real segmentation experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out;
  std::string mode_name = "teacher_student";
  std::uint64_t seed = 1;
  bool force = false;
  std::string checkpoint;
  std::string dataset;

  auto* gen = app.add_subcommand("generate", "Write the benchmark datasets");
  auto* train = app.add_subcommand("train", "Train one mode for one seed");
  auto* eval = app.add_subcommand("evaluate", "Score a checkpoint on a labeled dataset");
  auto* compare = app.add_subcommand("compare", "Run every mode for every seed and tabulate");

  for (auto* sub : {gen, train, eval, compare}) {
    sub->add_option("--config", config_path, "Flat key = value config file");
    sub->add_option("--out", out, "Output directory");
    sub->add_flag("--force", force, "Overwrite a non-empty output directory");
  }
  train->add_option("--mode", mode_name, "teacher_student, student_as_teacher, lower_baseline or upper_baseline");
  train->add_option("--seed", seed, "Run seed");
  eval->add_option("--checkpoint", checkpoint, "Model file (TSUDA1)")->required();
  eval->add_option("--dataset", dataset, "Labeled dataset directory (default: <data_dir>/real_eval)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail("usage", e.what());
  }

  try {
    tsuda::ExperimentConfig cfg = config_path.empty() ? tsuda::parse_config("") : tsuda::load_config(config_path);
    if (gen->parsed()) {
      if (!out.empty()) cfg.data_dir = out;
      tsuda::cmd_generate(cfg, force, log_line);
    } else if (train->parsed()) {
      const auto mode = tsuda::parse_mode(mode_name);
      const std::filesystem::path dir = out.empty() ? cfg.out_dir / ("train-" + tsuda::detail::utc_timestamp()) : std::filesystem::path(out);
      tsuda::cmd_train(cfg, mode, seed, dir, force, log_line);
      std::cout << (dir / std::string(tsuda::name(mode)) / ("seed" + std::to_string(seed))).string() << '\n';
    } else if (eval->parsed()) {
      const std::filesystem::path ds = dataset.empty() ? cfg.data_dir / "real_eval" : std::filesystem::path(dataset);
      const std::filesystem::path dir = out.empty() ? std::filesystem::path(".") : std::filesystem::path(out);
      const auto rep = tsuda::cmd_evaluate(cfg, checkpoint, ds, dir);
      std::cout << "mean_dice " << (rep.mean_dice ? tsuda::format_double(*rep.mean_dice) : "undefined")
                << " included " << rep.included << " excluded " << rep.excluded << '\n';
    } else if (compare->parsed()) {
      const auto result = tsuda::cmd_compare(cfg, out, force, log_line);
      std::cout << tsuda::detail::read_text(result.dir / "comparison.txt");
      std::cout << result.dir.string() << '\n';
    }
  } catch (const tsuda::ConfigError& e) {
    return fail("config", e.what());
  } catch (const tsuda::RunError& e) {
    return fail("run", e.what());
  } catch (const std::exception& e) {
    return fail("runtime", e.what());
  }
  return 0;
}
