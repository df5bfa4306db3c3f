#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>

#include "brewlab/analysis.hpp"
#include "brewlab/checkpoint.hpp"
#include "brewlab/config.hpp"
#include "brewlab/errors.hpp"
#include "brewlab/gradcheck.hpp"
#include "brewlab/pipeline.hpp"
#include "brewlab/report.hpp"

namespace fs = std::filesystem;
using namespace brewlab;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
  std::string out;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "Experiment config file");
  cmd->add_option("--seed", c.seed, "Experiment seed (overrides experiment.seed)");
  cmd->add_option("--threads", c.threads, "Worker threads; results do not depend on it")->check(CLI::PositiveNumber);
  cmd->add_option("--out", c.out, "Output directory (overrides output.dir)");
  cmd->add_option("--set", c.overrides, "Field override, e.g. --set brew.steps=50");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig config = c.config_path.empty() ? ExperimentConfig{} : load_config(c.config_path);
  if (c.seed) config.seed = *c.seed;
  if (!c.out.empty()) config.output_dir = c.out;
  for (const auto& o : c.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError(o + ": expected section.key=value");
    set_config_field(config, o.substr(0, eq), o.substr(eq + 1));
  }
  config.validate();
  fs::create_directories(config.output_dir);
  write_text((fs::path(config.output_dir) / "config.ini").string(), echo_config(config));
  return config;
}

std::string sub(const ExperimentConfig& c, const char* name) { return (fs::path(c.output_dir) / name).string(); }

/// Progress goes to stderr; it never reaches the reports.
class Stopwatch {
 public:
  explicit Stopwatch(std::string what) : what_(std::move(what)), start_(std::chrono::steady_clock::now()) {}
  ~Stopwatch() {
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    std::fprintf(stderr, "%s: %.1fs\n", what_.c_str(), s);
  }

 private:
  std::string what_;
  std::chrono::steady_clock::time_point start_;
};

void print_report(const char* label, const EvalReport& r) {
  std::printf("%-9s avg success %6.2f%% (+- %.2f)  validation accuracy %.4f  diverged %zu\n", label,
              100.0 * r.avg_success, 100.0 * r.standard_error, r.mean_validation_accuracy, r.diverged_runs);
}

int cmd_pretrain(const Common& c) {
  const auto config = resolve(c);
  const Workspace ws = load_workspace(config);
  Stopwatch t("pretrain");
  const auto ensemble = run_pretrain(config, ws, c.threads);
  save_ensemble(sub(config, "pretrained"), ensemble);
  for (std::size_t k = 0; k < ensemble.size(); ++k) {
    std::printf("model %zu: validation accuracy %.4f\n", k, accuracy(ensemble[k], ws.validation));
  }
  return 0;
}

int cmd_brew(const Common& c, std::string checkpoints) {
  const auto config = resolve(c);
  const Workspace ws = load_workspace(config);
  if (checkpoints.empty()) checkpoints = sub(config, "pretrained");
  const auto ensemble = load_ensemble(checkpoints);
  Stopwatch t("brew");
  const auto packages = run_brew(config, ws, ensemble, c.threads);
  save_packages(sub(config, "packages"), packages, echo_config(config));
  for (std::size_t i = 0; i < packages.size(); ++i) {
    const auto& p = packages[i];
    std::printf("case %zu: target class %d -> %d, %zu poisons, B %.4f -> %.4f (restart %zu)\n", i,
                p.poison_case.target_class, p.poison_case.adversarial_class, p.poison_case.poison_count(),
                p.chosen_initial_loss(), p.chosen_final_loss(), p.chosen);
  }
  return 0;
}

int cmd_train_victim(const Common& c, const std::string& package_dir, std::uint64_t victim_seed_value) {
  const auto config = resolve(c);
  const Workspace ws = load_workspace(config);
  const PoisonPackage pkg = load_package(package_dir, ws.train, ws.validation);
  const Tensor targets = ws.validation.batch(pkg.poison_case.target_indices);
  AlignmentMonitor monitor(targets, pkg.poison_case.adversarial_class, pkg.poison_case.target_class);
  Stopwatch t("train-victim");
  const TrainTrace trace = train_victim(apply_poison(ws.train, pkg.delta), ws.validation, ws.spec,
                                        victim_config(config, victim_seed_value), config.dp,
                                        config.eval.alignment ? &monitor : nullptr);
  fs::create_directories(sub(config, "victim"));
  const std::string echo = echo_config(config);
  write_trace_csv(sub(config, "victim/trace.csv"), trace, echo);
  save_checkpoint(sub(config, "victim/victim.ckpt"), trace.final_params);
  const auto pred = predict(trace.final_params, targets);
  std::size_t hits = 0;
  for (int p : pred) hits += p == pkg.poison_case.adversarial_class;
  std::printf("targets classified as %d: %zu of %zu; validation accuracy %.4f\n",
              pkg.poison_case.adversarial_class, hits, pred.size(),
              trace.epochs.empty() ? accuracy(trace.final_params, ws.validation)
                                   : trace.epochs.back().validation_accuracy);
  return 0;
}

int cmd_evaluate(const Common& c, std::string packages_dir) {
  const auto config = resolve(c);
  const Workspace ws = load_workspace(config);
  if (packages_dir.empty()) packages_dir = sub(config, "packages");
  const auto packages = load_packages(packages_dir, ws);
  Stopwatch t("evaluate");
  const Evaluation e = run_evaluate(config, ws, packages, c.threads);
  write_evaluation(sub(config, "report"), config, packages, e);
  print_report("poisoned", e.poisoned);
  print_report("null", e.null_attack);
  return 0;
}

int cmd_run(const Common& c) {
  const auto config = resolve(c);
  const Workspace ws = load_workspace(config);
  Stopwatch t("pipeline");
  const PipelineResult r = run_pipeline(config, ws, c.threads);
  save_ensemble(sub(config, "pretrained"), r.ensemble);
  save_packages(sub(config, "packages"), r.packages, echo_config(config));
  write_evaluation(sub(config, "report"), config, r.packages, r.evaluation);
  print_report("poisoned", r.evaluation.poisoned);
  print_report("null", r.evaluation.null_attack);
  return 0;
}

int cmd_defend(const Common& c, const std::string& kind, std::string packages_dir) {
  const auto config = resolve(c);
  const Workspace ws = load_workspace(config);
  if (packages_dir.empty()) packages_dir = sub(config, "packages");
  const auto packages = load_packages(packages_dir, ws);
  fs::create_directories(sub(config, "report"));
  const std::string echo = echo_config(config);
  Stopwatch t("defend " + kind);
  if (kind == "filter") {
    SuiteOptions o = suite_options(config, c.threads);
    o.victims = 1;
    o.keep_params = true;
    o.monitor_alignment = false;
    const EvalReport victims =
        evaluate_case_suite(packages, ws.train, ws.validation, ws.spec, victim_config(config, 0), o);
    const auto rows = run_filter_defense(config, packages, ws, victims);
    write_filter_csv(sub(config, "report/filter.csv"), rows, echo);
    for (const auto& [ci, f] : rows) {
      std::printf("case %zu, %.0f%% filtered: poisons removed %zu of %zu (random %.1f), clean removed %zu of %zu "
                  "(random %.1f)\n",
                  ci, 100.0 * f.fraction, f.poisons_removed, f.poisons, f.random_poisons_removed, f.clean_removed,
                  f.poison_class_clean, f.random_clean_removed);
    }
  } else {
    const auto curve = run_dp_defense(config, ws, packages, c.threads);
    write_dp_curve_csv(sub(config, "report/dp_curve.csv"), curve, echo);
    for (const auto& p : curve) {
      std::printf("sigma %-6g avg success %6.2f%%  validation accuracy %.4f\n", p.sigma,
                  100.0 * p.report.avg_success, p.report.mean_validation_accuracy);
    }
  }
  return 0;
}

int cmd_ablate(const Common& c, const std::string& grid_path) {
  const auto config = resolve(c);
  std::ifstream in(grid_path);
  if (!in) throw ConfigError("grid: cannot open " + grid_path);
  std::stringstream buf;
  buf << in.rdbuf();
  const auto axes = parse_grid(buf.str());
  Stopwatch t("ablate");
  const auto cells = run_ablation(config, axes, c.threads);
  fs::create_directories(sub(config, "report"));
  write_ablation_csv(sub(config, "report/ablation.csv"), axes, cells, echo_config(config));
  std::size_t failed = 0;
  for (const auto& cell : cells) {
    std::string label;
    for (const auto& [k, v] : cell.assignment) label += k + "=" + v + " ";
    if (cell.error.empty()) {
      std::printf("%savg success %6.2f%% (+- %.2f) null %6.2f%%\n", label.c_str(), 100.0 * cell.avg_success,
                  100.0 * cell.standard_error, 100.0 * cell.null_success);
    } else {
      ++failed;
      std::printf("%sfailed: %s\n", label.c_str(), cell.error.c_str());
    }
  }
  return failed == 0 ? 0 : 1;
}

int cmd_gradcheck(const Common& c, std::size_t points) {
  const auto config = resolve(c);
  GradcheckOptions o;
  o.seed = config.seed;
  o.points = points;
  Stopwatch t("gradcheck");
  const auto entries = run_gradcheck_suite(o);
  fs::create_directories(sub(config, "report"));
  write_gradcheck_csv(sub(config, "report/gradcheck.csv"), entries, echo_config(config));
  std::size_t failed = 0;
  for (const auto& e : entries) {
    std::printf("%-36s %s  max rel error %.2e  coords %zu  kinks %zu\n", e.name.c_str(), e.passed ? "ok  " : "FAIL",
                e.max_rel_error, e.coordinates, e.kinks);
    failed += !e.passed;
  }
  std::printf("%zu checks, %zu failed\n", entries.size(), failed);
  return failed == 0 ? 0 : 1;
}

int cmd_descent(const Common& c, std::size_t dimension, std::size_t instances) {
  const auto config = resolve(c);
  const auto r = prop1_toy_verifier(dimension, instances, config.seed);
  std::printf("instances %zu, steps %zu: premise held %zu, premise failed %zu, violations %zu\n", r.instances,
              r.steps, r.premise_satisfied, r.premise_unsatisfied, r.violations);
  std::printf("with the printed ratio |grad L| / |grad L_adv|: %zu violations in %zu steps\n",
              r.printed_form_violations, r.printed_form_steps);
  return r.violations == 0 ? 0 : 1;
}

int cmd_dataset(const Common& c, const std::string& action, const std::string& path, const std::string& package_dir) {
  const auto config = resolve(c);
  const Workspace ws = load_workspace(config);
  if (action == "info") {
    for (const Dataset* d : {&ws.train, &ws.validation}) {
      std::printf("%s: %zu images of shape %s, %zu classes, per class:", to_string(d->split).c_str(), d->size(),
                  to_string(d->image_shape).c_str(), d->classes);
      for (const auto& cls : d->by_class()) std::printf(" %zu", cls.size());
      std::printf("\n");
    }
    const ChannelStats s = channel_stats(ws.train);
    for (std::size_t ch = 0; ch < s.mean.size(); ++ch) {
      std::printf("channel %zu: mean %.4f std %.4f\n", ch, s.mean[ch], s.std[ch]);
    }
  } else if (action == "export") {
    if (path.empty()) throw ConfigError("dataset export: --path is required");
    write_cifar_binary(path + ".train.bin", ws.train);
    write_cifar_binary(path + ".validation.bin", ws.validation);
    std::printf("wrote %s.train.bin and %s.validation.bin\n", path.c_str(), path.c_str());
  } else if (action == "cases") {
    const auto cases = sample_cases(config, ws);
    for (std::size_t i = 0; i < cases.size(); ++i) {
      std::printf("# case %zu\n", i);
      write_case(std::cout, cases[i]);
      std::cout << '\n';
    }
  } else if (action == "export-poisons") {
    if (path.empty() || package_dir.empty()) {
      throw ConfigError("dataset export-poisons: --package and --path are required");
    }
    const PoisonPackage pkg = load_package(package_dir, ws.train, ws.validation);
    const QuantizedExport q = export_quantized(path, ws.train, pkg);
    import_quantized(path, ws.train, pkg);
    std::printf("wrote %zu poisons to %s; max |delta| %zu units, %zu coordinates clamped after rounding; "
                "re-import satisfies the bound\n",
                pkg.poison_case.poison_count(), path.c_str(), q.max_abs_units, q.clamped);
  } else {
    throw ConfigError("dataset: unknown action '" + action + "' (info, export, cases, export-poisons)");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Clean-label targeted poisoning by gradient matching"};
  app.require_subcommand(1);
  Common common;
  std::string checkpoints, package_dir, packages_dir, kind = "filter", grid, action, path;
  std::uint64_t victim_seed_value = 0;
  std::size_t points = 20, dimension = 10, instances = 100;

  auto* pretrain = app.add_subcommand("pretrain", "Train the attacker's clean models");
  add_common(pretrain, common);
  auto* brew_cmd = app.add_subcommand("brew", "Brew poisons for every case");
  add_common(brew_cmd, common);
  brew_cmd->add_option("--checkpoints", checkpoints, "Directory of model_NNN.ckpt (default <out>/pretrained)");
  auto* victim = app.add_subcommand("train-victim", "Train one victim on a poisoned training set");
  add_common(victim, common);
  victim->add_option("--package", package_dir, "Poison package directory")->required();
  victim->add_option("--victim-seed", victim_seed_value, "Victim training seed");
  auto* evaluate = app.add_subcommand("evaluate", "Poison success over fresh victims, with the null attack");
  add_common(evaluate, common);
  evaluate->add_option("--packages", packages_dir, "Directory of case_NNN packages (default <out>/packages)");
  auto* run = app.add_subcommand("run", "pretrain, brew and evaluate in one process");
  add_common(run, common);
  auto* defend = app.add_subcommand("defend", "Feature-space filtering or DP-SGD defense");
  add_common(defend, common);
  defend->add_option("--kind", kind, "filter or dp")->check(CLI::IsMember({"filter", "dp"}));
  defend->add_option("--packages", packages_dir, "Directory of case_NNN packages (default <out>/packages)");
  auto* ablate = app.add_subcommand("ablate", "Cartesian sweep over config fields");
  add_common(ablate, common);
  ablate->add_option("--grid", grid, "Grid manifest: 'section.key = v1, v2' per line")->required();
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference checks of every differentiable op");
  add_common(gradcheck, common);
  gradcheck->add_option("--points", points, "Random points per check")->check(CLI::PositiveNumber);
  auto* descent = app.add_subcommand("descent", "Descent-guarantee verifier on random quadratics");
  add_common(descent, common);
  descent->add_option("--dimension", dimension)->check(CLI::PositiveNumber);
  descent->add_option("--instances", instances)->check(CLI::PositiveNumber);
  auto* dataset = app.add_subcommand("dataset", "Dataset tooling: info, export, cases, export-poisons");
  add_common(dataset, common);
  dataset->add_option("action", action, "info | export | cases | export-poisons")->required();
  dataset->add_option("--path", path, "Output file (prefix for export)");
  dataset->add_option("--package", package_dir, "Poison package directory (export-poisons)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*pretrain) return cmd_pretrain(common);
    if (*brew_cmd) return cmd_brew(common, checkpoints);
    if (*victim) return cmd_train_victim(common, package_dir, victim_seed_value);
    if (*evaluate) return cmd_evaluate(common, packages_dir);
    if (*run) return cmd_run(common);
    if (*defend) return cmd_defend(common, kind, packages_dir);
    if (*ablate) return cmd_ablate(common, grid);
    if (*gradcheck) return cmd_gradcheck(common, points);
    if (*descent) return cmd_descent(common, dimension, instances);
    if (*dataset) return cmd_dataset(common, action, path, package_dir);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
