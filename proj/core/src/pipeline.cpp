#include "brewlab/pipeline.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "brewlab/checkpoint.hpp"
#include "brewlab/errors.hpp"
#include "brewlab/parallel.hpp"
#include "brewlab/report.hpp"

namespace fs = std::filesystem;

namespace brewlab {

namespace {

std::string numbered(const char* prefix, std::size_t i, const char* suffix = "") {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%03zu%s", prefix, i, suffix);
  return buf;
}

}  // namespace

Workspace load_workspace(const ExperimentConfig& config) {
  config.validate();
  Workspace ws;
  if (config.dataset.source == DataSource::kCifar) {
    if (!cifar_available(config.dataset.cifar_dir)) {
      throw ConfigError("dataset.cifar_dir: no CIFAR-10 binary batches in " + config.dataset.cifar_dir);
    }
    auto subset = load_cifar_dir(config.dataset.cifar_dir, config.dataset.cifar_train_per_class,
                                 config.dataset.cifar_validation_per_class);
    ws.train = std::move(subset.train);
    ws.validation = std::move(subset.validation);
  } else {
    ws.train = synth_dataset(config.dataset.synth, Split::kTrain);
    SynthParams v = config.dataset.synth;
    v.per_class = config.dataset.synth_validation_per_class;
    ws.validation = synth_dataset(v, Split::kValidation);
  }
  ws.spec = ModelSpec::convnet(ws.train.image_shape, ws.train.classes, config.model.width_scale);
  ws.spec.widths = config.model.widths;
  ws.spec.kernel = config.model.kernel;
  ws.spec.pool = config.model.pool;
  if (config.dataset.normalize) {
    const ChannelStats stats = channel_stats(ws.train);
    ws.spec.input_mean = stats.mean;
    ws.spec.input_std = stats.std;
  }
  ws.spec.validate();
  return ws;
}

TrainConfig victim_config(const ExperimentConfig& config, std::uint64_t seed) {
  TrainConfig t = config.train;
  t.seed = seed;
  return t;
}

TrainConfig pretrain_config(const ExperimentConfig& config, std::size_t member) {
  TrainConfig t = config.train;
  t.epochs = config.pretrain.epochs;
  t.keep_fraction = 1.0;
  t.seed = pretrain_seed(config, member);
  return t;
}

std::vector<ModelParams> run_pretrain(const ExperimentConfig& config, const Workspace& ws, std::size_t threads) {
  std::vector<ModelParams> ensemble(config.brew.ensemble);
  parallel_for(ensemble.size(), threads, [&](std::size_t k) {
    ensemble[k] = pretrain_clean(ws.train, ws.validation, ws.spec, pretrain_config(config, k));
  });
  return ensemble;
}

void check_ensemble(const ExperimentConfig& config, const Workspace& ws, std::span<const ModelParams> ensemble) {
  if (ensemble.size() != config.brew.ensemble) {
    throw ConfigError("brew.ensemble: configured " + std::to_string(config.brew.ensemble) + " models but " +
                      std::to_string(ensemble.size()) + " checkpoints were given");
  }
  for (std::size_t k = 0; k < ensemble.size(); ++k) {
    if (!(ensemble[k].spec == ws.spec)) {
      throw ConfigError("model: checkpoint " + std::to_string(k) + " was trained for a different model or dataset (" +
                        describe(ensemble[k].spec) + " vs " + describe(ws.spec) + ")");
    }
  }
}

std::vector<PoisonCase> sample_cases(const ExperimentConfig& config, const Workspace& ws) {
  std::vector<PoisonCase> cases;
  for (std::size_t i = 0; i < config.eval.cases; ++i) {
    cases.push_back(sample_case(ws.train, ws.validation, config.threat.budget, config.threat.targets,
                                case_seed(config, i)));
  }
  return cases;
}

std::vector<PoisonPackage> run_brew(const ExperimentConfig& config, const Workspace& ws,
                                    std::span<const ModelParams> ensemble, std::size_t threads) {
  check_ensemble(config, ws, ensemble);
  std::vector<PoisonPackage> packages;
  const auto cases = sample_cases(config, ws);
  for (std::size_t i = 0; i < cases.size(); ++i) {
    BrewConfig bc = config.brew;
    bc.seed = brew_seed(config, i);
    const MatchResult result = brew(ensemble, ws.train, ws.validation, cases[i], config.threat, bc, threads);
    packages.push_back(make_package(cases[i], config.threat, bc, result));
  }
  return packages;
}

SuiteOptions suite_options(const ExperimentConfig& config, std::size_t threads) {
  SuiteOptions o;
  o.victims = config.eval.victims;
  o.seed = suite_seed(config);
  o.dp = config.dp;
  o.monitor_alignment = config.eval.alignment;
  o.threads = threads;
  return o;
}

Evaluation run_evaluate(const ExperimentConfig& config, const Workspace& ws, std::span<const PoisonPackage> packages,
                        std::size_t threads, bool keep_params) {
  SuiteOptions o = suite_options(config, threads);
  o.keep_params = keep_params;
  std::vector<PoisonPackage> nulls;
  for (const auto& p : packages) nulls.push_back(null_package(p));
  const TrainConfig t = victim_config(config, 0);
  Evaluation e;
  e.poisoned = evaluate_case_suite(packages, ws.train, ws.validation, ws.spec, t, o);
  o.keep_params = false;
  e.null_attack = evaluate_case_suite(nulls, ws.train, ws.validation, ws.spec, t, o);
  return e;
}

PipelineResult run_pipeline(const ExperimentConfig& config, const Workspace& ws, std::size_t threads,
                            bool keep_params) {
  PipelineResult r;
  r.ensemble = run_pretrain(config, ws, threads);
  r.packages = run_brew(config, ws, r.ensemble, threads);
  r.evaluation = run_evaluate(config, ws, r.packages, threads, keep_params);
  return r;
}

void write_evaluation(const std::string& dir, const ExperimentConfig& config,
                      std::span<const PoisonPackage> packages, const Evaluation& evaluation) {
  fs::create_directories(dir);
  const std::string echo = echo_config(config);
  const fs::path d(dir);
  write_eval_runs_csv((d / "eval_runs.csv").string(), evaluation.poisoned, "poisoned", echo);
  write_eval_runs_csv((d / "null_runs.csv").string(), evaluation.null_attack, "null", echo);
  CsvWriter align((d / "alignment.csv").string(), echo,
                  {"label", "case", "victim", "epoch", "lr", "train_loss", "validation_accuracy",
                   "alignment_adversarial", "alignment_original"});
  for (const auto& [label, report] : {std::pair<std::string, const EvalReport*>{"poisoned", &evaluation.poisoned},
                                      {"null", &evaluation.null_attack}}) {
    for (const auto& r : report->runs) {
      for (const auto& e : r.epochs) {
        align.row({label, std::to_string(r.case_index), std::to_string(r.victim_index), std::to_string(e.epoch),
                   format_double(e.lr), format_double(e.train_loss), format_double(e.validation_accuracy),
                   e.alignment_adversarial ? format_double(*e.alignment_adversarial) : "",
                   e.alignment_original ? format_double(*e.alignment_original) : ""});
      }
    }
  }
  align.close();
  write_text((d / "summary.json").string(),
             summary_json(echo, {packages.begin(), packages.end()},
                          {{"poisoned", &evaluation.poisoned}, {"null", &evaluation.null_attack}}));
}

void save_ensemble(const std::string& dir, std::span<const ModelParams> ensemble) {
  fs::create_directories(dir);
  for (std::size_t k = 0; k < ensemble.size(); ++k) {
    save_checkpoint((fs::path(dir) / numbered("model_", k, ".ckpt")).string(), ensemble[k]);
  }
}

std::vector<ModelParams> load_ensemble(const std::string& dir) {
  std::vector<ModelParams> ensemble;
  for (std::size_t k = 0;; ++k) {
    const fs::path p = fs::path(dir) / numbered("model_", k, ".ckpt");
    if (!fs::exists(p)) break;
    ensemble.push_back(load_checkpoint(p.string()));
  }
  if (ensemble.empty()) throw FormatError(dir + ": no checkpoints (expected model_000.ckpt, ...)");
  return ensemble;
}

void save_packages(const std::string& dir, std::span<const PoisonPackage> packages, const std::string& echo) {
  for (std::size_t i = 0; i < packages.size(); ++i) {
    save_package((fs::path(dir) / numbered("case_", i)).string(), packages[i], echo);
  }
}

std::vector<PoisonPackage> load_packages(const std::string& dir, const Workspace& ws) {
  std::vector<PoisonPackage> packages;
  for (std::size_t i = 0;; ++i) {
    const fs::path p = fs::path(dir) / numbered("case_", i);
    if (!fs::exists(p)) break;
    packages.push_back(load_package(p.string(), ws.train, ws.validation));
  }
  if (packages.empty()) throw FormatError(dir + ": no packages (expected case_000/, ...)");
  return packages;
}

std::vector<std::pair<std::size_t, FilterReport>> run_filter_defense(const ExperimentConfig& config,
                                                                     std::span<const PoisonPackage> packages,
                                                                     const Workspace& ws,
                                                                     const EvalReport& poisoned) {
  std::vector<std::pair<std::size_t, FilterReport>> rows;
  for (std::size_t c = 0; c < packages.size(); ++c) {
    const VictimRun& run = poisoned.runs.at(c * poisoned.victims);
    if (!run.final_params) throw ConfigError("defend: victim parameters were not kept");
    const Dataset data = apply_poison(ws.train, packages[c].delta);
    for (double f : config.eval.filter_fractions) {
      rows.emplace_back(c, feature_filter_defense(data, *run.final_params, packages[c].poison_case, f));
    }
  }
  return rows;
}

std::vector<DPPoint> run_dp_defense(const ExperimentConfig& config, const Workspace& ws,
                                    std::span<const PoisonPackage> packages, std::size_t threads) {
  SuiteOptions o = suite_options(config, threads);
  o.monitor_alignment = false;
  return dp_defense_sweep(packages, ws.train, ws.validation, ws.spec, victim_config(config, 0),
                          config.eval.dp_sigmas, o, config.dp.clip);
}

std::vector<AblationAxis> parse_grid(const std::string& text) {
  std::vector<AblationAxis> axes;
  std::istringstream in(text);
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("grid: expected 'section.key = v1, v2' (line " + std::to_string(line_no) + ")");
    }
    auto strip = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    AblationAxis axis{strip(line.substr(0, eq)), {}};
    std::stringstream values(line.substr(eq + 1));
    for (std::string v; std::getline(values, v, ',');) axis.values.push_back(strip(v));
    if (axis.values.empty() || axis.values.back().empty()) {
      throw ConfigError(axis.path + ": empty value list in grid (line " + std::to_string(line_no) + ")");
    }
    ExperimentConfig probe;
    for (const auto& v : axis.values) set_config_field(probe, axis.path, v);
    axes.push_back(std::move(axis));
  }
  return axes;
}

std::vector<AblationCell> run_ablation(const ExperimentConfig& base, std::span<const AblationAxis> axes,
                                       std::size_t threads) {
  std::size_t total = 1;
  for (const auto& a : axes) total *= a.values.size();
  std::vector<AblationCell> cells;
  for (std::size_t idx = 0; idx < total; ++idx) {
    AblationCell cell;
    ExperimentConfig config = base;
    std::size_t rest = idx;
    // The last axis varies fastest.
    std::vector<std::size_t> pick(axes.size());
    for (std::size_t a = axes.size(); a-- > 0;) {
      pick[a] = rest % axes[a].values.size();
      rest /= axes[a].values.size();
    }
    try {
      for (std::size_t a = 0; a < axes.size(); ++a) {
        cell.assignment.emplace_back(axes[a].path, axes[a].values[pick[a]]);
        set_config_field(config, axes[a].path, axes[a].values[pick[a]]);
      }
      config.validate();
      const Workspace ws = load_workspace(config);
      const PipelineResult r = run_pipeline(config, ws, threads);
      cell.avg_success = r.evaluation.poisoned.avg_success;
      cell.standard_error = r.evaluation.poisoned.standard_error;
      cell.null_success = r.evaluation.null_attack.avg_success;
      cell.validation_accuracy = r.evaluation.poisoned.mean_validation_accuracy;
      double sum = 0.0;
      for (const auto& p : r.packages) sum += p.chosen_final_loss();
      cell.mean_final_loss = sum / static_cast<double>(r.packages.size());
    } catch (const Error& e) {
      cell.error = e.what();
    }
    cells.push_back(std::move(cell));
  }
  return cells;
}

void write_ablation_csv(const std::string& path, std::span<const AblationAxis> axes,
                        std::span<const AblationCell> cells, const std::string& config_echo) {
  std::vector<std::string> header;
  for (const auto& a : axes) header.push_back(a.path);
  for (const char* h : {"avg_success", "standard_error", "null_success", "validation_accuracy", "mean_final_loss",
                        "error"}) {
    header.emplace_back(h);
  }
  CsvWriter csv(path, config_echo, header);
  for (const auto& c : cells) {
    std::vector<std::string> row;
    for (std::size_t a = 0; a < axes.size(); ++a) {
      row.push_back(a < c.assignment.size() ? c.assignment[a].second : std::string());
    }
    std::string err = c.error;
    for (auto& ch : err) {
      if (ch == ',' || ch == '\n' || ch == '"') ch = ' ';
    }
    row.insert(row.end(), {format_double(c.avg_success), format_double(c.standard_error),
                           format_double(c.null_success), format_double(c.validation_accuracy),
                           format_double(c.mean_final_loss), err});
    csv.row(row);
  }
  csv.close();
}

}  // namespace brewlab
