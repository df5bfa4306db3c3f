#include "brewlab/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "brewlab/errors.hpp"
#include "brewlab/rng.hpp"

namespace brewlab {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

/// Shortest text that reads back to the same double.
std::string fmt(double v) {
  char buf[32];
  return {buf, std::to_chars(buf, buf + sizeof buf, v).ptr};
}
std::string fmt(std::size_t v) { return std::to_string(v); }
std::string fmt(std::uint64_t v, int) { return std::to_string(v); }
std::string fmt(bool v) { return v ? "true" : "false"; }

template <class T>
std::string fmt_list(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + fmt(v[i]);
  return s;
}

struct ValueError {
  std::string message;
};

std::uint64_t to_u64(const std::string& s) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty()) {
    throw ValueError{"expected a non-negative integer, got '" + s + "'"};
  }
  return v;
}
std::size_t to_size(const std::string& s) { return static_cast<std::size_t>(to_u64(s)); }

double to_double(const std::string& s) {
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty()) {
    throw ValueError{"expected a number, got '" + s + "'"};
  }
  return v;
}

bool to_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "on" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "off" || s == "no") return false;
  throw ValueError{"expected true or false, got '" + s + "'"};
}

template <class F>
auto to_list(const std::string& s, F item) {
  std::vector<decltype(item(std::string()))> out;
  if (trim(s).empty()) return out;
  std::stringstream in(s);
  for (std::string part; std::getline(in, part, ',');) out.push_back(item(trim(part)));
  return out;
}

struct Field {
  const char* section;
  const char* key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

#define BREWLAB_FIELD(sec, key, expr, format, parse)                                        \
  Field {                                                                                   \
    sec, key, [](const ExperimentConfig& c) { return format(c.expr); },                     \
        [](ExperimentConfig& c, const std::string& v) { c.expr = parse(v); }                \
  }

const std::vector<Field>& fields() {
  static const auto to_u64_list = [](const std::string& v) { return to_list(v, to_size); };
  static const auto to_double_list = [](const std::string& v) { return to_list(v, to_double); };
  static const auto fmt_sizes = [](const std::vector<std::size_t>& v) { return fmt_list(v); };
  static const auto fmt_doubles = [](const std::vector<double>& v) { return fmt_list(v); };
  static const std::vector<Field> table{
      Field{"experiment", "seed", [](const ExperimentConfig& c) { return fmt(c.seed, 0); },
            [](ExperimentConfig& c, const std::string& v) { c.seed = to_u64(v); }},

      Field{"dataset", "source",
            [](const ExperimentConfig& c) {
              return std::string(c.dataset.source == DataSource::kCifar ? "cifar" : "synthetic");
            },
            [](ExperimentConfig& c, const std::string& v) {
              if (v == "cifar") {
                c.dataset.source = DataSource::kCifar;
              } else if (v == "synthetic") {
                c.dataset.source = DataSource::kSynthetic;
              } else {
                throw ValueError{"expected synthetic or cifar, got '" + v + "'"};
              }
            }},
      Field{"dataset", "cifar_dir", [](const ExperimentConfig& c) { return c.dataset.cifar_dir; },
            [](ExperimentConfig& c, const std::string& v) { c.dataset.cifar_dir = v; }},
      BREWLAB_FIELD("dataset", "cifar_train_per_class", dataset.cifar_train_per_class, fmt, to_size),
      BREWLAB_FIELD("dataset", "cifar_validation_per_class", dataset.cifar_validation_per_class, fmt, to_size),
      BREWLAB_FIELD("dataset", "synth_classes", dataset.synth.classes, fmt, to_size),
      BREWLAB_FIELD("dataset", "synth_train_per_class", dataset.synth.per_class, fmt, to_size),
      BREWLAB_FIELD("dataset", "synth_validation_per_class", dataset.synth_validation_per_class, fmt, to_size),
      BREWLAB_FIELD("dataset", "synth_channels", dataset.synth.channels, fmt, to_size),
      BREWLAB_FIELD("dataset", "synth_height", dataset.synth.height, fmt, to_size),
      BREWLAB_FIELD("dataset", "synth_width", dataset.synth.width, fmt, to_size),
      BREWLAB_FIELD("dataset", "synth_noise", dataset.synth.noise, fmt, to_double),
      BREWLAB_FIELD("dataset", "synth_jitter", dataset.synth.jitter, fmt, to_double),
      BREWLAB_FIELD("dataset", "synth_nuisance", dataset.synth.nuisance, fmt, to_double),
      BREWLAB_FIELD("dataset", "synth_modes_per_class", dataset.synth.modes_per_class, fmt, to_size),
      Field{"dataset", "synth_seed", [](const ExperimentConfig& c) { return fmt(c.dataset.synth.seed, 0); },
            [](ExperimentConfig& c, const std::string& v) { c.dataset.synth.seed = to_u64(v); }},
      BREWLAB_FIELD("dataset", "normalize", dataset.normalize, fmt, to_bool),

      Field{"model", "arch", [](const ExperimentConfig& c) { return to_string(c.model.arch); },
            [](ExperimentConfig& c, const std::string& v) { c.model.arch = parse_architecture(v); }},
      BREWLAB_FIELD("model", "widths", model.widths, fmt_sizes, to_u64_list),
      Field{"model", "width_scale", [](const ExperimentConfig& c) { return c.model.width_scale.str(); },
            [](ExperimentConfig& c, const std::string& v) { c.model.width_scale = WidthScale::parse(v); }},
      BREWLAB_FIELD("model", "kernel", model.kernel, fmt, to_size),
      BREWLAB_FIELD("model", "pool", model.pool, fmt, to_size),

      BREWLAB_FIELD("threat", "epsilon", threat.epsilon_pixels, fmt, to_double),
      BREWLAB_FIELD("threat", "budget", threat.budget, fmt, to_double),
      BREWLAB_FIELD("threat", "targets", threat.targets, fmt, to_size),

      BREWLAB_FIELD("brew", "restarts", brew.restarts, fmt, to_size),
      BREWLAB_FIELD("brew", "steps", brew.steps, fmt, to_size),
      BREWLAB_FIELD("brew", "step_size", brew.step_size, fmt, to_double),
      BREWLAB_FIELD("brew", "ensemble", brew.ensemble, fmt, to_size),
      Field{"brew", "objective", [](const ExperimentConfig& c) { return to_string(c.brew.objective); },
            [](ExperimentConfig& c, const std::string& v) { c.brew.objective = parse_objective(v); }},
      BREWLAB_FIELD("brew", "augment", brew.augment, fmt, to_bool),
      BREWLAB_FIELD("brew", "padding", brew.padding, fmt, to_size),
      BREWLAB_FIELD("brew", "poison_batch", brew.poison_batch, fmt, to_size),
      BREWLAB_FIELD("brew", "beta1", brew.beta1, fmt, to_double),
      BREWLAB_FIELD("brew", "beta2", brew.beta2, fmt, to_double),
      BREWLAB_FIELD("brew", "adam_eps", brew.adam_eps, fmt, to_double),
      BREWLAB_FIELD("brew", "decay", brew.decay, fmt, to_bool),
      BREWLAB_FIELD("brew", "dp_counter", brew.dp_counter, fmt, to_bool),
      BREWLAB_FIELD("brew", "counter_clip", brew.counter_clip, fmt, to_double),
      BREWLAB_FIELD("brew", "counter_sigma", brew.counter_sigma, fmt, to_double),

      BREWLAB_FIELD("train", "epochs", train.epochs, fmt, to_size),
      BREWLAB_FIELD("train", "batch_size", train.batch_size, fmt, to_size),
      BREWLAB_FIELD("train", "learning_rate", train.learning_rate, fmt, to_double),
      BREWLAB_FIELD("train", "drop_epochs", train.drop_epochs, fmt_sizes, to_u64_list),
      BREWLAB_FIELD("train", "drop_factor", train.drop_factor, fmt, to_double),
      BREWLAB_FIELD("train", "momentum", train.momentum, fmt, to_double),
      BREWLAB_FIELD("train", "weight_decay", train.weight_decay, fmt, to_double),
      BREWLAB_FIELD("train", "augment", train.augment, fmt, to_bool),
      BREWLAB_FIELD("train", "padding", train.padding, fmt, to_size),
      BREWLAB_FIELD("train", "epoch_scale", train.epoch_scale, fmt, to_double),
      BREWLAB_FIELD("train", "keep_fraction", train.keep_fraction, fmt, to_double),

      BREWLAB_FIELD("pretrain", "epochs", pretrain.epochs, fmt, to_size),

      BREWLAB_FIELD("dp", "enabled", dp.enabled, fmt, to_bool),
      BREWLAB_FIELD("dp", "clip", dp.clip, fmt, to_double),
      BREWLAB_FIELD("dp", "sigma", dp.sigma, fmt, to_double),

      BREWLAB_FIELD("eval", "cases", eval.cases, fmt, to_size),
      BREWLAB_FIELD("eval", "victims", eval.victims, fmt, to_size),
      BREWLAB_FIELD("eval", "alignment", eval.alignment, fmt, to_bool),
      BREWLAB_FIELD("eval", "filter_fractions", eval.filter_fractions, fmt_doubles, to_double_list),
      BREWLAB_FIELD("eval", "dp_sigmas", eval.dp_sigmas, fmt_doubles, to_double_list),

      Field{"output", "dir", [](const ExperimentConfig& c) { return c.output_dir; },
            [](ExperimentConfig& c, const std::string& v) { c.output_dir = v; }},
  };
  return table;
}

#undef BREWLAB_FIELD

const Field* find_field(const std::string& section, const std::string& key) {
  for (const auto& f : fields()) {
    if (section == f.section && key == f.key) return &f;
  }
  return nullptr;
}

bool known_section(const std::string& section) {
  for (const auto& f : fields()) {
    if (section == f.section) return true;
  }
  return false;
}

void assign(ExperimentConfig& config, const std::string& section, const std::string& key,
            const std::string& value, const std::string& where) {
  const std::string path = section + "." + key;
  const Field* f = find_field(section, key);
  if (!f) throw ConfigError(path + ": unknown field" + where);
  try {
    f->set(config, value);
  } catch (const ValueError& e) {
    throw ConfigError(path + ": " + e.message + where);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what() + where);
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  if (dataset.source == DataSource::kSynthetic) {
    if (dataset.synth.classes < 2) throw ConfigError("dataset.synth_classes: need at least two classes");
    if (dataset.synth.per_class == 0) throw ConfigError("dataset.synth_train_per_class: must be positive");
    if (dataset.synth_validation_per_class == 0) {
      throw ConfigError("dataset.synth_validation_per_class: must be positive");
    }
    if (dataset.synth.channels == 0 || dataset.synth.height == 0 || dataset.synth.width == 0) {
      throw ConfigError("dataset.synth_height: image dimensions must be positive");
    }
    if (!(dataset.synth.noise >= 0.0)) throw ConfigError("dataset.synth_noise: must be non-negative");
    if (!(dataset.synth.jitter >= 0.0)) throw ConfigError("dataset.synth_jitter: must be non-negative");
    if (!(dataset.synth.nuisance >= 0.0)) throw ConfigError("dataset.synth_nuisance: must be non-negative");
    if (dataset.synth.modes_per_class == 0) throw ConfigError("dataset.synth_modes_per_class: must be positive");
  } else {
    if (dataset.cifar_train_per_class == 0) throw ConfigError("dataset.cifar_train_per_class: must be positive");
    if (dataset.cifar_validation_per_class == 0) {
      throw ConfigError("dataset.cifar_validation_per_class: must be positive");
    }
  }
  if (model.arch != Architecture::kConvNet) {
    throw ConfigError("model.arch: experiments run the convnet; the mlp is for unit checks only");
  }
  if (model.widths.size() != 5) throw ConfigError("model.widths: the convnet has exactly five conv widths");
  for (auto w : model.widths) {
    if (w == 0) throw ConfigError("model.widths: widths must be positive");
  }
  if (model.kernel == 0 || model.kernel % 2 == 0) throw ConfigError("model.kernel: must be odd");
  if (model.pool == 0) throw ConfigError("model.pool: must be positive");
  threat.validate();
  brew.validate();
  train.validate();
  if (pretrain.epochs > 0) {
    TrainConfig p = train;
    p.epochs = pretrain.epochs;
    try {
      p.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("pretrain.epochs: ") + e.what());
    }
  }
  dp.validate();
  if (eval.cases == 0) throw ConfigError("eval.cases: must be at least 1");
  if (eval.victims == 0) throw ConfigError("eval.victims: must be at least 1");
  for (double f : eval.filter_fractions) {
    if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("eval.filter_fractions: fractions must lie in [0, 1]");
  }
  for (double s : eval.dp_sigmas) {
    if (!(s >= 0.0)) throw ConfigError("eval.dp_sigmas: must be non-negative");
  }
  if (output_dir.empty()) throw ConfigError("output.dir: must not be empty");
}

ExperimentConfig parse_config(const std::string& text, const ExperimentConfig& base) {
  ExperimentConfig config = base;
  std::istringstream in(text);
  std::string section;
  std::size_t line_no = 0;
  for (std::string raw; std::getline(in, raw);) {
    ++line_no;
    const std::string where = " (line " + std::to_string(line_no) + ")";
    std::string line = raw;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config: malformed section header" + where);
      section = trim(line.substr(1, line.size() - 2));
      if (!known_section(section)) throw ConfigError(section + ": unknown section" + where);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config: expected 'key = value'" + where);
    const std::string key = trim(line.substr(0, eq));
    if (section.empty()) throw ConfigError(key + ": field outside of a section" + where);
    assign(config, section, key, trim(line.substr(eq + 1)), where);
  }
  config.validate();
  return config;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string echo_config(const ExperimentConfig& config) {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    if (section != f.section) {
      if (!section.empty()) out += "\n";
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += std::string(f.key) + " = " + f.get(config) + "\n";
  }
  return out;
}

void set_config_field(ExperimentConfig& config, const std::string& path, const std::string& value) {
  const auto dot = path.find('.');
  if (dot == std::string::npos) throw ConfigError(path + ": expected section.key");
  assign(config, path.substr(0, dot), path.substr(dot + 1), trim(value), "");
}

std::uint64_t pretrain_seed(const ExperimentConfig& config, std::size_t member) {
  return Rng::stream(config.seed, "pretrain", {member}).next_u64();
}

std::uint64_t case_seed(const ExperimentConfig& config, std::size_t case_index) {
  return Rng::stream(config.seed, "case", {case_index}).next_u64();
}

std::uint64_t brew_seed(const ExperimentConfig& config, std::size_t case_index) {
  return Rng::stream(config.seed, "brew", {case_index}).next_u64();
}

std::uint64_t suite_seed(const ExperimentConfig& config) { return Rng::stream(config.seed, "suite").next_u64(); }

}  // namespace brewlab
