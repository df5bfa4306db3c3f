#include "brewlab/package.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

#include "brewlab/errors.hpp"

namespace brewlab {
namespace fs = std::filesystem;

PoisonPackage make_package(const PoisonCase& c, const ThreatModel& threat, const BrewConfig& config,
                           const MatchResult& result) {
  PoisonPackage p{c, threat, config, result.delta, {}, result.final_losses, result.chosen};
  for (const auto& r : result.restarts) p.initial_losses.push_back(r.initial_loss);
  return p;
}

PoisonPackage null_package(const PoisonPackage& p) {
  PoisonPackage n = p;
  n.threat.epsilon_pixels = 0.0;
  n.delta = PoisonDelta::zeros(p.delta.image_shape, p.delta.indices);
  return n;
}

namespace {

std::string real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string reals(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + real(v[i]);
  return out;
}

std::vector<double> parse_reals(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
  return out;
}

std::string shape_text(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out;
}

long rounded_units(double v) { return std::lround(v * 255.0); }

}  // namespace

void save_package(const std::string& dir, const PoisonPackage& p, const std::string& config_echo) {
  fs::create_directories(dir);
  std::ofstream m(fs::path(dir) / "manifest.txt");
  if (!m) throw FormatError("cannot write package manifest in '" + dir + "'");
  std::istringstream echo(config_echo);
  for (std::string line; std::getline(echo, line);) m << "# " << line << "\n";
  write_case(m, p.poison_case);
  m << "epsilon_pixels=" << real(p.threat.epsilon_pixels) << "\n"
    << "targets=" << p.threat.targets << "\n"
    << "objective=" << to_string(p.brew.objective) << "\n"
    << "restarts=" << p.brew.restarts << "\n"
    << "steps=" << p.brew.steps << "\n"
    << "ensemble=" << p.brew.ensemble << "\n"
    << "augment=" << (p.brew.augment ? "true" : "false") << "\n"
    << "brew_seed=" << p.brew.seed << "\n"
    << "image_shape=" << shape_text(p.delta.image_shape) << "\n"
    << "initial_losses=" << reals(p.initial_losses) << "\n"
    << "final_losses=" << reals(p.final_losses) << "\n"
    << "chosen=" << p.chosen << "\n";

  std::ofstream d(fs::path(dir) / "delta.bin", std::ios::binary);
  if (!d) throw FormatError("cannot write delta.bin in '" + dir + "'");
  for (double v : p.delta.values) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    d.write(reinterpret_cast<const char*>(&bits), sizeof bits);
  }
}

PoisonPackage load_package(const std::string& dir, const Dataset& train, const Dataset& validation) {
  std::ifstream m(fs::path(dir) / "manifest.txt");
  if (!m) throw FormatError("package '" + dir + "' has no manifest.txt");
  std::stringstream case_text;
  std::map<std::string, std::string> kv;
  for (std::string line; std::getline(m, line);) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("package manifest: malformed line '" + line + "'");
    const std::string key = line.substr(0, eq);
    kv[key] = line.substr(eq + 1);
    if (key == "seed" || key == "budget" || key == "target_class" || key == "adversarial_class" ||
        key == "target_ids" || key == "poison_ids") {
      case_text << line << "\n";
    }
  }
  auto get = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError(std::string("package manifest: missing '") + key + "'");
    return it->second;
  };

  PoisonPackage p;
  p.poison_case = read_case(case_text, train, validation);
  try {
    p.threat.epsilon_pixels = std::stod(get("epsilon_pixels"));
    p.threat.budget = p.poison_case.budget;
    p.threat.targets = std::stoul(get("targets"));
    p.brew.objective = parse_objective(get("objective"));
    p.brew.restarts = std::stoul(get("restarts"));
    p.brew.steps = std::stoul(get("steps"));
    p.brew.ensemble = std::stoul(get("ensemble"));
    p.brew.augment = get("augment") == "true";
    p.brew.seed = std::stoull(get("brew_seed"));
    p.initial_losses = parse_reals(get("initial_losses"));
    p.final_losses = parse_reals(get("final_losses"));
    p.chosen = std::stoul(get("chosen"));
  } catch (const std::logic_error& e) {
    throw FormatError(std::string("package manifest: malformed value (") + e.what() + ")");
  }
  if (get("image_shape") != shape_text(train.image_shape)) {
    throw FormatError("package manifest: image shape does not match the dataset");
  }

  p.delta = PoisonDelta::zeros(train.image_shape, p.poison_case.poison_indices);
  std::ifstream d(fs::path(dir) / "delta.bin", std::ios::binary);
  if (!d) throw FormatError("package '" + dir + "' has no delta.bin");
  for (auto& v : p.delta.values) {
    std::uint64_t bits = 0;
    if (!d.read(reinterpret_cast<char*>(&bits), sizeof bits)) throw FormatError("delta.bin: truncated");
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    v = std::bit_cast<double>(bits);
  }
  if (d.peek() != std::char_traits<char>::eof()) throw FormatError("delta.bin: trailing bytes");
  check_constraints(p.delta, train, p.threat.epsilon());
  return p;
}

QuantizedExport export_quantized(const std::string& path, const Dataset& train, const PoisonPackage& p) {
  const long bound = static_cast<long>(std::floor(p.threat.epsilon_pixels + 1e-9));
  QuantizedExport report;
  std::vector<unsigned char> bytes;
  const std::size_t per = train.image_size();
  bytes.reserve(p.delta.count() * (per + 1));
  for (std::size_t k = 0; k < p.delta.count(); ++k) {
    const std::size_t idx = p.delta.indices[k];
    bytes.push_back(static_cast<unsigned char>(train.labels[idx]));
    auto x = train.image(idx);
    auto d = p.delta.block(k);
    for (std::size_t i = 0; i < per; ++i) {
      const long clean = rounded_units(x[i]);
      long q = rounded_units(x[i] + d[i]);
      if (q - clean > bound || clean - q > bound) {
        q = std::clamp(q, clean - bound, clean + bound);
        ++report.clamped;
      }
      q = std::clamp(q, 0L, 255L);
      report.max_abs_units = std::max<std::size_t>(report.max_abs_units, static_cast<std::size_t>(std::labs(q - clean)));
      bytes.push_back(static_cast<unsigned char>(q));
    }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  return report;
}

Dataset import_quantized(const std::string& path, const Dataset& train, const PoisonPackage& p) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  const std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in), {}};
  const std::size_t per = train.image_size();
  if (bytes.size() != p.delta.count() * (per + 1)) throw FormatError("quantized export: unexpected length");
  const long bound = static_cast<long>(std::floor(p.threat.epsilon_pixels + 1e-9));
  Dataset out = train;
  for (std::size_t k = 0; k < p.delta.count(); ++k) {
    const std::size_t idx = p.delta.indices[k];
    const unsigned char* rec = bytes.data() + k * (per + 1);
    if (rec[0] != train.labels[idx]) throw FormatError("quantized export: label mismatch for poison " + std::to_string(k));
    auto img = out.image(idx);
    for (std::size_t i = 0; i < per; ++i) {
      const long clean = rounded_units(train.image(idx)[i]);
      if (std::labs(static_cast<long>(rec[1 + i]) - clean) > bound) {
        throw ConstraintViolation("quantized poison " + std::to_string(k) + " exceeds epsilon at pixel " +
                                  std::to_string(i));
      }
      img[i] = rec[1 + i] / 255.0;
    }
  }
  return out;
}

}  // namespace brewlab
