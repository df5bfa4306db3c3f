#include "brewlab/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "brewlab/errors.hpp"

namespace brewlab {
namespace {

constexpr const char* kMagic = "BREWLAB-CKPT 1";

template <typename T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::vector<std::size_t> split_sizes(const std::string& s, const std::string& key) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoul(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw FormatError("checkpoint: bad integer list for '" + key + "': " + s);
    }
  }
  return out;
}

std::string join_reals(const std::vector<double>& v) {
  std::string out;
  char buf[32];
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", v[i]);
    out += (i ? "," : "") + std::string(buf);
  }
  return out;
}

std::vector<double> split_reals(const std::string& s, const std::string& key) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw FormatError("checkpoint: bad real list for '" + key + "': " + s);
    }
  }
  return out;
}

std::uint64_t to_little_endian(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  std::uint64_t r = 0;
  for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
  return r;
}

}  // namespace

std::string describe(const ModelSpec& spec) {
  std::ostringstream out;
  out << "arch=" << to_string(spec.arch) << "\n"
      << "widths=" << join(spec.widths) << "\n"
      << "kernel=" << spec.kernel << "\n"
      << "pool=" << spec.pool << "\n"
      << "input_shape=" << join(spec.input_shape) << "\n"
      << "classes=" << spec.classes << "\n"
      << "width_scale=" << spec.width_scale.str() << "\n";
  if (!spec.input_mean.empty()) out << "input_mean=" << join_reals(spec.input_mean) << "\n"
                                    << "input_std=" << join_reals(spec.input_std) << "\n";
  return out.str();
}

void write_checkpoint(std::ostream& out, const ModelParams& params) {
  out << kMagic << "\n" << describe(params.spec) << "seed=" << params.seed << "\n"
      << "count=" << params.count() << "\n\n";
  for (double v : params.theta) {
    const std::uint64_t bits = to_little_endian(std::bit_cast<std::uint64_t>(v));
    out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
  }
  if (!out) throw FormatError("checkpoint: write failed");
}

ModelParams read_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kMagic) throw FormatError("checkpoint: missing header line");
  std::map<std::string, std::string> kv;
  while (std::getline(in, line) && !line.empty()) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint: malformed header line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError("checkpoint: header lacks '" + key + "'");
    return it->second;
  };

  ModelSpec spec;
  try {
    spec.arch = parse_architecture(get("arch"));
    spec.width_scale = WidthScale::parse(get("width_scale"));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  spec.widths = split_sizes(get("widths"), "widths");
  spec.input_shape = split_sizes(get("input_shape"), "input_shape");
  spec.kernel = split_sizes(get("kernel"), "kernel").at(0);
  spec.pool = split_sizes(get("pool"), "pool").at(0);
  spec.classes = split_sizes(get("classes"), "classes").at(0);
  if (kv.count("input_mean")) {
    spec.input_mean = split_reals(get("input_mean"), "input_mean");
    spec.input_std = split_reals(get("input_std"), "input_std");
  }
  const std::uint64_t seed = std::stoull(get("seed"));
  const std::size_t count = split_sizes(get("count"), "count").at(0);

  ModelParams params{spec, seed, {}, make_layout(spec)};
  if (params.layout->total() != count) {
    throw FormatError("checkpoint: count " + std::to_string(count) + " does not match spec (" +
                      std::to_string(params.layout->total()) + ")");
  }
  params.theta.resize(count);
  for (auto& v : params.theta) {
    std::uint64_t bits = 0;
    if (!in.read(reinterpret_cast<char*>(&bits), sizeof bits)) throw FormatError("checkpoint: truncated payload");
    v = std::bit_cast<double>(to_little_endian(bits));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("checkpoint: trailing bytes after payload");
  return params;
}

void save_checkpoint(const std::string& path, const ModelParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  write_checkpoint(out, params);
}

ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint '" + path + "'");
  return read_checkpoint(in);
}

}  // namespace brewlab
