#include "brewlab/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <unordered_set>

#include "brewlab/errors.hpp"
#include "brewlab/rng.hpp"

namespace brewlab {

std::string to_string(Split s) { return s == Split::kTrain ? "train" : "validation"; }

std::span<const double> Dataset::image(std::size_t i) const {
  return std::span<const double>(pixels).subspan(i * image_size(), image_size());
}

std::span<double> Dataset::image(std::size_t i) {
  return std::span<double>(pixels).subspan(i * image_size(), image_size());
}

Tensor Dataset::image_tensor(std::size_t i) const {
  auto px = image(i);
  return Tensor(image_shape, std::vector<double>(px.begin(), px.end()));
}

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  Shape shape{indices.size()};
  shape.insert(shape.end(), image_shape.begin(), image_shape.end());
  std::vector<double> data;
  data.reserve(indices.size() * image_size());
  for (auto i : indices) {
    if (i >= size()) throw ShapeError("dataset index " + std::to_string(i) + " out of range");
    auto px = image(i);
    data.insert(data.end(), px.begin(), px.end());
  }
  return Tensor(std::move(shape), std::move(data));
}

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

std::vector<std::vector<std::size_t>> Dataset::by_class() const {
  std::vector<std::vector<std::size_t>> out(classes);
  for (std::size_t i = 0; i < size(); ++i) out.at(static_cast<std::size_t>(labels[i])).push_back(i);
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out{image_shape, classes, split, {}, {}, {}};
  out.pixels.reserve(indices.size() * image_size());
  for (auto i : indices) {
    auto px = image(i);
    out.pixels.insert(out.pixels.end(), px.begin(), px.end());
    out.labels.push_back(labels.at(i));
    out.ids.push_back(ids.at(i));
  }
  return out;
}

void Dataset::append(const Dataset& other) {
  if (other.image_shape != image_shape) throw ShapeError("append: image shapes differ");
  pixels.insert(pixels.end(), other.pixels.begin(), other.pixels.end());
  labels.insert(labels.end(), other.labels.begin(), other.labels.end());
  ids.insert(ids.end(), other.ids.begin(), other.ids.end());
}

void Dataset::validate() const {
  if (labels.size() != ids.size() || pixels.size() != labels.size() * image_size()) {
    throw FormatError("dataset: inconsistent pixel/label/id counts");
  }
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    if (!(pixels[i] >= 0.0 && pixels[i] <= 1.0)) {
      throw FormatError("dataset: pixel " + std::to_string(i) + " outside [0, 1]");
    }
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw FormatError("dataset: label of example " + std::to_string(i) + " out of range");
    }
  }
  std::unordered_set<std::uint64_t> seen(ids.begin(), ids.end());
  if (seen.size() != ids.size()) throw FormatError("dataset: ordering ids are not unique");
}

ChannelStats channel_stats(const Dataset& data) {
  const std::size_t channels = data.image_shape.at(0);
  const std::size_t plane = data.image_size() / channels;
  ChannelStats st{std::vector<double>(channels, 0.0), std::vector<double>(channels, 0.0)};
  if (data.size() == 0) throw FormatError("channel_stats: empty dataset");
  const double count = static_cast<double>(data.size() * plane);
  for (std::size_t c = 0; c < channels; ++c) {
    double sum = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      for (std::size_t k = 0; k < plane; ++k) sum += data.pixels[i * data.image_size() + c * plane + k];
    }
    st.mean[c] = sum / count;
    double sq = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      for (std::size_t k = 0; k < plane; ++k) {
        const double d = data.pixels[i * data.image_size() + c * plane + k] - st.mean[c];
        sq += d * d;
      }
    }
    st.std[c] = std::sqrt(sq / count);
    if (!(st.std[c] > 0.0)) st.std[c] = 1.0;
  }
  return st;
}

// ---- CIFAR-10 binary -------------------------------------------------------------

namespace {
constexpr std::size_t kCifarPixels = 3072;
constexpr std::size_t kCifarRecord = kCifarPixels + 1;

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}
}  // namespace

Dataset parse_cifar_binary(std::span<const unsigned char> bytes, Split split, std::uint64_t first_id) {
  if (bytes.size() % kCifarRecord != 0) {
    throw FormatError("cifar: length " + std::to_string(bytes.size()) + " is not a multiple of 3073 (truncated file?)");
  }
  const std::size_t n = bytes.size() / kCifarRecord;
  Dataset d{{3, 32, 32}, 10, split, {}, {}, {}};
  d.pixels.resize(n * kCifarPixels);
  d.labels.resize(n);
  d.ids.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + i * kCifarRecord;
    if (rec[0] >= 10) {
      throw FormatError("cifar: record " + std::to_string(i) + " has label byte " + std::to_string(rec[0]));
    }
    d.labels[i] = rec[0];
    d.ids[i] = first_id + i;
    for (std::size_t k = 0; k < kCifarPixels; ++k) d.pixels[i * kCifarPixels + k] = rec[1 + k] / 255.0;
  }
  return d;
}

Dataset load_cifar_binary(const std::string& path, Split split, std::uint64_t first_id) {
  const auto bytes = read_file(path);
  try {
    return parse_cifar_binary(bytes, split, first_id);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

std::vector<unsigned char> encode_cifar_binary(const Dataset& data) {
  if (data.image_shape != Shape{3, 32, 32}) throw ShapeError("cifar: images must be 3x32x32");
  std::vector<unsigned char> out(data.size() * kCifarRecord);
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.labels[i] < 0 || data.labels[i] >= 10) throw FormatError("cifar: label out of range");
    unsigned char* rec = out.data() + i * kCifarRecord;
    rec[0] = static_cast<unsigned char>(data.labels[i]);
    auto px = data.image(i);
    for (std::size_t k = 0; k < kCifarPixels; ++k) {
      rec[1 + k] = static_cast<unsigned char>(std::lround(std::clamp(px[k], 0.0, 1.0) * 255.0));
    }
  }
  return out;
}

void write_cifar_binary(const std::string& path, const Dataset& data) {
  const auto bytes = encode_cifar_binary(data);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

bool cifar_available(const std::string& dir) {
  namespace fs = std::filesystem;
  for (int b = 1; b <= 5; ++b) {
    if (!fs::exists(fs::path(dir) / ("data_batch_" + std::to_string(b) + ".bin"))) return false;
  }
  return fs::exists(fs::path(dir) / "test_batch.bin");
}

namespace {
Dataset cap_per_class(const Dataset& d, std::size_t cap) {
  std::vector<std::size_t> count(d.classes, 0), keep;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (count[static_cast<std::size_t>(d.labels[i])]++ < cap) keep.push_back(i);
  }
  return d.subset(keep);
}
}  // namespace

CifarSubset load_cifar_dir(const std::string& dir, std::size_t train_per_class,
                           std::size_t validation_per_class) {
  namespace fs = std::filesystem;
  Dataset train;
  for (int b = 1; b <= 5; ++b) {
    auto part = load_cifar_binary((fs::path(dir) / ("data_batch_" + std::to_string(b) + ".bin")).string(),
                                  Split::kTrain, static_cast<std::uint64_t>(b - 1) * 10000);
    if (b == 1) {
      train = std::move(part);
    } else {
      train.append(part);
    }
  }
  auto val = load_cifar_binary((fs::path(dir) / "test_batch.bin").string(), Split::kValidation);
  return {cap_per_class(train, train_per_class), cap_per_class(val, validation_per_class)};
}

// ---- synthetic blobs -------------------------------------------------------------

namespace {
struct Blob {
  double cy, cx, sigma;
  std::vector<double> color;
};

Blob random_blob(Rng& rng, const SynthParams& p) {
  Blob b;
  b.cy = rng.uniform(0.0, static_cast<double>(p.height - 1));
  b.cx = rng.uniform(0.0, static_cast<double>(p.width - 1));
  b.sigma = rng.uniform(1.0, std::max(1.5, static_cast<double>(std::min(p.height, p.width)) / 4.0));
  for (std::size_t c = 0; c < p.channels; ++c) b.color.push_back(rng.uniform(-0.5, 0.5));
  return b;
}

void paint(std::span<double> img, const Blob& b, double amplitude, const SynthParams& p) {
  const double inv = 1.0 / (2.0 * b.sigma * b.sigma);
  for (std::size_t y = 0; y < p.height; ++y) {
    for (std::size_t x = 0; x < p.width; ++x) {
      const double dy = static_cast<double>(y) - b.cy, dx = static_cast<double>(x) - b.cx;
      const double w = amplitude * std::exp(-(dy * dy + dx * dx) * inv);
      for (std::size_t c = 0; c < p.channels; ++c) img[(c * p.height + y) * p.width + x] += w * b.color[c];
    }
  }
}
}  // namespace

Dataset synth_dataset(const SynthParams& p, Split split) {
  if (p.classes < 2 || p.channels == 0 || p.height == 0 || p.width == 0 || p.modes_per_class == 0) {
    throw ConfigError("dataset.synth: classes >= 2 and positive image dimensions are required");
  }
  constexpr std::size_t kBlobsPerMode = 3;
  Rng proto_rng = Rng::stream(p.seed, "synth-prototypes");
  std::vector<std::vector<std::vector<Blob>>> protos(p.classes);
  for (auto& modes : protos) {
    modes.resize(p.modes_per_class);
    for (auto& blobs : modes) {
      for (std::size_t k = 0; k < kBlobsPerMode; ++k) blobs.push_back(random_blob(proto_rng, p));
    }
  }

  Dataset d{{p.channels, p.height, p.width}, p.classes, split, {}, {}, {}};
  const std::size_t n = p.classes * p.per_class;
  d.pixels.assign(n * d.image_size(), 0.0);
  d.labels.resize(n);
  d.ids.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = Rng::stream(p.seed, "synth-example", {static_cast<std::uint64_t>(split), i});
    const std::size_t label = i % p.classes;
    d.labels[i] = static_cast<int>(label);
    d.ids[i] = i;
    auto img = d.image(i);
    const auto& blobs = protos[label][rng.below(p.modes_per_class)];
    for (std::size_t c = 0; c < p.channels; ++c) {
      const double tint = 0.45 + p.nuisance * rng.uniform(-0.15, 0.15);
      std::fill(img.begin() + static_cast<long>(c * p.height * p.width),
                img.begin() + static_cast<long>((c + 1) * p.height * p.width), tint);
    }
    for (const auto& proto : blobs) {
      Blob b = proto;
      b.cy += p.jitter * rng.uniform(-1.0, 1.0);
      b.cx += p.jitter * rng.uniform(-1.0, 1.0);
      paint(img, b, 1.0 + p.nuisance * rng.uniform(-0.4, 0.4), p);
    }
    const Blob distractor = random_blob(rng, p);
    if (p.nuisance > 0.0) paint(img, distractor, 0.8 * p.nuisance, p);
    for (auto& v : img) v = std::clamp(v + p.noise * rng.normal(), 0.0, 1.0);
  }
  return d;
}

// ---- poison cases ----------------------------------------------------------------

std::size_t poison_count_for(double budget, std::size_t n) {
  // The small slack keeps e.g. 0.01 * 50000 from flooring to 499.
  return static_cast<std::size_t>(std::floor(budget * static_cast<double>(n) + 1e-9));
}

namespace {
std::vector<std::size_t> choose(Rng& rng, std::vector<std::size_t> pool, std::size_t k) {
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + rng.below(pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return pool;
}
}  // namespace

PoisonCase sample_case(const Dataset& train, const Dataset& validation, double budget,
                       std::size_t targets, std::uint64_t seed) {
  if (!(budget > 0.0 && budget <= 1.0)) throw ConfigError("threat.budget: must lie in (0, 1]");
  if (targets == 0) throw ConfigError("threat.targets: at least one target is required");
  if (train.classes != validation.classes || train.classes < 2) {
    throw ConfigError("dataset: train and validation must share at least two classes");
  }
  const std::size_t p = poison_count_for(budget, train.size());
  if (p == 0) {
    throw ConfigError("threat.budget: " + std::to_string(budget) + " of " + std::to_string(train.size()) +
                      " training images yields no poisons");
  }

  Rng rng = Rng::stream(seed, "case");
  PoisonCase c;
  c.seed = seed;
  c.budget = budget;
  c.target_class = static_cast<int>(rng.below(train.classes));
  c.adversarial_class = static_cast<int>(rng.below(train.classes - 1));
  if (c.adversarial_class >= c.target_class) ++c.adversarial_class;

  const auto val_classes = validation.by_class();
  const auto& target_pool = val_classes[static_cast<std::size_t>(c.target_class)];
  if (target_pool.size() < targets) {
    throw ConfigError("threat.targets: validation class " + std::to_string(c.target_class) + " has only " +
                      std::to_string(target_pool.size()) + " images");
  }
  c.target_indices = choose(rng, target_pool, targets);

  const auto train_classes = train.by_class();
  const auto& poison_pool = train_classes[static_cast<std::size_t>(c.adversarial_class)];
  if (poison_pool.size() < p) {
    throw ConfigError("threat.budget: class " + std::to_string(c.adversarial_class) + " has " +
                      std::to_string(poison_pool.size()) + " training images but " + std::to_string(p) +
                      " poisons are required");
  }
  c.poison_indices = choose(rng, poison_pool, p);
  std::sort(c.poison_indices.begin(), c.poison_indices.end());

  for (auto i : c.target_indices) c.target_ids.push_back(validation.ids[i]);
  for (auto i : c.poison_indices) c.poison_ids.push_back(train.ids[i]);
  return c;
}

namespace {
template <typename T>
std::string join_list(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::vector<std::uint64_t> parse_ids(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoull(item));
  return out;
}

std::vector<std::size_t> resolve(const Dataset& d, const std::vector<std::uint64_t>& ids, const char* what) {
  std::map<std::uint64_t, std::size_t> index;
  for (std::size_t i = 0; i < d.size(); ++i) index[d.ids[i]] = i;
  std::vector<std::size_t> out;
  for (auto id : ids) {
    auto it = index.find(id);
    if (it == index.end()) throw FormatError(std::string("case manifest: unknown ") + what + " id " + std::to_string(id));
    out.push_back(it->second);
  }
  return out;
}
}  // namespace

void write_case(std::ostream& out, const PoisonCase& c) {
  char budget[64];
  std::snprintf(budget, sizeof budget, "%.17g", c.budget);
  out << "seed=" << c.seed << "\n"
      << "budget=" << budget << "\n"
      << "target_class=" << c.target_class << "\n"
      << "adversarial_class=" << c.adversarial_class << "\n"
      << "target_ids=" << join_list(c.target_ids) << "\n"
      << "poison_ids=" << join_list(c.poison_ids) << "\n";
}

PoisonCase read_case(std::istream& in, const Dataset& train, const Dataset& validation) {
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("case manifest: malformed line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  for (const char* key : {"seed", "budget", "target_class", "adversarial_class", "target_ids", "poison_ids"}) {
    if (!kv.count(key)) throw FormatError(std::string("case manifest: missing '") + key + "'");
  }
  PoisonCase c;
  try {
    c.seed = std::stoull(kv["seed"]);
    c.budget = std::stod(kv["budget"]);
    c.target_class = std::stoi(kv["target_class"]);
    c.adversarial_class = std::stoi(kv["adversarial_class"]);
    c.target_ids = parse_ids(kv["target_ids"]);
    c.poison_ids = parse_ids(kv["poison_ids"]);
  } catch (const std::logic_error&) {
    throw FormatError("case manifest: malformed number");
  }
  c.target_indices = resolve(validation, c.target_ids, "target");
  c.poison_indices = resolve(train, c.poison_ids, "poison");
  for (auto i : c.poison_indices) {
    if (train.labels[i] != c.adversarial_class) throw FormatError("case manifest: poison outside the adversarial class");
  }
  for (auto i : c.target_indices) {
    if (validation.labels[i] != c.target_class) throw FormatError("case manifest: target label mismatch");
  }
  return c;
}

}  // namespace brewlab
