#pragma once

#include <string>
#include <vector>

#include "brewlab/brewer.hpp"
#include "brewlab/data.hpp"

namespace brewlab {

/// Everything a victim-side evaluation needs from one brew.
struct PoisonPackage {
  PoisonCase poison_case;
  ThreatModel threat;
  BrewConfig brew;
  PoisonDelta delta;
  std::vector<double> initial_losses;
  std::vector<double> final_losses;
  std::size_t chosen = 0;

  double chosen_initial_loss() const { return initial_losses.at(chosen); }
  double chosen_final_loss() const { return final_losses.at(chosen); }
};

PoisonPackage make_package(const PoisonCase& c, const ThreatModel& threat, const BrewConfig& config,
                           const MatchResult& result);

/// Same case with epsilon 0 and an all-zero perturbation: the null attack.
PoisonPackage null_package(const PoisonPackage& p);

/// Writes `dir`/manifest.txt (case, threat, brew settings, per-restart B)
/// and `dir`/delta.bin (little-endian doubles, one block per poison).
/// `config_echo` is copied into the manifest as comment lines.
void save_package(const std::string& dir, const PoisonPackage& p, const std::string& config_echo = {});
PoisonPackage load_package(const std::string& dir, const Dataset& train, const Dataset& validation);

struct QuantizedExport {
  std::size_t clamped = 0;  // coordinates pulled back inside the integer bound
  std::size_t max_abs_units = 0;
};

/// 8-bit export of the poisoned images: one record per poison holding the
/// label byte followed by C*H*W pixel bytes, rounded to nearest. The bound is
/// re-checked against the rounded clean pixel in integer units and clamped
/// where rounding overshoots.
QuantizedExport export_quantized(const std::string& path, const Dataset& train, const PoisonPackage& p);
/// Reads an 8-bit export back into a copy of `train` and returns it. Throws
/// ConstraintViolation if any pixel differs from its rounded clean value by
/// more than floor(epsilon) units.
Dataset import_quantized(const std::string& path, const Dataset& train, const PoisonPackage& p);

}  // namespace brewlab
