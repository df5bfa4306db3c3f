#pragma once

#include <iosfwd>
#include <string>

#include "brewlab/nn.hpp"

namespace brewlab {

/// Checkpoint layout: a text header of key=value lines introduced by the magic
/// line "BREWLAB-CKPT 1" and terminated by an empty line, followed by `count`
/// little-endian IEEE-754 doubles.
void write_checkpoint(std::ostream& out, const ModelParams& params);
ModelParams read_checkpoint(std::istream& in);

void save_checkpoint(const std::string& path, const ModelParams& params);
ModelParams load_checkpoint(const std::string& path);

/// Header text of a spec, also used for config echoes.
std::string describe(const ModelSpec& spec);

}  // namespace brewlab
