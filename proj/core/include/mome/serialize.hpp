#pragma once

#include <filesystem>
#include <map>

#include "mome/nn.hpp"
#include "mome/tensor.hpp"

namespace mome {

// Checkpoint container: a JSON header listing (name, shape) in payload order,
// then all values as flat little-endian 64-bit floats. Round-trips bit-exact.
void save_checkpoint(const std::filesystem::path& path, const ParamSet& params);

// Loads into the given params; every named tensor must exist with a matching
// shape.
void load_checkpoint(const std::filesystem::path& path, const ParamSet& params);

// Raw read, for tools that inspect checkpoints without a model.
std::map<std::string, Tensor> read_checkpoint(const std::filesystem::path& path);

}  // namespace mome
