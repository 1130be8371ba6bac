#pragma once

// Versioned binary checkpoint container.
//
// Layout (all integers little-endian):
//   "SPATCKPT"                       8-byte magic
//   u32 version                      currently 1
//   u64 header length, header bytes  JSON: model config, pruned layers, metadata
//   u64 tensor count
//   per tensor: u32 name length, name, u32 rank, u64 dims[rank], f64 data[numel]
//
// Tensors are the model state (parameters plus masks) in ForecasterModel::state()
// order. Saving a loaded checkpoint reproduces the original bytes.

#include <iosfwd>
#include <string>

#include <json.hpp>

#include "spat/model.hpp"

namespace spat {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ForecasterModel model;
  nlohmann::json metadata;  // free-form: stage, seed, config hash, ...
};

void write_checkpoint(std::ostream& out, const ForecasterModel& model,
                      const nlohmann::json& metadata = nlohmann::json::object());
Checkpoint read_checkpoint(std::istream& in);

void save_checkpoint(const std::string& path, const ForecasterModel& model,
                     const nlohmann::json& metadata = nlohmann::json::object());
// Throws ParseError on a missing, truncated or malformed file.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace spat
