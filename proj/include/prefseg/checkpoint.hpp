#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "prefseg/toy_model.hpp"

namespace prefseg::toy {

struct CheckpointMeta {
  std::string config_hash;
  std::string stage;
  std::size_t step = 0;
  std::uint64_t seed = 0;
};

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  CheckpointMeta meta;
};

/// Writes manifest.json plus one raw little-endian float64 blob per tensor
/// (row-major).
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
/// Throws IoError on missing files and InvariantError on a hash mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

std::string hex64(std::uint64_t v);

}  // namespace prefseg::toy
