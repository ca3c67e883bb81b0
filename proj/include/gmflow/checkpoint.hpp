#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "gmflow/autodiff.hpp"

namespace gmflow {

// Binary parameter container, little-endian:
//
//   magic    8 bytes  "GMFCKPT\0"
//   version  u32      kCheckpointVersion
//   count    u32      number of records
//   hash     u64      config hash of the run that wrote the file
//   records  count x { name_len u32, name bytes, rank u32,
//                      dims u64[rank], data f64[product(dims)] }
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params,
                     std::uint64_t config_hash);

// Loads values into an already-shaped store. Every record must name an
// existing parameter with an identical shape, and every parameter must be
// present; otherwise CheckpointError.
std::uint64_t load_checkpoint(const std::filesystem::path& path, ParameterStore& params);

}  // namespace gmflow
