#pragma once

#include <cstdint>
#include <filesystem>

#include "xvit/model.hpp"

// Checkpoint layout, all integers little-endian:
//
//   "XVIT" | u32 version | u64 header length | u32 CRC-32 of header |
//   header (JSON) | zero padding | tensor payloads
//
// The header holds the model config and the ordered tensor list
// {name, shape, dtype, offset}. Offsets are absolute and 64-byte aligned;
// payloads are raw little-endian elements.
namespace xvit {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
};

void save_checkpoint(const ModelParams& mp, const ModelConfig& cfg,
                     const std::filesystem::path& path);

// Throws LoadError on bad magic, version mismatch, header corruption,
// truncation, or a tensor whose shape disagrees with the stored config.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// As above, and additionally requires the stored tensors to fit `expected`.
// The error names the first offending tensor.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const ModelConfig& expected);

}  // namespace xvit
