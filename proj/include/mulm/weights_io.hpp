#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "mulm/model.hpp"

namespace mulm {

// Container layout (all integers little-endian):
//   "MULM" | u32 version | u32 header_len | header JSON | f32 payloads
// Every payload starts at an absolute file offset that is a multiple of 64;
// gaps are zero-filled. The header carries the config fields, the declared
// parameter count, the chat marker spellings and a manifest
// [{name, shape, offset}] in the canonical tensor order.
inline constexpr std::uint32_t kWeightsFormatVersion = 1;
inline constexpr std::size_t kTensorAlignment = 64;

struct LoadedWeights {
  ModelConfig config;
  Weights weights;
};

std::vector<std::uint8_t> serialize_weights(const ModelConfig& config, const Weights& weights);

/// FormatError on bad magic/version/header, IntegrityError on shape or count
/// mismatch, IoError when the payload is truncated.
LoadedWeights parse_weights(std::span<const std::uint8_t> bytes);

LoadedWeights load_weights(const std::filesystem::path& path);
void save_weights(const std::filesystem::path& path, const ModelConfig& config,
                  const Weights& weights);

}  // namespace mulm
