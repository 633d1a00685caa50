#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "angie/nn/params.hpp"

namespace angie::nn {

inline constexpr int kCheckpointFormatVersion = 1;

// On-disk layout:
//   line 1: "ANGIECKPT"
//   line 2: byte length of the manifest
//   manifest: JSON {format_version, kind, config_digest, config, meta,
//                   tensors: [{name, shape, offset, trainable}]}
//   payload: every tensor as little-endian float32, in manifest order.
struct Checkpoint {
  std::string kind;
  std::string config_digest;
  nlohmann::json config;
  nlohmann::json meta;
  ParameterSet params;
};

void SaveCheckpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint LoadCheckpoint(const std::string& path);

// Rounds every entry through float32, matching what a save/load cycle does.
void RoundToFloat32(ParameterSet& params);

}  // namespace angie::nn
