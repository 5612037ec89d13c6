#pragma once

#include <string>

#include "json.hpp"
#include "magicvid/params.hpp"

namespace magicvid {

// Checkpoint directory: manifest.json plus weights.bin. The manifest lists
// every tensor as name/dtype/shape/offset/length (bytes into the blob, in
// registration order) alongside free-form metadata (model config, schedule,
// prediction target, step counter). Blob data is little-endian float32, so
// save followed by load is a bitwise round trip.
void save_checkpoint(const ParamStore<float>& params, const nlohmann::json& meta,
                     const std::string& dir);

struct LoadedCheckpoint {
  ParamStore<float> params;
  nlohmann::json meta;
};

// Validates the manifest before touching tensor data: dtype f32, byte length
// 4*prod(shape), offsets in-bounds and non-overlapping. Violations raise
// IoError naming the offending tensor.
LoadedCheckpoint load_checkpoint(const std::string& dir);

}  // namespace magicvid
