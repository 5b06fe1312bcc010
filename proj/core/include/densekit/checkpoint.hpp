#pragma once

#include <map>
#include <string>

#include "densekit/model.hpp"

namespace densekit {

// Checkpoint container, version 1:
//   bytes 0..3   magic "DKPT"
//   bytes 4..7   format version, u32 little endian
//   bytes 8..11  header length in bytes, u32 little endian
//   header       JSON: config, input_size, epoch, rng_state, plan_digest,
//                and a tensor directory (name, dtype, shape, offset, length)
//   payload      raw little-endian float32 buffers, in directory order
// Directory offsets are relative to the start of the payload.
//
// The directory holds the parameters, each bn layer's running statistics
// ("<bn>.running_mean"/"<bn>.running_var"), and any extra tensors the caller
// supplies (the trainer stores optimizer velocity and normalization stats so a
// resumed run continues bit-identically).

inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Model& model, const std::string& path,
                     const std::map<std::string, Tensor>* extra = nullptr);

// extra_out, when given, receives every directory tensor that is neither a
// parameter nor a running statistic
Model load_checkpoint(const std::string& path, std::map<std::string, Tensor>* extra_out = nullptr);

// throws PlanMismatchError when the checkpointed architecture differs
void require_plan_match(const Model& loaded, const LayerPlan& expected);

}  // namespace densekit
