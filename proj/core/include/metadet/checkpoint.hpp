#pragma once

#include <string>

#include "metadet/optim.hpp"

namespace metadet {

// Checkpoint file layout:
//   line 1: "metadet-checkpoint v1"
//   per tensor, in name order: "tensor <name> <d0,d1,...> <byte-offset>"
//   "data <total-bytes>"
//   raw little-endian 32-bit floats, tensors packed in manifest order
//
// Round-trips are bit-exact: the float bytes written are the float bytes
// read back, so saving and re-saving a loaded store yields identical files.
void save_checkpoint(const ParamStore& params, const std::string& path);
ParamStore load_checkpoint(const std::string& path);

}  // namespace metadet
