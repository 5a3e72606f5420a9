// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

#include "sevnet/network.hpp"

namespace sevnet {

class Sgd;

enum class CheckpointErrorKind {
  io,
  truncated,
  bad_magic,
  version_mismatch,
  checksum_mismatch,
  malformed,
};

const char* to_string(CheckpointErrorKind kind);

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}
  CheckpointErrorKind kind() const { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout (little-endian):
//   "SEVCKPT\0" | u32 version | u64 payload bytes | payload | u32 crc32(payload)
// payload:
//   string network config (key = value lines) | u32 record count |
//   records { string name | u32 rank | u64 extents... | f64 values... }
// Parameters come first in network order, then BN running statistics, then
// optional optimizer momentum buffers named "<param>.velocity".

void save_checkpoint(Model& model, const std::string& path, const Sgd* optimizer = nullptr);
Model load_checkpoint(const std::string& path);
/// Restores momentum buffers written by save_checkpoint into `optimizer`,
/// whose parameter list must match the checkpointed model.
void load_optimizer_state(const std::string& path, Sgd& optimizer);

}  // namespace sevnet
