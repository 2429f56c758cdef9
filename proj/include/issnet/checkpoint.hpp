#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "issnet/config.hpp"
#include "issnet/network.hpp"
#include "issnet/optimizer.hpp"
#include "issnet/sparsify.hpp"

namespace issnet {

inline constexpr const char* kCheckpointFormat = "issnet.checkpoint.v1";

enum class ElementType { f64, f32 };

/// Everything needed to resume or post-process a run at an epoch boundary.
struct Checkpoint {
  std::size_t epoch = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
  NetworkSpec net;
  CoupledState state;
  std::optional<Mask> mask;
};

/// File layout: one line of JSON manifest (format, element type, tensor and
/// mask table with byte offsets into the payload, config hash), a newline,
/// then the little-endian payload. Masks are packed one bit per entry, LSB
/// first, each mask padded to a whole byte.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt, ElementType type = ElementType::f64);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Standard name inside a run directory: ckpt-epoch-0002.bin
std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::size_t epoch);

}  // namespace issnet
