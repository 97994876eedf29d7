#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "pefnet/keyvalue.hpp"
#include "pefnet/tensor.hpp"

namespace pefnet {

inline constexpr char kCheckpointMagic[4] = {'P', 'E', 'F', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// On-disk layout, all integers little-endian:
///   "PEFN" | version u32 | config length u32 | config UTF-8 (key = value lines)
///   | tensor count u32 | per tensor: name length u16, name UTF-8, rank u8,
///   extents u32 x rank, float32 data.
struct Checkpoint {
  KeyValues config;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
/// Throws DataError on bad magic, unsupported version or truncation (with the byte offset).
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace pefnet
