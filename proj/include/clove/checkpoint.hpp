#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "clove/tensor.hpp"

namespace clove {

inline constexpr char kCheckpointMagic[4] = {'C', 'L', 'V', 'S'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

/// "CLVS", u32 version, u64 step, then records until EOF:
/// u16 name length, name bytes, u8 dtype (0 = f32), u8 ndim, u32 dims, payload.
/// All integers and floats little-endian.
struct CheckpointFile {
  std::uint64_t step = 0;
  std::vector<CheckpointRecord> records;

  const CheckpointRecord* find(const std::string& name) const;
};

void write_checkpoint(const std::string& path, const CheckpointFile& file);
/// Throws DataError naming the offending record on any malformed input.
CheckpointFile read_checkpoint(const std::string& path);

}  // namespace clove
