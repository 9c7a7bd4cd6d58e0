#pragma once

#include <cstdint>
#include <filesystem>
#include <string_view>

#include "fedsl/param_vector.hpp"

namespace fedsl {

enum class ModelRole : std::uint32_t { kStudent = 0, kTeacher = 1 };

std::string_view to_string(ModelRole role);

struct Checkpoint {
  ParamVector params;
  std::int64_t round = 0;
  ModelRole role = ModelRole::kStudent;
};

// On-disk format, all integers and reals little-endian:
//   "FEDSLCKP" | u32 version | u32 role | i64 round | u32 n_segments
//   n_segments x ( u32 name_len | name bytes | i64 rows | i64 cols )
//   layout.size() x f64 values, segments in order, each column-major
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace fedsl
