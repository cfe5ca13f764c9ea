#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "sepvqa/num/graph.hpp"

namespace sepvqa::num {

/// Malformed or unreadable checkpoint file.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Flat little-endian layout:
//   magic "SEPVQACK" (8 bytes), version u32, record count u64,
//   then per record: name length u32, name bytes, rank u32, dims u64 x rank, float64 payload.
inline constexpr char kCheckpointMagic[8] = {'S', 'E', 'P', 'V', 'Q', 'A', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_tensors(const TensorMap& tensors);
TensorMap decode_tensors(const std::string& bytes);

void save_tensors(const std::filesystem::path& path, const TensorMap& tensors);
TensorMap load_tensors(const std::filesystem::path& path);

}  // namespace sepvqa::num
