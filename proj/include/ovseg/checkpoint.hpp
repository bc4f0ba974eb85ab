#pragma once

// Binary checkpoint: 8-byte magic, u32 version, u64 header length, a JSON
// header (configs, counters, rng state, tensor index), then raw
// little-endian float64 tensor data in index order.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "json.hpp"
#include "ovseg/nn.hpp"

namespace ovseg {

inline constexpr char kCheckpointMagic[8] = {'O', 'V', 'S', 'G', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using TensorGroup = std::map<std::string, ag::Matrix>;

struct Checkpoint {
  nlohmann::json config = nlohmann::json::object();
  std::int64_t step = 0;
  int epoch = 0;
  std::string rng_state;
  std::map<std::string, TensorGroup> groups;  // e.g. online, momentum, adam_m, adam_v
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

TensorGroup snapshot(const nn::ParamStore& store);
// Names and shapes must match the store exactly.
void restore(nn::ParamStore& store, const TensorGroup& values);

}  // namespace ovseg
