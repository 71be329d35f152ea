#pragma once

#include <memory>
#include <stdexcept>
#include <string>

#include "mhenet/network.hpp"

namespace mhenet {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[4] = {'M', 'H', 'E', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout (little endian):
//   "MHEN" | u32 version | u32 config length | config JSON
//   u32 entry count | entries: u16 name length, name, u8 dtype (0 f32, 1 f64),
//   u8 rank, u32 dims[4], u64 payload offset (from file start)
//   payloads
void save_checkpoint(const std::string& path, const Network& net);

/// Rebuilds the network from the stored config and loads every tensor.
std::unique_ptr<Network> load_checkpoint(const std::string& path);

/// Loads into an existing network; the stored config must match structurally.
void load_checkpoint_into(const std::string& path, Network& net);

nlohmann::json read_checkpoint_config(const std::string& path);

}  // namespace mhenet
