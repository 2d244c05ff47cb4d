#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cvm/feature_net.hpp"

namespace cvm {

// Network checkpoint:
//   "CVMNET1\0", u32 layer count,
//   per layer: u8 kind code, u32 in_dim, u32 out_dim,
//   then every parameter as f32 in the network's flat order.
// All integers and floats are little-endian. Optional tagged sections may
// follow: 4-byte ASCII tag, u64 payload length, payload.
std::vector<std::uint8_t> encode_net(const FeatureNet& net);

struct Checkpoint {
  FeatureNet net;
  std::map<std::string, std::vector<std::uint8_t>> sections;  // keyed by 4-char tag
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Well-known section tags.
inline constexpr const char* kSectionHead = "HEAD";    // classifier head network
inline constexpr const char* kSectionBuffer = "RBUF";  // replay buffer snapshot
inline constexpr const char* kSectionMeta = "META";    // JSON metadata

}  // namespace cvm
