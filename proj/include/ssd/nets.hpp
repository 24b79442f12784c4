#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ssd/camera.hpp"
#include "ssd/graph.hpp"

namespace ssd::net {

// Ordered named parameter tensors. Order is the serialization and
// optimizer-state order, so it must stay stable.
struct ParamSet {
  std::vector<std::pair<std::string, Tensor>> items;

  Tensor* find(const std::string& name);
  const Tensor* find(const std::string& name) const;
  std::int64_t total_size() const;
};

// Graph leaves for one forward/backward pass over a parameter set.
struct BoundParams {
  std::map<std::string, diff::Var> vars;
  diff::Var operator[](const std::string& name) const;
};

BoundParams bind(diff::Graph& g, const ParamSet& params, bool requires_grad);

struct DepthNetConfig {
  int in_channels = 1;
  double d_min = 0.1;   // meters
  double d_max = 80.0;  // meters
};

// 4-level stride-2 encoder (16/32/64/128) with a mirrored skip-connection
// decoder and a sigmoid head. sigma in (0,1) maps to depth by
// 1 / (sigma*(1/d_min - 1/d_max) + 1/d_max), so depth is strictly inside
// [d_min, d_max] and monotone decreasing in sigma.
namespace depthnet {

ParamSet init(const DepthNetConfig& cfg, std::uint64_t seed);

struct Output {
  diff::Var depth;     // (H,W)
  diff::Var sigma;     // (H,W)
  diff::Var features;  // deepest encoder map (128, H/16, W/16)
};

// image dims must be divisible by 16
Output forward(diff::Var image, const BoundParams& p,
               const DepthNetConfig& cfg);

}  // namespace depthnet

// Convolutional trunk over the concatenated frame pair, global average, and
// two zero-initialized linear heads emitting axis-angle and translation,
// both scaled by 0.01 (identity pose at initialization).
namespace posenet {

ParamSet init(int in_channels, std::uint64_t seed);

struct Output {
  diff::Var axis_angle;   // (3,)
  diff::Var translation;  // (3,)
};

Output forward(diff::Var frame_a, diff::Var frame_b, const BoundParams& p);

// Pose value from a forward pass (no gradient).
cam::Pose pose_value(diff::Graph& g, const Output& out);

}  // namespace posenet

// Checkpoint container: magic "SSDF", u32 format version, then
// length-prefixed named float64 arrays, little-endian.
void write_arrays(const std::string& path,
                  const std::vector<std::pair<std::string, Tensor>>& arrays);
std::vector<std::pair<std::string, Tensor>> read_arrays(
    const std::string& path);

}  // namespace ssd::net
