#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssd/camera.hpp"
#include "ssd/tensor.hpp"

namespace ssd::scene {

struct SceneConfig {
  double base_depth = 5.0;      // meters, fronto-parallel base plane
  double bump_amplitude = 1.4;  // total relief bound (0 = flat plane)
  int n_bumps = 6;
  double bump_sigma_min = 0.7;  // meters, lateral
  double bump_sigma_max = 1.8;
  double extent_x = 4.5;        // bump placement box, meters
  double extent_y = 3.5;
  double z_near = 0.5;
  double z_far = 80.0;
  // multi-octave value-noise texture (wavelengths in meters)
  double texture_wavelength = 1.6;
  int texture_octaves = 3;
  double texture_amplitude = 0.48;  // total, values stay in [0,1]
  double march_step = 0.03;         // raycast step, meters along z

  void validate() const;
};

struct Bump {
  double x, y, amp, sigma;
};

// Height-field depth surface z = Z(x,y) over the camera-frame xy plane with
// a procedural value-noise albedo. All evaluations are pure functions of
// (config, seed).
struct Scene {
  SceneConfig cfg;
  std::uint64_t seed = 0;
  std::vector<Bump> bumps;

  double height(double x, double y) const;   // in [z_near, z_far]
  double texture(double x, double y) const;  // in [0,1]
};

Scene generate_scene(const SceneConfig& cfg, std::uint64_t seed);

struct SampleTriplet {
  Tensor prev, curr, next;  // (C,H,W) images in [0,1]
  cam::Intrinsics K;
  Tensor gt_depth;          // (H,W) z-depth of curr, meters
  cam::Pose pose_prev;      // t -> t-1
  cam::Pose pose_next;      // t -> t+1
  std::string condition = "day-clear";
  std::string id;
  std::uint64_t seed = 0;
};

// Ray-casts the textured height field from the three camera poses.
// gt_depth is the exact cast z-depth at the center frame. Errors when less
// than `min_visible` of center pixels stay in view in an adjacent frame, or
// when the occluded fraction (depth-test disagreement) exceeds `max_occluded`.
SampleTriplet render_triplet(const Scene& scene, const cam::Pose& to_prev,
                             const cam::Pose& to_next,
                             const cam::Intrinsics& K,
                             double min_visible = 0.8,
                             double max_occluded = 0.02);

// Draws a scene and a plausible forward-motion pose pair from substreams of
// `seed`, retrying rejected motions a bounded number of times.
SampleTriplet make_triplet(const SceneConfig& cfg, const cam::Intrinsics& K,
                           std::uint64_t seed, const std::string& id);

// -- dataset layout ---------------------------------------------------------
// <root>/<split>/<id>/frame_{prev,curr,next}.png  8-bit gray or RGB
//                     depth.f32                    raw LE float32, row-major
//                     meta.json                    intrinsics, poses, tag

void save_triplet(const std::string& dir, const SampleTriplet& t);
SampleTriplet load_triplet(const std::string& dir);

std::vector<std::string> list_split_ids(const std::string& root,
                                        const std::string& split);
std::vector<SampleTriplet> load_split(const std::string& root,
                                      const std::string& split);

}  // namespace ssd::scene
