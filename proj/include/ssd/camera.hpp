#pragma once

#include <array>

#include "ssd/graph.hpp"
#include "ssd/tensor.hpp"

namespace ssd::cam {

struct Intrinsics {
  double fx = 0.0, fy = 0.0;
  double cx = 0.0, cy = 0.0;
  int width = 0, height = 0;

  void validate() const;
};

// Rigid transform x' = R x + t. For poses built from an axis-angle source the
// source vector is kept so serialization can round-trip bit-exactly.
struct Pose {
  std::array<double, 9> R{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major
  std::array<double, 3> t{0, 0, 0};
  std::array<double, 3> aa{0, 0, 0};  // axis-angle source of R

  static Pose identity() { return Pose{}; }
  static Pose from_axis_angle(const std::array<double, 3>& w,
                              const std::array<double, 3>& trans);

  Pose inverse() const;
  std::array<double, 3> apply(const std::array<double, 3>& p) const;
  double rotation_error() const;  // max deviation from R^T R = I, det = 1
};

// Rodrigues with the Taylor branch below |w| = 1e-8.
std::array<double, 9> axis_angle_to_matrix(const std::array<double, 3>& w);

struct SampleGrid {
  Tensor coords;  // (H,W,2) continuous (u,v)
  Tensor valid;   // (H,W) in {0,1}
};

// -- plain (non-graph) geometry, used by rendering and evaluation ---------

// depth (H,W) -> camera-frame points (H,W,3); point = depth * K^-1 (u,v,1)
Tensor backproject(const Tensor& depth, const Intrinsics& K,
                   bool allow_nonpositive = false);

// points (H,W,3) -> pixel grid in the target camera. valid = 0 where the
// transformed z <= z_min or the pixel lands outside [0,w-1]x[0,h-1].
SampleGrid project(const Tensor& points, const Pose& pose,
                   const Intrinsics& K, double z_min = 1e-3);

// Warp src by sampling it at the grid induced by (depth, pose, K).
// Out-of-frame samples are edge-clamped and reported invalid.
struct ViewSynthesis {
  Tensor image;  // (C,H,W)
  Tensor valid;  // (H,W)
};
ViewSynthesis synthesize_view(const Tensor& src, const Tensor& depth,
                              const Pose& pose, const Intrinsics& K,
                              double z_min = 1e-3);

// -- graph (differentiable) versions --------------------------------------

// w (3,) axis-angle -> rotation matrix (3,3)
diff::Var rotation_from_axis_angle(diff::Var w);

// depth (H,W) -> points (N,3), N = H*W
diff::Var backproject_var(diff::Var depth, const Intrinsics& K);

struct GridVar {
  diff::Var coords;  // (H,W,2)
  Tensor valid;      // (H,W), not differentiable
};

// rot_t is the TRANSPOSED rotation as a Var (so points * rot_t == R p).
GridVar project_var(diff::Var points, diff::Var rot_t, diff::Var trans,
                    const Intrinsics& K, double z_min = 1e-3);

struct WarpVar {
  diff::Var image;  // (C,H,W)
  Tensor valid;     // (H,W)
};

// Pose given as graph leaves: axis-angle (3,) + translation (3,). The result
// is differentiable w.r.t. src, depth and both pose vectors.
WarpVar synthesize_view_var(diff::Var src, diff::Var depth, diff::Var pose_aa,
                            diff::Var pose_t, const Intrinsics& K,
                            double z_min = 1e-3);

// Fixed-pose overload (pose enters as constants).
WarpVar synthesize_view_var(diff::Var src, diff::Var depth, const Pose& pose,
                            const Intrinsics& K, double z_min = 1e-3);

}  // namespace ssd::cam
