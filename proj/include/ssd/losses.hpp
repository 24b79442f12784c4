#pragma once

#include <map>
#include <string>
#include <vector>

#include "ssd/camera.hpp"
#include "ssd/graph.hpp"

namespace ssd::loss {

// SSIM with 3x3 average pooling (replicate padding), C1 = 0.01^2,
// C2 = 0.03^2, channel-averaged to one (H,W) map in [-1,1].
diff::Var ssim_map(diff::Var a, diff::Var b);

// pe = (alpha/2)(1 - SSIM) + (1 - alpha)|a - b|, alpha = 0.85; (H,W).
diff::Var photometric_error(diff::Var a, diff::Var b);

constexpr double kSsimC1 = 1e-4;
constexpr double kSsimC2 = 9e-4;
constexpr double kPeAlpha = 0.85;

struct Warp {
  diff::Var image;  // (C,H,W)
  Tensor valid;     // (H,W) 0/1
};

struct Reprojection {
  diff::Var total;  // scalar: mean over pixels valid in >= 1 warp
  diff::Var map;    // (H,W): per-pixel min pe, zero where no warp is valid
  Tensor union_valid;
};

// Per-pixel minimum photometric error over the warps. Errors if every pixel
// is invalid in every warp.
Reprojection reprojection_loss(diff::Var target,
                               const std::vector<Warp>& warps);

// |D_s - D_t| / D_t per pixel; errors on non-positive teacher depth.
diff::Var distillation_loss(diff::Var student_depth, diff::Var teacher_depth);

enum class MaskConvention {
  keep_teacher_reasonable,  // M = [T-pe <= S-pe] (default; ties keep)
  eq5_literal,              // M = [T-pe  > S-pe]
};

struct TeacherMask {
  Tensor mask;  // (H,W) 0/1
};

// Warps the ORIGINAL adjacent frames with both depths using the teacher's
// pose pair, compares the min photometric errors, and keeps pixels where the
// teacher's estimate is at least as photo-consistent as the student's
// (default convention). Pixels with no valid warp tie at the sentinel error
// and follow the tie rule of the active convention.
TeacherMask teacher_mask(const Tensor& target, const Tensor& prev,
                         const Tensor& next, const Tensor& student_depth,
                         const Tensor& teacher_depth,
                         const cam::Pose& pose_prev,
                         const cam::Pose& pose_next, const cam::Intrinsics& K,
                         MaskConvention convention =
                             MaskConvention::keep_teacher_reasonable);

// mean of mask (.) distill_map over mask==1 pixels; 0 when the mask is empty.
diff::Var teacher_loss(const Tensor& mask, diff::Var distill_map);

// 1 - mean per-pixel cosine between the feature fields; in [0,2].
diff::Var semantic_loss(diff::Var student_features,
                        diff::Var reference_features);

// Edge-aware first-order smoothness of the mean-normalized disparity.
diff::Var smoothness_loss(diff::Var disparity, const Tensor& image);

// Scalar summary of one training step. total == sum(weight_i * term_i).
struct LossReport {
  double total = 0.0;
  std::map<std::string, double> per_term;   // unweighted term values
  std::map<std::string, double> weights;
  std::map<std::string, Tensor> maps;       // optional diagnostics
};

}  // namespace ssd::loss
