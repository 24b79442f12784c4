#include "ssd/losses.hpp"

#include <cmath>

#include "ssd/kernels.hpp"

namespace ssd::loss {

using diff::Var;

namespace {

constexpr double kInvalidPe = 1e6;  // sentinel, far above any pe in [0,1]

Var channel_mean(Var x) {
  diff::Graph& g = *x.g;
  const Shape& s = g.val(x).shape;
  SSD_CHECK(s.size() == 3, "channel_mean: expects (C,H,W), got ",
            shape_str(s));
  const int c = s[0], h = s[1], w = s[2];
  if (c == 1) return diff::reshape(x, {h, w});
  Tensor row({1, c}, 1.0 / double(c));
  Var m = diff::matmul(g.constant(std::move(row)),
                       diff::reshape(x, {c, h * w}));
  return diff::reshape(m, {h, w});
}

void check_images(const char* what, Var a, Var b) {
  const Tensor& ta = a.g->val(a);
  const Tensor& tb = b.g->val(b);
  SSD_CHECK(ta.shape.size() == 3 && same_shape(ta, tb), what,
            ": shape mismatch ", shape_str(ta.shape), " vs ",
            shape_str(tb.shape));
}

}  // namespace

Var ssim_map(Var a, Var b) {
  check_images("ssim", a, b);
  Var mu_a = diff::avgpool3(a);
  Var mu_b = diff::avgpool3(b);
  Var sigma_a = diff::sub(diff::avgpool3(diff::mul(a, a)), diff::mul(mu_a, mu_a));
  Var sigma_b = diff::sub(diff::avgpool3(diff::mul(b, b)), diff::mul(mu_b, mu_b));
  Var sigma_ab =
      diff::sub(diff::avgpool3(diff::mul(a, b)), diff::mul(mu_a, mu_b));
  Var num = diff::mul(2.0 * diff::mul(mu_a, mu_b) + kSsimC1,
                      2.0 * sigma_ab + kSsimC2);
  Var den = diff::mul(diff::mul(mu_a, mu_a) + diff::mul(mu_b, mu_b) + kSsimC1,
                      diff::add(sigma_a, sigma_b) + kSsimC2);
  return channel_mean(diff::div(num, den));
}

Var photometric_error(Var a, Var b) {
  check_images("photometric_error", a, b);
  Var ssim = ssim_map(a, b);
  Var l1 = channel_mean(diff::abs(diff::sub(a, b)));
  return diff::add((kPeAlpha / 2.0) * (1.0 - ssim), (1.0 - kPeAlpha) * l1);
}

Reprojection reprojection_loss(Var target, const std::vector<Warp>& warps) {
  SSD_CHECK(!warps.empty(), "reprojection_loss: needs at least one warp");
  diff::Graph& g = *target.g;
  const Shape& s = g.val(target).shape;
  const int h = s[1], w = s[2];

  Tensor union_valid({h, w});
  Var minmap{};
  for (std::size_t i = 0; i < warps.size(); ++i) {
    const Tensor& valid = warps[i].valid;
    SSD_CHECK(valid.shape == Shape({h, w}), "reprojection_loss: valid mask ",
              shape_str(valid.shape), " does not match image ", shape_str(s));
    Var pe = photometric_error(target, warps[i].image);
    Tensor penalty({h, w});
    for (std::int64_t p = 0; p < penalty.size(); ++p) {
      penalty[p] = valid[p] > 0.5 ? 0.0 : kInvalidPe;
      if (valid[p] > 0.5) union_valid[p] = 1.0;
    }
    Var masked = diff::add(diff::mul(pe, g.constant(valid)),
                           g.constant(std::move(penalty)));
    minmap = (i == 0) ? masked : diff::min_elem(minmap, masked);
  }
  const double count = kern::block_sum(union_valid.data.data(),
                                       union_valid.size());
  SSD_CHECK(count > 0.0, "reprojection_loss: every pixel is invalid in every "
                         "warp");
  Reprojection out;
  out.map = diff::mul(minmap, g.constant(union_valid));
  out.total = diff::sum(out.map) * (1.0 / count);
  out.union_valid = std::move(union_valid);
  return out;
}

Var distillation_loss(Var student_depth, Var teacher_depth) {
  const Tensor& dt = teacher_depth.g->val(teacher_depth);
  const Tensor& ds = student_depth.g->val(student_depth);
  SSD_CHECK(same_shape(ds, dt), "distillation_loss: shape mismatch ",
            shape_str(ds.shape), " vs ", shape_str(dt.shape));
  SSD_CHECK(dt.min_value() > 0.0, "distillation_loss: non-positive teacher "
                                  "depth ",
            dt.min_value());
  return diff::div(diff::abs(diff::sub(student_depth, teacher_depth)),
                   teacher_depth);
}

namespace {

// min-over-adjacent-frames pe of `target` against warps produced with one
// depth map and the teacher pose pair; returns values only.
Tensor warp_pe_values(diff::Graph& g, Var target, Var prev, Var next,
                      const Tensor& depth, const cam::Pose& pose_prev,
                      const cam::Pose& pose_next, const cam::Intrinsics& K) {
  Var d = g.constant(depth);
  cam::WarpVar wp = cam::synthesize_view_var(prev, d, pose_prev, K);
  cam::WarpVar wn = cam::synthesize_view_var(next, d, pose_next, K);
  std::vector<Warp> warps{{wp.image, wp.valid}, {wn.image, wn.valid}};
  Var minmap{};
  for (std::size_t i = 0; i < warps.size(); ++i) {
    Var pe = photometric_error(target, warps[i].image);
    Tensor penalty(warps[i].valid.shape);
    for (std::int64_t p = 0; p < penalty.size(); ++p)
      penalty[p] = warps[i].valid[p] > 0.5 ? 0.0 : kInvalidPe;
    Var masked = diff::add(diff::mul(pe, g.constant(warps[i].valid)),
                           g.constant(std::move(penalty)));
    minmap = (i == 0) ? masked : diff::min_elem(minmap, masked);
  }
  return g.val(minmap);
}

}  // namespace

TeacherMask teacher_mask(const Tensor& target, const Tensor& prev,
                         const Tensor& next, const Tensor& student_depth,
                         const Tensor& teacher_depth,
                         const cam::Pose& pose_prev,
                         const cam::Pose& pose_next, const cam::Intrinsics& K,
                         MaskConvention convention) {
  SSD_CHECK(same_shape(student_depth, teacher_depth),
            "teacher_mask: depth shape mismatch ",
            shape_str(student_depth.shape), " vs ",
            shape_str(teacher_depth.shape));
  diff::Graph g;
  Var t = g.constant(target);
  Var p = g.constant(prev);
  Var n = g.constant(next);
  Tensor s_pe = warp_pe_values(g, t, p, n, student_depth, pose_prev,
                               pose_next, K);
  Tensor t_pe = warp_pe_values(g, t, p, n, teacher_depth, pose_prev,
                               pose_next, K);
  TeacherMask out;
  out.mask = Tensor(s_pe.shape);
  for (std::int64_t i = 0; i < s_pe.size(); ++i) {
    const bool keep = convention == MaskConvention::keep_teacher_reasonable
                          ? t_pe[i] <= s_pe[i]
                          : t_pe[i] > s_pe[i];
    out.mask[i] = keep ? 1.0 : 0.0;
  }
  return out;
}

Var teacher_loss(const Tensor& mask, Var distill_map) {
  diff::Graph& g = *distill_map.g;
  SSD_CHECK(mask.shape == g.val(distill_map).shape,
            "teacher_loss: mask ", shape_str(mask.shape),
            " does not match map ", shape_str(g.val(distill_map).shape));
  double count = 0.0;
  for (double v : mask.data) count += v > 0.5 ? 1.0 : 0.0;
  if (count == 0.0) return g.constant(0.0);
  return diff::sum(diff::mul(distill_map, g.constant(mask))) * (1.0 / count);
}

Var semantic_loss(Var student_features, Var reference_features) {
  const Tensor& fs = student_features.g->val(student_features);
  const Tensor& fr = reference_features.g->val(reference_features);
  SSD_CHECK(fs.shape.size() == 3 && same_shape(fs, fr),
            "semantic_loss: feature shape mismatch ", shape_str(fs.shape),
            " vs ", shape_str(fr.shape));
  return 1.0 - diff::mean(diff::cosine_map(student_features,
                                           reference_features));
}

Var smoothness_loss(Var disparity, const Tensor& image) {
  diff::Graph& g = *disparity.g;
  const Shape& s = g.val(disparity).shape;
  SSD_CHECK(s.size() == 2, "smoothness_loss: disparity must be (H,W), got ",
            shape_str(s));
  SSD_CHECK(image.shape.size() == 3 && image.shape[1] == s[0] &&
                image.shape[2] == s[1],
            "smoothness_loss: image ", shape_str(image.shape),
            " does not match disparity ", shape_str(s));
  const int h = s[0], w = s[1], c = image.shape[0];

  Var norm = diff::div(disparity, diff::broadcast(
                                      diff::mean(disparity) + 1e-7, {h, w}));
  Var nd3 = diff::reshape(norm, {1, h, w});
  Tensor kx({1, 1, 1, 2});
  kx[0] = -1.0;
  kx[1] = 1.0;
  Tensor ky({1, 1, 2, 1});
  ky[0] = -1.0;
  ky[1] = 1.0;
  Var dx = diff::abs(diff::conv2d(nd3, g.constant(std::move(kx)), Var{}, 1, 0));
  Var dy = diff::abs(diff::conv2d(nd3, g.constant(std::move(ky)), Var{}, 1, 0));

  // image-gradient weights are constants
  Tensor wx({1, h, w - 1}), wy({1, h - 1, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x + 1 < w; ++x) {
      double gsum = 0.0;
      for (int ch = 0; ch < c; ++ch)
        gsum += std::fabs(image.at(ch, y, x + 1) - image.at(ch, y, x));
      wx[std::int64_t(y) * (w - 1) + x] = std::exp(-gsum / double(c));
    }
  for (int y = 0; y + 1 < h; ++y)
    for (int x = 0; x < w; ++x) {
      double gsum = 0.0;
      for (int ch = 0; ch < c; ++ch)
        gsum += std::fabs(image.at(ch, y + 1, x) - image.at(ch, y, x));
      wy[std::int64_t(y) * w + x] = std::exp(-gsum / double(c));
    }
  return diff::add(diff::mean(diff::mul(dx, g.constant(std::move(wx)))),
                   diff::mean(diff::mul(dy, g.constant(std::move(wy)))));
}

}  // namespace ssd::loss
