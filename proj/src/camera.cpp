#include "ssd/camera.hpp"

#include <cmath>
#include <limits>

namespace ssd::cam {

using diff::Var;

void Intrinsics::validate() const {
  SSD_CHECK(fx > 0.0 && fy > 0.0, "intrinsics: focal lengths must be positive, got fx=",
            fx, " fy=", fy);
  SSD_CHECK(width > 0 && height > 0, "intrinsics: bad image size ", width, "x",
            height);
  SSD_CHECK(cx >= 0.0 && cx < double(width), "intrinsics: cx=", cx,
            " outside [0,", width, ")");
  SSD_CHECK(cy >= 0.0 && cy < double(height), "intrinsics: cy=", cy,
            " outside [0,", height, ")");
}

std::array<double, 9> axis_angle_to_matrix(const std::array<double, 3>& w) {
  const double t2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
  double a, b;
  if (t2 < 1e-16) {
    a = 1.0 - t2 / 6.0;
    b = 0.5 - t2 / 24.0;
  } else {
    const double th = std::sqrt(t2);
    a = std::sin(th) / th;
    b = (1.0 - std::cos(th)) / t2;
  }
  const double wx = w[0], wy = w[1], wz = w[2];
  // I + a*[w]x + b*[w]x^2
  return {1.0 + b * (-wz * wz - wy * wy), -a * wz + b * wx * wy,
          a * wy + b * wx * wz,
          a * wz + b * wx * wy, 1.0 + b * (-wz * wz - wx * wx),
          -a * wx + b * wy * wz,
          -a * wy + b * wx * wz, a * wx + b * wy * wz,
          1.0 + b * (-wy * wy - wx * wx)};
}

Pose Pose::from_axis_angle(const std::array<double, 3>& w,
                           const std::array<double, 3>& trans) {
  Pose p;
  p.R = axis_angle_to_matrix(w);
  p.t = trans;
  p.aa = w;
  return p;
}

Pose Pose::inverse() const {
  Pose p;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) p.R[std::size_t(r * 3 + c)] = R[std::size_t(c * 3 + r)];
  for (int r = 0; r < 3; ++r)
    p.t[std::size_t(r)] = -(p.R[std::size_t(r * 3)] * t[0] + p.R[std::size_t(r * 3 + 1)] * t[1] +
                            p.R[std::size_t(r * 3 + 2)] * t[2]);
  p.aa = {-aa[0], -aa[1], -aa[2]};
  return p;
}

std::array<double, 3> Pose::apply(const std::array<double, 3>& p) const {
  return {R[0] * p[0] + R[1] * p[1] + R[2] * p[2] + t[0],
          R[3] * p[0] + R[4] * p[1] + R[5] * p[2] + t[1],
          R[6] * p[0] + R[7] * p[1] + R[8] * p[2] + t[2]};
}

double Pose::rotation_error() const {
  double worst = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double dot = 0.0;
      for (int k = 0; k < 3; ++k)
        dot += R[std::size_t(k * 3 + i)] * R[std::size_t(k * 3 + j)];
      worst = std::max(worst, std::fabs(dot - (i == j ? 1.0 : 0.0)));
    }
  const double det =
      R[0] * (R[4] * R[8] - R[5] * R[7]) - R[1] * (R[3] * R[8] - R[5] * R[6]) +
      R[2] * (R[3] * R[7] - R[4] * R[6]);
  return std::max(worst, std::fabs(det - 1.0));
}

Tensor backproject(const Tensor& depth, const Intrinsics& K,
                   bool allow_nonpositive) {
  K.validate();
  SSD_CHECK(depth.shape.size() == 2 && depth.shape[0] == K.height &&
                depth.shape[1] == K.width,
            "backproject: depth ", shape_str(depth.shape),
            " does not match intrinsics ", K.width, "x", K.height);
  Tensor pts({K.height, K.width, 3});
  for (int y = 0; y < K.height; ++y)
    for (int x = 0; x < K.width; ++x) {
      const double d = depth.at(y, x);
      if (!allow_nonpositive)
        SSD_CHECK(d > 0.0, "backproject: non-positive depth ", d, " at (", y,
                  ",", x, ")");
      const std::int64_t i = (std::int64_t(y) * K.width + x) * 3;
      pts[i] = d * (double(x) - K.cx) / K.fx;
      pts[i + 1] = d * (double(y) - K.cy) / K.fy;
      pts[i + 2] = d;
    }
  return pts;
}

SampleGrid project(const Tensor& points, const Pose& pose, const Intrinsics& K,
                   double z_min) {
  K.validate();
  SSD_CHECK(points.shape.size() == 3 && points.shape[2] == 3,
            "project: points must be (H,W,3), got ", shape_str(points.shape));
  const int h = points.shape[0], w = points.shape[1];
  SampleGrid g;
  g.coords = Tensor({h, w, 2});
  g.valid = Tensor({h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::int64_t i = (std::int64_t(y) * w + x) * 3;
      const auto p = pose.apply({points[i], points[i + 1], points[i + 2]});
      const double zs = std::max(p[2], z_min);
      const double u = K.fx * p[0] / zs + K.cx;
      const double v = K.fy * p[1] / zs + K.cy;
      const std::int64_t j = (std::int64_t(y) * w + x) * 2;
      g.coords[j] = u;
      g.coords[j + 1] = v;
      g.valid.at(y, x) = (p[2] > z_min && u >= 0.0 && u <= double(K.width - 1) &&
                          v >= 0.0 && v <= double(K.height - 1))
                             ? 1.0
                             : 0.0;
    }
  return g;
}

ViewSynthesis synthesize_view(const Tensor& src, const Tensor& depth,
                              const Pose& pose, const Intrinsics& K,
                              double z_min) {
  diff::Graph g;
  Var s = g.constant(src);
  Var d = g.constant(depth);
  WarpVar wv = synthesize_view_var(s, d, pose, K, z_min);
  return {g.val(wv.image), std::move(wv.valid)};
}

// -- graph side ------------------------------------------------------------

namespace {

Var vec_component(Var v, int i, int n) {
  Tensor sel({n, 1});
  sel[i] = 1.0;
  Var m = diff::matmul(diff::reshape(v, {1, n}), v.g->constant(std::move(sel)));
  return diff::reshape(m, {1});
}

Var column(Var mat, int i, int n, int cols) {
  Tensor sel({cols, 1});
  sel[i] = 1.0;
  (void)n;
  return diff::matmul(mat, mat.g->constant(std::move(sel)));
}

}  // namespace

Var rotation_from_axis_angle(Var w) {
  diff::Graph& g = *w.g;
  SSD_CHECK(g.val(w).shape == Shape{3}, "rotation_from_axis_angle: expected "
                                        "(3,), got ",
            shape_str(g.val(w).shape));
  Var t2 = diff::sum(diff::mul(w, w));
  Var a{}, b{};
  if (g.val(t2)[0] < 1e-16) {
    // Taylor branch: sin(t)/t and (1-cos t)/t^2 as polynomials in t^2
    a = 1.0 - t2 * (1.0 / 6.0);
    b = 0.5 - t2 * (1.0 / 24.0);
  } else {
    Var th = diff::sqrt(t2);
    a = diff::div(diff::sin(th), th);
    b = diff::div(1.0 - diff::cos(th), t2);
  }
  Var wx = vec_component(w, 0, 3);
  Var wy = vec_component(w, 1, 3);
  Var wz = vec_component(w, 2, 3);
  Var zero = g.constant(0.0);
  Var skew = diff::reshape(
      diff::concat({zero, diff::neg(wz), wy, wz, zero, diff::neg(wx),
                    diff::neg(wy), wx, zero},
                   0),
      {3, 3});
  Tensor eye({3, 3});
  eye[0] = eye[4] = eye[8] = 1.0;
  Var identity = g.constant(std::move(eye));
  Var skew2 = diff::matmul(skew, skew);
  Var ra = diff::mul(diff::broadcast(a, {3, 3}), skew);
  Var rb = diff::mul(diff::broadcast(b, {3, 3}), skew2);
  return diff::add(identity, diff::add(ra, rb));
}

Var backproject_var(Var depth, const Intrinsics& K) {
  diff::Graph& g = *depth.g;
  const Tensor& d = g.val(depth);
  SSD_CHECK(d.shape.size() == 2 && d.shape[0] == K.height &&
                d.shape[1] == K.width,
            "backproject_var: depth ", shape_str(d.shape),
            " does not match intrinsics ", K.width, "x", K.height);
  const int n = K.height * K.width;
  Tensor rx({n, 1}), ry({n, 1});
  for (int y = 0; y < K.height; ++y)
    for (int x = 0; x < K.width; ++x) {
      rx[std::int64_t(y) * K.width + x] = (double(x) - K.cx) / K.fx;
      ry[std::int64_t(y) * K.width + x] = (double(y) - K.cy) / K.fy;
    }
  Var dcol = diff::reshape(depth, {n, 1});
  Var px = diff::mul(dcol, g.constant(std::move(rx)));
  Var py = diff::mul(dcol, g.constant(std::move(ry)));
  return diff::concat({px, py, dcol}, 1);
}

GridVar project_var(Var points, Var rot_t, Var trans, const Intrinsics& K,
                    double z_min) {
  diff::Graph& g = *points.g;
  const int n = g.val(points).shape[0];
  SSD_CHECK(g.val(points).shape == Shape({n, 3}),
            "project_var: points must be (N,3)");
  SSD_CHECK(n == K.width * K.height, "project_var: N=", n,
            " does not match intrinsics grid ", K.width, "x", K.height);
  Var moved = diff::add(diff::matmul(points, rot_t),
                        diff::broadcast(trans, {n, 3}));
  Var px = column(moved, 0, n, 3);
  Var py = column(moved, 1, n, 3);
  Var pz = column(moved, 2, n, 3);
  Var zs = diff::clamp(pz, z_min, std::numeric_limits<double>::infinity());
  Var u = diff::div(px, zs) * K.fx + K.cx;
  Var v = diff::div(py, zs) * K.fy + K.cy;
  GridVar out;
  out.coords = diff::reshape(diff::concat({u, v}, 1), {K.height, K.width, 2});
  out.valid = Tensor({K.height, K.width});
  const Tensor& uc = g.val(u);
  const Tensor& vc = g.val(v);
  const Tensor& zc = g.val(pz);
  for (int i = 0; i < n; ++i)
    out.valid[i] = (zc[i] > z_min && uc[i] >= 0.0 &&
                    uc[i] <= double(K.width - 1) && vc[i] >= 0.0 &&
                    vc[i] <= double(K.height - 1))
                       ? 1.0
                       : 0.0;
  return out;
}

WarpVar synthesize_view_var(Var src, Var depth, Var pose_aa, Var pose_t,
                            const Intrinsics& K, double z_min) {
  // R^T = R(-w), so gradients flow into the axis-angle leaf directly
  Var rot_t = rotation_from_axis_angle(diff::neg(pose_aa));
  Var points = backproject_var(depth, K);
  GridVar grid = project_var(points, rot_t, pose_t, K, z_min);
  const Tensor& s = src.g->val(src);
  SSD_CHECK(s.shape.size() == 3 && s.shape[1] == K.height &&
                s.shape[2] == K.width,
            "synthesize_view: source image ", shape_str(s.shape),
            " does not match intrinsics ", K.width, "x", K.height);
  WarpVar out;
  out.image = diff::bilinear_sample(src, grid.coords);
  out.valid = std::move(grid.valid);
  return out;
}

WarpVar synthesize_view_var(Var src, Var depth, const Pose& pose,
                            const Intrinsics& K, double z_min) {
  diff::Graph& g = *src.g;
  Tensor rt({3, 3});
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      rt[std::int64_t(r) * 3 + c] = pose.R[std::size_t(c * 3 + r)];
  Tensor tv({3});
  for (int i = 0; i < 3; ++i) tv[i] = pose.t[std::size_t(i)];
  Var rot_t = g.constant(std::move(rt));
  Var trans = g.constant(std::move(tv));
  Var points = backproject_var(depth, K);
  GridVar grid = project_var(points, rot_t, trans, K, z_min);
  const Tensor& s = g.val(src);
  SSD_CHECK(s.shape.size() == 3 && s.shape[1] == K.height &&
                s.shape[2] == K.width,
            "synthesize_view: source image ", shape_str(s.shape),
            " does not match intrinsics ", K.width, "x", K.height);
  WarpVar out;
  out.image = diff::bilinear_sample(src, grid.coords);
  out.valid = std::move(grid.valid);
  return out;
}

}  // namespace ssd::cam
