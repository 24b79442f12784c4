#include "ssd/synthscene.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "ssd/image_io.hpp"
#include "ssd/rng.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

#include "ssd/kernels.hpp"

namespace ssd::scene {

namespace fs = std::filesystem;
using nlohmann::json;

void SceneConfig::validate() const {
  SSD_CHECK(base_depth > 0.0 && z_near >= 0.5 && z_far > z_near,
            "scene config: need base_depth > 0, z_near >= 0.5, z_far > "
            "z_near; got base=",
            base_depth, " z=[", z_near, ",", z_far, "]");
  SSD_CHECK(base_depth - bump_amplitude >= z_near &&
                base_depth + bump_amplitude <= z_far,
            "scene config: relief ", bump_amplitude,
            " pushes the surface outside [z_near, z_far]");
  SSD_CHECK(bump_amplitude >= 0.0 && n_bumps >= 0, "scene config: bad bumps");
  SSD_CHECK(n_bumps == 0 || (bump_sigma_min > 0.0 &&
                             bump_sigma_max >= bump_sigma_min),
            "scene config: bad bump sigma range");
  SSD_CHECK(texture_octaves >= 1 && texture_wavelength > 0.0 &&
                texture_amplitude > 0.0 && texture_amplitude <= 0.5,
            "scene config: bad texture parameters");
  SSD_CHECK(march_step > 0.0, "scene config: bad march step");
}

namespace {

double lattice_value(std::uint64_t seed, std::int64_t ix, std::int64_t iy,
                     int octave) {
  std::uint64_t h = seed;
  h = hash64(h ^ (std::uint64_t(ix) * 0x9e3779b97f4a7c15ULL));
  h = hash64(h ^ (std::uint64_t(iy) * 0xc2b2ae3d27d4eb4fULL));
  h = hash64(h ^ (std::uint64_t(octave) + 0x165667b19e3779f9ULL));
  return double(h >> 11) * 0x1.0p-53 * 2.0 - 1.0;  // [-1, 1)
}

double fade(double t) { return t * t * t * (t * (6.0 * t - 15.0) + 10.0); }

double value_noise(std::uint64_t seed, double x, double y, int octave) {
  const double fx = std::floor(x), fy = std::floor(y);
  const std::int64_t ix = std::int64_t(fx), iy = std::int64_t(fy);
  const double tx = fade(x - fx), ty = fade(y - fy);
  const double v00 = lattice_value(seed, ix, iy, octave);
  const double v01 = lattice_value(seed, ix + 1, iy, octave);
  const double v10 = lattice_value(seed, ix, iy + 1, octave);
  const double v11 = lattice_value(seed, ix + 1, iy + 1, octave);
  const double top = v00 + tx * (v01 - v00);
  const double bot = v10 + tx * (v11 - v10);
  return top + ty * (bot - top);
}

struct Ray {
  std::array<double, 3> origin;
  std::array<double, 3> dir;  // not normalized; dir[2] ~ 1
};

Ray pixel_ray(const cam::Pose& world_from_cam_inv /* cam from world */,
              const cam::Intrinsics& K, double u, double v) {
  // `world_from_cam_inv` maps world (frame t) to this camera; invert it on
  // the fly for origin/direction.
  const cam::Pose inv = world_from_cam_inv.inverse();
  const std::array<double, 3> d{(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0};
  Ray r;
  r.origin = inv.t;
  r.dir = {inv.R[0] * d[0] + inv.R[1] * d[1] + inv.R[2] * d[2],
           inv.R[3] * d[0] + inv.R[4] * d[1] + inv.R[5] * d[2],
           inv.R[6] * d[0] + inv.R[7] * d[1] + inv.R[8] * d[2]};
  return r;
}

// First surface crossing along the ray: fixed-step march then bisection.
// Returns the ray parameter s, or a negative value when no hit is found.
double raycast(const Scene& sc, const Ray& ray) {
  const double z_lo = sc.cfg.base_depth - sc.cfg.bump_amplitude - 0.6;
  const double z_hi = sc.cfg.base_depth + sc.cfg.bump_amplitude + 0.6;
  const double dz = std::max(ray.dir[2], 0.2);
  double s = std::max((z_lo - ray.origin[2]) / dz, 0.05);
  const double s_end = (z_hi - ray.origin[2]) / dz;
  const double ds = sc.cfg.march_step / dz;

  auto g = [&](double sp) {
    const double x = ray.origin[0] + sp * ray.dir[0];
    const double y = ray.origin[1] + sp * ray.dir[1];
    const double z = ray.origin[2] + sp * ray.dir[2];
    return z - sc.height(x, y);
  };

  double g_prev = g(s);
  if (g_prev >= 0.0) return -1.0;  // started past the surface
  while (s < s_end) {
    const double s_next = s + ds;
    const double g_next = g(s_next);
    if (g_next >= 0.0) {
      double lo = s, hi = s_next;
      for (int it = 0; it < 60; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (g(mid) >= 0.0)
          hi = mid;
        else
          lo = mid;
      }
      return 0.5 * (lo + hi);
    }
    s = s_next;
    g_prev = g_next;
  }
  return -1.0;
}

struct RenderedFrame {
  Tensor image;  // (1,H,W)
  Tensor depth;  // (H,W) z-depth in this camera's frame
};

RenderedFrame render_frame(const Scene& sc, const cam::Pose& cam_from_world,
                           const cam::Intrinsics& K) {
  RenderedFrame out;
  out.image = Tensor({1, K.height, K.width});
  out.depth = Tensor({K.height, K.width});
  const std::int64_t np = std::int64_t(K.height) * K.width;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(kern::max_threads())
#endif
  for (std::int64_t p = 0; p < np; ++p) {
    const int y = int(p / K.width), x = int(p % K.width);
    const Ray ray = pixel_ray(cam_from_world, K, double(x), double(y));
    const double s = raycast(sc, ray);
    SSD_CHECK(s > 0.0, "render: ray at pixel (", y, ",", x,
              ") missed the height field");
    const std::array<double, 3> hit{ray.origin[0] + s * ray.dir[0],
                                    ray.origin[1] + s * ray.dir[1],
                                    ray.origin[2] + s * ray.dir[2]};
    out.image.data[std::size_t(p)] = sc.texture(hit[0], hit[1]);
    const auto in_cam = cam_from_world.apply(hit);
    out.depth.data[std::size_t(p)] = in_cam[2];
  }
  return out;
}

}  // namespace

double Scene::height(double x, double y) const {
  if (cfg.bump_amplitude == 0.0 || bumps.empty()) return cfg.base_depth;
  double raw = 0.0;
  for (const Bump& b : bumps) {
    const double dx = x - b.x, dy = y - b.y;
    raw += b.amp * std::exp(-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma));
  }
  // smooth limiter keeps the surface inside [base +- amplitude]
  const double z =
      cfg.base_depth + cfg.bump_amplitude * std::tanh(raw / cfg.bump_amplitude);
  return std::min(std::max(z, cfg.z_near), cfg.z_far);
}

double Scene::texture(double x, double y) const {
  double v = 0.5;
  double wavelength = cfg.texture_wavelength;
  double amp = cfg.texture_amplitude * 0.5;
  for (int o = 0; o < cfg.texture_octaves; ++o) {
    v += amp * value_noise(seed, x / wavelength, y / wavelength, o);
    wavelength *= 0.5;
    amp *= 0.5;
  }
  return std::min(std::max(v, 0.0), 1.0);
}

Scene generate_scene(const SceneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Scene sc;
  sc.cfg = cfg;
  sc.seed = hash64(seed ^ 0x7363656e65ULL);
  Rng rng = Rng(seed).substream("scene");
  for (int i = 0; i < cfg.n_bumps; ++i) {
    Bump b;
    b.x = rng.uniform(-cfg.extent_x, cfg.extent_x);
    b.y = rng.uniform(-cfg.extent_y, cfg.extent_y);
    const double mag = rng.uniform(0.35, 0.85) * cfg.bump_amplitude;
    b.amp = rng.uniform() < 0.5 ? -mag : mag;
    b.sigma = rng.uniform(cfg.bump_sigma_min, cfg.bump_sigma_max);
    sc.bumps.push_back(b);
  }
  return sc;
}

SampleTriplet render_triplet(const Scene& scene, const cam::Pose& to_prev,
                             const cam::Pose& to_next,
                             const cam::Intrinsics& K, double min_visible,
                             double max_occluded) {
  K.validate();
  RenderedFrame curr = render_frame(scene, cam::Pose::identity(), K);
  RenderedFrame prev = render_frame(scene, to_prev, K);
  RenderedFrame next = render_frame(scene, to_next, K);

  const Tensor points = cam::backproject(curr.depth, K);
  for (const auto& [pose, frame, tag] :
       {std::tuple<const cam::Pose&, const RenderedFrame&, const char*>(
            to_prev, prev, "prev"),
        std::tuple<const cam::Pose&, const RenderedFrame&, const char*>(
            to_next, next, "next")}) {
    const cam::SampleGrid grid = cam::project(points, pose, K);
    const double visible =
        kern::block_sum(grid.valid.data.data(), grid.valid.size()) /
        double(grid.valid.size());
    SSD_CHECK(visible >= min_visible, "render_triplet: only ", visible * 100,
              "% of pixels stay visible in the ", tag, " frame");
    // depth-test disagreement = occlusion
    std::int64_t n_valid = 0, n_occ = 0;
    for (int y = 0; y < K.height; ++y)
      for (int x = 0; x < K.width; ++x) {
        if (grid.valid.at(y, x) < 0.5) continue;
        ++n_valid;
        const std::int64_t i = (std::int64_t(y) * K.width + x) * 3;
        const auto moved =
            pose.apply({points[i], points[i + 1], points[i + 2]});
        const std::int64_t j = (std::int64_t(y) * K.width + x) * 2;
        double sampled;
        kern::bilinear_fwd(frame.depth.data.data(), 1, K.height, K.width,
                           grid.coords.data.data() + j, 1, 1, &sampled,
                           kern::Backend::serial);
        if (moved[2] - sampled > std::max(0.05, 0.02 * moved[2])) ++n_occ;
      }
    const double occluded = n_valid ? double(n_occ) / double(n_valid) : 0.0;
    SSD_CHECK(occluded <= max_occluded, "render_triplet: ", occluded * 100,
              "% of pixels are occluded in the ", tag, " frame");
  }

  SampleTriplet t;
  t.prev = std::move(prev.image);
  t.curr = std::move(curr.image);
  t.next = std::move(next.image);
  t.K = K;
  t.gt_depth = std::move(curr.depth);
  t.pose_prev = to_prev;
  t.pose_next = to_next;
  t.seed = scene.seed;
  return t;
}

SampleTriplet make_triplet(const SceneConfig& cfg, const cam::Intrinsics& K,
                           std::uint64_t seed, const std::string& id) {
  const Scene sc = generate_scene(cfg, seed);
  Rng motion = Rng(seed).substream("motion");
  for (int attempt = 0; attempt < 16; ++attempt) {
    // forward-ish constant velocity with small jitter and rotation
    const double vx = (motion.uniform() < 0.5 ? -1.0 : 1.0) *
                      motion.uniform(0.18, 0.45);
    const double vy = motion.normal() * 0.02;
    const double vz = motion.normal() * 0.04;
    std::array<double, 3> w_prev, w_next, t_prev, t_next;
    for (int i = 0; i < 3; ++i) {
      w_prev[std::size_t(i)] = motion.normal() * 0.004;
      w_next[std::size_t(i)] = motion.normal() * 0.004;
    }
    t_prev = {-vx + motion.normal() * 0.01, -vy, -vz};
    t_next = {vx + motion.normal() * 0.01, vy, vz};
    try {
      SampleTriplet t = render_triplet(
          sc, cam::Pose::from_axis_angle(w_prev, t_prev),
          cam::Pose::from_axis_angle(w_next, t_next), K);
      t.id = id;
      t.seed = seed;
      return t;
    } catch (const Error&) {
      continue;  // rejected motion; redraw
    }
  }
  fail("make_triplet: no acceptable motion after 16 attempts (seed ", seed,
       ")");
}

// -- dataset IO --------------------------------------------------------------

namespace {

json pose_to_json(const cam::Pose& p) {
  return json{{"axis_angle", {p.aa[0], p.aa[1], p.aa[2]}},
              {"translation", {p.t[0], p.t[1], p.t[2]}}};
}

cam::Pose pose_from_json(const json& j) {
  const auto& aa = j.at("axis_angle");
  const auto& t = j.at("translation");
  return cam::Pose::from_axis_angle({aa.at(0), aa.at(1), aa.at(2)},
                                    {t.at(0), t.at(1), t.at(2)});
}

}  // namespace

void save_triplet(const std::string& dir, const SampleTriplet& t) {
  fs::create_directories(dir);
  io::write_png(dir + "/frame_prev.png", t.prev);
  io::write_png(dir + "/frame_curr.png", t.curr);
  io::write_png(dir + "/frame_next.png", t.next);
  io::write_f32(dir + "/depth.f32", t.gt_depth);
  json meta{{"id", t.id},
            {"seed", t.seed},
            {"condition", t.condition},
            {"intrinsics",
             {{"fx", t.K.fx},
              {"fy", t.K.fy},
              {"cx", t.K.cx},
              {"cy", t.K.cy},
              {"width", t.K.width},
              {"height", t.K.height}}},
            {"pose_prev", pose_to_json(t.pose_prev)},
            {"pose_next", pose_to_json(t.pose_next)}};
  std::ofstream f(dir + "/meta.json", std::ios::trunc);
  SSD_CHECK(bool(f), "save_triplet: cannot write meta in '", dir, "'");
  f << meta.dump(2) << "\n";
}

SampleTriplet load_triplet(const std::string& dir) {
  SampleTriplet t;
  t.prev = io::read_png(dir + "/frame_prev.png");
  t.curr = io::read_png(dir + "/frame_curr.png");
  t.next = io::read_png(dir + "/frame_next.png");
  std::ifstream f(dir + "/meta.json");
  SSD_CHECK(bool(f), "load_triplet: missing meta.json in '", dir, "'");
  json meta = json::parse(f);
  t.id = meta.at("id");
  t.seed = meta.at("seed");
  t.condition = meta.at("condition");
  const auto& in = meta.at("intrinsics");
  t.K = cam::Intrinsics{in.at("fx"), in.at("fy"),  in.at("cx"),
                        in.at("cy"), in.at("width"), in.at("height")};
  t.pose_prev = pose_from_json(meta.at("pose_prev"));
  t.pose_next = pose_from_json(meta.at("pose_next"));
  t.gt_depth = io::read_f32(dir + "/depth.f32", {t.K.height, t.K.width});
  return t;
}

std::vector<std::string> list_split_ids(const std::string& root,
                                        const std::string& split) {
  const fs::path dir = fs::path(root) / split;
  SSD_CHECK(fs::is_directory(dir), "dataset: no split directory '",
            dir.string(), "'");
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) ids.push_back(e.path().filename().string());
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::vector<SampleTriplet> load_split(const std::string& root,
                                      const std::string& split) {
  std::vector<SampleTriplet> out;
  for (const std::string& id : list_split_ids(root, split))
    out.push_back(load_triplet((fs::path(root) / split / id).string()));
  return out;
}

}  // namespace ssd::scene
