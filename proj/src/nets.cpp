#include "ssd/nets.hpp"

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "ssd/rng.hpp"

namespace ssd::net {

using diff::Var;

Tensor* ParamSet::find(const std::string& name) {
  for (auto& [n, t] : items)
    if (n == name) return &t;
  return nullptr;
}

const Tensor* ParamSet::find(const std::string& name) const {
  for (const auto& [n, t] : items)
    if (n == name) return &t;
  return nullptr;
}

std::int64_t ParamSet::total_size() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : items) n += t.size();
  return n;
}

Var BoundParams::operator[](const std::string& name) const {
  auto it = vars.find(name);
  SSD_CHECK(it != vars.end(), "no bound parameter named '", name, "'");
  return it->second;
}

BoundParams bind(diff::Graph& g, const ParamSet& params, bool requires_grad) {
  BoundParams out;
  for (const auto& [name, t] : params.items) {
    Tensor c = t;
    c.requires_grad = requires_grad;
    out.vars.emplace(name, g.leaf(std::move(c)));
  }
  return out;
}

namespace {

Tensor kaiming_uniform(Shape shape, int fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / double(fan_in));
  return Tensor::uniform(std::move(shape), rng, -bound, bound);
}

void add_conv(ParamSet& ps, const std::string& name, int cout, int cin,
              int k, Rng& rng) {
  ps.items.emplace_back(name + ".w",
                        kaiming_uniform({cout, cin, k, k}, cin * k * k, rng));
  ps.items.emplace_back(name + ".b", Tensor({cout}));
}

Var conv_relu(Var x, const BoundParams& p, const std::string& name,
              int stride) {
  return diff::relu(diff::conv2d(x, p[name + ".w"], p[name + ".b"], stride, 1));
}

// Nearest-neighbour 2x upsample expressed as a bilinear sample at exact
// integer coordinates (exact copy, exact gradient).
Var upsample2x(Var x) {
  diff::Graph& g = *x.g;
  const Shape& s = g.val(x).shape;
  const int h = s[1], w = s[2];
  Tensor grid({2 * h, 2 * w, 2});
  for (int y = 0; y < 2 * h; ++y)
    for (int x2 = 0; x2 < 2 * w; ++x2) {
      const std::int64_t i = (std::int64_t(y) * 2 * w + x2) * 2;
      grid[i] = double(x2 / 2);
      grid[i + 1] = double(y / 2);
    }
  return diff::bilinear_sample(x, g.constant(std::move(grid)));
}

Var spatial_mean(Var x) {
  diff::Graph& g = *x.g;
  const Shape& s = g.val(x).shape;
  const int c = s[0];
  const std::int64_t hw = std::int64_t(s[1]) * s[2];
  Tensor col({int(hw), 1}, 1.0 / double(hw));
  Var m = diff::matmul(diff::reshape(x, {c, int(hw)}),
                       g.constant(std::move(col)));
  return diff::reshape(m, {c});
}

}  // namespace

namespace depthnet {

ParamSet init(const DepthNetConfig& cfg, std::uint64_t seed) {
  Rng rng(Rng(seed).substream("depthnet").seed());
  Rng stream = rng.substream("init");
  ParamSet ps;
  add_conv(ps, "enc1", 16, cfg.in_channels, 3, stream);
  add_conv(ps, "enc2", 32, 16, 3, stream);
  add_conv(ps, "enc3", 64, 32, 3, stream);
  add_conv(ps, "enc4", 128, 64, 3, stream);
  add_conv(ps, "dec4", 64, 128 + 64, 3, stream);
  add_conv(ps, "dec3", 32, 64 + 32, 3, stream);
  add_conv(ps, "dec2", 16, 32 + 16, 3, stream);
  add_conv(ps, "dec1", 16, 16, 3, stream);
  add_conv(ps, "head", 1, 16, 3, stream);
  return ps;
}

Output forward(Var image, const BoundParams& p, const DepthNetConfig& cfg) {
  diff::Graph& g = *image.g;
  const Shape& s = g.val(image).shape;
  SSD_CHECK(s.size() == 3 && s[0] == cfg.in_channels,
            "depthnet: expected (", cfg.in_channels, ",H,W) image, got ",
            shape_str(s));
  SSD_CHECK(s[1] % 16 == 0 && s[2] % 16 == 0,
            "depthnet: image dims must be divisible by 16, got ",
            shape_str(s));
  Var e1 = conv_relu(image, p, "enc1", 2);
  Var e2 = conv_relu(e1, p, "enc2", 2);
  Var e3 = conv_relu(e2, p, "enc3", 2);
  Var e4 = conv_relu(e3, p, "enc4", 2);
  Var d4 = conv_relu(diff::concat({upsample2x(e4), e3}, 0), p, "dec4", 1);
  Var d3 = conv_relu(diff::concat({upsample2x(d4), e2}, 0), p, "dec3", 1);
  Var d2 = conv_relu(diff::concat({upsample2x(d3), e1}, 0), p, "dec2", 1);
  Var d1 = conv_relu(upsample2x(d2), p, "dec1", 1);
  Var sig =
      diff::sigmoid(diff::conv2d(d1, p["head.w"], p["head.b"], 1, 1));
  Output out;
  out.sigma = diff::reshape(sig, {s[1], s[2]});
  const double slope = 1.0 / cfg.d_min - 1.0 / cfg.d_max;
  const double intercept = 1.0 / cfg.d_max;
  out.depth = 1.0 / (out.sigma * slope + intercept);
  out.features = e4;
  return out;
}

}  // namespace depthnet

namespace posenet {

ParamSet init(int in_channels, std::uint64_t seed) {
  Rng rng(Rng(seed).substream("posenet").seed());
  Rng stream = rng.substream("init");
  ParamSet ps;
  add_conv(ps, "p1", 16, 2 * in_channels, 3, stream);
  add_conv(ps, "p2", 32, 16, 3, stream);
  add_conv(ps, "p3", 64, 32, 3, stream);
  // zero heads: exp(0) = I and t = 0, identity pose at initialization
  ps.items.emplace_back("rot.w", Tensor({64, 3}));
  ps.items.emplace_back("trans.w", Tensor({64, 3}));
  return ps;
}

Output forward(Var frame_a, Var frame_b, const BoundParams& p) {
  diff::Graph& g = *frame_a.g;
  SSD_CHECK(same_shape(g.val(frame_a), g.val(frame_b)),
            "posenet: frame shape mismatch ",
            shape_str(g.val(frame_a).shape), " vs ",
            shape_str(g.val(frame_b).shape));
  Var x = diff::concat({frame_a, frame_b}, 0);
  x = conv_relu(x, p, "p1", 2);
  x = conv_relu(x, p, "p2", 2);
  x = conv_relu(x, p, "p3", 2);
  Var feat = diff::reshape(spatial_mean(x), {1, 64});
  Output out;
  out.axis_angle = diff::reshape(diff::matmul(feat, p["rot.w"]), {3}) * 0.01;
  out.translation =
      diff::reshape(diff::matmul(feat, p["trans.w"]), {3}) * 0.01;
  return out;
}

cam::Pose pose_value(diff::Graph& g, const Output& out) {
  const Tensor& aa = g.val(out.axis_angle);
  const Tensor& t = g.val(out.translation);
  return cam::Pose::from_axis_angle({aa[0], aa[1], aa[2]},
                                    {t[0], t[1], t[2]});
}

}  // namespace posenet

// -- checkpoint container ---------------------------------------------------

namespace {

constexpr char kMagic[4] = {'S', 'S', 'D', 'F'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void write_pod(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::ifstream& f) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  SSD_CHECK(bool(f), "checkpoint: truncated file");
  return v;
}

}  // namespace

void write_arrays(const std::string& path,
                  const std::vector<std::pair<std::string, Tensor>>& arrays) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  SSD_CHECK(bool(f), "checkpoint: cannot open '", path, "' for writing");
  f.write(kMagic, 4);
  write_pod(f, kVersion);
  write_pod(f, std::uint32_t(arrays.size()));
  for (const auto& [name, t] : arrays) {
    write_pod(f, std::uint32_t(name.size()));
    f.write(name.data(), std::streamsize(name.size()));
    write_pod(f, std::uint32_t(t.shape.size()));
    for (int d : t.shape) write_pod(f, std::int64_t(d));
    f.write(reinterpret_cast<const char*>(t.data.data()),
            std::streamsize(t.data.size() * sizeof(double)));
  }
  SSD_CHECK(bool(f), "checkpoint: write failed for '", path, "'");
}

std::vector<std::pair<std::string, Tensor>> read_arrays(
    const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  SSD_CHECK(bool(f), "checkpoint: cannot open '", path, "'");
  char magic[4];
  f.read(magic, 4);
  SSD_CHECK(bool(f) && std::memcmp(magic, kMagic, 4) == 0,
            "checkpoint: '", path, "' is not an SSDF file");
  const auto version = read_pod<std::uint32_t>(f);
  SSD_CHECK(version == kVersion, "checkpoint: unsupported version ", version);
  const auto count = read_pod<std::uint32_t>(f);
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = read_pod<std::uint32_t>(f);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    const auto ndim = read_pod<std::uint32_t>(f);
    Shape shape;
    for (std::uint32_t d = 0; d < ndim; ++d)
      shape.push_back(int(read_pod<std::int64_t>(f)));
    Tensor t(shape);
    f.read(reinterpret_cast<char*>(t.data.data()),
           std::streamsize(t.data.size() * sizeof(double)));
    SSD_CHECK(bool(f), "checkpoint: truncated array '", name, "'");
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

}  // namespace ssd::net
