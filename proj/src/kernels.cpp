#include "ssd/kernels.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <utility>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace ssd::kern {

namespace {

std::atomic<Backend> g_backend{Backend::openmp};

int read_thread_cap() {
#ifdef _OPENMP
  int cap = omp_get_max_threads();
#else
  int cap = 1;
#endif
  if (const char* env = std::getenv("SSD_THREADS")) {
    int v = std::atoi(env);
    if (v > 0) cap = std::min(cap, v);
  }
  return std::max(cap, 1);
}

constexpr std::int64_t kSumBlock = 4096;

// Shared fold helpers. Marked noinline so serial and OpenMP callers run the
// exact same machine code, which keeps the two backends bit-identical.
[[gnu::noinline]] double fold_block(const double* x, std::int64_t n) {
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

[[gnu::noinline]] double conv_cell(const double* x, const double* k, int cin,
                                   int h, int w, int kh, int kw, int oy,
                                   int ox, int stride, int pad) {
  double acc = 0.0;
  const int iy0 = oy * stride - pad;
  const int ix0 = ox * stride - pad;
  for (int ic = 0; ic < cin; ++ic) {
    const double* xc = x + std::int64_t(ic) * h * w;
    const double* kc = k + std::int64_t(ic) * kh * kw;
    for (int ky = 0; ky < kh; ++ky) {
      const int iy = iy0 + ky;
      if (iy < 0 || iy >= h) continue;
      const double* xrow = xc + std::int64_t(iy) * w;
      const double* krow = kc + std::int64_t(ky) * kw;
      for (int kx = 0; kx < kw; ++kx) {
        const int ix = ix0 + kx;
        if (ix < 0 || ix >= w) continue;
        acc += xrow[ix] * krow[kx];
      }
    }
  }
  return acc;
}

[[gnu::noinline]] double conv_input_cell(const double* k, const double* gy,
                                         int cout, int cin, int kh, int kw,
                                         int oh, int ow, int stride, int pad,
                                         int ic, int iy, int ix) {
  double acc = 0.0;
  for (int oc = 0; oc < cout; ++oc) {
    const double* kc = k + (std::int64_t(oc) * cin + ic) * kh * kw;
    const double* gc = gy + std::int64_t(oc) * oh * ow;
    for (int ky = 0; ky < kh; ++ky) {
      const int num = iy + pad - ky;
      if (num < 0 || num % stride) continue;
      const int oy = num / stride;
      if (oy >= oh) continue;
      for (int kx = 0; kx < kw; ++kx) {
        const int numx = ix + pad - kx;
        if (numx < 0 || numx % stride) continue;
        const int ox = numx / stride;
        if (ox >= ow) continue;
        acc += kc[ky * kw + kx] * gc[std::int64_t(oy) * ow + ox];
      }
    }
  }
  return acc;
}

[[gnu::noinline]] double conv_weight_cell(const double* x, const double* gy,
                                          int h, int w, int oh, int ow,
                                          int stride, int pad, int ic, int oc,
                                          int ky, int kx) {
  double acc = 0.0;
  const double* xc = x + std::int64_t(ic) * h * w;
  const double* gc = gy + std::int64_t(oc) * oh * ow;
  for (int oy = 0; oy < oh; ++oy) {
    const int iy = oy * stride - pad + ky;
    if (iy < 0 || iy >= h) continue;
    const double* xrow = xc + std::int64_t(iy) * w;
    const double* grow = gc + std::int64_t(oy) * ow;
    for (int ox = 0; ox < ow; ++ox) {
      const int ix = ox * stride - pad + kx;
      if (ix < 0 || ix >= w) continue;
      acc += xrow[ix] * grow[ox];
    }
  }
  return acc;
}

inline int clampi(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

[[gnu::noinline]] double pool_cell(const double* xc, int h, int w, int y,
                                   int x) {
  double acc = 0.0;
  for (int dy = -1; dy <= 1; ++dy) {
    const double* row = xc + std::int64_t(clampi(y + dy, 0, h - 1)) * w;
    for (int dx = -1; dx <= 1; ++dx) acc += row[clampi(x + dx, 0, w - 1)];
  }
  return acc / 9.0;
}

[[gnu::noinline]] double pool_bwd_cell(const double* gc, int h, int w, int y,
                                       int x) {
  double acc = 0.0;
  for (int oy = y - 1; oy <= y + 1; ++oy) {
    if (oy < 0 || oy >= h) continue;
    int cy = 0;
    for (int dy = -1; dy <= 1; ++dy)
      if (clampi(oy + dy, 0, h - 1) == y) ++cy;
    if (!cy) continue;
    for (int ox = x - 1; ox <= x + 1; ++ox) {
      if (ox < 0 || ox >= w) continue;
      int cx = 0;
      for (int dx = -1; dx <= 1; ++dx)
        if (clampi(ox + dx, 0, w - 1) == x) ++cx;
      if (cx) acc += double(cy * cx) * gc[std::int64_t(oy) * w + ox];
    }
  }
  return acc / 9.0;
}

// Bilinear tap: left/bottom cell convention at integer coordinates.
struct Taps {
  int x0, x1, y0, y1;  // x0/y0 may be -1 before read clamping
  double fx, fy;       // in (0,1]
  bool in_x, in_y;     // coordinate strictly inside (0, w-1) / (0, h-1)
};

inline Taps make_taps(double u, double v, int h, int w) {
  Taps t;
  const double uc = std::min(std::max(u, 0.0), double(w - 1));
  const double vc = std::min(std::max(v, 0.0), double(h - 1));
  t.x0 = int(std::ceil(uc)) - 1;
  t.y0 = int(std::ceil(vc)) - 1;
  t.x1 = t.x0 + 1;
  t.y1 = t.y0 + 1;
  t.fx = uc - double(t.x0);
  t.fy = vc - double(t.y0);
  t.in_x = u > 0.0 && u < double(w - 1);
  t.in_y = v > 0.0 && v < double(h - 1);
  return t;
}

[[gnu::noinline]] double bilinear_cell(const double* xc, int /*h*/, int w,
                                       const Taps& t) {
  const int x0 = std::max(t.x0, 0);
  const int y0 = std::max(t.y0, 0);
  const double v00 = xc[std::int64_t(y0) * w + x0];
  const double v01 = xc[std::int64_t(y0) * w + t.x1];
  const double v10 = xc[std::int64_t(t.y1) * w + x0];
  const double v11 = xc[std::int64_t(t.y1) * w + t.x1];
  const double top = v00 + t.fx * (v01 - v00);
  const double bot = v10 + t.fx * (v11 - v10);
  return top + t.fy * (bot - top);
}

[[gnu::noinline]] void bilinear_grid_grad(const double* img, int c, int h,
                                          int w, const Taps& t, const double* g,
                                          std::int64_t plane, std::int64_t p,
                                          double* du, double* dv) {
  const int x0 = std::max(t.x0, 0);
  const int y0 = std::max(t.y0, 0);
  double su = 0.0, sv = 0.0;
  for (int ch = 0; ch < c; ++ch) {
    const double* xc = img + std::int64_t(ch) * h * w;
    const double v00 = xc[std::int64_t(y0) * w + x0];
    const double v01 = xc[std::int64_t(y0) * w + t.x1];
    const double v10 = xc[std::int64_t(t.y1) * w + x0];
    const double v11 = xc[std::int64_t(t.y1) * w + t.x1];
    const double go = g[std::int64_t(ch) * plane + p];
    su += go * ((1.0 - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
    sv += go * ((1.0 - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
  }
  *du = t.in_x ? su : 0.0;
  *dv = t.in_y ? sv : 0.0;
}

struct Csr {
  std::vector<std::int64_t> start;   // per source pixel, size h*w+1
  std::vector<std::int64_t> out_px;  // contributing output pixel
  std::vector<double> weight;
};

// Scatter converted to a deterministic gather: contributions per source pixel
// are listed in output-pixel order, so the fold order never depends on
// threading.
Csr build_csr(const double* grid, int h, int w, int hg, int wg) {
  const std::int64_t np = std::int64_t(hg) * wg;
  Csr csr;
  csr.start.assign(std::size_t(h) * w + 1, 0);
  std::vector<std::array<std::pair<std::int64_t, double>, 4>> taps{
      std::size_t(np)};
  for (std::int64_t p = 0; p < np; ++p) {
    Taps t = make_taps(grid[2 * p], grid[2 * p + 1], h, w);
    const int x0 = std::max(t.x0, 0);
    const int y0 = std::max(t.y0, 0);
    auto& e = taps[std::size_t(p)];
    e[0] = {std::int64_t(y0) * w + x0, (1.0 - t.fy) * (1.0 - t.fx)};
    e[1] = {std::int64_t(y0) * w + t.x1, (1.0 - t.fy) * t.fx};
    e[2] = {std::int64_t(t.y1) * w + x0, t.fy * (1.0 - t.fx)};
    e[3] = {std::int64_t(t.y1) * w + t.x1, t.fy * t.fx};
    for (const auto& [src, wgt] : e) csr.start[std::size_t(src) + 1]++;
  }
  for (std::size_t i = 1; i < csr.start.size(); ++i)
    csr.start[i] += csr.start[i - 1];
  csr.out_px.resize(std::size_t(4 * np));
  csr.weight.resize(std::size_t(4 * np));
  std::vector<std::int64_t> cursor(csr.start.begin(), csr.start.end() - 1);
  for (std::int64_t p = 0; p < np; ++p) {
    for (const auto& [src, wgt] : taps[std::size_t(p)]) {
      std::int64_t at = cursor[std::size_t(src)]++;
      csr.out_px[std::size_t(at)] = p;
      csr.weight[std::size_t(at)] = wgt;
    }
  }
  return csr;
}

[[gnu::noinline]] double csr_fold(const Csr& csr, const double* gout,
                                  std::int64_t src) {
  double acc = 0.0;
  for (std::int64_t i = csr.start[std::size_t(src)];
       i < csr.start[std::size_t(src) + 1]; ++i)
    acc += csr.weight[std::size_t(i)] * gout[csr.out_px[std::size_t(i)]];
  return acc;
}

[[gnu::noinline]] double dot_rows(const double* a, const double* b, int n) {
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

[[gnu::noinline]] double dot_col(const double* a, const double* b, int n,
                                 int stride_a, int stride_b) {
  double acc = 0.0;
  for (int i = 0; i < n; ++i)
    acc += a[std::int64_t(i) * stride_a] * b[std::int64_t(i) * stride_b];
  return acc;
}

}  // namespace

Backend backend() { return g_backend.load(std::memory_order_relaxed); }

void set_backend(Backend b) { g_backend.store(b, std::memory_order_relaxed); }

int max_threads() {
  static int cap = read_thread_cap();
  return cap;
}

double block_sum(const double* x, std::int64_t n) {
  return block_sum(x, n, backend());
}

double block_sum(const double* x, std::int64_t n, Backend be) {
  if (n == 0) return 0.0;
  const std::int64_t nb = (n + kSumBlock - 1) / kSumBlock;
  std::vector<double> partial(static_cast<std::size_t>(nb), 0.0);
  if (be == Backend::openmp) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(max_threads())
#endif
    for (std::int64_t b = 0; b < nb; ++b)
      partial[std::size_t(b)] = fold_block(
          x + b * kSumBlock, std::min(kSumBlock, n - b * kSumBlock));
  } else {
    for (std::int64_t b = 0; b < nb; ++b)
      partial[std::size_t(b)] = fold_block(
          x + b * kSumBlock, std::min(kSumBlock, n - b * kSumBlock));
  }
  return fold_block(partial.data(), nb);
}

void conv2d_fwd(const double* x, int cin, int h, int w, const double* k,
                int cout, int kh, int kw, const double* bias, int stride,
                int pad, double* y, int oh, int ow, Backend be) {
  const std::int64_t total = std::int64_t(cout) * oh * ow;
  if (be == Backend::openmp) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(max_threads())
#endif
    for (std::int64_t i = 0; i < total; ++i) {
      const int oc = int(i / (std::int64_t(oh) * ow));
      const int oy = int((i / ow) % oh);
      const int ox = int(i % ow);
      double v = conv_cell(x, k + std::int64_t(oc) * cin * kh * kw, cin, h, w,
                           kh, kw, oy, ox, stride, pad);
      y[i] = bias ? v + bias[oc] : v;
    }
  } else {
    for (int oc = 0; oc < cout; ++oc)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          double v = conv_cell(x, k + std::int64_t(oc) * cin * kh * kw, cin, h,
                               w, kh, kw, oy, ox, stride, pad);
          y[(std::int64_t(oc) * oh + oy) * ow + ox] = bias ? v + bias[oc] : v;
        }
  }
}

void conv2d_bwd_input(const double* k, int cout, int cin, int kh, int kw,
                      const double* gy, int oh, int ow, int stride, int pad,
                      double* gx, int h, int w, Backend be) {
  const std::int64_t total = std::int64_t(cin) * h * w;
  if (be == Backend::openmp) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(max_threads())
#endif
    for (std::int64_t i = 0; i < total; ++i) {
      const int ic = int(i / (std::int64_t(h) * w));
      const int iy = int((i / w) % h);
      const int ix = int(i % w);
      gx[i] += conv_input_cell(k, gy, cout, cin, kh, kw, oh, ow, stride, pad,
                               ic, iy, ix);
    }
  } else {
    for (int ic = 0; ic < cin; ++ic)
      for (int iy = 0; iy < h; ++iy)
        for (int ix = 0; ix < w; ++ix)
          gx[(std::int64_t(ic) * h + iy) * w + ix] += conv_input_cell(
              k, gy, cout, cin, kh, kw, oh, ow, stride, pad, ic, iy, ix);
  }
}

void conv2d_bwd_weight(const double* x, int cin, int h, int w,
                       const double* gy, int cout, int oh, int ow, int stride,
                       int pad, int kh, int kw, double* gk, Backend be) {
  const std::int64_t total = std::int64_t(cout) * cin * kh * kw;
  if (be == Backend::openmp) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(max_threads())
#endif
    for (std::int64_t i = 0; i < total; ++i) {
      const int oc = int(i / (std::int64_t(cin) * kh * kw));
      const int ic = int((i / (kh * kw)) % cin);
      const int ky = int((i / kw) % kh);
      const int kx = int(i % kw);
      gk[i] +=
          conv_weight_cell(x, gy, h, w, oh, ow, stride, pad, ic, oc, ky, kx);
    }
  } else {
    for (int oc = 0; oc < cout; ++oc)
      for (int ic = 0; ic < cin; ++ic)
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx)
            gk[((std::int64_t(oc) * cin + ic) * kh + ky) * kw + kx] +=
                conv_weight_cell(x, gy, h, w, oh, ow, stride, pad, ic, oc, ky,
                                 kx);
  }
}

void conv2d_bwd_bias(const double* gy, int cout, int oh, int ow, double* gb,
                     Backend be) {
  const std::int64_t plane = std::int64_t(oh) * ow;
  if (be == Backend::openmp) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(max_threads())
#endif
    for (int oc = 0; oc < cout; ++oc)
      gb[oc] += block_sum(gy + oc * plane, plane, Backend::serial);
  } else {
    for (int oc = 0; oc < cout; ++oc)
      gb[oc] += block_sum(gy + oc * plane, plane, Backend::serial);
  }
}

void avgpool3_fwd(const double* x, int c, int h, int w, double* y, Backend be) {
  const std::int64_t total = std::int64_t(c) * h * w;
  if (be == Backend::openmp) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(max_threads())
#endif
    for (std::int64_t i = 0; i < total; ++i) {
      const int ch = int(i / (std::int64_t(h) * w));
      y[i] = pool_cell(x + std::int64_t(ch) * h * w, h, w, int((i / w) % h),
                       int(i % w));
    }
  } else {
    for (int ch = 0; ch < c; ++ch)
      for (int yy = 0; yy < h; ++yy)
        for (int xx = 0; xx < w; ++xx)
          y[(std::int64_t(ch) * h + yy) * w + xx] =
              pool_cell(x + std::int64_t(ch) * h * w, h, w, yy, xx);
  }
}

void avgpool3_bwd(const double* gy, int c, int h, int w, double* gx,
                  Backend be) {
  const std::int64_t total = std::int64_t(c) * h * w;
  if (be == Backend::openmp) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(max_threads())
#endif
    for (std::int64_t i = 0; i < total; ++i) {
      const int ch = int(i / (std::int64_t(h) * w));
      gx[i] += pool_bwd_cell(gy + std::int64_t(ch) * h * w, h, w,
                             int((i / w) % h), int(i % w));
    }
  } else {
    for (int ch = 0; ch < c; ++ch)
      for (int yy = 0; yy < h; ++yy)
        for (int xx = 0; xx < w; ++xx)
          gx[(std::int64_t(ch) * h + yy) * w + xx] +=
              pool_bwd_cell(gy + std::int64_t(ch) * h * w, h, w, yy, xx);
  }
}

void bilinear_fwd(const double* img, int c, int h, int w, const double* grid,
                  int hg, int wg, double* out, Backend be) {
  const std::int64_t np = std::int64_t(hg) * wg;
  if (be == Backend::openmp) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(max_threads())
#endif
    for (std::int64_t p = 0; p < np; ++p) {
      Taps t = make_taps(grid[2 * p], grid[2 * p + 1], h, w);
      for (int ch = 0; ch < c; ++ch)
        out[std::int64_t(ch) * np + p] =
            bilinear_cell(img + std::int64_t(ch) * h * w, h, w, t);
    }
  } else {
    for (std::int64_t p = 0; p < np; ++p) {
      Taps t = make_taps(grid[2 * p], grid[2 * p + 1], h, w);
      for (int ch = 0; ch < c; ++ch)
        out[std::int64_t(ch) * np + p] =
            bilinear_cell(img + std::int64_t(ch) * h * w, h, w, t);
    }
  }
}

void bilinear_bwd(const double* img, int c, int h, int w, const double* grid,
                  int hg, int wg, const double* gout, double* gimg,
                  double* ggrid, Backend be) {
  const std::int64_t np = std::int64_t(hg) * wg;
  if (ggrid) {
    if (be == Backend::openmp) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(max_threads())
#endif
      for (std::int64_t p = 0; p < np; ++p) {
        Taps t = make_taps(grid[2 * p], grid[2 * p + 1], h, w);
        double du, dv;
        bilinear_grid_grad(img, c, h, w, t, gout, np, p, &du, &dv);
        ggrid[2 * p] += du;
        ggrid[2 * p + 1] += dv;
      }
    } else {
      for (std::int64_t p = 0; p < np; ++p) {
        Taps t = make_taps(grid[2 * p], grid[2 * p + 1], h, w);
        double du, dv;
        bilinear_grid_grad(img, c, h, w, t, gout, np, p, &du, &dv);
        ggrid[2 * p] += du;
        ggrid[2 * p + 1] += dv;
      }
    }
  }
  if (gimg) {
    Csr csr = build_csr(grid, h, w, hg, wg);
    const std::int64_t plane = std::int64_t(h) * w;
    if (be == Backend::openmp) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(max_threads())
#endif
      for (std::int64_t s = 0; s < plane; ++s)
        for (int ch = 0; ch < c; ++ch)
          gimg[std::int64_t(ch) * plane + s] +=
              csr_fold(csr, gout + std::int64_t(ch) * np, s);
    } else {
      for (std::int64_t s = 0; s < plane; ++s)
        for (int ch = 0; ch < c; ++ch)
          gimg[std::int64_t(ch) * plane + s] +=
              csr_fold(csr, gout + std::int64_t(ch) * np, s);
    }
  }
}

void matmul_fwd(const double* a, const double* b, double* y, int m, int k,
                int n, Backend be) {
  const std::int64_t total = std::int64_t(m) * n;
  if (be == Backend::openmp) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(max_threads())
#endif
    for (std::int64_t i = 0; i < total; ++i) {
      const int r = int(i / n), col = int(i % n);
      y[i] = dot_col(a + std::int64_t(r) * k, b + col, k, 1, n);
    }
  } else {
    for (int r = 0; r < m; ++r)
      for (int col = 0; col < n; ++col)
        y[std::int64_t(r) * n + col] =
            dot_col(a + std::int64_t(r) * k, b + col, k, 1, n);
  }
}

void matmul_bwd_a(const double* gy, const double* b, double* ga, int m, int k,
                  int n, Backend be) {
  const std::int64_t total = std::int64_t(m) * k;
  if (be == Backend::openmp) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(max_threads())
#endif
    for (std::int64_t i = 0; i < total; ++i) {
      const int r = int(i / k), kk = int(i % k);
      ga[i] += dot_rows(gy + std::int64_t(r) * n, b + std::int64_t(kk) * n, n);
    }
  } else {
    for (int r = 0; r < m; ++r)
      for (int kk = 0; kk < k; ++kk)
        ga[std::int64_t(r) * k + kk] +=
            dot_rows(gy + std::int64_t(r) * n, b + std::int64_t(kk) * n, n);
  }
}

void matmul_bwd_b(const double* a, const double* gy, double* gb, int m, int k,
                  int n, Backend be) {
  const std::int64_t total = std::int64_t(k) * n;
  if (be == Backend::openmp) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(max_threads())
#endif
    for (std::int64_t i = 0; i < total; ++i) {
      const int kk = int(i / n), col = int(i % n);
      gb[i] += dot_col(a + kk, gy + col, m, k, n);
    }
  } else {
    for (int kk = 0; kk < k; ++kk)
      for (int col = 0; col < n; ++col)
        gb[std::int64_t(kk) * n + col] += dot_col(a + kk, gy + col, m, k, n);
  }
}

}  // namespace ssd::kern
