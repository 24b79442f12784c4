#pragma once

#include <cstdint>

namespace ssd::kern {

// Every kernel exists twice: a plain serial reference and an OpenMP version.
// Both share the same per-element fold helpers, so for any input the two
// backends produce bit-identical float64 results regardless of thread count.
// The serial build is kept as the test oracle; `bench_kernels` compares them.
enum class Backend { serial, openmp };

Backend backend();
void set_backend(Backend b);

// Number of worker threads the OpenMP backend may use. Honors the
// SSD_THREADS environment variable as an upper bound.
int max_threads();

// Deterministic reduction: fixed 4096-element blocks folded left to right.
double block_sum(const double* x, std::int64_t n);
double block_sum(const double* x, std::int64_t n, Backend be);

// x: (cin,h,w), k: (cout,cin,kh,kw), bias: size cout or nullptr,
// y: (cout,oh,ow) with oh = (h + 2*pad - kh)/stride + 1. Zero padding.
void conv2d_fwd(const double* x, int cin, int h, int w, const double* k,
                int cout, int kh, int kw, const double* bias, int stride,
                int pad, double* y, int oh, int ow, Backend be);

// All backward kernels accumulate (+=) into the output buffers.
void conv2d_bwd_input(const double* k, int cout, int cin, int kh, int kw,
                      const double* gy, int oh, int ow, int stride, int pad,
                      double* gx, int h, int w, Backend be);
void conv2d_bwd_weight(const double* x, int cin, int h, int w,
                       const double* gy, int cout, int oh, int ow, int stride,
                       int pad, int kh, int kw, double* gk, Backend be);
void conv2d_bwd_bias(const double* gy, int cout, int oh, int ow, double* gb,
                     Backend be);

// 3x3 mean filter, stride 1, 1-pixel replicate padding; y has x's shape.
void avgpool3_fwd(const double* x, int c, int h, int w, double* y, Backend be);
void avgpool3_bwd(const double* gy, int c, int h, int w, double* gx,
                  Backend be);

// img: (c,h,w), grid: (hg,wg,2) continuous (u,v) pixel coords, out: (c,hg,wg).
// Coordinates are clamped to [0,w-1]x[0,h-1]; at exact integer coordinates the
// piecewise-linear kernel takes the left/bottom cell, so the coordinate
// gradient there is the one-sided (left/bottom) derivative.
void bilinear_fwd(const double* img, int c, int h, int w, const double* grid,
                  int hg, int wg, double* out, Backend be);
void bilinear_bwd(const double* img, int c, int h, int w, const double* grid,
                  int hg, int wg, const double* gout, double* gimg,
                  double* ggrid, Backend be);

// a: (m,k), b: (k,n), y: (m,n)
void matmul_fwd(const double* a, const double* b, double* y, int m, int k,
                int n, Backend be);
void matmul_bwd_a(const double* gy, const double* b, double* ga, int m, int k,
                  int n, Backend be);
void matmul_bwd_b(const double* a, const double* gy, double* gb, int m, int k,
                  int n, Backend be);

}  // namespace ssd::kern
