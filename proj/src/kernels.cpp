#include "dgp/kernels.hpp"

#include <atomic>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace dgp::kernels {

namespace {

std::atomic<bool> g_parallel{
#ifdef _OPENMP
    true
#else
    false
#endif
};

// Element-level routines shared by the serial and parallel variants. Both
// call the same code with the same reduction order, which is what makes the
// two variants bit-identical.

inline double dot_row_col(const double* a, const double* b, int k, int n) {
  // a: contiguous row of length k, b: column with stride n
  double acc = 0.0;
  for (int t = 0; t < k; ++t) acc += a[t] * b[static_cast<long>(t) * n];
  return acc;
}

inline void matmul_nn_row(const double* a, const double* b, double* c,
                          int i, int k, int n) {
  const double* arow = a + static_cast<long>(i) * k;
  double* crow = c + static_cast<long>(i) * n;
  for (int j = 0; j < n; ++j) crow[j] += dot_row_col(arow, b + j, k, n);
}

inline void matmul_tn_row(const double* a, const double* b, double* c,
                          int i, int k, int m, int n) {
  // c[i,j] += sum_t a[t,i] * b[t,j]
  double* crow = c + static_cast<long>(i) * n;
  for (int j = 0; j < n; ++j) {
    double acc = 0.0;
    for (int t = 0; t < k; ++t)
      acc += a[static_cast<long>(t) * m + i] * b[static_cast<long>(t) * n + j];
    crow[j] += acc;
  }
}

inline void matmul_nt_row(const double* a, const double* b, double* c,
                          int i, int k, int n) {
  // c[i,j] += sum_t a[i,t] * b[j,t]
  const double* arow = a + static_cast<long>(i) * k;
  double* crow = c + static_cast<long>(i) * n;
  for (int j = 0; j < n; ++j) {
    const double* brow = b + static_cast<long>(j) * k;
    double acc = 0.0;
    for (int t = 0; t < k; ++t) acc += arow[t] * brow[t];
    crow[j] += acc;
  }
}

inline long idx4(int a, int b, int c, int d, int nb, int nc, int nd) {
  return ((static_cast<long>(a) * nb + b) * nc + c) * nd + d;
}

// One (sample, output-channel) plane of the convolution forward pass.
// y_plane points at y[bi, oc, 0, 0].
inline void conv_fwd_plane(const double* x, const double* wgt, const double* bias,
                           double* y_plane, int bi, int oc, int cin, int h, int w,
                           int ksz) {
  const int pad = ksz / 2;
  for (int oy = 0; oy < h; ++oy) {
    for (int ox = 0; ox < w; ++ox) {
      double acc = bias ? bias[oc] : 0.0;
      for (int ic = 0; ic < cin; ++ic) {
        for (int ky = 0; ky < ksz; ++ky) {
          const int iy = oy + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < ksz; ++kx) {
            const int ix = ox + kx - pad;
            if (ix < 0 || ix >= w) continue;
            acc += x[idx4(bi, ic, iy, ix, cin, h, w)] *
                   wgt[idx4(oc, ic, ky, kx, cin, ksz, ksz)];
          }
        }
      }
      y_plane[static_cast<long>(oy) * w + ox] += acc;
    }
  }
}

inline void conv_bwd_input_plane(const double* gy, const double* wgt, double* gx,
                                 int bi, int ic, int cin, int h, int w, int cout,
                                 int ksz) {
  const int pad = ksz / 2;
  for (int iy = 0; iy < h; ++iy) {
    for (int ix = 0; ix < w; ++ix) {
      double acc = 0.0;
      for (int oc = 0; oc < cout; ++oc) {
        for (int ky = 0; ky < ksz; ++ky) {
          const int oy = iy - ky + pad;
          if (oy < 0 || oy >= h) continue;
          for (int kx = 0; kx < ksz; ++kx) {
            const int ox = ix - kx + pad;
            if (ox < 0 || ox >= w) continue;
            acc += gy[idx4(bi, oc, oy, ox, cout, h, w)] *
                   wgt[idx4(oc, ic, ky, kx, cin, ksz, ksz)];
          }
        }
      }
      gx[idx4(bi, ic, iy, ix, cin, h, w)] += acc;
    }
  }
}

inline void conv_bwd_weight_filter(const double* gy, const double* x, double* gw,
                                   int oc, int ic, int b, int cin, int h, int w,
                                   int cout, int ksz) {
  const int pad = ksz / 2;
  for (int ky = 0; ky < ksz; ++ky) {
    for (int kx = 0; kx < ksz; ++kx) {
      double acc = 0.0;
      for (int bi = 0; bi < b; ++bi) {
        for (int oy = 0; oy < h; ++oy) {
          const int iy = oy + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < w; ++ox) {
            const int ix = ox + kx - pad;
            if (ix < 0 || ix >= w) continue;
            acc += gy[idx4(bi, oc, oy, ox, cout, h, w)] *
                   x[idx4(bi, ic, iy, ix, cin, h, w)];
          }
        }
      }
      gw[idx4(oc, ic, ky, kx, cin, ksz, ksz)] += acc;
    }
  }
}

inline void conv_bwd_bias_channel(const double* gy, double* gb, int oc, int b,
                                  int cout, int h, int w) {
  double acc = 0.0;
  for (int bi = 0; bi < b; ++bi) {
    const double* plane = gy + idx4(bi, oc, 0, 0, cout, h, w);
    const long hw = static_cast<long>(h) * w;
    for (long p = 0; p < hw; ++p) acc += plane[p];
  }
  gb[oc] += acc;
}

}  // namespace

bool parallel_enabled() { return g_parallel.load(std::memory_order_relaxed); }
void set_parallel(bool on) { g_parallel.store(on, std::memory_order_relaxed); }

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace serial {

void matmul_nn(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) matmul_nn_row(a, b, c, i, k, n);
}

void matmul_tn(const double* a, const double* b, double* c, int k, int m, int n) {
  for (int i = 0; i < m; ++i) matmul_tn_row(a, b, c, i, k, m, n);
}

void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) matmul_nt_row(a, b, c, i, k, n);
}

void conv2d_fwd(const double* x, const double* wgt, const double* bias,
                double* y, int b, int cin, int h, int w, int cout, int ksz) {
  for (int bi = 0; bi < b; ++bi)
    for (int oc = 0; oc < cout; ++oc)
      conv_fwd_plane(x, wgt, bias, y + idx4(bi, oc, 0, 0, cout, h, w), bi, oc,
                     cin, h, w, ksz);
}

void conv2d_bwd_input(const double* gy, const double* wgt, double* gx,
                      int b, int cin, int h, int w, int cout, int ksz) {
  for (int bi = 0; bi < b; ++bi)
    for (int ic = 0; ic < cin; ++ic)
      conv_bwd_input_plane(gy, wgt, gx, bi, ic, cin, h, w, cout, ksz);
}

void conv2d_bwd_weight(const double* gy, const double* x, double* gw,
                       int b, int cin, int h, int w, int cout, int ksz) {
  for (int oc = 0; oc < cout; ++oc)
    for (int ic = 0; ic < cin; ++ic)
      conv_bwd_weight_filter(gy, x, gw, oc, ic, b, cin, h, w, cout, ksz);
}

void conv2d_bwd_bias(const double* gy, double* gb, int b, int cout, int h, int w) {
  for (int oc = 0; oc < cout; ++oc)
    conv_bwd_bias_channel(gy, gb, oc, b, cout, h, w);
}

}  // namespace serial

namespace par {

void matmul_nn(const double* a, const double* b, double* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) matmul_nn_row(a, b, c, i, k, n);
}

void matmul_tn(const double* a, const double* b, double* c, int k, int m, int n) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) matmul_tn_row(a, b, c, i, k, m, n);
}

void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) matmul_nt_row(a, b, c, i, k, n);
}

void conv2d_fwd(const double* x, const double* wgt, const double* bias,
                double* y, int b, int cin, int h, int w, int cout, int ksz) {
  const int planes = b * cout;
#pragma omp parallel for schedule(static)
  for (int p = 0; p < planes; ++p) {
    const int bi = p / cout;
    const int oc = p % cout;
    conv_fwd_plane(x, wgt, bias, y + idx4(bi, oc, 0, 0, cout, h, w), bi, oc,
                   cin, h, w, ksz);
  }
}

void conv2d_bwd_input(const double* gy, const double* wgt, double* gx,
                      int b, int cin, int h, int w, int cout, int ksz) {
  const int planes = b * cin;
#pragma omp parallel for schedule(static)
  for (int p = 0; p < planes; ++p)
    conv_bwd_input_plane(gy, wgt, gx, p / cin, p % cin, cin, h, w, cout, ksz);
}

void conv2d_bwd_weight(const double* gy, const double* x, double* gw,
                       int b, int cin, int h, int w, int cout, int ksz) {
  const int filters = cout * cin;
#pragma omp parallel for schedule(static)
  for (int f = 0; f < filters; ++f)
    conv_bwd_weight_filter(gy, x, gw, f / cin, f % cin, b, cin, h, w, cout, ksz);
}

void conv2d_bwd_bias(const double* gy, double* gb, int b, int cout, int h, int w) {
#pragma omp parallel for schedule(static)
  for (int oc = 0; oc < cout; ++oc)
    conv_bwd_bias_channel(gy, gb, oc, b, cout, h, w);
}

}  // namespace par

void matmul_nn(const double* a, const double* b, double* c, int m, int k, int n) {
  parallel_enabled() ? par::matmul_nn(a, b, c, m, k, n)
                     : serial::matmul_nn(a, b, c, m, k, n);
}

void matmul_tn(const double* a, const double* b, double* c, int k, int m, int n) {
  parallel_enabled() ? par::matmul_tn(a, b, c, k, m, n)
                     : serial::matmul_tn(a, b, c, k, m, n);
}

void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n) {
  parallel_enabled() ? par::matmul_nt(a, b, c, m, k, n)
                     : serial::matmul_nt(a, b, c, m, k, n);
}

void conv2d_fwd(const double* x, const double* wgt, const double* bias,
                double* y, int b, int cin, int h, int w, int cout, int ksz) {
  parallel_enabled() ? par::conv2d_fwd(x, wgt, bias, y, b, cin, h, w, cout, ksz)
                     : serial::conv2d_fwd(x, wgt, bias, y, b, cin, h, w, cout, ksz);
}

void conv2d_bwd_input(const double* gy, const double* wgt, double* gx,
                      int b, int cin, int h, int w, int cout, int ksz) {
  parallel_enabled()
      ? par::conv2d_bwd_input(gy, wgt, gx, b, cin, h, w, cout, ksz)
      : serial::conv2d_bwd_input(gy, wgt, gx, b, cin, h, w, cout, ksz);
}

void conv2d_bwd_weight(const double* gy, const double* x, double* gw,
                       int b, int cin, int h, int w, int cout, int ksz) {
  parallel_enabled()
      ? par::conv2d_bwd_weight(gy, x, gw, b, cin, h, w, cout, ksz)
      : serial::conv2d_bwd_weight(gy, x, gw, b, cin, h, w, cout, ksz);
}

void conv2d_bwd_bias(const double* gy, double* gb, int b, int cout, int h, int w) {
  parallel_enabled() ? par::conv2d_bwd_bias(gy, gb, b, cout, h, w)
                     : serial::conv2d_bwd_bias(gy, gb, b, cout, h, w);
}

}  // namespace dgp::kernels
