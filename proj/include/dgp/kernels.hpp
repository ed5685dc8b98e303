#pragma once

namespace dgp::kernels {

// Dense compute kernels behind the tensor ops. Every kernel accumulates into
// its output buffer; callers zero-fill fresh buffers.
//
// The `serial` namespace is the reference implementation. The `par` variants
// parallelize only over loops where each output element is owned by exactly
// one thread and reduced in the same order as the reference, so serial and
// parallel results are bit-identical. test_kernels.cpp checks that equality;
// bench/ compares their runtime.

bool parallel_enabled();
void set_parallel(bool on);
int max_threads();

namespace serial {

// c[m,n] += a[m,k] * b[k,n]
void matmul_nn(const double* a, const double* b, double* c, int m, int k, int n);
// c[m,n] += transpose(a)[m,k] * b[k,n], a stored as [k,m]
void matmul_tn(const double* a, const double* b, double* c, int k, int m, int n);
// c[m,n] += a[m,k] * transpose(b)[k,n], b stored as [n,k]
void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n);

// Square odd kernel, stride 1, zero padding ksz/2; shapes
// x[b,cin,h,w], wgt[cout,cin,ksz,ksz], bias[cout] (may be null), y[b,cout,h,w].
void conv2d_fwd(const double* x, const double* wgt, const double* bias,
                double* y, int b, int cin, int h, int w, int cout, int ksz);
void conv2d_bwd_input(const double* gy, const double* wgt, double* gx,
                      int b, int cin, int h, int w, int cout, int ksz);
void conv2d_bwd_weight(const double* gy, const double* x, double* gw,
                       int b, int cin, int h, int w, int cout, int ksz);
void conv2d_bwd_bias(const double* gy, double* gb, int b, int cout, int h, int w);

}  // namespace serial

namespace par {

void matmul_nn(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_tn(const double* a, const double* b, double* c, int k, int m, int n);
void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n);
void conv2d_fwd(const double* x, const double* wgt, const double* bias,
                double* y, int b, int cin, int h, int w, int cout, int ksz);
void conv2d_bwd_input(const double* gy, const double* wgt, double* gx,
                      int b, int cin, int h, int w, int cout, int ksz);
void conv2d_bwd_weight(const double* gy, const double* x, double* gw,
                       int b, int cin, int h, int w, int cout, int ksz);
void conv2d_bwd_bias(const double* gy, double* gb, int b, int cout, int h, int w);

}  // namespace par

// Dispatch on the process-wide parallel flag.
void matmul_nn(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_tn(const double* a, const double* b, double* c, int k, int m, int n);
void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n);
void conv2d_fwd(const double* x, const double* wgt, const double* bias,
                double* y, int b, int cin, int h, int w, int cout, int ksz);
void conv2d_bwd_input(const double* gy, const double* wgt, double* gx,
                      int b, int cin, int h, int w, int cout, int ksz);
void conv2d_bwd_weight(const double* gy, const double* x, double* gw,
                       int b, int cin, int h, int w, int cout, int ksz);
void conv2d_bwd_bias(const double* gy, double* gb, int b, int cout, int h, int w);

}  // namespace dgp::kernels
