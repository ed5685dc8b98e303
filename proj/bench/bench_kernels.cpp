// Times the serial reference kernels against the OpenMP variants and checks
// that both produce identical bits on the benchmark inputs.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "dgp/kernels.hpp"
#include "dgp/rng.hpp"

namespace {

using Clock = std::chrono::steady_clock;

double time_ms(const std::function<void()>& fn, int reps) {
  fn();  // warm up
  const auto t0 = Clock::now();
  for (int i = 0; i < reps; ++i) fn();
  const auto t1 = Clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

std::vector<double> random_vec(std::size_t n, dgp::Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

void report(const char* name, double serial_ms, double par_ms, bool identical) {
  std::printf("%-18s serial %8.3f ms   openmp %8.3f ms   speedup %5.2fx   %s\n",
              name, serial_ms, par_ms, serial_ms / par_ms,
              identical ? "bit-identical" : "MISMATCH");
}

}  // namespace

int main() {
  dgp::Rng rng(20240817);
  std::printf("threads: %d\n\n", dgp::kernels::max_threads());

  {
    const int m = 256, k = 256, n = 256;
    const auto a = random_vec(static_cast<std::size_t>(m) * k, rng);
    const auto b = random_vec(static_cast<std::size_t>(k) * n, rng);
    std::vector<double> cs(static_cast<std::size_t>(m) * n, 0.0), cp = cs;
    const double ts = time_ms(
        [&] {
          std::fill(cs.begin(), cs.end(), 0.0);
          dgp::kernels::serial::matmul_nn(a.data(), b.data(), cs.data(), m, k, n);
        },
        5);
    const double tp = time_ms(
        [&] {
          std::fill(cp.begin(), cp.end(), 0.0);
          dgp::kernels::par::matmul_nn(a.data(), b.data(), cp.data(), m, k, n);
        },
        5);
    report("matmul 256^3", ts, tp,
           std::memcmp(cs.data(), cp.data(), cs.size() * sizeof(double)) == 0);
  }

  {
    const int b = 8, cin = 8, h = 64, w = 64, cout = 16, ksz = 3;
    const auto x = random_vec(static_cast<std::size_t>(b) * cin * h * w, rng);
    const auto wgt =
        random_vec(static_cast<std::size_t>(cout) * cin * ksz * ksz, rng);
    const auto bias = random_vec(static_cast<std::size_t>(cout), rng);
    std::vector<double> ys(static_cast<std::size_t>(b) * cout * h * w, 0.0), yp = ys;
    const double ts = time_ms(
        [&] {
          std::fill(ys.begin(), ys.end(), 0.0);
          dgp::kernels::serial::conv2d_fwd(x.data(), wgt.data(), bias.data(),
                                           ys.data(), b, cin, h, w, cout, ksz);
        },
        5);
    const double tp = time_ms(
        [&] {
          std::fill(yp.begin(), yp.end(), 0.0);
          dgp::kernels::par::conv2d_fwd(x.data(), wgt.data(), bias.data(),
                                        yp.data(), b, cin, h, w, cout, ksz);
        },
        5);
    report("conv2d fwd", ts, tp,
           std::memcmp(ys.data(), yp.data(), ys.size() * sizeof(double)) == 0);

    const auto gy = random_vec(static_cast<std::size_t>(b) * cout * h * w, rng);
    std::vector<double> gxs(x.size(), 0.0), gxp = gxs;
    const double tsi = time_ms(
        [&] {
          std::fill(gxs.begin(), gxs.end(), 0.0);
          dgp::kernels::serial::conv2d_bwd_input(gy.data(), wgt.data(), gxs.data(),
                                                 b, cin, h, w, cout, ksz);
        },
        5);
    const double tpi = time_ms(
        [&] {
          std::fill(gxp.begin(), gxp.end(), 0.0);
          dgp::kernels::par::conv2d_bwd_input(gy.data(), wgt.data(), gxp.data(),
                                              b, cin, h, w, cout, ksz);
        },
        5);
    report("conv2d bwd input", tsi, tpi,
           std::memcmp(gxs.data(), gxp.data(), gxs.size() * sizeof(double)) == 0);

    std::vector<double> gws(wgt.size(), 0.0), gwp = gws;
    const double tsw = time_ms(
        [&] {
          std::fill(gws.begin(), gws.end(), 0.0);
          dgp::kernels::serial::conv2d_bwd_weight(gy.data(), x.data(), gws.data(),
                                                  b, cin, h, w, cout, ksz);
        },
        5);
    const double tpw = time_ms(
        [&] {
          std::fill(gwp.begin(), gwp.end(), 0.0);
          dgp::kernels::par::conv2d_bwd_weight(gy.data(), x.data(), gwp.data(),
                                               b, cin, h, w, cout, ksz);
        },
        5);
    report("conv2d bwd weight", tsw, tpw,
           std::memcmp(gws.data(), gwp.data(), gws.size() * sizeof(double)) == 0);
  }
  return 0;
}
