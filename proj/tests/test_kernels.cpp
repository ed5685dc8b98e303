#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <vector>

#include "dgp/kernels.hpp"
#include "dgp/rng.hpp"
#include "testutil.hpp"

using namespace dgp;

namespace {

bool bits_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("matmul variants: serial and parallel are bit-identical") {
  Rng rng(7);
  for (const auto [m, k, n] : {std::array{3, 5, 4}, std::array{17, 9, 23},
                               std::array{64, 64, 64}, std::array{1, 1, 1}}) {
    const auto a = testutil::sample_uniform(rng, static_cast<std::size_t>(m) * k, -2, 2);
    const auto b = testutil::sample_uniform(rng, static_cast<std::size_t>(k) * n, -2, 2);
    std::vector<double> cs(static_cast<std::size_t>(m) * n, 0.5), cp = cs;
    kernels::serial::matmul_nn(a.data(), b.data(), cs.data(), m, k, n);
    kernels::par::matmul_nn(a.data(), b.data(), cp.data(), m, k, n);
    CHECK(bits_equal(cs, cp));

    const auto at = testutil::sample_uniform(rng, static_cast<std::size_t>(k) * m, -2, 2);
    std::fill(cs.begin(), cs.end(), 0.0);
    std::fill(cp.begin(), cp.end(), 0.0);
    kernels::serial::matmul_tn(at.data(), b.data(), cs.data(), k, m, n);
    kernels::par::matmul_tn(at.data(), b.data(), cp.data(), k, m, n);
    CHECK(bits_equal(cs, cp));

    const auto bt = testutil::sample_uniform(rng, static_cast<std::size_t>(n) * k, -2, 2);
    std::fill(cs.begin(), cs.end(), 0.0);
    std::fill(cp.begin(), cp.end(), 0.0);
    kernels::serial::matmul_nt(a.data(), bt.data(), cs.data(), m, k, n);
    kernels::par::matmul_nt(a.data(), bt.data(), cp.data(), m, k, n);
    CHECK(bits_equal(cs, cp));
  }
}

TEST_CASE("matmul_nn matches a plain triple loop") {
  Rng rng(11);
  const int m = 7, k = 5, n = 6;
  const auto a = testutil::sample_uniform(rng, static_cast<std::size_t>(m) * k, -1, 1);
  const auto b = testutil::sample_uniform(rng, static_cast<std::size_t>(k) * n, -1, 1);
  std::vector<double> c(static_cast<std::size_t>(m) * n, 0.0);
  kernels::matmul_nn(a.data(), b.data(), c.data(), m, k, n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int t = 0; t < k; ++t)
        acc += a[static_cast<std::size_t>(i) * k + t] * b[static_cast<std::size_t>(t) * n + j];
      CHECK(c[static_cast<std::size_t>(i) * n + j] == doctest::Approx(acc).epsilon(1e-12));
    }
}

TEST_CASE("conv kernels: serial and parallel are bit-identical") {
  Rng rng(23);
  for (const auto [b, cin, h, w, cout, ksz] :
       {std::array{2, 3, 8, 8, 4, 3}, std::array{1, 1, 5, 7, 2, 3},
        std::array{3, 4, 6, 6, 5, 1}}) {
    const auto x = testutil::sample_uniform(
        rng, static_cast<std::size_t>(b) * cin * h * w, -1, 1);
    const auto wgt = testutil::sample_uniform(
        rng, static_cast<std::size_t>(cout) * cin * ksz * ksz, -1, 1);
    const auto bias = testutil::sample_uniform(rng, static_cast<std::size_t>(cout), -1, 1);

    std::vector<double> ys(static_cast<std::size_t>(b) * cout * h * w, 0.0), yp = ys;
    kernels::serial::conv2d_fwd(x.data(), wgt.data(), bias.data(), ys.data(), b,
                                cin, h, w, cout, ksz);
    kernels::par::conv2d_fwd(x.data(), wgt.data(), bias.data(), yp.data(), b,
                             cin, h, w, cout, ksz);
    CHECK(bits_equal(ys, yp));

    const auto gy = testutil::sample_uniform(
        rng, static_cast<std::size_t>(b) * cout * h * w, -1, 1);
    std::vector<double> gxs(x.size(), 0.0), gxp = gxs;
    kernels::serial::conv2d_bwd_input(gy.data(), wgt.data(), gxs.data(), b, cin,
                                      h, w, cout, ksz);
    kernels::par::conv2d_bwd_input(gy.data(), wgt.data(), gxp.data(), b, cin, h,
                                   w, cout, ksz);
    CHECK(bits_equal(gxs, gxp));

    std::vector<double> gws(wgt.size(), 0.0), gwp = gws;
    kernels::serial::conv2d_bwd_weight(gy.data(), x.data(), gws.data(), b, cin,
                                       h, w, cout, ksz);
    kernels::par::conv2d_bwd_weight(gy.data(), x.data(), gwp.data(), b, cin, h,
                                    w, cout, ksz);
    CHECK(bits_equal(gws, gwp));

    std::vector<double> gbs(static_cast<std::size_t>(cout), 0.0), gbp = gbs;
    kernels::serial::conv2d_bwd_bias(gy.data(), gbs.data(), b, cout, h, w);
    kernels::par::conv2d_bwd_bias(gy.data(), gbp.data(), b, cout, h, w);
    CHECK(bits_equal(gbs, gbp));
  }
}

TEST_CASE("conv2d_fwd with a unit impulse kernel is the identity") {
  Rng rng(5);
  const int b = 1, c = 1, h = 6, w = 6;
  const auto x = testutil::sample_uniform(rng, static_cast<std::size_t>(h) * w, -1, 1);
  std::vector<double> wgt(9, 0.0);
  wgt[4] = 1.0;  // center tap
  std::vector<double> y(x.size(), 0.0);
  kernels::conv2d_fwd(x.data(), wgt.data(), nullptr, y.data(), b, c, h, w, 1, 3);
  CHECK(bits_equal(x, y));
}

TEST_CASE("kernels accumulate into the output") {
  const int m = 2, k = 2, n = 2;
  const std::vector<double> a{1, 0, 0, 1}, b{1, 2, 3, 4};
  std::vector<double> c{10, 10, 10, 10};
  kernels::matmul_nn(a.data(), b.data(), c.data(), m, k, n);
  CHECK(c == std::vector<double>{11, 12, 13, 14});
}

TEST_CASE("dispatch honors the parallel flag") {
  const bool before = kernels::parallel_enabled();
  kernels::set_parallel(false);
  CHECK_FALSE(kernels::parallel_enabled());
  kernels::set_parallel(before);
}
