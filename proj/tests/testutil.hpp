#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dgp/rng.hpp"
#include "dgp/tensor.hpp"

namespace dgp::testutil {

// Central-difference gradient check. `f` rebuilds the graph from the given
// leaf parameters on every call; returns the max relative error over every
// parameter coordinate, with |a-n| / max(1, |a|, |n|) as the error measure.
inline double grad_check(const std::function<Tensor(Tape&)>& f,
                         std::span<Tensor> params, double h = 1e-5) {
  // Analytic gradients.
  for (auto& p : params) p.node()->grad.assign(p.value().size(), 0.0);
  {
    Tape tape;
    Tensor loss = f(tape);
    backward(tape, loss);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) analytic.push_back(p.node()->grad);

  const auto eval = [&]() {
    Tape tape;
    return f(tape).item();
  };

  double max_err = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& value = params[pi].value();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double keep = value[i];
      value[i] = keep + h;
      const double fp = eval();
      value[i] = keep - h;
      const double fm = eval();
      value[i] = keep;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[pi][i];
      const double err =
          std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

// Samples bounded away from zero so relu/pooling kinks cannot sit within the
// finite-difference step.
inline std::vector<double> sample_away_from_zero(Rng& rng, std::size_t n,
                                                 double lo = 0.1, double hi = 2.0) {
  std::vector<double> v(n);
  for (double& x : v) {
    const double mag = rng.uniform(lo, hi);
    x = rng.uniform() < 0.5 ? -mag : mag;
  }
  return v;
}

inline std::vector<double> sample_uniform(Rng& rng, std::size_t n, double lo,
                                          double hi) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

// Reduces an op output to a scalar through fixed random weights so the check
// exercises every output coordinate.
inline Tensor weighted_sum(Tape& tape, const Tensor& t, const Tensor& weights) {
  return sum(tape, mul(tape, t, weights));
}

// Central-difference checks for every forward primitive, `cases` random
// instances each. Returns the max relative error per primitive.
inline std::map<std::string, double> primitive_grad_errors(int cases,
                                                           std::uint64_t seed = 99) {
  std::map<std::string, double> errors;
  Rng root(seed);
  auto record = [&](const std::string& name, double err) {
    auto [it, inserted] = errors.try_emplace(name, err);
    if (!inserted) it->second = std::max(it->second, err);
  };

  for (int c = 0; c < cases; ++c) {
    Rng rng = root.fork(static_cast<std::uint64_t>(c));

    {  // add / sub / mul, including the scalar-operand form
      Tensor a = Tensor::from_data({2, 3}, sample_uniform(rng, 6, -2, 2), true);
      Tensor b = Tensor::from_data({2, 3}, sample_uniform(rng, 6, -2, 2), true);
      Tensor s = Tensor::from_data({1}, sample_uniform(rng, 1, 0.5, 1.5), true);
      Tensor w = Tensor::from_data({2, 3}, sample_uniform(rng, 6, 0.5, 1.5));
      std::vector<Tensor> ab{a, b};
      record("add", grad_check(
                        [&](Tape& t) { return weighted_sum(t, add(t, a, b), w); }, ab));
      record("sub", grad_check(
                        [&](Tape& t) { return weighted_sum(t, sub(t, a, b), w); }, ab));
      record("mul", grad_check(
                        [&](Tape& t) { return weighted_sum(t, mul(t, a, b), w); }, ab));
      std::vector<Tensor> as{a, s};
      record("add(scalar)",
             grad_check([&](Tape& t) { return weighted_sum(t, add(t, a, s), w); }, as));
      record("mul(scalar)",
             grad_check([&](Tape& t) { return weighted_sum(t, mul(t, a, s), w); }, as));
      record("add_scalar",
             grad_check([&](Tape& t) { return weighted_sum(t, add_scalar(t, a, 0.7), w); },
                        std::span<Tensor>(&a, 1)));
      record("scale",
             grad_check([&](Tape& t) { return weighted_sum(t, scale(t, a, -1.3), w); },
                        std::span<Tensor>(&a, 1)));
    }

    {  // matmul + row-bias
      Tensor a = Tensor::from_data({3, 4}, sample_uniform(rng, 12, -2, 2), true);
      Tensor b = Tensor::from_data({4, 2}, sample_uniform(rng, 8, -2, 2), true);
      Tensor bias = Tensor::from_data({2}, sample_uniform(rng, 2, -1, 1), true);
      Tensor w = Tensor::from_data({3, 2}, sample_uniform(rng, 6, 0.5, 1.5));
      std::vector<Tensor> params{a, b, bias};
      record("matmul+add_bias_rows",
             grad_check(
                 [&](Tape& t) {
                   return weighted_sum(
                       t, add_bias_rows(t, matmul(t, a, b), bias), w);
                 },
                 params));
    }

    for (const int ksz : {3, 1}) {  // conv2d
      Tensor x = Tensor::from_data({2, 2, 4, 4}, sample_uniform(rng, 64, -1, 1), true);
      Tensor wgt = Tensor::from_data(
          {3, 2, ksz, ksz},
          sample_uniform(rng, static_cast<std::size_t>(3 * 2 * ksz * ksz), -1, 1),
          true);
      Tensor bias = Tensor::from_data({3}, sample_uniform(rng, 3, -1, 1), true);
      Tensor w = Tensor::from_data({2, 3, 4, 4}, sample_uniform(rng, 96, 0.5, 1.5));
      std::vector<Tensor> params{x, wgt, bias};
      record("conv2d(k" + std::to_string(ksz) + ")",
             grad_check(
                 [&](Tape& t) {
                   return weighted_sum(t, conv2d(t, x, wgt, bias), w);
                 },
                 params));
    }

    {  // relu / sigmoid
      Tensor x = Tensor::from_data({2, 5}, sample_away_from_zero(rng, 10), true);
      Tensor w = Tensor::from_data({2, 5}, sample_uniform(rng, 10, 0.5, 1.5));
      record("relu", grad_check(
                         [&](Tape& t) { return weighted_sum(t, relu(t, x), w); },
                         std::span<Tensor>(&x, 1)));
      record("sigmoid",
             grad_check([&](Tape& t) { return weighted_sum(t, sigmoid(t, x), w); },
                        std::span<Tensor>(&x, 1)));
    }

    {  // max_pool2d; regenerate until window values are separated
      std::vector<double> vals;
      for (int tries = 0; tries < 100; ++tries) {
        vals = sample_uniform(rng, 2 * 4 * 4, -2, 2);
        bool ok = true;
        for (int ch = 0; ch < 2 && ok; ++ch)
          for (int oy = 0; oy < 2 && ok; ++oy)
            for (int ox = 0; ox < 2 && ok; ++ox) {
              double window[4];
              for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx)
                  window[dy * 2 + dx] =
                      vals[static_cast<std::size_t>(ch * 16 + (oy * 2 + dy) * 4 +
                                                    ox * 2 + dx)];
              for (int i = 0; i < 4 && ok; ++i)
                for (int j = i + 1; j < 4; ++j)
                  if (std::abs(window[i] - window[j]) < 1e-3) {
                    ok = false;
                    break;
                  }
            }
        if (ok) break;
      }
      Tensor x = Tensor::from_data({1, 2, 4, 4}, vals, true);
      Tensor w = Tensor::from_data({1, 2, 2, 2}, sample_uniform(rng, 8, 0.5, 1.5));
      record("max_pool2d",
             grad_check([&](Tape& t) { return weighted_sum(t, max_pool2d(t, x), w); },
                        std::span<Tensor>(&x, 1)));
    }

    {  // nearest_upsample2d
      Tensor x = Tensor::from_data({1, 2, 3, 3}, sample_uniform(rng, 18, -2, 2), true);
      Tensor w = Tensor::from_data({1, 2, 6, 6}, sample_uniform(rng, 72, 0.5, 1.5));
      record("nearest_upsample2d",
             grad_check(
                 [&](Tape& t) {
                   return weighted_sum(t, nearest_upsample2d(t, x), w);
                 },
                 std::span<Tensor>(&x, 1)));
    }

    {  // reshape
      Tensor x = Tensor::from_data({2, 6}, sample_uniform(rng, 12, -2, 2), true);
      Tensor w = Tensor::from_data({3, 4}, sample_uniform(rng, 12, 0.5, 1.5));
      record("reshape",
             grad_check(
                 [&](Tape& t) { return weighted_sum(t, reshape(t, x, {3, 4}), w); },
                 std::span<Tensor>(&x, 1)));
    }

    {  // concat_channels
      Tensor a = Tensor::from_data({1, 2, 3, 3}, sample_uniform(rng, 18, -2, 2), true);
      Tensor b = Tensor::from_data({1, 3, 3, 3}, sample_uniform(rng, 27, -2, 2), true);
      Tensor w = Tensor::from_data({1, 5, 3, 3}, sample_uniform(rng, 45, 0.5, 1.5));
      std::vector<Tensor> params{a, b};
      record("concat_channels",
             grad_check(
                 [&](Tape& t) {
                   return weighted_sum(t, concat_channels(t, a, b), w);
                 },
                 params));
    }

    {  // sum
      Tensor x = Tensor::from_data({7}, sample_uniform(rng, 7, -2, 2), true);
      record("sum", grad_check([&](Tape& t) { return sum(t, x); },
                               std::span<Tensor>(&x, 1)));
    }

    {  // loss_ce_iou; keep |p - t| away from the min/max kink
      std::vector<double> p, tvals;
      for (int tries = 0; tries < 100; ++tries) {
        p = sample_uniform(rng, 32, 0.05, 0.95);
        tvals = sample_uniform(rng, 32, 0.0, 1.0);
        bool ok = true;
        for (std::size_t i = 0; i < p.size(); ++i)
          if (std::abs(p[i] - tvals[i]) < 1e-3) {
            ok = false;
            break;
          }
        if (ok) break;
      }
      Tensor pred = Tensor::from_data({2, 4, 4}, p, true);
      Tensor target = Tensor::from_data({2, 4, 4}, tvals);
      record("loss_ce_iou",
             grad_check([&](Tape& t) { return loss_ce_iou(t, pred, target); },
                        std::span<Tensor>(&pred, 1)));
    }

    {  // loss_softmax_ce
      Tensor logits = Tensor::from_data({3, 5}, sample_uniform(rng, 15, -2, 2), true);
      std::vector<int> labels;
      for (int i = 0; i < 3; ++i)
        labels.push_back(static_cast<int>(rng.uniform_int(0, 4)));
      record("loss_softmax_ce",
             grad_check([&](Tape& t) { return loss_softmax_ce(t, logits, labels); },
                        std::span<Tensor>(&logits, 1)));
    }
  }
  return errors;
}

}  // namespace dgp::testutil
