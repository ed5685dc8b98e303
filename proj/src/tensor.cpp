#include "dgp/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "dgp/kernels.hpp"

namespace dgp {

namespace {

std::atomic<NodeId> g_next_id{1};

std::shared_ptr<TensorNode> make_node(std::vector<int> shape,
                                      std::vector<double> value,
                                      bool requires_grad, bool is_leaf) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->is_leaf = is_leaf;
  n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return n;
}

// Gradients only need to flow into leaves that ask for them and into every
// interior node (something downstream of a parameter may pass through it).
bool wants_grad(const std::shared_ptr<TensorNode>& n) {
  return n->requires_grad || !n->is_leaf;
}

[[noreturn]] void fail(const char* op, const std::string& msg) {
  throw std::invalid_argument(std::string(op) + ": " + msg);
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail(op, "shape mismatch (" + shape_str(a.shape()) + " vs " +
                 shape_str(b.shape()) + ")");
}

Tensor op_output(std::vector<int> shape) {
  auto n = make_node(std::move(shape), {}, false, false);
  n->value.assign(static_cast<std::size_t>(numel_of(n->shape)), 0.0);
  Tensor t;
  // Tensor has no public node constructor; route through from_data-free path.
  struct Access : Tensor {
    explicit Access(std::shared_ptr<TensorNode> p) { node() = std::move(p); }
  };
  return Access(std::move(n));
}

// Elementwise binary op with the scalar-operand special case.
template <typename Fwd, typename Bwd>
Tensor elementwise_binary(Tape& tape, const char* name, const Tensor& a,
                          const Tensor& b, Fwd fwd, Bwd bwd_pair) {
  const bool a_scalar = a.numel() == 1 && b.numel() != 1;
  const bool b_scalar = b.numel() == 1 && a.numel() != 1;
  if (!a_scalar && !b_scalar) check_same_shape(name, a, b);

  const Tensor& big = a_scalar ? b : a;
  Tensor out = op_output(big.shape());
  auto an = a.node();
  auto bn = b.node();
  auto on = out.node();
  const std::size_t n = on->value.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double av = an->value[a_scalar ? 0 : i];
    const double bv = bn->value[b_scalar ? 0 : i];
    on->value[i] = fwd(av, bv);
  }
  tape.record({name,
               {an, bn},
               on,
               [an, bn, on, a_scalar, b_scalar, bwd_pair]() {
                 const std::size_t n = on->value.size();
                 const bool ga = wants_grad(an);
                 const bool gb = wants_grad(bn);
                 if (ga) an->ensure_grad();
                 if (gb) bn->ensure_grad();
                 for (std::size_t i = 0; i < n; ++i) {
                   const double go = on->grad[i];
                   const double av = an->value[a_scalar ? 0 : i];
                   const double bv = bn->value[b_scalar ? 0 : i];
                   const auto [da, db] = bwd_pair(av, bv);
                   if (ga) an->grad[a_scalar ? 0 : i] += go * da;
                   if (gb) bn->grad[b_scalar ? 0 : i] += go * db;
                 }
               }});
  return out;
}

template <typename Fwd, typename Bwd>
Tensor elementwise_unary(Tape& tape, const char* name, const Tensor& x,
                         Fwd fwd, Bwd dydx_from_xy) {
  Tensor out = op_output(x.shape());
  auto xn = x.node();
  auto on = out.node();
  const std::size_t n = on->value.size();
  for (std::size_t i = 0; i < n; ++i) on->value[i] = fwd(xn->value[i]);
  tape.record({name,
               {xn},
               on,
               [xn, on, dydx_from_xy]() {
                 if (!wants_grad(xn)) return;
                 xn->ensure_grad();
                 const std::size_t n = on->value.size();
                 for (std::size_t i = 0; i < n; ++i)
                   xn->grad[i] += on->grad[i] * dydx_from_xy(xn->value[i], on->value[i]);
               }});
  return out;
}

constexpr double kClamp = 1e-12;  // bce log clamp

void check_finite(const char* op, const Tensor& t, const char* which) {
  for (double v : t.value())
    if (!std::isfinite(v)) fail(op, std::string("non-finite ") + which + " value");
}

}  // namespace

std::int64_t numel_of(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape");
    n *= d;
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  const auto n = numel_of(shape);
  return Tensor(make_node(std::move(shape),
                          std::vector<double>(static_cast<std::size_t>(n), 0.0),
                          requires_grad, true));
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data,
                         bool requires_grad) {
  if (numel_of(shape) != static_cast<std::int64_t>(data.size()))
    throw std::invalid_argument("from_data: data length " +
                                std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  return Tensor(make_node(std::move(shape), std::move(data), requires_grad, true));
}

Tensor Tensor::scalar(double v) { return from_data({1}, {v}); }

double Tensor::item() const {
  if (numel() != 1)
    throw std::invalid_argument("item: tensor is not scalar, shape " +
                                shape_str(shape()));
  return node_->value[0];
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      tape, "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return std::pair{1.0, 1.0}; });
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      tape, "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return std::pair{1.0, -1.0}; });
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      tape, "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y) { return std::pair{y, x}; });
}

Tensor add_scalar(Tape& tape, const Tensor& a, double c) {
  return elementwise_unary(
      tape, "add_scalar", a, [c](double x) { return x + c; },
      [](double, double) { return 1.0; });
}

Tensor scale(Tape& tape, const Tensor& a, double c) {
  return elementwise_unary(
      tape, "scale", a, [c](double x) { return x * c; },
      [c](double, double) { return c; });
}

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2)
    fail("matmul", "operands must be rank-2 (" + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()) + ")");
  const int m = a.shape()[0], k = a.shape()[1];
  const int k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2)
    fail("matmul", "inner dimensions differ (" + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()) + ")");
  Tensor out = op_output({m, n});
  auto an = a.node();
  auto bn = b.node();
  auto on = out.node();
  kernels::matmul_nn(an->value.data(), bn->value.data(), on->value.data(), m, k, n);
  tape.record({"matmul",
               {an, bn},
               on,
               [an, bn, on, m, k, n]() {
                 if (wants_grad(an)) {
                   an->ensure_grad();
                   // ga[m,k] += go[m,n] * b^T
                   kernels::matmul_nt(on->grad.data(), bn->value.data(),
                                      an->grad.data(), m, n, k);
                 }
                 if (wants_grad(bn)) {
                   bn->ensure_grad();
                   // gb[k,n] += a^T * go[m,n]
                   kernels::matmul_tn(an->value.data(), on->grad.data(),
                                      bn->grad.data(), m, k, n);
                 }
               }});
  return out;
}

Tensor add_bias_rows(Tape& tape, const Tensor& x, const Tensor& bias) {
  if (x.shape().size() != 2 || bias.shape().size() != 1 ||
      bias.shape()[0] != x.shape()[1])
    fail("add_bias_rows", "shape mismatch (" + shape_str(x.shape()) + " vs " +
                              shape_str(bias.shape()) + ")");
  const int rows = x.shape()[0], cols = x.shape()[1];
  Tensor out = op_output(x.shape());
  auto xn = x.node();
  auto bn = bias.node();
  auto on = out.node();
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j)
      on->value[static_cast<std::size_t>(i) * cols + j] =
          xn->value[static_cast<std::size_t>(i) * cols + j] + bn->value[j];
  tape.record({"add_bias_rows",
               {xn, bn},
               on,
               [xn, bn, on, rows, cols]() {
                 if (wants_grad(xn)) {
                   xn->ensure_grad();
                   for (std::size_t i = 0; i < on->grad.size(); ++i)
                     xn->grad[i] += on->grad[i];
                 }
                 if (wants_grad(bn)) {
                   bn->ensure_grad();
                   for (int j = 0; j < cols; ++j) {
                     double acc = 0.0;
                     for (int i = 0; i < rows; ++i)
                       acc += on->grad[static_cast<std::size_t>(i) * cols + j];
                     bn->grad[j] += acc;
                   }
                 }
               }});
  return out;
}

Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& wgt, const Tensor& bias) {
  if (x.shape().size() != 4 || wgt.shape().size() != 4)
    fail("conv2d", "expects x[b,c,h,w] and weight[oc,c,k,k] (" +
                       shape_str(x.shape()) + " vs " + shape_str(wgt.shape()) + ")");
  const int b = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const int cout = wgt.shape()[0], ksz = wgt.shape()[2];
  if (wgt.shape()[1] != cin || wgt.shape()[3] != ksz)
    fail("conv2d", "weight shape " + shape_str(wgt.shape()) +
                       " incompatible with input " + shape_str(x.shape()));
  if (ksz % 2 == 0)
    fail("conv2d", "kernel size must be odd, got " + std::to_string(ksz));
  if (bias.defined() &&
      (bias.shape().size() != 1 || bias.shape()[0] != cout))
    fail("conv2d", "bias shape " + shape_str(bias.shape()) + " must be [" +
                       std::to_string(cout) + "]");

  Tensor out = op_output({b, cout, h, w});
  auto xn = x.node();
  auto wn = wgt.node();
  auto biasn = bias.defined() ? bias.node() : nullptr;
  auto on = out.node();
  kernels::conv2d_fwd(xn->value.data(), wn->value.data(),
                      biasn ? biasn->value.data() : nullptr, on->value.data(), b,
                      cin, h, w, cout, ksz);
  Tape::Op op;
  op.name = "conv2d";
  op.inputs = {xn, wn};
  if (biasn) op.inputs.push_back(biasn);
  op.output = on;
  op.backward = [xn, wn, biasn, on, b, cin, h, w, cout, ksz]() {
    if (wants_grad(xn)) {
      xn->ensure_grad();
      kernels::conv2d_bwd_input(on->grad.data(), wn->value.data(),
                                xn->grad.data(), b, cin, h, w, cout, ksz);
    }
    if (wants_grad(wn)) {
      wn->ensure_grad();
      kernels::conv2d_bwd_weight(on->grad.data(), xn->value.data(),
                                 wn->grad.data(), b, cin, h, w, cout, ksz);
    }
    if (biasn && wants_grad(biasn)) {
      biasn->ensure_grad();
      kernels::conv2d_bwd_bias(on->grad.data(), biasn->grad.data(), b, cout, h, w);
    }
  };
  tape.record(std::move(op));
  return out;
}

Tensor relu(Tape& tape, const Tensor& x) {
  return elementwise_unary(
      tape, "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(Tape& tape, const Tensor& x) {
  return elementwise_unary(
      tape, "sigmoid", x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor max_pool2d(Tape& tape, const Tensor& x) {
  if (x.shape().size() != 4)
    fail("max_pool2d", "expects [b,c,h,w], got " + shape_str(x.shape()));
  const int b = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  if (h % 2 != 0 || w % 2 != 0)
    fail("max_pool2d", "h and w must be even, got " + shape_str(x.shape()));
  const int oh = h / 2, ow = w / 2;
  Tensor out = op_output({b, c, oh, ow});
  auto xn = x.node();
  auto on = out.node();
  auto argmax = std::make_shared<std::vector<std::int64_t>>(on->value.size());
  std::size_t o = 0;
  for (int bi = 0; bi < b; ++bi)
    for (int ci = 0; ci < c; ++ci)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox, ++o) {
          const std::int64_t base =
              ((static_cast<std::int64_t>(bi) * c + ci) * h + oy * 2) * w + ox * 2;
          std::int64_t best = base;
          double bv = xn->value[static_cast<std::size_t>(base)];
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const std::int64_t idx = base + static_cast<std::int64_t>(dy) * w + dx;
              const double v = xn->value[static_cast<std::size_t>(idx)];
              if (v > bv) {
                bv = v;
                best = idx;
              }
            }
          on->value[o] = bv;
          (*argmax)[o] = best;
        }
  tape.record({"max_pool2d",
               {xn},
               on,
               [xn, on, argmax]() {
                 if (!wants_grad(xn)) return;
                 xn->ensure_grad();
                 for (std::size_t i = 0; i < on->grad.size(); ++i)
                   xn->grad[static_cast<std::size_t>((*argmax)[i])] += on->grad[i];
               }});
  return out;
}

Tensor nearest_upsample2d(Tape& tape, const Tensor& x) {
  if (x.shape().size() != 4)
    fail("nearest_upsample2d", "expects [b,c,h,w], got " + shape_str(x.shape()));
  const int b = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const int oh = h * 2, ow = w * 2;
  Tensor out = op_output({b, c, oh, ow});
  auto xn = x.node();
  auto on = out.node();
  for (int bi = 0; bi < b; ++bi)
    for (int ci = 0; ci < c; ++ci) {
      const std::size_t xoff = (static_cast<std::size_t>(bi) * c + ci) * h * w;
      const std::size_t ooff = (static_cast<std::size_t>(bi) * c + ci) * oh * ow;
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox)
          on->value[ooff + static_cast<std::size_t>(oy) * ow + ox] =
              xn->value[xoff + static_cast<std::size_t>(oy / 2) * w + ox / 2];
    }
  tape.record({"nearest_upsample2d",
               {xn},
               on,
               [xn, on, b, c, h, w, oh, ow]() {
                 if (!wants_grad(xn)) return;
                 xn->ensure_grad();
                 for (int bi = 0; bi < b; ++bi)
                   for (int ci = 0; ci < c; ++ci) {
                     const std::size_t xoff =
                         (static_cast<std::size_t>(bi) * c + ci) * h * w;
                     const std::size_t ooff =
                         (static_cast<std::size_t>(bi) * c + ci) * oh * ow;
                     for (int oy = 0; oy < oh; ++oy)
                       for (int ox = 0; ox < ow; ++ox)
                         xn->grad[xoff + static_cast<std::size_t>(oy / 2) * w + ox / 2] +=
                             on->grad[ooff + static_cast<std::size_t>(oy) * ow + ox];
                   }
               }});
  return out;
}

Tensor reshape(Tape& tape, const Tensor& x, std::vector<int> new_shape) {
  if (numel_of(new_shape) != x.numel())
    fail("reshape", "cannot reshape " + shape_str(x.shape()) + " to " +
                        shape_str(new_shape));
  Tensor out = op_output(std::move(new_shape));
  auto xn = x.node();
  auto on = out.node();
  on->value = xn->value;
  tape.record({"reshape",
               {xn},
               on,
               [xn, on]() {
                 if (!wants_grad(xn)) return;
                 xn->ensure_grad();
                 for (std::size_t i = 0; i < on->grad.size(); ++i)
                   xn->grad[i] += on->grad[i];
               }});
  return out;
}

Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 4 || b.shape().size() != 4 ||
      a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[2] ||
      a.shape()[3] != b.shape()[3])
    fail("concat_channels", "incompatible shapes (" + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()) + ")");
  const int nb = a.shape()[0], ca = a.shape()[1], cb = b.shape()[1];
  const int h = a.shape()[2], w = a.shape()[3];
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor out = op_output({nb, ca + cb, h, w});
  auto an = a.node();
  auto bn = b.node();
  auto on = out.node();
  for (int bi = 0; bi < nb; ++bi) {
    std::copy_n(an->value.begin() + static_cast<std::ptrdiff_t>(bi * ca * plane),
                ca * plane,
                on->value.begin() +
                    static_cast<std::ptrdiff_t>(bi * (ca + cb) * plane));
    std::copy_n(bn->value.begin() + static_cast<std::ptrdiff_t>(bi * cb * plane),
                cb * plane,
                on->value.begin() +
                    static_cast<std::ptrdiff_t>((bi * (ca + cb) + ca) * plane));
  }
  tape.record({"concat_channels",
               {an, bn},
               on,
               [an, bn, on, nb, ca, cb, plane]() {
                 const bool ga = wants_grad(an);
                 const bool gb = wants_grad(bn);
                 if (ga) an->ensure_grad();
                 if (gb) bn->ensure_grad();
                 for (int bi = 0; bi < nb; ++bi) {
                   const std::size_t ooff = static_cast<std::size_t>(bi) * (ca + cb) * plane;
                   if (ga)
                     for (std::size_t i = 0; i < ca * plane; ++i)
                       an->grad[static_cast<std::size_t>(bi) * ca * plane + i] +=
                           on->grad[ooff + i];
                   if (gb)
                     for (std::size_t i = 0; i < cb * plane; ++i)
                       bn->grad[static_cast<std::size_t>(bi) * cb * plane + i] +=
                           on->grad[ooff + ca * plane + i];
                 }
               }});
  return out;
}

Tensor sum(Tape& tape, const Tensor& x) {
  Tensor out = op_output({1});
  auto xn = x.node();
  auto on = out.node();
  double acc = 0.0;
  for (double v : xn->value) acc += v;
  on->value[0] = acc;
  tape.record({"sum",
               {xn},
               on,
               [xn, on]() {
                 if (!wants_grad(xn)) return;
                 xn->ensure_grad();
                 const double go = on->grad[0];
                 for (double& g : xn->grad) g += go;
               }});
  return out;
}

Tensor loss_ce_iou(Tape& tape, const Tensor& pred, const Tensor& target,
                   double eps) {
  check_same_shape("loss_ce_iou", pred, target);
  check_finite("loss_ce_iou", pred, "pred");
  check_finite("loss_ce_iou", target, "target");
  for (double v : pred.value())
    if (v < 0.0 || v > 1.0) fail("loss_ce_iou", "pred value outside [0,1]");
  for (double v : target.value())
    if (v < 0.0 || v > 1.0) fail("loss_ce_iou", "target value outside [0,1]");

  // [b,c,h,w] and [c,h,w] carry one map per channel; the iou term is
  // averaged over maps so a dominant channel cannot mute the sparse ones.
  // Lower ranks are treated as a single map.
  const auto& shape = pred.shape();
  std::int64_t nbatch = 1, nmaps = 1;
  if (shape.size() == 4) {
    nbatch = shape[0];
    nmaps = shape[1];
  } else if (shape.size() == 3) {
    nmaps = shape[0];
  }
  const std::int64_t per = pred.numel() / nbatch;  // elements per sample
  const std::int64_t map_len = per / nmaps;
  if (map_len == 0) fail("loss_ce_iou", "empty map");

  auto pn = pred.node();
  auto tn = target.node();
  Tensor out = op_output({1});
  auto on = out.node();

  // Per-map min/max sums are reused by the backward rule.
  auto sum_min = std::make_shared<std::vector<double>>(nbatch * nmaps, 0.0);
  auto sum_max = std::make_shared<std::vector<double>>(nbatch * nmaps, 0.0);
  double total = 0.0;
  for (std::int64_t s = 0; s < nbatch; ++s) {
    double bce = 0.0, iou = 0.0;
    for (std::int64_t c = 0; c < nmaps; ++c) {
      double smin = 0.0, smax = 0.0;
      const std::int64_t base = s * per + c * map_len;
      for (std::int64_t i = 0; i < map_len; ++i) {
        const double p = pn->value[static_cast<std::size_t>(base + i)];
        const double t = tn->value[static_cast<std::size_t>(base + i)];
        const double pc = std::clamp(p, kClamp, 1.0 - kClamp);
        bce += -(t * std::log(pc) + (1.0 - t) * std::log(1.0 - pc));
        smin += std::min(p, t);
        smax += std::max(p, t);
      }
      (*sum_min)[static_cast<std::size_t>(s * nmaps + c)] = smin;
      (*sum_max)[static_cast<std::size_t>(s * nmaps + c)] = smax;
      iou += 1.0 - (smin + eps) / (smax + eps);
    }
    total += bce / static_cast<double>(per) + iou / static_cast<double>(nmaps);
  }
  on->value[0] = total / static_cast<double>(nbatch);

  tape.record({"loss_ce_iou",
               {pn, tn},
               on,
               [pn, tn, on, nbatch, nmaps, per, map_len, eps, sum_min, sum_max]() {
                 if (!wants_grad(pn)) return;
                 pn->ensure_grad();
                 const double go = on->grad[0] / static_cast<double>(nbatch);
                 for (std::int64_t s = 0; s < nbatch; ++s) {
                   for (std::int64_t c = 0; c < nmaps; ++c) {
                     const double nsum =
                         (*sum_min)[static_cast<std::size_t>(s * nmaps + c)] + eps;
                     const double dsum =
                         (*sum_max)[static_cast<std::size_t>(s * nmaps + c)] + eps;
                     const std::int64_t base = s * per + c * map_len;
                     for (std::int64_t i = 0; i < map_len; ++i) {
                       const std::size_t at = static_cast<std::size_t>(base + i);
                       const double p = pn->value[at];
                       const double t = tn->value[at];
                       const double pc = std::clamp(p, kClamp, 1.0 - kClamp);
                       const double dbce =
                           (pc - t) / (pc * (1.0 - pc)) / static_cast<double>(per);
                       const double dmin = p <= t ? 1.0 : 0.0;
                       const double dmax = p > t ? 1.0 : 0.0;
                       const double diou =
                           -(dmin * dsum - nsum * dmax) / (dsum * dsum) /
                           static_cast<double>(nmaps);
                       pn->grad[at] += go * (dbce + diou);
                     }
                   }
                 }
               }});
  return out;
}

Tensor loss_softmax_ce(Tape& tape, const Tensor& logits,
                       const std::vector<int>& labels) {
  if (logits.shape().size() != 2)
    fail("loss_softmax_ce", "logits must be [batch,classes], got " +
                                shape_str(logits.shape()));
  const int b = logits.shape()[0], k = logits.shape()[1];
  if (static_cast<int>(labels.size()) != b)
    fail("loss_softmax_ce", "got " + std::to_string(labels.size()) +
                                " labels for batch " + std::to_string(b));
  for (int lb : labels)
    if (lb < 0 || lb >= k)
      fail("loss_softmax_ce",
           "label " + std::to_string(lb) + " out of range [0," + std::to_string(k) + ")");

  auto ln = logits.node();
  Tensor out = op_output({1});
  auto on = out.node();
  auto softmax = std::make_shared<std::vector<double>>(ln->value.size());
  double total = 0.0;
  for (int bi = 0; bi < b; ++bi) {
    const double* row = ln->value.data() + static_cast<std::size_t>(bi) * k;
    double mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (int j = 0; j < k; ++j)
      (*softmax)[static_cast<std::size_t>(bi) * k + j] = std::exp(row[j] - lse);
    total += lse - row[labels[static_cast<std::size_t>(bi)]];
  }
  on->value[0] = total / static_cast<double>(b);

  auto labels_copy = std::make_shared<std::vector<int>>(labels);
  tape.record({"loss_softmax_ce",
               {ln},
               on,
               [ln, on, softmax, labels_copy, b, k]() {
                 if (!wants_grad(ln)) return;
                 ln->ensure_grad();
                 const double go = on->grad[0] / static_cast<double>(b);
                 for (int bi = 0; bi < b; ++bi)
                   for (int j = 0; j < k; ++j) {
                     const std::size_t at = static_cast<std::size_t>(bi) * k + j;
                     const double ind =
                         j == (*labels_copy)[static_cast<std::size_t>(bi)] ? 1.0 : 0.0;
                     ln->grad[at] += go * ((*softmax)[at] - ind);
                   }
               }});
  return out;
}

void backward(Tape& tape, const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw std::invalid_argument(
        "backward: loss must be a one-element tensor, got " +
        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  loss.node()->ensure_grad();
  loss.node()->grad[0] = 1.0;
  const auto& ops = tape.ops();
  for (auto it = ops.rbegin(); it != ops.rend(); ++it)
    if (!it->output->grad.empty()) it->backward();
}

}  // namespace dgp
