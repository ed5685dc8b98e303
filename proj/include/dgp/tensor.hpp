#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace dgp {

using NodeId = std::int64_t;

std::int64_t numel_of(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// One value in a recorded computation. Leaves (parameters, inputs) are
// created directly; every op output is a fresh non-leaf node. Gradients are
// allocated lazily, the first time a backward pass or zero_grad touches them.
struct TensorNode {
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until allocated
  bool requires_grad = false;
  bool is_leaf = true;
  NodeId id = 0;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

// Cheap shared handle to a node. Copying a Tensor aliases the same storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }
  std::vector<double>& value() { return node_->value; }
  const std::vector<double>& value() const { return node_->value; }
  std::vector<double>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }
  NodeId id() const { return node_->id; }
  double item() const;

  std::shared_ptr<TensorNode>& node() { return node_; }
  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}
  std::shared_ptr<TensorNode> node_;
};

// Recorded list of operations for one forward pass. Ops are appended in
// execution order, which is a topological order by construction; backward
// replays them once, in reverse. A tape must not be shared across threads.
class Tape {
 public:
  struct Op {
    const char* name;
    std::vector<std::shared_ptr<TensorNode>> inputs;
    std::shared_ptr<TensorNode> output;
    std::function<void()> backward;
  };

  void record(Op op) { ops_.push_back(std::move(op)); }
  std::size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }
  const std::vector<Op>& ops() const { return ops_; }

 private:
  std::vector<Op> ops_;
};

// Elementwise; shapes must match exactly, except that one operand may be a
// one-element scalar tensor.
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);

Tensor add_scalar(Tape& tape, const Tensor& a, double c);
Tensor scale(Tape& tape, const Tensor& a, double c);

// a[m,k] * b[k,n] -> [m,n]
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
// x[rows,k] + bias[k], broadcast over rows
Tensor add_bias_rows(Tape& tape, const Tensor& x, const Tensor& bias);

// x[b,c,h,w], wgt[oc,c,ksz,ksz] with ksz odd (1 or 3 in this project),
// stride 1, zero padding ksz/2; optional bias[oc] (pass Tensor()).
Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& wgt, const Tensor& bias);

Tensor relu(Tape& tape, const Tensor& x);
Tensor sigmoid(Tape& tape, const Tensor& x);

// 2x2 window, stride 2; h and w must be even. Ties route the gradient to
// the first maximum in scan order.
Tensor max_pool2d(Tape& tape, const Tensor& x);
// Nearest-neighbor x2 upsampling.
Tensor nearest_upsample2d(Tape& tape, const Tensor& x);

Tensor reshape(Tape& tape, const Tensor& x, std::vector<int> new_shape);
// [b,c1,h,w] ++ [b,c2,h,w] along the channel axis.
Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b);

Tensor sum(Tape& tape, const Tensor& x);

// Mean binary cross-entropy plus a soft-IOU term
//   1 - (sum min(p,t) + eps) / (sum max(p,t) + eps)
// computed per map and averaged: [c,h,w] carries one map per channel and
// [b,c,h,w] additionally averages over the batch; lower ranks are one map.
// pred in [0,1] (clamped to [1e-12, 1-1e-12] inside the logs), target in
// [0,1].
Tensor loss_ce_iou(Tape& tape, const Tensor& pred, const Tensor& target,
                   double eps = 1e-6);

// Mean softmax cross-entropy over the batch; logits[b,k].
Tensor loss_softmax_ce(Tape& tape, const Tensor& logits,
                       const std::vector<int>& labels);

// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse, accumulating
// gradients into every reachable node. loss must be a one-element tensor.
void backward(Tape& tape, const Tensor& loss);

}  // namespace dgp
