#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>

#include "dgp/nets.hpp"

namespace dgp {

struct OptimHyper {
  std::string algo = "adam";  // "adam" or "sgd"
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Optional step decay: lr *= lr_decay every lr_decay_every epochs (0 = off).
  int lr_decay_every = 0;
  double lr_decay = 0.5;
};

// Updates registry parameters in place from their accumulated gradients.
// `alive` is a per-flat-index mask (empty span = everything alive); masked
// indices are skipped entirely, values and moments both.
class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(ParamRegistry& registry,
                    std::span<const std::uint8_t> alive) = 0;
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

  static std::unique_ptr<Optimizer> make(const OptimHyper& hyper,
                                         std::int64_t total_params);

 protected:
  explicit Optimizer(double lr) : lr_(lr) {}
  double lr_;
};

}  // namespace dgp
