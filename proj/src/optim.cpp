#include "dgp/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace dgp {

namespace {

[[noreturn]] void bad_gradient(const char* algo, const ParamEntry& e,
                               std::int64_t inner) {
  throw std::runtime_error(std::string(algo) + "_step: non-finite gradient for '" +
                           e.name + "'[" + std::to_string(inner) + "]");
}

class Sgd final : public Optimizer {
 public:
  explicit Sgd(double lr) : Optimizer(lr) {}

  void step(ParamRegistry& registry, std::span<const std::uint8_t> alive) override {
    for (const auto& e : registry.entries()) {
      auto& node = *e.param.node();
      node.ensure_grad();
      for (std::int64_t i = 0; i < e.length; ++i) {
        if (!alive.empty() && !alive[static_cast<std::size_t>(e.offset + i)]) continue;
        const double g = node.grad[static_cast<std::size_t>(i)];
        if (!std::isfinite(g)) bad_gradient("sgd", e, i);
        node.value[static_cast<std::size_t>(i)] -= lr_ * g;
      }
    }
  }
};

class Adam final : public Optimizer {
 public:
  Adam(const OptimHyper& h, std::int64_t total)
      : Optimizer(h.lr), beta1_(h.beta1), beta2_(h.beta2), eps_(h.eps),
        m_(static_cast<std::size_t>(total), 0.0),
        v_(static_cast<std::size_t>(total), 0.0) {}

  void step(ParamRegistry& registry, std::span<const std::uint8_t> alive) override {
    if (registry.total() != static_cast<std::int64_t>(m_.size()))
      throw std::invalid_argument("adam_step: registry size changed");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (const auto& e : registry.entries()) {
      auto& node = *e.param.node();
      node.ensure_grad();
      for (std::int64_t i = 0; i < e.length; ++i) {
        const std::size_t flat = static_cast<std::size_t>(e.offset + i);
        if (!alive.empty() && !alive[flat]) continue;
        const double g = node.grad[static_cast<std::size_t>(i)];
        if (!std::isfinite(g)) bad_gradient("adam", e, i);
        m_[flat] = beta1_ * m_[flat] + (1.0 - beta1_) * g;
        v_[flat] = beta2_ * v_[flat] + (1.0 - beta2_) * g * g;
        const double mhat = m_[flat] / bc1;
        const double vhat = v_[flat] / bc2;
        node.value[static_cast<std::size_t>(i)] -=
            lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

 private:
  double beta1_, beta2_, eps_;
  std::vector<double> m_, v_;
  int t_ = 0;
};

}  // namespace

std::unique_ptr<Optimizer> Optimizer::make(const OptimHyper& hyper,
                                           std::int64_t total_params) {
  if (hyper.algo == "sgd") return std::make_unique<Sgd>(hyper.lr);
  if (hyper.algo == "adam") return std::make_unique<Adam>(hyper, total_params);
  throw std::invalid_argument("unknown optimizer '" + hyper.algo + "'");
}

}  // namespace dgp
