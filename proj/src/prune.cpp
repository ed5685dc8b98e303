#include "dgp/prune.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dgp {

const char* scope_name(PruneScope s) {
  switch (s) {
    case PruneScope::kAll: return "all";
    case PruneScope::kEncoder: return "encoder";
    case PruneScope::kDecoder: return "decoder";
  }
  return "?";
}

PruneScope scope_from_name(const std::string& s) {
  if (s == "all") return PruneScope::kAll;
  if (s == "encoder") return PruneScope::kEncoder;
  if (s == "decoder") return PruneScope::kDecoder;
  throw std::invalid_argument("unknown prune scope '" + s + "'");
}

double PruneSchedule::per_step_fraction() const {
  if (per_step_override >= 0.0) return per_step_override;
  return 1.0 - std::pow(1.0 - total_fraction,
                        1.0 / static_cast<double>(iterations));
}

double PruneSchedule::effective_total_fraction() const {
  return 1.0 - std::pow(1.0 - per_step_fraction(),
                        static_cast<double>(iterations));
}

void PruneSchedule::validate() const {
  if (iterations < 1) throw std::invalid_argument("prune schedule: iterations < 1");
  if (grad_batches < 1) throw std::invalid_argument("prune schedule: grad_batches < 1");
  const double r = per_step_fraction();
  if (!(r > 0.0 && r < 1.0))
    throw std::invalid_argument("prune schedule: per-step fraction must be in (0,1)");
  if (per_step_override < 0.0) {
    // Consistency of the derived r with the configured target.
    const double survive = std::pow(1.0 - r, static_cast<double>(iterations));
    if (std::abs(survive - (1.0 - total_fraction)) > 1e-6 * (1.0 - total_fraction))
      throw std::logic_error("prune schedule: derived per-step fraction inconsistent");
  }
}

std::int64_t PruneMask::alive_count() const {
  std::int64_t n = 0;
  for (auto b : alive_) n += b;
  return n;
}

std::array<std::int64_t, 3> PruneMask::alive_per_tag(
    const ParamRegistry& registry) const {
  if (registry.total() != size())
    throw std::invalid_argument("mask/registry size mismatch");
  std::array<std::int64_t, 3> out{0, 0, 0};
  for (const auto& e : registry.entries()) {
    std::int64_t n = 0;
    for (std::int64_t i = 0; i < e.length; ++i)
      n += alive_[static_cast<std::size_t>(e.offset + i)];
    out[static_cast<int>(e.tag)] += n;
  }
  return out;
}

GradProfile collect_gradients(Model& model, const PruneMask& mask,
                              const BatchLossFn& batch_loss, int k,
                              GradAccumulation accumulation) {
  if (k < 1) throw std::invalid_argument("collect_gradients: empty batch list");
  auto& registry = model.registry();
  if (mask.size() != registry.total())
    throw std::invalid_argument("collect_gradients: mask size mismatch");

  GradProfile profile;
  profile.accum.assign(static_cast<std::size_t>(registry.total()), 0.0);
  std::vector<double> signed_sum;
  if (accumulation == GradAccumulation::kAbsSum)
    signed_sum.assign(profile.accum.size(), 0.0);

  double loss_total = 0.0;
  for (int b = 0; b < k; ++b) {
    Tape tape;
    registry.zero_grad();
    Tensor loss = batch_loss(tape);
    const double lv = loss.item();
    if (!std::isfinite(lv))
      throw std::runtime_error("collect_gradients: non-finite loss");
    loss_total += lv;
    backward(tape, loss);
    for (const auto& e : registry.entries()) {
      const auto& node = *e.param.node();
      for (std::int64_t i = 0; i < e.length; ++i) {
        const std::int64_t flat = e.offset + i;
        if (!mask.alive(flat)) continue;
        const double g =
            node.grad.empty() ? 0.0 : node.grad[static_cast<std::size_t>(i)];
        if (!std::isfinite(g))
          throw std::runtime_error("collect_gradients: non-finite gradient in '" +
                                   e.name + "'");
        if (accumulation == GradAccumulation::kSumAbs)
          profile.accum[static_cast<std::size_t>(flat)] += std::abs(g);
        else
          signed_sum[static_cast<std::size_t>(flat)] += g;
      }
    }
  }
  if (accumulation == GradAccumulation::kAbsSum)
    for (std::size_t i = 0; i < profile.accum.size(); ++i)
      profile.accum[i] = std::abs(signed_sum[i]);
  profile.batches = k;
  profile.mean_loss = loss_total / static_cast<double>(k);
  return profile;
}

std::vector<std::int64_t> scope_indices(const ParamRegistry& registry,
                                        PruneScope scope) {
  std::vector<std::int64_t> out;
  for (const auto& e : registry.entries()) {
    const bool in_scope =
        scope == PruneScope::kAll ||
        (scope == PruneScope::kEncoder && e.tag == ModuleTag::kEncoder) ||
        (scope == PruneScope::kDecoder && e.tag == ModuleTag::kDecoder);
    if (!in_scope) continue;
    for (std::int64_t i = 0; i < e.length; ++i) out.push_back(e.offset + i);
  }
  if (out.empty())
    throw std::invalid_argument(std::string("prune scope '") + scope_name(scope) +
                                "' selects no parameters");
  return out;
}

double compute_threshold(const GradProfile& profile, const PruneMask& mask,
                         double r, std::span<const std::int64_t> scope_idx,
                         std::vector<std::int64_t>* pruned) {
  if (profile.accum.size() != static_cast<std::size_t>(mask.size()))
    throw std::invalid_argument("compute_threshold: profile size mismatch");
  std::vector<std::int64_t> alive_scoped;
  for (auto i : scope_idx)
    if (mask.alive(i)) alive_scoped.push_back(i);
  const auto alive = static_cast<double>(alive_scoped.size());
  if (r * alive < 1.0)
    throw std::runtime_error("prune step would be empty (r * alive-in-scope = " +
                             std::to_string(r * alive) + ")");
  const auto m = static_cast<std::int64_t>(std::llround(r * alive));

  // Sort by magnitude descending; equal magnitudes prune the lower flat
  // index first.
  std::sort(alive_scoped.begin(), alive_scoped.end(),
            [&](std::int64_t a, std::int64_t b) {
              const double va = profile.accum[static_cast<std::size_t>(a)];
              const double vb = profile.accum[static_cast<std::size_t>(b)];
              if (va != vb) return va > vb;
              return a < b;
            });
  pruned->assign(alive_scoped.begin(), alive_scoped.begin() + m);
  // c_p: the largest surviving magnitude, or the smallest pruned one when the
  // step empties the scope.
  const std::size_t at = std::min(static_cast<std::size_t>(m),
                                  alive_scoped.size() - 1);
  return profile.accum[static_cast<std::size_t>(alive_scoped[at])];
}

void prune_and_reset(ParamRegistry& registry, PruneMask& mask,
                     std::span<const std::int64_t> pruned,
                     std::span<const double> snapshot) {
  if (static_cast<std::int64_t>(snapshot.size()) != registry.total())
    throw std::invalid_argument("prune_and_reset: snapshot length mismatch");
  for (auto i : pruned) mask.kill(i);
  for (std::int64_t i = 0; i < registry.total(); ++i)
    registry.set(i, mask.alive(i) ? snapshot[static_cast<std::size_t>(i)] : 0.0);
  registry.validate();  // partition invariant holds after every step
}

ScheduleResult run_schedule(Model& model, const PruneSchedule& schedule,
                            const BatchLossFn& batch_loss) {
  schedule.validate();
  auto& registry = model.registry();
  const std::vector<double> snapshot = registry.snapshot();
  const auto scoped = scope_indices(registry, schedule.scope);
  const double r = schedule.per_step_fraction();

  ScheduleResult result;
  result.mask = PruneMask(registry.total());
  for (int step = 1; step <= schedule.iterations; ++step) {
    GradProfile profile = collect_gradients(model, result.mask, batch_loss,
                                            schedule.grad_batches,
                                            schedule.accumulation);
    std::vector<std::int64_t> pruned;
    const double cp = compute_threshold(profile, result.mask, r, scoped, &pruned);
    prune_and_reset(registry, result.mask, pruned, snapshot);

    PruneStepLog log;
    log.step = step;
    log.scope = scope_name(schedule.scope);
    log.threshold = cp;
    log.pruned = static_cast<std::int64_t>(pruned.size());
    log.alive_per_tag = result.mask.alive_per_tag(registry);
    log.merged_loss = profile.mean_loss;
    result.log.push_back(std::move(log));
  }
  return result;
}

FineTuneResult fine_tune(Model& model, const PruneMask& mask,
                         const BatchLossFn& batch_loss,
                         const std::function<double()>& val_metric,
                         const FineTuneOptions& options) {
  auto& registry = model.registry();
  if (mask.size() != registry.total())
    throw std::invalid_argument("fine_tune: mask size mismatch");
  if (options.steps_per_epoch < 1)
    throw std::invalid_argument("fine_tune: steps_per_epoch < 1");

  FineTuneResult result;
  if (options.max_epochs == 0) return result;

  auto optimizer = Optimizer::make(options.optim, registry.total());
  std::vector<double> best_params = registry.snapshot();
  int since_best = 0;
  for (int epoch = 1; epoch <= options.max_epochs; ++epoch) {
    if (options.optim.lr_decay_every > 0 && epoch > 1 &&
        (epoch - 1) % options.optim.lr_decay_every == 0)
      optimizer->set_lr(optimizer->lr() * options.optim.lr_decay);
    double loss_sum = 0.0;
    for (int s = 0; s < options.steps_per_epoch; ++s) {
      Tape tape;
      registry.zero_grad();
      Tensor loss = batch_loss(tape);
      const double lv = loss.item();
      if (!std::isfinite(lv)) throw std::runtime_error("fine_tune: non-finite loss");
      loss_sum += lv;
      backward(tape, loss);
      optimizer->step(registry, mask.flags());
    }
    const double metric = val_metric();
    result.curve.push_back(
        {epoch, loss_sum / options.steps_per_epoch, metric});
    if (metric > result.best_metric) {
      result.best_metric = metric;
      result.best_epoch = epoch;
      best_params = registry.snapshot();
      since_best = 0;
    } else if (options.patience > 0 && ++since_best >= options.patience) {
      break;
    }
  }
  registry.restore(best_params);
  return result;
}

}  // namespace dgp
