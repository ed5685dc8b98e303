#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dgp/nets.hpp"
#include "dgp/optim.hpp"

namespace dgp {

enum class PruneScope { kAll, kEncoder, kDecoder };
enum class GradAccumulation { kSumAbs, kAbsSum };

const char* scope_name(PruneScope s);
PruneScope scope_from_name(const std::string& s);

// Overall schedule: prune a total fraction p over n prune/reset iterations,
// removing round(r * alive-in-scope) survivors per iteration with
// r = 1 - (1-p)^(1/n), or an explicit per-step fraction override.
struct PruneSchedule {
  double total_fraction = 0.3;        // p
  int iterations = 4;                 // n
  double per_step_override = -1.0;    // r, used when >= 0
  int grad_batches = 8;               // k gradient-accumulation batches
  PruneScope scope = PruneScope::kAll;
  GradAccumulation accumulation = GradAccumulation::kSumAbs;

  double per_step_fraction() const;
  // Total surviving fraction implied by the effective per-step fraction.
  double effective_total_fraction() const;
  void validate() const;
};

// Dense alive bitset over the flat parameter vector. Bits only ever clear;
// there is no resurrect operation.
class PruneMask {
 public:
  PruneMask() = default;
  explicit PruneMask(std::int64_t n) : alive_(static_cast<std::size_t>(n), 1) {}

  std::int64_t size() const { return static_cast<std::int64_t>(alive_.size()); }
  bool alive(std::int64_t i) const { return alive_[static_cast<std::size_t>(i)] != 0; }
  void kill(std::int64_t i) { alive_[static_cast<std::size_t>(i)] = 0; }
  std::int64_t alive_count() const;
  std::span<const std::uint8_t> flags() const { return alive_; }

  std::array<std::int64_t, 3> alive_per_tag(const ParamRegistry& registry) const;

 private:
  std::vector<std::uint8_t> alive_;
};

// Accumulated per-parameter gradient magnitudes over the collection batches.
struct GradProfile {
  std::vector<double> accum;
  int batches = 0;
  double mean_loss = std::numeric_limits<double>::quiet_NaN();
};

// Produces the scalar training loss for one fresh merged batch; the callee
// draws the batch itself so the engine stays task-agnostic.
using BatchLossFn = std::function<Tensor(Tape&)>;

// Runs k forward/backward passes without updating parameters and accumulates
// gradient magnitude per alive parameter (exactly 0 for pruned ones).
GradProfile collect_gradients(Model& model, const PruneMask& mask,
                              const BatchLossFn& batch_loss, int k,
                              GradAccumulation accumulation);

std::vector<std::int64_t> scope_indices(const ParamRegistry& registry,
                                        PruneScope scope);

// Selects the round(r * alive-in-scope) alive scoped parameters with the
// largest accumulated magnitude; ties prune the lower flat index first.
// Returns the threshold c_p (the largest surviving magnitude) and fills
// `pruned` with the selected indices.
double compute_threshold(const GradProfile& profile, const PruneMask& mask,
                         double r, std::span<const std::int64_t> scope_idx,
                         std::vector<std::int64_t>* pruned);

// Applies one prune step: zeroes and masks `pruned`, then rewinds every
// surviving parameter to its snapshot value, bit-exactly.
void prune_and_reset(ParamRegistry& registry, PruneMask& mask,
                     std::span<const std::int64_t> pruned,
                     std::span<const double> snapshot);

struct PruneStepLog {
  int step = 0;
  std::string scope;
  double threshold = 0.0;
  std::int64_t pruned = 0;
  std::array<std::int64_t, 3> alive_per_tag{};
  double merged_loss = 0.0;
};

struct ScheduleResult {
  PruneMask mask;
  std::vector<PruneStepLog> log;
};

// Full search: n iterations of collect -> threshold -> prune/reset, starting
// and rewinding at the model's current (converged) parameters.
ScheduleResult run_schedule(Model& model, const PruneSchedule& schedule,
                            const BatchLossFn& batch_loss);

struct FineTuneOptions {
  OptimHyper optim;
  int max_epochs = 50;
  int steps_per_epoch = 50;
  int patience = 0;  // epochs without improvement before stopping; 0 = off
};

struct FineTuneEpoch {
  int epoch = 0;
  double train_loss = 0.0;
  double val_metric = 0.0;
};

struct FineTuneResult {
  double best_metric = -std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  std::vector<FineTuneEpoch> curve;
};

// Trains only surviving parameters (mask applied to gradients and updates)
// and leaves the model at the epoch checkpoint with the best validation
// metric (higher is better). The mask itself never changes.
FineTuneResult fine_tune(Model& model, const PruneMask& mask,
                         const BatchLossFn& batch_loss,
                         const std::function<double()>& val_metric,
                         const FineTuneOptions& options);

}  // namespace dgp
