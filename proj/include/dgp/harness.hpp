#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "dgp/checkpoint.hpp"
#include "dgp/domains.hpp"
#include "dgp/metrics.hpp"
#include "dgp/nets.hpp"
#include "dgp/optim.hpp"
#include "dgp/prune.hpp"

namespace dgp {

// Log verbosity comes from the DGP_LOG environment variable
// (quiet|info|debug); messages go to stderr only, never into reports.
int log_level();
void log_info(const std::string& msg);
void log_debug(const std::string& msg);

enum class Method { kErm, kErmF, kOursAll, kOursEncoder, kOursDecoder };
const char* method_name(Method m);
Method method_from_name(const std::string& s);
bool method_prunes(Method m);
PruneScope method_scope(Method m);

struct TrainConfig {
  int batch = 8;
  int steps_per_epoch = 50;
  int pretrain_epochs = 30;
  int finetune_epochs = 30;
  int patience = 0;  // 0 keeps the budget fixed across methods
  std::pair<int, int> merge_ratio{1, 1};
};

struct EvalConfig {
  int cases = 8;            // nucleus images per domain
  int vector_samples = 500; // vector samples per domain
  double nms_threshold = 0.5;
  double nms_radius = 0.0;  // 0 = each domain's min cell radius
  double match_radius = 16.0;
  bool border_exclude = false;
};

struct ExperimentConfig {
  Task task = Task::kVector;
  ModelConfig model;
  VectorTaskParams vector_task;
  NucleusTaskParams nucleus_task;
  std::vector<DomainSpec> source, invasion, unseen;
  Method method = Method::kOursAll;
  PruneSchedule prune;
  OptimHyper optim;
  TrainConfig train;
  EvalConfig eval;
  std::vector<std::uint64_t> seeds{1};
  std::string out_dir = "runs/out";

  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Stable 16-hex-digit hash over the canonical config JSON plus the run seed.
std::string config_hash(const ExperimentConfig& config, std::uint64_t seed);

struct PhaseResult {
  int epochs_run = 0;
  int best_epoch = -1;
  double best_metric = 0.0;
  std::vector<FineTuneEpoch> curve;
};

struct RunRecord {
  std::string hash;
  Method method = Method::kErm;
  std::uint64_t seed = 0;
  PhaseResult pretrain;
  PhaseResult train;  // merged-domain phase (fine-tune or ERM training)
  std::vector<PruneStepLog> prune_log;
  double alive_fraction_total = 1.0;
  std::array<double, 3> alive_fraction_per_tag{1.0, 1.0, 1.0};
  std::map<std::string, double> alive_fraction_per_layer;
  double spurious_mass = std::numeric_limits<double>::quiet_NaN();
  std::map<std::string, MetricsReport> reports;  // group -> aggregate
  std::map<std::string, std::vector<MetricsReport>> case_reports;
  std::filesystem::path dir;
};

nlohmann::json record_json(const ExperimentConfig& config, const RunRecord& record);

// Trains Model-S on the source domains only; aborts on divergence.
struct PretrainOutput {
  std::unique_ptr<Model> model;
  PhaseResult phase;
};
PretrainOutput pretrain(const ExperimentConfig& config, std::uint64_t seed);

// Runs config.method end to end for one seed: obtains Model-S (reusing
// out_dir/pretrain_seed<seed>.ckpt when present), executes the method's
// phases, evaluates on the merge and unseen groups and writes the record,
// reports, logs and checkpoints under out_dir/<method>_seed<seed>/.
RunRecord run_method(const ExperimentConfig& config, std::uint64_t seed);

// Group evaluation ("source", "merge" = source+invasion, or "unseen").
std::vector<DomainSpec> group_specs(const ExperimentConfig& config,
                                    const std::string& group);
MetricsReport evaluate_group(const ExperimentConfig& config, Model& model,
                             const std::string& group, std::uint64_t seed,
                             std::vector<MetricsReport>* cases = nullptr);

// Sum of |w| over alive first-layer weights fanning out of the planted
// shortcut coordinate (mlp models).
double spurious_weight_mass(const Model& model, const PruneMask& mask,
                            int spurious_dim);

// Flat CSV rows "method,group,metric,value" for one record's aggregates.
std::string reports_csv(const RunRecord& record);

// Aggregation across runs: mean and std per method x group x metric.
struct ComparisonTable {
  std::string markdown;
  std::string csv;
};
ComparisonTable compare_records(const std::vector<nlohmann::json>& records);

}  // namespace dgp
