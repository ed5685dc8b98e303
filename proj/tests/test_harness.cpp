#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "dgp/harness.hpp"

using namespace dgp;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("dgp_harness_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is);
  return std::string((std::istreambuf_iterator<char>(is)),
                     std::istreambuf_iterator<char>());
}

DomainSpec vspec(std::string id, std::vector<int> classes, double rho) {
  DomainSpec s;
  s.id = std::move(id);
  s.task = Task::kVector;
  s.classes = std::move(classes);
  s.rho = rho;
  return s;
}

// Small but trainable vector experiment.
ExperimentConfig vector_config(const std::filesystem::path& out) {
  ExperimentConfig c;
  c.task = Task::kVector;
  c.model.family = Family::kMlp;
  c.model.input_shape = {8};
  c.model.widths = {16};
  c.model.output_dim = 7;
  c.model.seed = 5;
  c.source = {vspec("src", {0, 1, 2}, 0.95)};
  c.invasion = {vspec("inv", {0, 1, 2}, 0.0)};
  c.unseen = {vspec("new", {0, 1, 2}, 0.0)};
  c.method = Method::kOursAll;
  c.prune.total_fraction = 0.3;
  c.prune.iterations = 2;
  c.prune.grad_batches = 2;
  c.optim.lr = 5e-3;
  c.train.batch = 8;
  c.train.steps_per_epoch = 10;
  c.train.pretrain_epochs = 4;
  c.train.finetune_epochs = 4;
  c.eval.vector_samples = 120;
  c.out_dir = out.string();
  return c;
}

ExperimentConfig nucleus_config(const std::filesystem::path& out) {
  ExperimentConfig c;
  c.task = Task::kNucleus;
  c.model.family = Family::kEncDec;
  c.model.input_shape = {3, 32, 32};
  c.model.widths = {3, 6};
  c.model.output_dim = kNumClasses + 1;
  c.model.seed = 5;
  c.nucleus_task.image_size = 32;

  DomainSpec d1;
  d1.id = "d1";
  d1.task = Task::kNucleus;
  d1.classes = {0, 1, 2};
  d1.radius_min = 3;
  d1.radius_max = 4;
  d1.density = 3.0 / (32.0 * 32.0);
  DomainSpec d2 = d1;
  d2.id = "d2";
  d2.hue = {0.05, -0.05, 0.02};
  DomainSpec d3 = d1;
  d3.id = "d3";
  d3.hue = {-0.04, 0.03, 0.05};

  c.source = {d1};
  c.invasion = {d2};
  c.unseen = {d3};
  c.method = Method::kOursEncoder;
  c.prune.total_fraction = 0.2;
  c.prune.iterations = 2;
  c.prune.grad_batches = 2;
  c.optim.lr = 2e-3;
  c.train.batch = 2;
  c.train.steps_per_epoch = 4;
  c.train.pretrain_epochs = 2;
  c.train.finetune_epochs = 2;
  c.eval.cases = 2;
  c.eval.nms_radius = 3.0;
  c.out_dir = out.string();
  return c;
}

}  // namespace

TEST_CASE("experiment config survives a JSON round trip") {
  const auto c = vector_config("runs/x");
  const nlohmann::json j = c;
  const auto back = j.get<ExperimentConfig>();
  CHECK(back.task == c.task);
  CHECK(back.model.widths == c.model.widths);
  CHECK(back.source.size() == 1);
  CHECK(back.source[0].rho == 0.95);
  CHECK(back.prune.iterations == 2);
  CHECK(back.train.batch == 8);
  CHECK(back.eval.vector_samples == 120);
  CHECK(method_name(back.method) == std::string("ours-all"));
  CHECK(config_hash(back, 1) == config_hash(c, 1));
  CHECK(config_hash(back, 1) != config_hash(c, 2));
}

TEST_CASE("config validation rejects source/unseen overlap and bad shapes") {
  auto c = vector_config("runs/x");
  c.unseen = {vspec("src", {0}, 0.0)};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);

  c = vector_config("runs/x");
  c.model.input_shape = {9};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);

  c = vector_config("runs/x");
  c.train.batch = 9;  // 1:1 ratio cannot split 9
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);

  c = vector_config("runs/x");
  c.model.output_dim = 2;  // classes reach index 2
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("pretrain with zero epochs returns the initialization") {
  auto c = vector_config(temp_dir("pre0"));
  c.train.pretrain_epochs = 0;
  auto out = pretrain(c, 1);
  ModelConfig mc = c.model;
  mc.seed = out.model->config().seed;
  auto fresh = build_model(mc);
  CHECK(out.model->registry().snapshot() == fresh->registry().snapshot());
  CHECK(out.phase.epochs_run == 0);
}

TEST_CASE("pretrain is deterministic in config and seed") {
  auto c = vector_config(temp_dir("predet"));
  auto a = pretrain(c, 3);
  auto b = pretrain(c, 3);
  CHECK(a.model->registry().snapshot() == b.model->registry().snapshot());
  CHECK(a.phase.best_metric == b.phase.best_metric);
  auto other = pretrain(c, 4);
  CHECK(a.model->registry().snapshot() != other.model->registry().snapshot());
}

TEST_CASE("evaluating Model-S on source reproduces the pretrain metric") {
  auto c = vector_config(temp_dir("consist"));
  auto out = pretrain(c, 2);
  const auto report = evaluate_group(c, *out.model, "source", 2);
  CHECK(report.accuracy == out.phase.best_metric);
}

TEST_CASE("erm ignores the prune schedule; ours-all prunes n steps") {
  const auto dir = temp_dir("dispatch");
  auto c = vector_config(dir);

  c.method = Method::kErm;
  auto erm = run_method(c, 1);
  CHECK(erm.prune_log.empty());
  CHECK(erm.alive_fraction_total == 1.0);
  CHECK(erm.pretrain.epochs_run == 0);  // trains from scratch on merged data
  CHECK(erm.train.epochs_run == c.train.pretrain_epochs + c.train.finetune_epochs);

  c.method = Method::kOursAll;
  auto ours = run_method(c, 1);
  CHECK(ours.prune_log.size() == 2);
  CHECK(ours.alive_fraction_total < 1.0);
  CHECK(ours.train.epochs_run == c.train.finetune_epochs);

  // Spurious mass is reported for the vector task; directional comparison
  // against ERM is an acceptance concern.
  CHECK(erm.spurious_mass > 0.0);
  CHECK(ours.spurious_mass >= 0.0);

  // Exact prune accounting: alive fraction within n parameters of (1-p).
  const double total = 8 * 16 + 16 + 16 * 7 + 7;  // 263
  CHECK(std::abs(ours.alive_fraction_total - (1.0 - c.prune.total_fraction)) *
            total <=
        static_cast<double>(c.prune.iterations));
}

TEST_CASE("ours-encoder leaves head parameters fully alive (mlp)") {
  const auto dir = temp_dir("scope_mlp");
  auto c = vector_config(dir);
  c.method = Method::kOursEncoder;
  auto rec = run_method(c, 1);
  CHECK(rec.alive_fraction_per_tag[0] < 1.0);   // encoder pruned
  CHECK(rec.alive_fraction_per_tag[2] == 1.0);  // head untouched
  CHECK(rec.alive_fraction_per_layer.at("head.w") == 1.0);
  CHECK(rec.alive_fraction_per_layer.at("head.b") == 1.0);
}

TEST_CASE("ours-decoder on an mlp has no scope and fails cleanly") {
  const auto dir = temp_dir("scope_err");
  auto c = vector_config(dir);
  c.method = Method::kOursDecoder;
  CHECK_THROWS_AS(run_method(c, 1), std::invalid_argument);
}

TEST_CASE("erm-f and ours-all share the pretrain checkpoint and budget") {
  const auto dir = temp_dir("ermf");
  auto c = vector_config(dir);

  c.method = Method::kErmF;
  auto ermf = run_method(c, 1);
  const auto ckpt_bytes = slurp(dir / "pretrain_seed1.ckpt");

  c.method = Method::kOursAll;
  auto ours = run_method(c, 1);
  CHECK(slurp(dir / "pretrain_seed1.ckpt") == ckpt_bytes);

  CHECK(ermf.prune_log.empty());
  CHECK(ermf.pretrain.best_metric == ours.pretrain.best_metric);
  CHECK(ermf.train.epochs_run == ours.train.epochs_run);
}

TEST_CASE("run_method is deterministic and reuses Model-S byte-exactly") {
  const auto dir = temp_dir("det");
  auto c = vector_config(dir);
  c.method = Method::kOursAll;

  run_method(c, 1);
  const auto record1 = slurp(dir / "ours-all_seed1" / "record.json");
  const auto report1 = slurp(dir / "ours-all_seed1" / "reports" / "unseen.json");
  const auto csv1 = slurp(dir / "ours-all_seed1" / "reports.csv");

  // Second run reuses the persisted pretrain checkpoint; outputs must not
  // change by a byte.
  run_method(c, 1);
  CHECK(slurp(dir / "ours-all_seed1" / "record.json") == record1);
  CHECK(slurp(dir / "ours-all_seed1" / "reports" / "unseen.json") == report1);
  CHECK(slurp(dir / "ours-all_seed1" / "reports.csv") == csv1);

  // And a cold rerun (pretraining from scratch) reproduces them too.
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  run_method(c, 1);
  CHECK(slurp(dir / "ours-all_seed1" / "record.json") == record1);
}

TEST_CASE("unseen groups missing classes still score") {
  const auto dir = temp_dir("missing_cls");
  auto c = vector_config(dir);
  c.source = {vspec("src", {0, 1, 2, 3}, 0.5)};
  c.invasion = {vspec("inv", {0, 1, 2, 3}, 0.0)};
  c.unseen = {vspec("new", {0, 1}, 0.0)};  // two classes absent
  c.method = Method::kErm;
  auto rec = run_method(c, 1);
  const auto& unseen = rec.reports.at("unseen");
  CHECK(unseen.accuracy >= 0.0);
  CHECK(unseen.cls_f1 >= 0.0);
}

TEST_CASE("reports csv has one row per metric and echoes the method") {
  const auto dir = temp_dir("csv");
  auto c = vector_config(dir);
  c.method = Method::kErm;
  auto rec = run_method(c, 1);
  const auto csv = reports_csv(rec);
  CHECK(csv.find("method,group,metric,value") == 0);
  CHECK(csv.find("erm,merge,accuracy,") != std::string::npos);
  CHECK(csv.find("erm,unseen,cls_f1,") != std::string::npos);
  // Detection metrics are not applicable to the vector task.
  CHECK(csv.find("det_f1") == std::string::npos);
}

TEST_CASE("compare_records aggregates mean and std across seeds") {
  const auto dir = temp_dir("cmp");
  auto c = vector_config(dir);
  c.method = Method::kErm;
  auto r1 = run_method(c, 1);
  auto r2 = run_method(c, 2);
  const auto j1 = record_json(c, r1);
  const auto j2 = record_json(c, r2);

  const auto single = compare_records({j1});
  CHECK(single.markdown.find("| erm | merge |") != std::string::npos);
  CHECK(single.csv.find("erm,merge,accuracy,") != std::string::npos);

  const auto table = compare_records({j1, j2});
  CHECK(table.csv.find(",2\n") != std::string::npos);  // n = 2 seeds
  // Mean of the two accuracies appears in the CSV row.
  const double a1 = r1.reports.at("unseen").accuracy;
  const double a2 = r2.reports.at("unseen").accuracy;
  char expect[40];
  std::snprintf(expect, sizeof expect, "%.17g", (a1 + a2) / 2.0);
  CHECK(table.csv.find(std::string("erm,unseen,accuracy,") + expect) !=
        std::string::npos);
}

TEST_CASE("nucleus pipeline: scoped prune run completes with full reports") {
  const auto dir = temp_dir("nucleus");
  auto c = nucleus_config(dir);
  auto rec = run_method(c, 1);  // ours-encoder

  CHECK(rec.prune_log.size() == 2);
  CHECK(rec.alive_fraction_per_tag[0] < 1.0);   // encoder pruned
  CHECK(rec.alive_fraction_per_tag[1] == 1.0);  // decoder untouched
  CHECK(rec.alive_fraction_per_tag[2] == 1.0);  // head untouched
  for (const auto& l : rec.prune_log) {
    CHECK(l.alive_per_tag[1] == 246);  // decoder (3 <- 9 conv + bias) untouched
    CHECK(l.scope == "encoder");
  }

  const auto& merge = rec.reports.at("merge");
  CHECK(merge.tp + merge.fn > 0);  // ground truth cells were generated
  CHECK(std::isnan(merge.accuracy));
  CHECK(std::filesystem::exists(dir / "ours-encoder_seed1" / "prune_log.jsonl"));
  CHECK(std::filesystem::exists(dir / "ours-encoder_seed1" / "final.ckpt"));

  const auto ckpt = load_checkpoint(dir / "ours-encoder_seed1" / "final.ckpt");
  CHECK(ckpt.mask.size() == ckpt.params.size());
  std::int64_t alive = 0;
  for (auto b : ckpt.mask) alive += b;
  CHECK(static_cast<double>(alive) / static_cast<double>(ckpt.mask.size()) ==
        rec.alive_fraction_total);
}

TEST_CASE("spurious weight mass ignores pruned weights") {
  auto c = vector_config(temp_dir("mass"));
  ModelConfig mc = c.model;
  auto model = build_model(mc);
  PruneMask mask(model->registry().total());
  const double full = spurious_weight_mass(*model, mask, 2);
  CHECK(full > 0.0);
  // Kill the whole spurious row: mass drops to zero.
  const int width = c.model.widths[0];
  for (int j = 0; j < width; ++j) mask.kill(2 * width + j);
  CHECK(spurious_weight_mass(*model, mask, 2) == 0.0);
}
