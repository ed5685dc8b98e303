// Command-line front end: pretrain / run / evaluate / compare / gen-data.
// Failures print a one-line machine-readable error record to stderr and exit
// nonzero.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dgp/harness.hpp"

namespace {

using dgp::ExperimentConfig;

ExperimentConfig load_config(const std::string& path,
                             const std::optional<std::string>& method,
                             const std::optional<std::uint64_t>& seed,
                             const std::optional<std::string>& out) {
  auto config = dgp::load_experiment_config(path);
  if (method) config.method = dgp::method_from_name(*method);
  if (seed) config.seeds = {*seed};
  if (out) config.out_dir = *out;
  config.validate();
  return config;
}

void write_file(const std::filesystem::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write '" + p.string() + "'");
  os << s;
}

int cmd_pretrain(const ExperimentConfig& config) {
  for (const auto seed : config.seeds) {
    auto out = dgp::pretrain(config, seed);
    const auto dir = std::filesystem::path(config.out_dir);
    std::filesystem::create_directories(dir);
    dgp::Checkpoint ckpt;
    ckpt.model = out.model->config();
    ckpt.seed = seed;
    ckpt.params = out.model->registry().snapshot();
    const auto path = dir / ("pretrain_seed" + std::to_string(seed) + ".ckpt");
    dgp::save_checkpoint(path, ckpt);
    nlohmann::json meta{{"epochs_run", out.phase.epochs_run},
                        {"best_epoch", out.phase.best_epoch},
                        {"best_metric", out.phase.best_metric}};
    write_file(dir / ("pretrain_seed" + std::to_string(seed) + ".json"),
               meta.dump(2) + "\n");
    std::string curve = "epoch,train_loss,val_metric\n";
    for (const auto& e : out.phase.curve) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g\n", e.epoch, e.train_loss,
                    e.val_metric);
      curve += buf;
    }
    write_file(dir / ("pretrain_seed" + std::to_string(seed) + "_curve.csv"),
               curve);
    std::cout << path.string() << "\n";
  }
  return 0;
}

int cmd_run(const ExperimentConfig& config) {
  for (const auto seed : config.seeds) {
    const auto record = dgp::run_method(config, seed);
    std::cout << (record.dir / "record.json").string() << "\n";
  }
  return 0;
}

int cmd_evaluate(const ExperimentConfig& config, const std::string& ckpt_path,
                 const std::string& group) {
  const auto ckpt = dgp::load_checkpoint(ckpt_path);
  auto model = dgp::build_model(ckpt.model);
  model->registry().restore(ckpt.params);
  const auto seed = config.seeds.front();

  std::vector<dgp::MetricsReport> cases;
  const auto aggregate = dgp::evaluate_group(config, *model, group, seed, &cases);
  nlohmann::json g;
  g["group"] = group;
  g["checkpoint"] = ckpt_path;
  g["eval"] = nlohmann::json(config)["eval"];
  g["aggregate"] = aggregate;
  nlohmann::json case_array = nlohmann::json::array();
  for (const auto& c : cases) case_array.push_back(c);
  g["cases"] = case_array;

  const auto dir = std::filesystem::path(config.out_dir);
  std::filesystem::create_directories(dir);
  const auto path = dir / ("eval_" + group + ".json");
  write_file(path, g.dump(2) + "\n");
  std::cout << g["aggregate"].dump(2) << "\n" << path.string() << "\n";
  return 0;
}

int cmd_compare(const std::vector<std::string>& record_paths,
                const std::string& out_dir) {
  std::vector<nlohmann::json> records;
  for (const auto& p : record_paths) {
    std::ifstream is(p);
    if (!is) throw std::runtime_error("cannot open record '" + p + "'");
    records.push_back(nlohmann::json::parse(is));
  }
  const auto table = dgp::compare_records(records);
  const auto dir = std::filesystem::path(out_dir);
  std::filesystem::create_directories(dir);
  write_file(dir / "comparison.md", table.markdown);
  write_file(dir / "comparison.csv", table.csv);
  std::cout << table.markdown;
  return 0;
}

int cmd_gen_data(const ExperimentConfig& config, const std::string& out_dir,
                 int count, bool check) {
  std::vector<dgp::DomainSpec> specs = config.source;
  specs.insert(specs.end(), config.invasion.begin(), config.invasion.end());
  specs.insert(specs.end(), config.unseen.begin(), config.unseen.end());
  dgp::export_dataset(out_dir, config.task, specs, config.vector_task,
                      config.nucleus_task, count, config.seeds.front());
  if (check && !dgp::verify_dataset(out_dir))
    throw std::runtime_error("dataset verification failed in '" + out_dir + "'");
  std::cout << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"domain-generalization-by-pruning experiment runner"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, group = "unseen", out;
  std::optional<std::string> method_override, out_override;
  std::optional<std::uint64_t> seed_override;
  std::vector<std::string> record_paths;
  int count = 16;
  bool check = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "experiment config JSON")->required();
    cmd->add_option_function<std::uint64_t>(
        "--seed", [&](std::uint64_t s) { seed_override = s; },
        "override the config seed list with one seed");
    cmd->add_option_function<std::string>(
        "--out", [&](const std::string& s) { out_override = s; },
        "override the output directory");
  };

  auto* pre = app.add_subcommand("pretrain", "train Model-S on the source domain");
  add_common(pre);

  auto* run = app.add_subcommand("run", "run the configured method end to end");
  add_common(run);
  run->add_option_function<std::string>(
      "--method", [&](const std::string& s) { method_override = s; },
      "override the configured method");

  auto* ev = app.add_subcommand("evaluate", "evaluate a checkpoint on a group");
  add_common(ev);
  ev->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  ev->add_option("--group", group, "source|merge|unseen");

  auto* cmp = app.add_subcommand("compare", "aggregate run records into a table");
  cmp->add_option("--records", record_paths, "record.json files")->required();
  cmp->add_option("--out", out, "output directory")->required();

  auto* gen = app.add_subcommand("gen-data", "export datasets for inspection");
  add_common(gen);
  gen->add_option("--count", count, "samples per domain");
  gen->add_flag("--check", check, "re-generate and verify the exported files");

  CLI11_PARSE(app, argc, argv);

  const std::string sub = app.get_subcommands().front()->get_name();
  try {
    if (sub == "compare") return cmd_compare(record_paths, out);
    const auto config =
        load_config(config_path, method_override, seed_override, out_override);
    if (sub == "pretrain") return cmd_pretrain(config);
    if (sub == "run") return cmd_run(config);
    if (sub == "evaluate") return cmd_evaluate(config, checkpoint, group);
    if (sub == "gen-data")
      return cmd_gen_data(config, out_override.value_or(config.out_dir), count,
                          check);
    throw std::runtime_error("unknown subcommand '" + sub + "'");
  } catch (const std::exception& e) {
    nlohmann::json err{{"error", {{"message", e.what()}, {"command", sub}}}};
    std::cerr << err.dump() << "\n";
    return 1;
  }
}
