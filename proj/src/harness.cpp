#include "dgp/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace dgp {

int log_level() {
  static const int level = [] {
    const char* env = std::getenv("DGP_LOG");
    if (!env) return 1;
    const std::string v(env);
    if (v == "quiet") return 0;
    if (v == "debug") return 2;
    return 1;
  }();
  return level;
}

void log_info(const std::string& msg) {
  if (log_level() >= 1) std::fprintf(stderr, "[dgp] %s\n", msg.c_str());
}

void log_debug(const std::string& msg) {
  if (log_level() >= 2) std::fprintf(stderr, "[dgp:debug] %s\n", msg.c_str());
}

const char* method_name(Method m) {
  switch (m) {
    case Method::kErm: return "erm";
    case Method::kErmF: return "erm-f";
    case Method::kOursAll: return "ours-all";
    case Method::kOursEncoder: return "ours-encoder";
    case Method::kOursDecoder: return "ours-decoder";
  }
  return "?";
}

Method method_from_name(const std::string& s) {
  if (s == "erm") return Method::kErm;
  if (s == "erm-f") return Method::kErmF;
  if (s == "ours-all") return Method::kOursAll;
  if (s == "ours-encoder") return Method::kOursEncoder;
  if (s == "ours-decoder") return Method::kOursDecoder;
  throw std::invalid_argument("unknown method '" + s + "'");
}

bool method_prunes(Method m) {
  return m == Method::kOursAll || m == Method::kOursEncoder ||
         m == Method::kOursDecoder;
}

PruneScope method_scope(Method m) {
  switch (m) {
    case Method::kOursEncoder: return PruneScope::kEncoder;
    case Method::kOursDecoder: return PruneScope::kDecoder;
    default: return PruneScope::kAll;
  }
}

namespace {

const char* accumulation_name(GradAccumulation a) {
  return a == GradAccumulation::kSumAbs ? "sum-abs" : "abs-sum";
}

GradAccumulation accumulation_from_name(const std::string& s) {
  if (s == "sum-abs") return GradAccumulation::kSumAbs;
  if (s == "abs-sum") return GradAccumulation::kAbsSum;
  throw std::invalid_argument("unknown accumulation mode '" + s + "'");
}

void write_text_file(const std::filesystem::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write '" + p.string() + "'");
  os << s;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_fixed(double v, int digits) {
  if (std::isnan(v)) return "-";
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{
      {"task", task_name(c.task)},
      {"model", c.model},
      {"domains",
       {{"source", c.source}, {"invasion", c.invasion}, {"unseen", c.unseen}}},
      {"method", method_name(c.method)},
      {"prune",
       {{"p", c.prune.total_fraction},
        {"n", c.prune.iterations},
        {"r", c.prune.per_step_override},
        {"k", c.prune.grad_batches},
        {"scope", scope_name(c.prune.scope)},
        {"accumulation", accumulation_name(c.prune.accumulation)}}},
      {"optim",
       {{"algo", c.optim.algo},
        {"lr", c.optim.lr},
        {"beta1", c.optim.beta1},
        {"beta2", c.optim.beta2},
        {"eps", c.optim.eps},
        {"lr_decay_every", c.optim.lr_decay_every},
        {"lr_decay", c.optim.lr_decay}}},
      {"train",
       {{"batch", c.train.batch},
        {"steps_per_epoch", c.train.steps_per_epoch},
        {"pretrain_epochs", c.train.pretrain_epochs},
        {"finetune_epochs", c.train.finetune_epochs},
        {"patience", c.train.patience},
        {"merge_ratio",
         std::array<int, 2>{c.train.merge_ratio.first, c.train.merge_ratio.second}}}},
      {"eval",
       {{"cases", c.eval.cases},
        {"vector_samples", c.eval.vector_samples},
        {"nms_threshold", c.eval.nms_threshold},
        {"nms_radius", c.eval.nms_radius},
        {"match_radius", c.eval.match_radius},
        {"border_exclude", c.eval.border_exclude}}},
      {"seeds", c.seeds},
      {"out", c.out_dir}};
  if (c.task == Task::kVector) j["vector_task"] = c.vector_task;
  else j["nucleus_task"] = c.nucleus_task;
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  c = ExperimentConfig{};
  c.task = task_from_name(j.at("task").get<std::string>());
  c.model = j.at("model").get<ModelConfig>();
  if (j.contains("vector_task"))
    c.vector_task = j.at("vector_task").get<VectorTaskParams>();
  if (j.contains("nucleus_task"))
    c.nucleus_task = j.at("nucleus_task").get<NucleusTaskParams>();
  const auto& d = j.at("domains");
  c.source = d.at("source").get<std::vector<DomainSpec>>();
  c.invasion = d.value("invasion", std::vector<DomainSpec>{});
  c.unseen = d.value("unseen", std::vector<DomainSpec>{});
  c.method = method_from_name(j.value("method", std::string("erm")));
  if (j.contains("prune")) {
    const auto& p = j.at("prune");
    c.prune.total_fraction = p.value("p", c.prune.total_fraction);
    c.prune.iterations = p.value("n", c.prune.iterations);
    c.prune.per_step_override = p.value("r", c.prune.per_step_override);
    c.prune.grad_batches = p.value("k", c.prune.grad_batches);
    c.prune.scope = scope_from_name(p.value("scope", std::string("all")));
    c.prune.accumulation =
        accumulation_from_name(p.value("accumulation", std::string("sum-abs")));
  }
  if (j.contains("optim")) {
    const auto& o = j.at("optim");
    c.optim.algo = o.value("algo", c.optim.algo);
    c.optim.lr = o.value("lr", c.optim.lr);
    c.optim.beta1 = o.value("beta1", c.optim.beta1);
    c.optim.beta2 = o.value("beta2", c.optim.beta2);
    c.optim.eps = o.value("eps", c.optim.eps);
    c.optim.lr_decay_every = o.value("lr_decay_every", c.optim.lr_decay_every);
    c.optim.lr_decay = o.value("lr_decay", c.optim.lr_decay);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    c.train.batch = t.value("batch", c.train.batch);
    c.train.steps_per_epoch = t.value("steps_per_epoch", c.train.steps_per_epoch);
    c.train.pretrain_epochs = t.value("pretrain_epochs", c.train.pretrain_epochs);
    c.train.finetune_epochs = t.value("finetune_epochs", c.train.finetune_epochs);
    c.train.patience = t.value("patience", c.train.patience);
    if (t.contains("merge_ratio")) {
      const auto r = t.at("merge_ratio").get<std::array<int, 2>>();
      c.train.merge_ratio = {r[0], r[1]};
    }
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    c.eval.cases = e.value("cases", c.eval.cases);
    c.eval.vector_samples = e.value("vector_samples", c.eval.vector_samples);
    c.eval.nms_threshold = e.value("nms_threshold", c.eval.nms_threshold);
    c.eval.nms_radius = e.value("nms_radius", c.eval.nms_radius);
    c.eval.match_radius = e.value("match_radius", c.eval.match_radius);
    c.eval.border_exclude = e.value("border_exclude", c.eval.border_exclude);
  }
  c.seeds = j.value("seeds", std::vector<std::uint64_t>{1});
  c.out_dir = j.value("out", std::string("runs/out"));
}

void ExperimentConfig::validate() const {
  model.validate();
  if (source.empty())
    throw std::invalid_argument("config: at least one source domain required");
  int max_class = -1;
  auto check_specs = [&](const std::vector<DomainSpec>& specs) {
    for (const auto& s : specs) {
      s.validate(task);
      for (int c : s.classes) max_class = std::max(max_class, c);
    }
  };
  check_specs(source);
  check_specs(invasion);
  check_specs(unseen);
  for (const auto& u : unseen) {
    for (const auto& s : source)
      if (s.id == u.id)
        throw std::invalid_argument("config: domain '" + u.id +
                                    "' is both source and unseen");
    for (const auto& s : invasion)
      if (s.id == u.id)
        throw std::invalid_argument("config: domain '" + u.id +
                                    "' is both invasion and unseen");
  }
  if (task == Task::kVector) {
    vector_task.validate();
    if (model.family != Family::kMlp)
      throw std::invalid_argument("config: vector task requires the mlp family");
    if (model.input_shape[0] != vector_task.dim)
      throw std::invalid_argument("config: model input dim != vector_task.dim");
    if (model.output_dim <= max_class)
      throw std::invalid_argument("config: model output_dim too small for classes");
  } else {
    nucleus_task.validate();
    if (model.family != Family::kEncDec)
      throw std::invalid_argument("config: nucleus task requires the encdec family");
    if (model.input_shape != std::vector<int>{3, nucleus_task.image_size,
                                              nucleus_task.image_size})
      throw std::invalid_argument("config: model input shape must be [3,size,size]");
    if (model.output_dim != kNumClasses + 1)
      throw std::invalid_argument("config: nucleus model output_dim must be " +
                                  std::to_string(kNumClasses + 1));
  }
  if (seeds.empty()) throw std::invalid_argument("config: seeds empty");
  if (train.batch < 1 || train.steps_per_epoch < 1)
    throw std::invalid_argument("config: bad train sizes");
  if (train.pretrain_epochs < 0 || train.finetune_epochs < 0 || train.patience < 0)
    throw std::invalid_argument("config: negative epoch counts");
  split_batch(train.batch, train.merge_ratio, !invasion.empty());
  if (method_prunes(method)) prune.validate();
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config '" + path.string() + "'");
  nlohmann::json j = nlohmann::json::parse(is);
  auto config = j.get<ExperimentConfig>();
  config.validate();
  return config;
}

std::string config_hash(const ExperimentConfig& config, std::uint64_t seed) {
  nlohmann::json j = config;
  j["run_seed"] = seed;
  const std::uint64_t h = fnv1a64(j.dump());
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

std::uint64_t effective_model_seed(const ExperimentConfig& config,
                                   std::uint64_t run_seed) {
  return mix_seed(config.model.seed, run_seed);
}

ModelConfig run_model_config(const ExperimentConfig& config, std::uint64_t seed) {
  ModelConfig mc = config.model;
  mc.seed = effective_model_seed(config, seed);
  return mc;
}

// ---------------------------------------------------------------------------
// Task adapters

Tensor vector_features_tensor(std::span<const VectorSample> samples, int dim) {
  std::vector<double> data;
  data.reserve(samples.size() * static_cast<std::size_t>(dim));
  for (const auto& s : samples)
    data.insert(data.end(), s.features.begin(), s.features.end());
  return Tensor::from_data({static_cast<int>(samples.size()), dim},
                           std::move(data));
}

std::vector<int> vector_labels(std::span<const VectorSample> samples) {
  std::vector<int> labels;
  labels.reserve(samples.size());
  for (const auto& s : samples) labels.push_back(s.label);
  return labels;
}

Tensor nucleus_input_tensor(std::span<const NucleusSample> samples) {
  const int h = samples[0].height, w = samples[0].width;
  std::vector<double> data;
  data.reserve(samples.size() * 3u * static_cast<std::size_t>(h) * w);
  for (const auto& s : samples)
    data.insert(data.end(), s.image.begin(), s.image.end());
  return Tensor::from_data({static_cast<int>(samples.size()), 3, h, w},
                           std::move(data));
}

// Channels 0..6: per-class proximity maps; channel 7: background
// (1 - channelwise max).
Tensor nucleus_target_tensor(std::span<const NucleusSample> samples) {
  const int h = samples[0].height, w = samples[0].width;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<double> data;
  data.reserve(samples.size() * (kNumClasses + 1) * plane);
  for (const auto& s : samples) {
    for (int c = 0; c < kNumClasses; ++c)
      data.insert(data.end(), s.proximity[static_cast<std::size_t>(c)].begin(),
                  s.proximity[static_cast<std::size_t>(c)].end());
    for (std::size_t p = 0; p < plane; ++p) {
      double peak = 0.0;
      for (int c = 0; c < kNumClasses; ++c)
        peak = std::max(peak, s.proximity[static_cast<std::size_t>(c)][p]);
      data.push_back(1.0 - peak);
    }
  }
  return Tensor::from_data(
      {static_cast<int>(samples.size()), kNumClasses + 1, h, w}, std::move(data));
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const int rows = logits.shape()[0], cols = logits.shape()[1];
  std::vector<int> out(static_cast<std::size_t>(rows));
  for (int i = 0; i < rows; ++i) {
    const double* row = logits.value().data() + static_cast<std::size_t>(i) * cols;
    int best = 0;
    for (int j = 1; j < cols; ++j)
      if (row[j] > row[best]) best = j;
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

// Classification-only report used by the vector task; detection fields are
// not applicable and stay NaN.
MetricsReport classification_report(std::span<const int> preds,
                                    std::span<const int> gts) {
  MetricsReport r;
  r.det_precision = r.det_recall = r.det_f1 =
      std::numeric_limits<double>::quiet_NaN();
  r.empty_gt = gts.empty();
  r.empty_pred = preds.empty();
  if (gts.empty()) return r;

  std::int64_t correct = 0;
  for (std::size_t i = 0; i < gts.size(); ++i) correct += preds[i] == gts[i];
  r.accuracy = static_cast<double>(correct) / static_cast<double>(gts.size());

  std::vector<int> classes;
  for (int c : preds)
    if (std::find(classes.begin(), classes.end(), c) == classes.end())
      classes.push_back(c);
  for (int c : gts)
    if (std::find(classes.begin(), classes.end(), c) == classes.end())
      classes.push_back(c);
  std::sort(classes.begin(), classes.end());

  double mp = 0, mr = 0, mf = 0;
  std::int64_t in_gt = 0;
  for (int cls : classes) {
    ClassScore s;
    s.cls = cls;
    std::int64_t pred_count = 0, gt_count = 0;
    for (std::size_t i = 0; i < gts.size(); ++i) {
      pred_count += preds[i] == cls;
      gt_count += gts[i] == cls;
      s.tp += preds[i] == cls && gts[i] == cls;
    }
    s.fp = pred_count - s.tp;
    s.fn = gt_count - s.tp;
    s.precision = s.tp + s.fp > 0 ? static_cast<double>(s.tp) / (s.tp + s.fp) : 0.0;
    s.recall = s.tp + s.fn > 0 ? static_cast<double>(s.tp) / (s.tp + s.fn) : 0.0;
    s.f1 = s.precision + s.recall > 0
               ? 2 * s.precision * s.recall / (s.precision + s.recall)
               : 0.0;
    s.in_gt = gt_count > 0;
    if (s.in_gt) {
      mp += s.precision;
      mr += s.recall;
      mf += s.f1;
      ++in_gt;
    }
    r.per_class.push_back(s);
  }
  if (in_gt > 0) {
    r.cls_precision = mp / static_cast<double>(in_gt);
    r.cls_recall = mr / static_cast<double>(in_gt);
    r.cls_f1 = mf / static_cast<double>(in_gt);
  }
  return r;
}

std::uint64_t eval_seed(std::uint64_t run_seed, const std::string& group,
                        const std::string& domain_id, std::uint64_t idx) {
  return Rng(run_seed).fork("eval").fork(group).fork(domain_id).fork(idx).seed();
}

std::uint64_t stream_seed(std::uint64_t run_seed, const std::string& phase) {
  return Rng(run_seed).fork("stream").fork(phase).seed();
}

}  // namespace

std::vector<DomainSpec> group_specs(const ExperimentConfig& config,
                                    const std::string& group) {
  if (group == "source") return config.source;
  if (group == "unseen") return config.unseen;
  if (group == "merge") {
    std::vector<DomainSpec> out = config.source;
    out.insert(out.end(), config.invasion.begin(), config.invasion.end());
    return out;
  }
  throw std::invalid_argument("unknown domain group '" + group + "'");
}

MetricsReport evaluate_group(const ExperimentConfig& config, Model& model,
                             const std::string& group, std::uint64_t seed,
                             std::vector<MetricsReport>* cases) {
  const auto specs = group_specs(config, group);
  if (specs.empty())
    throw std::invalid_argument("domain group '" + group + "' is empty");
  std::vector<MetricsReport> case_reports;

  if (config.task == Task::kVector) {
    for (const auto& spec : specs) {
      const auto samples =
          gen_vector_domain(spec, config.vector_task, config.eval.vector_samples,
                            eval_seed(seed, group, spec.id, 0));
      Tape tape;
      Tensor logits = model.forward(
          tape, vector_features_tensor(samples, config.vector_task.dim));
      case_reports.push_back(
          classification_report(argmax_rows(logits), vector_labels(samples)));
    }
  } else {
    struct CaseJob {
      const DomainSpec* spec;
      std::uint64_t sample_seed;
    };
    std::vector<CaseJob> jobs;
    for (const auto& spec : specs)
      for (int k = 0; k < config.eval.cases; ++k)
        jobs.push_back({&spec, eval_seed(seed, group, spec.id,
                                         static_cast<std::uint64_t>(k))});
    case_reports.resize(jobs.size());
    const int njobs = static_cast<int>(jobs.size());
    // Cases are independent; per-index writes keep aggregation deterministic.
#pragma omp parallel for schedule(dynamic)
    for (int j = 0; j < njobs; ++j) {
      const auto& job = jobs[static_cast<std::size_t>(j)];
      const auto sample =
          gen_nucleus_sample(*job.spec, config.nucleus_task, job.sample_seed);
      Tape tape;
      std::vector<NucleusSample> one{sample};
      Tensor out = model.forward(tape, nucleus_input_tensor(one));
      const int h = sample.height, w = sample.width;
      const std::size_t plane = static_cast<std::size_t>(h) * w;
      std::vector<std::vector<double>> maps;
      maps.reserve(kNumClasses);
      for (int c = 0; c < kNumClasses; ++c)
        maps.emplace_back(out.value().begin() + static_cast<std::ptrdiff_t>(c * plane),
                          out.value().begin() +
                              static_cast<std::ptrdiff_t>((c + 1) * plane));
      const double radius = config.eval.nms_radius > 0.0 ? config.eval.nms_radius
                                                         : job.spec->radius_min;
      auto dets = nms(maps, h, w, config.eval.nms_threshold, radius);
      std::vector<GtPoint> gts;
      for (const auto& a : sample.annotations) gts.push_back({a.x, a.y, a.cls});
      if (config.eval.border_exclude) {
        const double m = config.eval.match_radius;
        std::erase_if(dets, [&](const Detection& d) {
          return d.x < m || d.y < m || d.x >= w - m || d.y >= h - m;
        });
        std::erase_if(gts, [&](const GtPoint& g) {
          return g.x < m || g.y < m || g.x >= w - m || g.y >= h - m;
        });
      }
      const auto match = match_detections(dets, gts, config.eval.match_radius);
      case_reports[static_cast<std::size_t>(j)] = score_match(match, dets, gts);
    }
  }

  if (cases) *cases = case_reports;
  return average_reports(case_reports);
}

double spurious_weight_mass(const Model& model, const PruneMask& mask,
                            int spurious_dim) {
  const auto& entries = model.registry().entries();
  if (entries.empty() || model.config().family != Family::kMlp)
    throw std::invalid_argument("spurious_weight_mass: mlp model required");
  const auto& first = entries.front();  // fc1.w, shape [dim, width]
  const int width = first.param.shape()[1];
  if (spurious_dim < 0 || spurious_dim >= first.param.shape()[0])
    throw std::invalid_argument("spurious_weight_mass: bad coordinate");
  double mass = 0.0;
  for (int j = 0; j < width; ++j) {
    const std::int64_t flat =
        first.offset + static_cast<std::int64_t>(spurious_dim) * width + j;
    if (mask.size() == 0 || mask.alive(flat))
      mass += std::abs(model.registry().get(flat));
  }
  return mass;
}

namespace {

PhaseResult to_phase(const FineTuneResult& r) {
  PhaseResult p;
  p.epochs_run = static_cast<int>(r.curve.size());
  p.best_epoch = r.best_epoch;
  p.best_metric = r.best_epoch >= 0 ? r.best_metric : 0.0;  // 0 epochs: no metric
  p.curve = r.curve;
  return p;
}

nlohmann::json phase_json(const PhaseResult& p) {
  return {{"epochs_run", p.epochs_run},
          {"best_epoch", p.best_epoch},
          {"best_metric", p.best_metric}};
}

PhaseResult phase_from_json(const nlohmann::json& j) {
  PhaseResult p;
  p.epochs_run = j.at("epochs_run").get<int>();
  p.best_epoch = j.at("best_epoch").get<int>();
  p.best_metric = j.at("best_metric").get<double>();
  return p;
}

std::string curve_csv(const std::vector<FineTuneEpoch>& curve) {
  std::string s = "epoch,train_loss,val_metric\n";
  for (const auto& e : curve)
    s += std::to_string(e.epoch) + "," + fmt_double(e.train_loss) + "," +
         fmt_double(e.val_metric) + "\n";
  return s;
}

// Streams, loss closures and validation sets for one (config, seed) run.
class TaskContext {
 public:
  TaskContext(const ExperimentConfig& config, std::uint64_t seed)
      : config_(config), seed_(seed) {}

  BatchLossFn source_loss(Model& model) {
    if (config_.task == Task::kVector) {
      auto stream = std::make_shared<VectorStream>(
          config_.source, std::vector<DomainSpec>{}, config_.vector_task,
          config_.train.batch, config_.train.merge_ratio,
          stream_seed(seed_, "source"));
      return vector_loss(model, stream);
    }
    auto stream = std::make_shared<NucleusStream>(
        config_.source, std::vector<DomainSpec>{}, config_.nucleus_task,
        config_.train.batch, config_.train.merge_ratio,
        stream_seed(seed_, "source"));
    return nucleus_loss(model, stream);
  }

  // One merged stream per run: gradient collection consumes the earliest
  // batches, fine-tuning continues on the same stream.
  BatchLossFn merged_loss(Model& model) {
    if (config_.task == Task::kVector) {
      auto stream = std::make_shared<VectorStream>(
          config_.source, config_.invasion, config_.vector_task,
          config_.train.batch, config_.train.merge_ratio,
          stream_seed(seed_, "merged"));
      return vector_loss(model, stream);
    }
    auto stream = std::make_shared<NucleusStream>(
        config_.source, config_.invasion, config_.nucleus_task,
        config_.train.batch, config_.train.merge_ratio,
        stream_seed(seed_, "merged"));
    return nucleus_loss(model, stream);
  }

  // Validation metric (higher is better): vector -> accuracy on the group's
  // evaluation sets, nucleus -> negative ce+iou loss on the group's images.
  std::function<double()> val_metric(Model& model, const std::string& group) {
    if (config_.task == Task::kVector) {
      auto specs = group_specs(config_, group);
      auto xs = std::make_shared<std::vector<Tensor>>();
      auto ys = std::make_shared<std::vector<std::vector<int>>>();
      for (const auto& spec : specs) {
        const auto samples = gen_vector_domain(
            spec, config_.vector_task, config_.eval.vector_samples,
            eval_seed(seed_, group, spec.id, 0));
        xs->push_back(vector_features_tensor(samples, config_.vector_task.dim));
        ys->push_back(vector_labels(samples));
      }
      Model* m = &model;
      return [m, xs, ys]() {
        double acc = 0.0;
        for (std::size_t d = 0; d < xs->size(); ++d) {
          Tape tape;
          const auto preds = argmax_rows(m->forward(tape, (*xs)[d]));
          std::int64_t correct = 0;
          for (std::size_t i = 0; i < preds.size(); ++i)
            correct += preds[i] == (*ys)[d][i];
          acc += static_cast<double>(correct) / static_cast<double>(preds.size());
        }
        return acc / static_cast<double>(xs->size());
      };
    }
    auto specs = group_specs(config_, group);
    auto xs = std::make_shared<std::vector<Tensor>>();
    auto ts = std::make_shared<std::vector<Tensor>>();
    for (const auto& spec : specs)
      for (int k = 0; k < config_.eval.cases; ++k) {
        std::vector<NucleusSample> one{gen_nucleus_sample(
            spec, config_.nucleus_task,
            eval_seed(seed_, group, spec.id, static_cast<std::uint64_t>(k)))};
        xs->push_back(nucleus_input_tensor(one));
        ts->push_back(nucleus_target_tensor(one));
      }
    Model* m = &model;
    return [m, xs, ts]() {
      double total = 0.0;
      for (std::size_t i = 0; i < xs->size(); ++i) {
        Tape tape;
        total += loss_ce_iou(tape, m->forward(tape, (*xs)[i]), (*ts)[i]).item();
      }
      return -total / static_cast<double>(xs->size());
    };
  }

 private:
  BatchLossFn vector_loss(Model& model, std::shared_ptr<VectorStream> stream) {
    Model* m = &model;
    const int dim = config_.vector_task.dim;
    return [m, stream, dim](Tape& tape) {
      const auto batch = stream->next();
      Tensor logits = m->forward(tape, vector_features_tensor(batch, dim));
      return loss_softmax_ce(tape, logits, vector_labels(batch));
    };
  }

  BatchLossFn nucleus_loss(Model& model, std::shared_ptr<NucleusStream> stream) {
    Model* m = &model;
    return [m, stream](Tape& tape) {
      const auto batch = stream->next();
      Tensor pred = m->forward(tape, nucleus_input_tensor(batch));
      return loss_ce_iou(tape, pred, nucleus_target_tensor(batch));
    };
  }

  const ExperimentConfig& config_;
  std::uint64_t seed_;
};

}  // namespace

PretrainOutput pretrain(const ExperimentConfig& config, std::uint64_t seed) {
  config.validate();
  PretrainOutput out;
  out.model = build_model(run_model_config(config, seed));
  TaskContext ctx(config, seed);
  FineTuneOptions options;
  options.optim = config.optim;
  options.max_epochs = config.train.pretrain_epochs;
  options.steps_per_epoch = config.train.steps_per_epoch;
  options.patience = config.train.patience;
  const PruneMask all_alive(out.model->registry().total());
  log_info("pretrain: seed " + std::to_string(seed));
  const auto result =
      fine_tune(*out.model, all_alive, ctx.source_loss(*out.model),
                ctx.val_metric(*out.model, "source"), options);
  out.phase = to_phase(result);
  log_info("pretrain: best metric " + fmt_double(out.phase.best_metric) +
           " at epoch " + std::to_string(out.phase.best_epoch));
  return out;
}

namespace {

struct ModelS {
  std::unique_ptr<Model> model;
  PhaseResult phase;
};

// Loads the shared Model-S checkpoint for this seed or trains and persists
// it. Determinism makes retraining equivalent to reloading.
ModelS ensure_model_s(const ExperimentConfig& config, std::uint64_t seed) {
  const auto dir = std::filesystem::path(config.out_dir);
  std::filesystem::create_directories(dir);
  const auto ckpt_path = dir / ("pretrain_seed" + std::to_string(seed) + ".ckpt");
  const auto meta_path = dir / ("pretrain_seed" + std::to_string(seed) + ".json");

  ModelS out;
  if (std::filesystem::exists(ckpt_path) && std::filesystem::exists(meta_path)) {
    const auto ckpt = load_checkpoint(ckpt_path);
    out.model = build_model(ckpt.model);
    out.model->registry().restore(ckpt.params);
    std::ifstream is(meta_path);
    out.phase = phase_from_json(nlohmann::json::parse(is));
    log_info("pretrain: reusing " + ckpt_path.string());
    return out;
  }

  auto trained = pretrain(config, seed);
  Checkpoint ckpt;
  ckpt.model = trained.model->config();
  ckpt.seed = seed;
  ckpt.params = trained.model->registry().snapshot();
  save_checkpoint(ckpt_path, ckpt);
  write_text_file(meta_path, phase_json(trained.phase).dump(2) + "\n");
  write_text_file(dir / ("pretrain_seed" + std::to_string(seed) + "_curve.csv"),
                  curve_csv(trained.phase.curve));
  out.model = std::move(trained.model);
  out.phase = trained.phase;
  return out;
}

nlohmann::json prune_log_json(const PruneStepLog& l) {
  return {{"step", l.step},
          {"scope", l.scope},
          {"threshold", l.threshold},
          {"pruned", l.pruned},
          {"alive",
           {{"encoder", l.alive_per_tag[0]},
            {"decoder", l.alive_per_tag[1]},
            {"head", l.alive_per_tag[2]}}},
          {"merged_loss", l.merged_loss}};
}

}  // namespace

nlohmann::json record_json(const ExperimentConfig& config, const RunRecord& record) {
  nlohmann::json j;
  j["config_hash"] = record.hash;
  j["method"] = method_name(record.method);
  j["seed"] = record.seed;
  j["config"] = config;
  j["phases"] = {{"pretrain", phase_json(record.pretrain)},
                 {"train", phase_json(record.train)}};
  nlohmann::json plog = nlohmann::json::array();
  for (const auto& l : record.prune_log) plog.push_back(prune_log_json(l));
  j["prune_log"] = plog;
  j["alive"] = {{"total", record.alive_fraction_total},
                {"per_tag",
                 {{"encoder", record.alive_fraction_per_tag[0]},
                  {"decoder", record.alive_fraction_per_tag[1]},
                  {"head", record.alive_fraction_per_tag[2]}}},
                {"per_layer", record.alive_fraction_per_layer}};
  j["spurious_mass"] = std::isnan(record.spurious_mass)
                           ? nlohmann::json(nullptr)
                           : nlohmann::json(record.spurious_mass);
  nlohmann::json reports;
  for (const auto& [group, aggregate] : record.reports) {
    nlohmann::json g;
    g["aggregate"] = aggregate;
    nlohmann::json cases = nlohmann::json::array();
    if (auto it = record.case_reports.find(group); it != record.case_reports.end())
      for (const auto& c : it->second) cases.push_back(c);
    g["cases"] = cases;
    reports[group] = g;
  }
  j["reports"] = reports;
  return j;
}

std::string reports_csv(const RunRecord& record) {
  std::string csv = "method,group,metric,value\n";
  const char* m = method_name(record.method);
  for (const auto& [group, r] : record.reports) {
    auto row = [&](const char* metric, double v) {
      if (std::isnan(v)) return;
      csv += std::string(m) + "," + group + "," + metric + "," + fmt_double(v) + "\n";
    };
    row("det_precision", r.det_precision);
    row("det_recall", r.det_recall);
    row("det_f1", r.det_f1);
    row("dist_mean", r.dist_mean);
    row("dist_std", r.dist_std);
    row("cls_precision", r.cls_precision);
    row("cls_recall", r.cls_recall);
    row("cls_f1", r.cls_f1);
    row("accuracy", r.accuracy);
  }
  return csv;
}

RunRecord run_method(const ExperimentConfig& config, std::uint64_t seed) {
  config.validate();
  RunRecord record;
  record.hash = config_hash(config, seed);
  record.method = config.method;
  record.seed = seed;
  record.dir = std::filesystem::path(config.out_dir) /
               (std::string(method_name(config.method)) + "_seed" +
                std::to_string(seed));
  std::filesystem::create_directories(record.dir / "reports");

  TaskContext ctx(config, seed);
  std::unique_ptr<Model> model;
  PruneMask mask;

  FineTuneOptions ft;
  ft.optim = config.optim;
  ft.max_epochs = config.train.finetune_epochs;
  ft.steps_per_epoch = config.train.steps_per_epoch;
  ft.patience = config.train.patience;

  if (config.method == Method::kErm) {
    // Standard baseline: random init, merged domains, matched total budget.
    model = build_model(run_model_config(config, seed));
    mask = PruneMask(model->registry().total());
    FineTuneOptions opts = ft;
    opts.max_epochs = config.train.pretrain_epochs + config.train.finetune_epochs;
    log_info("erm: training on merged domains");
    record.train = to_phase(fine_tune(*model, mask, ctx.merged_loss(*model),
                                      ctx.val_metric(*model, "merge"), opts));
  } else {
    auto model_s = ensure_model_s(config, seed);
    model = std::move(model_s.model);
    record.pretrain = model_s.phase;
    mask = PruneMask(model->registry().total());

    if (method_prunes(config.method)) {
      PruneSchedule schedule = config.prune;
      schedule.scope = method_scope(config.method);
      BatchLossFn merged = ctx.merged_loss(*model);
      log_info(std::string("prune: schedule on scope ") +
               scope_name(schedule.scope));
      auto result = run_schedule(*model, schedule, merged);
      mask = std::move(result.mask);
      record.prune_log = std::move(result.log);
      log_info("fine-tune: surviving fraction " +
               fmt_double(static_cast<double>(mask.alive_count()) /
                          static_cast<double>(mask.size())));
      record.train = to_phase(
          fine_tune(*model, mask, merged, ctx.val_metric(*model, "merge"), ft));
    } else {
      // erm-f: identical phases, no pruning.
      log_info("erm-f: fine-tuning on merged domains");
      record.train = to_phase(fine_tune(*model, mask, ctx.merged_loss(*model),
                                        ctx.val_metric(*model, "merge"), ft));
    }
  }

  const auto tag_alive = mask.alive_per_tag(model->registry());
  const auto tag_total = model->registry().tag_totals();
  record.alive_fraction_total = static_cast<double>(mask.alive_count()) /
                                static_cast<double>(mask.size());
  for (int t = 0; t < 3; ++t)
    record.alive_fraction_per_tag[static_cast<std::size_t>(t)] =
        tag_total[static_cast<std::size_t>(t)] > 0
            ? static_cast<double>(tag_alive[static_cast<std::size_t>(t)]) /
                  static_cast<double>(tag_total[static_cast<std::size_t>(t)])
            : 1.0;
  for (const auto& e : model->registry().entries()) {
    std::int64_t alive = 0;
    for (std::int64_t i = 0; i < e.length; ++i) alive += mask.alive(e.offset + i);
    record.alive_fraction_per_layer[e.name] =
        static_cast<double>(alive) / static_cast<double>(e.length);
  }
  if (config.task == Task::kVector)
    record.spurious_mass =
        spurious_weight_mass(*model, mask, config.vector_task.spurious_dim);

  std::vector<std::string> groups{"merge"};
  if (!config.unseen.empty()) groups.push_back("unseen");
  for (const auto& group : groups) {
    std::vector<MetricsReport> cases;
    record.reports[group] = evaluate_group(config, *model, group, seed, &cases);
    record.case_reports[group] = std::move(cases);
  }

  // Persist the record, reports, prune log and final checkpoint.
  const nlohmann::json rj = record_json(config, record);
  write_text_file(record.dir / "record.json", rj.dump(2) + "\n");
  for (const auto& [group, aggregate] : record.reports) {
    nlohmann::json g;
    g["group"] = group;
    g["eval"] = nlohmann::json(config)["eval"];
    g["aggregate"] = aggregate;
    nlohmann::json cases = nlohmann::json::array();
    for (const auto& c : record.case_reports.at(group)) cases.push_back(c);
    g["cases"] = cases;
    write_text_file(record.dir / "reports" / (group + ".json"), g.dump(2) + "\n");
  }
  write_text_file(record.dir / "reports.csv", reports_csv(record));
  if (!record.prune_log.empty()) {
    std::string lines;
    for (const auto& l : record.prune_log) lines += prune_log_json(l).dump() + "\n";
    write_text_file(record.dir / "prune_log.jsonl", lines);
  }
  write_text_file(record.dir / "train_curve.csv", curve_csv(record.train.curve));
  Checkpoint final_ckpt;
  final_ckpt.model = model->config();
  final_ckpt.seed = seed;
  final_ckpt.params = model->registry().snapshot();
  final_ckpt.mask.assign(mask.flags().begin(), mask.flags().end());
  save_checkpoint(record.dir / "final.ckpt", final_ckpt);
  return record;
}

ComparisonTable compare_records(const std::vector<nlohmann::json>& records) {
  if (records.empty()) throw std::invalid_argument("compare: no records");
  struct Key {
    std::string method, group, metric;
    auto operator<=>(const Key&) const = default;
  };
  std::map<Key, std::vector<double>> values;
  std::map<std::pair<std::string, std::string>, int> rows;

  // Sort by (method, seed, hash) so aggregation order is reproducible.
  std::vector<nlohmann::json> sorted = records;
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
    const auto ka = std::tuple(a.at("method").template get<std::string>(),
                               a.at("seed").template get<std::uint64_t>(),
                               a.value("config_hash", std::string{}));
    const auto kb = std::tuple(b.at("method").template get<std::string>(),
                               b.at("seed").template get<std::uint64_t>(),
                               b.value("config_hash", std::string{}));
    return ka < kb;
  });

  static const std::vector<std::string> kMetrics = {
      "det_precision", "det_recall", "det_f1",     "dist_mean", "dist_std",
      "cls_precision", "cls_recall", "cls_f1",     "accuracy"};
  for (const auto& r : sorted) {
    const auto method = r.at("method").get<std::string>();
    for (const auto& [group, g] : r.at("reports").items()) {
      rows[{method, group}] += 1;
      const auto& agg = g.at("aggregate");
      for (const auto& metric : kMetrics) {
        if (!agg.contains(metric) || agg.at(metric).is_null()) continue;
        values[{method, group, metric}].push_back(agg.at(metric).get<double>());
      }
    }
  }

  auto mean_std = [&](const Key& k) -> std::pair<double, double> {
    auto it = values.find(k);
    if (it == values.end() || it->second.empty())
      return {std::numeric_limits<double>::quiet_NaN(),
              std::numeric_limits<double>::quiet_NaN()};
    double mean = 0.0;
    for (double v : it->second) mean += v;
    mean /= static_cast<double>(it->second.size());
    double var = 0.0;
    for (double v : it->second) var += (v - mean) * (v - mean);
    return {mean, std::sqrt(var / static_cast<double>(it->second.size()))};
  };

  std::ostringstream md, csv;
  md << "| method | group | det P | det R | det F1 | dist mu+-sigma | cls P | "
        "cls R | cls F1 | accuracy |\n";
  md << "|---|---|---|---|---|---|---|---|---|---|\n";
  csv << "method,group,metric,mean,std,n\n";
  for (const auto& [row, n] : rows) {
    const auto& [method, group] = row;
    auto cell = [&](const std::string& metric) {
      const auto [mean, sd] = mean_std({method, group, metric});
      if (std::isnan(mean)) return std::string("-");
      return n > 1 ? fmt_fixed(mean, 4) + " +- " + fmt_fixed(sd, 4)
                   : fmt_fixed(mean, 4);
    };
    md << "| " << method << " | " << group << " | " << cell("det_precision")
       << " | " << cell("det_recall") << " | " << cell("det_f1") << " | ";
    const auto [dm, dmsd] = mean_std({method, group, "dist_mean"});
    const auto [ds, dssd] = mean_std({method, group, "dist_std"});
    (void)dmsd;
    (void)dssd;
    if (std::isnan(dm)) md << "-";
    else md << fmt_fixed(dm, 3) << " +- " << fmt_fixed(ds, 3);
    md << " | " << cell("cls_precision") << " | " << cell("cls_recall") << " | "
       << cell("cls_f1") << " | " << cell("accuracy") << " |\n";
    for (const auto& metric : kMetrics) {
      const auto [mean, sd] = mean_std({method, group, metric});
      if (std::isnan(mean)) continue;
      csv << method << "," << group << "," << metric << "," << fmt_double(mean)
          << "," << fmt_double(sd) << "," << n << "\n";
    }
  }
  return {md.str(), csv.str()};
}

}  // namespace dgp
