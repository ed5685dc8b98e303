#include "dgp/domains.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace dgp {

const char* task_name(Task t) { return t == Task::kVector ? "vector" : "nucleus"; }

Task task_from_name(const std::string& s) {
  if (s == "vector") return Task::kVector;
  if (s == "nucleus") return Task::kNucleus;
  throw std::invalid_argument("unknown task '" + s + "'");
}

const std::array<const char*, kNumClasses>& class_names() {
  static const std::array<const char*, kNumClasses> names = {
      "neg_fibroblast", "neg_lymphocyte", "neg_tumor",
      "pos_fibroblast", "pos_lymphocyte", "pos_tumor", "other"};
  return names;
}

const std::array<double, kNumClasses>& class_gray_levels() {
  // Distinct levels, all darker than the background and with headroom for
  // hue shifts so typical configs never clamp.
  static const std::array<double, kNumClasses> levels = {
      0.20, 0.28, 0.36, 0.44, 0.52, 0.60, 0.68};
  return levels;
}

void VectorTaskParams::validate() const {
  if (dim < 3) throw std::invalid_argument("vector task: dim must be >= 3");
  if (noise <= 0.0) throw std::invalid_argument("vector task: noise must be > 0");
  if (separation <= 0.0) throw std::invalid_argument("vector task: separation must be > 0");
  if (spurious_dim < 2 || spurious_dim >= dim)
    throw std::invalid_argument("vector task: spurious_dim must be in [2, dim)");
}

void NucleusTaskParams::validate() const {
  if (image_size < 32)
    throw std::invalid_argument("nucleus task: image_size must be >= 32");
  if (sigma < 0.0) throw std::invalid_argument("nucleus task: sigma must be >= 0");
  if (hollow_prob < 0.0 || hollow_prob > 1.0)
    throw std::invalid_argument("nucleus task: hollow_prob must be in [0,1]");
}

void DomainSpec::validate(Task expected) const {
  if (task != expected) throw std::invalid_argument("domain '" + id + "': wrong task");
  if (classes.empty())
    throw std::invalid_argument("domain '" + id + "': empty category subset");
  for (int c : classes)
    if (c < 0 || c >= kNumClasses)
      throw std::invalid_argument("domain '" + id + "': class out of palette");
  if (task == Task::kVector) {
    if (rho < 0.0 || rho > 1.0)
      throw std::invalid_argument("domain '" + id + "': rho must be in [0,1]");
  } else {
    if (radius_min < 2.0 || radius_max < radius_min)
      throw std::invalid_argument("domain '" + id + "': cell radii must satisfy 2 <= min <= max");
    if (density <= 0.0)
      throw std::invalid_argument("domain '" + id + "': density must be > 0");
  }
}

void to_json(nlohmann::json& j, const DomainSpec& s) {
  j = nlohmann::json{{"id", s.id}, {"task", task_name(s.task)}, {"classes", s.classes}};
  if (s.task == Task::kVector) {
    j["rotation"] = s.rotation;
    j["rho"] = s.rho;
    if (!s.feature_scale.empty()) j["feature_scale"] = s.feature_scale;
  } else {
    j["hue"] = s.hue;
    j["radius"] = std::array<double, 2>{s.radius_min, s.radius_max};
    j["texture_seed"] = s.texture_seed;
    j["density"] = s.density;
  }
}

void from_json(const nlohmann::json& j, DomainSpec& s) {
  s = DomainSpec{};
  s.id = j.at("id").get<std::string>();
  s.task = task_from_name(j.at("task").get<std::string>());
  s.classes = j.at("classes").get<std::vector<int>>();
  s.rotation = j.value("rotation", 0.0);
  s.rho = j.value("rho", 0.0);
  s.feature_scale = j.value("feature_scale", std::vector<double>{});
  if (j.contains("hue")) s.hue = j.at("hue").get<std::array<double, 3>>();
  if (j.contains("radius")) {
    auto r = j.at("radius").get<std::array<double, 2>>();
    s.radius_min = r[0];
    s.radius_max = r[1];
  }
  s.texture_seed = j.value("texture_seed", std::uint64_t{0});
  s.density = j.value("density", 0.004);
}

void to_json(nlohmann::json& j, const VectorTaskParams& p) {
  j = nlohmann::json{{"dim", p.dim},
                     {"noise", p.noise},
                     {"separation", p.separation},
                     {"spurious_dim", p.spurious_dim},
                     {"spurious_noise", p.spurious_noise},
                     {"spurious_gain", p.spurious_gain}};
}

void from_json(const nlohmann::json& j, VectorTaskParams& p) {
  p = VectorTaskParams{};
  p.dim = j.value("dim", p.dim);
  p.noise = j.value("noise", p.noise);
  p.separation = j.value("separation", p.separation);
  p.spurious_dim = j.value("spurious_dim", p.spurious_dim);
  p.spurious_noise = j.value("spurious_noise", p.spurious_noise);
  p.spurious_gain = j.value("spurious_gain", p.spurious_gain);
}

void to_json(nlohmann::json& j, const NucleusTaskParams& p) {
  j = nlohmann::json{{"image_size", p.image_size},
                     {"sigma", p.sigma},
                     {"hollow_prob", p.hollow_prob},
                     {"bg_level", p.bg_level},
                     {"noise", p.noise}};
}

void from_json(const nlohmann::json& j, NucleusTaskParams& p) {
  p = NucleusTaskParams{};
  p.image_size = j.value("image_size", p.image_size);
  p.sigma = j.value("sigma", p.sigma);
  p.hollow_prob = j.value("hollow_prob", p.hollow_prob);
  p.bg_level = j.value("bg_level", p.bg_level);
  p.noise = j.value("noise", p.noise);
}

std::array<double, 2> class_centroid(int cls, double separation) {
  // Ring radius chosen so adjacent centroids are `separation` apart.
  constexpr double kPi = 3.14159265358979323846;
  const double ring = separation / (2.0 * std::sin(kPi / kNumClasses));
  const double phi = 2.0 * kPi * cls / kNumClasses;
  return {ring * std::cos(phi), ring * std::sin(phi)};
}

std::vector<VectorSample> gen_vector_domain(const DomainSpec& spec,
                                            const VectorTaskParams& params,
                                            int count, std::uint64_t seed) {
  params.validate();
  spec.validate(Task::kVector);
  if (count < 1) throw std::invalid_argument("gen_vector_domain: count must be >= 1");
  if (!spec.feature_scale.empty() &&
      static_cast<int>(spec.feature_scale.size()) != params.dim)
    throw std::invalid_argument("domain '" + spec.id +
                                "': feature_scale length must equal dim");

  const double cos_t = std::cos(spec.rotation);
  const double sin_t = std::sin(spec.rotation);
  const Rng base = Rng(seed).fork(fnv1a64(spec.id));

  std::vector<VectorSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int s = 0; s < count; ++s) {
    Rng rng = base.fork(static_cast<std::uint64_t>(s));
    VectorSample sample;
    sample.label = spec.classes[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(spec.classes.size()) - 1))];
    sample.features.assign(static_cast<std::size_t>(params.dim), 0.0);

    const auto c = class_centroid(sample.label, params.separation);
    sample.features[0] = cos_t * c[0] - sin_t * c[1] + rng.normal(0.0, params.noise);
    sample.features[1] = sin_t * c[0] + cos_t * c[1] + rng.normal(0.0, params.noise);

    // Shortcut coordinate: a clean linear code of the label with probability
    // rho, otherwise unit noise.
    const double signal =
        params.spurious_gain *
        (2.0 * sample.label / static_cast<double>(kNumClasses - 1) - 1.0);
    if (rng.uniform() < spec.rho)
      sample.features[static_cast<std::size_t>(params.spurious_dim)] =
          signal + rng.normal(0.0, params.spurious_noise);
    else
      sample.features[static_cast<std::size_t>(params.spurious_dim)] = rng.normal();

    for (int d = 2; d < params.dim; ++d) {
      if (d == params.spurious_dim) continue;
      const double scale =
          spec.feature_scale.empty() ? 1.0 : spec.feature_scale[static_cast<std::size_t>(d)];
      sample.features[static_cast<std::size_t>(d)] = rng.normal(0.0, params.noise * scale);
    }
    out.push_back(std::move(sample));
  }
  return out;
}

double domain_sigma(const DomainSpec& spec, const NucleusTaskParams& params) {
  return params.sigma > 0.0 ? params.sigma : spec.radius_min / 2.0;
}

std::vector<double> proximity_map(std::span<const NucleusSample::Annot> annots,
                                  int cls, int height, int width, double sigma) {
  if (sigma <= 0.0) throw std::invalid_argument("proximity_map: sigma must be > 0");
  std::vector<double> map(static_cast<std::size_t>(height) * width, 0.0);
  for (const auto& a : annots) {
    if (a.cls != cls) continue;
    if (a.x < 0 || a.x >= width || a.y < 0 || a.y >= height)
      throw std::invalid_argument("proximity_map: annotation outside image");
    // Overlaps take the pointwise max, keeping the range [0,1] with an exact
    // 1 at every center.
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const double dx = x - a.x, dy = y - a.y;
        const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        auto& cell = map[static_cast<std::size_t>(y) * width + x];
        cell = std::max(cell, v);
      }
  }
  return map;
}

NucleusSample gen_nucleus_sample(const DomainSpec& spec,
                                 const NucleusTaskParams& params,
                                 std::uint64_t seed) {
  params.validate();
  spec.validate(Task::kNucleus);
  const int size = params.image_size;
  const int margin = static_cast<int>(std::ceil(spec.radius_max));
  if (2 * margin >= size)
    throw std::invalid_argument("gen_nucleus_sample: cells too large for image");

  Rng rng = Rng(seed).fork(fnv1a64(spec.id)).fork(spec.texture_seed);

  // Dart-throwing Poisson disc: minimum center separation twice the largest
  // radius, so discs never overlap and peaks stay unambiguous.
  const double min_sep = 2.0 * spec.radius_max;
  const auto target = std::max<std::int64_t>(
      1, std::llround(spec.density * size * size));
  NucleusSample sample;
  sample.height = size;
  sample.width = size;
  struct Cell {
    int x, y, cls;
    double radius;
    bool hollow;
  };
  std::vector<Cell> cells;
  const std::int64_t max_attempts = 40 * target;
  for (std::int64_t attempt = 0;
       attempt < max_attempts && static_cast<std::int64_t>(cells.size()) < target;
       ++attempt) {
    const int x = static_cast<int>(rng.uniform_int(margin, size - 1 - margin));
    const int y = static_cast<int>(rng.uniform_int(margin, size - 1 - margin));
    bool ok = true;
    for (const auto& c : cells) {
      const double dx = x - c.x, dy = y - c.y;
      if (std::sqrt(dx * dx + dy * dy) < min_sep) {
        ok = false;
        break;
      }
    }
    if (!ok) continue;
    Cell c;
    c.x = x;
    c.y = y;
    c.cls = spec.classes[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(spec.classes.size()) - 1))];
    c.radius = rng.uniform(spec.radius_min, spec.radius_max);
    c.hollow = rng.uniform() < params.hollow_prob;
    cells.push_back(c);
  }
  if (cells.empty())
    throw std::runtime_error("gen_nucleus_sample: density too high, no cell placed");

  // Background plus per-channel hue shift plus texture noise.
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  sample.image.assign(3 * plane, 0.0);
  for (int ch = 0; ch < 3; ++ch)
    for (std::size_t p = 0; p < plane; ++p)
      sample.image[ch * plane + p] =
          params.bg_level + spec.hue[static_cast<std::size_t>(ch)] +
          params.noise * rng.uniform(-1.0, 1.0);

  for (const auto& c : cells) {
    const double gray = class_gray_levels()[static_cast<std::size_t>(c.cls)];
    const int r = static_cast<int>(std::ceil(c.radius));
    for (int y = c.y - r; y <= c.y + r; ++y)
      for (int x = c.x - r; x <= c.x + r; ++x) {
        if (x < 0 || x >= size || y < 0 || y >= size) continue;
        const double dx = x - c.x, dy = y - c.y;
        const double d = std::sqrt(dx * dx + dy * dy);
        if (d > c.radius) continue;
        if (c.hollow && d < 0.55 * c.radius) continue;
        for (int ch = 0; ch < 3; ++ch)
          sample.image[static_cast<std::size_t>(ch) * plane +
                       static_cast<std::size_t>(y) * size + x] =
              gray + spec.hue[static_cast<std::size_t>(ch)] +
              params.noise * rng.uniform(-1.0, 1.0);
      }
    sample.annotations.push_back({c.x, c.y, c.cls});
  }
  for (double& v : sample.image) v = std::clamp(v, 0.0, 1.0);

  const double sigma = domain_sigma(spec, params);
  sample.proximity.reserve(kNumClasses);
  for (int cls = 0; cls < kNumClasses; ++cls)
    sample.proximity.push_back(
        proximity_map(sample.annotations, cls, size, size, sigma));
  return sample;
}

std::pair<int, int> split_batch(int batch_size, std::pair<int, int> ratio,
                                bool has_invasion) {
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (!has_invasion) return {batch_size, 0};
  if (ratio.first < 1 || ratio.second < 0)
    throw std::invalid_argument("merge ratio parts must be positive");
  if (ratio.second == 0) return {batch_size, 0};
  const int parts = ratio.first + ratio.second;
  if (batch_size % parts != 0)
    throw std::invalid_argument("merge ratio " + std::to_string(ratio.first) + ":" +
                                std::to_string(ratio.second) +
                                " incompatible with batch size " +
                                std::to_string(batch_size));
  const int unit = batch_size / parts;
  return {unit * ratio.first, unit * ratio.second};
}

namespace {

void check_stream_specs(const std::vector<DomainSpec>& source,
                        const std::vector<DomainSpec>& invasion, Task task) {
  if (source.empty())
    throw std::invalid_argument("domain stream: at least one source domain required");
  for (const auto& s : source) s.validate(task);
  for (const auto& s : invasion) s.validate(task);
}

}  // namespace

VectorStream::VectorStream(std::vector<DomainSpec> source,
                           std::vector<DomainSpec> invasion,
                           VectorTaskParams params, int batch_size,
                           std::pair<int, int> ratio, std::uint64_t seed)
    : source_(std::move(source)), invasion_(std::move(invasion)),
      params_(params), batch_(batch_size), seed_(seed) {
  check_stream_specs(source_, invasion_, Task::kVector);
  n_source_ = split_batch(batch_, ratio, !invasion_.empty()).first;
}

std::vector<VectorSample> VectorStream::next() {
  std::vector<VectorSample> batch;
  batch.reserve(static_cast<std::size_t>(batch_));
  for (int i = 0; i < batch_; ++i) {
    const bool from_source = i < n_source_;
    const auto& specs = from_source ? source_ : invasion_;
    const std::size_t which = static_cast<std::size_t>(
        (counter_ * batch_ + i) % specs.size());
    const std::uint64_t s = mix_seed(seed_, counter_ * batch_ + i);
    batch.push_back(gen_vector_domain(specs[which], params_, 1, s)[0]);
  }
  ++counter_;
  return batch;
}

NucleusStream::NucleusStream(std::vector<DomainSpec> source,
                             std::vector<DomainSpec> invasion,
                             NucleusTaskParams params, int batch_size,
                             std::pair<int, int> ratio, std::uint64_t seed)
    : source_(std::move(source)), invasion_(std::move(invasion)),
      params_(params), batch_(batch_size), seed_(seed) {
  check_stream_specs(source_, invasion_, Task::kNucleus);
  n_source_ = split_batch(batch_, ratio, !invasion_.empty()).first;
}

std::vector<NucleusSample> NucleusStream::next() {
  std::vector<NucleusSample> batch;
  batch.reserve(static_cast<std::size_t>(batch_));
  for (int i = 0; i < batch_; ++i) {
    const bool from_source = i < n_source_;
    const auto& specs = from_source ? source_ : invasion_;
    const std::size_t which = static_cast<std::size_t>(
        (counter_ * batch_ + i) % specs.size());
    const std::uint64_t s = mix_seed(seed_, counter_ * batch_ + i);
    batch.push_back(gen_nucleus_sample(specs[which], params_, s));
  }
  ++counter_;
  return batch;
}

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write '" + p.string() + "'");
  os << s;
}

std::string vector_csv(const std::vector<VectorSample>& samples) {
  std::ostringstream os;
  for (const auto& s : samples) {
    for (double f : s.features) os << format_double(f) << ',';
    os << s.label << '\n';
  }
  return os.str();
}

std::string annot_text(const NucleusSample& s) {
  std::ostringstream os;
  for (const auto& a : s.annotations) os << a.x << ' ' << a.y << ' ' << a.cls << '\n';
  return os.str();
}

std::string image_bytes(const NucleusSample& s) {
  return std::string(reinterpret_cast<const char*>(s.image.data()),
                     s.image.size() * sizeof(double));
}

}  // namespace

void export_dataset(const std::filesystem::path& dir, Task task,
                    std::span<const DomainSpec> specs,
                    const VectorTaskParams& vparams,
                    const NucleusTaskParams& nparams, int count,
                    std::uint64_t seed) {
  if (specs.empty()) throw std::invalid_argument("export_dataset: no domain specs");
  std::filesystem::create_directories(dir);

  nlohmann::json manifest;
  manifest["task"] = task_name(task);
  manifest["seed"] = seed;
  manifest["count"] = count;
  manifest["specs"] = std::vector<DomainSpec>(specs.begin(), specs.end());
  if (task == Task::kVector) {
    manifest["vector_task"] = vparams;
  } else {
    manifest["nucleus_task"] = nparams;
    manifest["image"] = {{"channels", 3},
                         {"height", nparams.image_size},
                         {"width", nparams.image_size},
                         {"dtype", "float64-le"}};
  }
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");

  for (const auto& spec : specs) {
    const auto ddir = dir / spec.id;
    std::filesystem::create_directories(ddir);
    if (task == Task::kVector) {
      write_text(ddir / "samples.csv",
                 vector_csv(gen_vector_domain(spec, vparams, count, seed)));
    } else {
      for (int i = 0; i < count; ++i) {
        const auto s = gen_nucleus_sample(spec, nparams, mix_seed(seed, i));
        write_text(ddir / ("sample_" + std::to_string(i) + ".img"), image_bytes(s));
        write_text(ddir / ("sample_" + std::to_string(i) + ".txt"), annot_text(s));
      }
    }
  }
}

bool verify_dataset(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("missing manifest in '" + dir.string() + "'");
  nlohmann::json manifest = nlohmann::json::parse(mf);

  const Task task = task_from_name(manifest.at("task").get<std::string>());
  const auto seed = manifest.at("seed").get<std::uint64_t>();
  const int count = manifest.at("count").get<int>();
  const auto specs = manifest.at("specs").get<std::vector<DomainSpec>>();
  VectorTaskParams vparams;
  NucleusTaskParams nparams;
  if (task == Task::kVector) vparams = manifest.at("vector_task").get<VectorTaskParams>();
  else nparams = manifest.at("nucleus_task").get<NucleusTaskParams>();

  auto file_equals = [](const std::filesystem::path& p, const std::string& expect) {
    std::ifstream is(p, std::ios::binary);
    if (!is) return false;
    std::string got((std::istreambuf_iterator<char>(is)),
                    std::istreambuf_iterator<char>());
    return got == expect;
  };

  for (const auto& spec : specs) {
    const auto ddir = dir / spec.id;
    if (task == Task::kVector) {
      if (!file_equals(ddir / "samples.csv",
                       vector_csv(gen_vector_domain(spec, vparams, count, seed))))
        return false;
    } else {
      for (int i = 0; i < count; ++i) {
        const auto s = gen_nucleus_sample(spec, nparams, mix_seed(seed, i));
        if (!file_equals(ddir / ("sample_" + std::to_string(i) + ".img"), image_bytes(s)))
          return false;
        if (!file_equals(ddir / ("sample_" + std::to_string(i) + ".txt"), annot_text(s)))
          return false;
      }
    }
  }
  return true;
}

}  // namespace dgp
