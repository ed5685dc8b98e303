#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dgp/rng.hpp"

namespace dgp {

enum class Task { kVector, kNucleus };
const char* task_name(Task t);
Task task_from_name(const std::string& s);

// Global 7-class palette shared by every domain. Rendering encodes the class
// as a gray level; the domain hue then shifts the channels.
inline constexpr int kNumClasses = 7;
const std::array<const char*, kNumClasses>& class_names();
const std::array<double, kNumClasses>& class_gray_levels();

struct VectorTaskParams {
  int dim = 8;
  double noise = 0.3;            // stddev on the informative pair
  double separation = 2.0;       // min distance between adjacent centroids
  int spurious_dim = 2;          // index of the planted shortcut coordinate
  double spurious_noise = 0.05;  // stddev around the shortcut signal
  double spurious_gain = 1.5;    // shortcut signal amplitude
  void validate() const;
};

struct NucleusTaskParams {
  int image_size = 32;
  double sigma = 0.0;        // proximity-map sigma; 0 = half the min cell radius
  double hollow_prob = 0.0;  // chance a cell renders as a ring
  double bg_level = 0.85;
  double noise = 0.02;       // uniform pixel noise amplitude
  void validate() const;
};

struct DomainSpec {
  std::string id;
  Task task = Task::kVector;
  std::vector<int> classes;  // subset of the global palette

  // vector-task shift parameters
  double rotation = 0.0;  // radians applied to the informative subspace
  double rho = 0.0;       // probability the shortcut coordinate carries signal
  std::vector<double> feature_scale;  // per-coordinate nuisance noise scale

  // nucleus-task shift parameters
  std::array<double, 3> hue{0.0, 0.0, 0.0};
  double radius_min = 3.0;
  double radius_max = 5.0;
  std::uint64_t texture_seed = 0;
  double density = 0.004;  // expected cells per pixel

  void validate(Task expected) const;
};

void to_json(nlohmann::json& j, const DomainSpec& s);
void from_json(const nlohmann::json& j, DomainSpec& s);
void to_json(nlohmann::json& j, const VectorTaskParams& p);
void from_json(const nlohmann::json& j, VectorTaskParams& p);
void to_json(nlohmann::json& j, const NucleusTaskParams& p);
void from_json(const nlohmann::json& j, NucleusTaskParams& p);

struct VectorSample {
  std::vector<double> features;
  int label = 0;
};

struct NucleusSample {
  struct Annot {
    int x = 0, y = 0, cls = 0;
  };
  int channels = 3, height = 0, width = 0;
  std::vector<double> image;                    // channels*height*width, [0,1]
  std::vector<Annot> annotations;
  std::vector<std::vector<double>> proximity;   // kNumClasses maps, height*width
};

// Fixed global geometry: the 7 class centroids sit on a circle in the
// informative 2-d subspace, adjacent centroids `separation` apart.
std::array<double, 2> class_centroid(int cls, double separation);

std::vector<VectorSample> gen_vector_domain(const DomainSpec& spec,
                                            const VectorTaskParams& params,
                                            int count, std::uint64_t seed);

NucleusSample gen_nucleus_sample(const DomainSpec& spec,
                                 const NucleusTaskParams& params,
                                 std::uint64_t seed);

double domain_sigma(const DomainSpec& spec, const NucleusTaskParams& params);

// Pointwise max of per-annotation Gaussians exp(-d^2 / (2 sigma^2)) for one
// class; exactly 1 at each annotation pixel.
std::vector<double> proximity_map(std::span<const NucleusSample::Annot> annots,
                                  int cls, int height, int width, double sigma);

// Infinite, seeded stream of merged batches: `ratio.first` parts source and
// `ratio.second` parts invasion per batch (invasion specs cycle). With no
// invasion specs the stream is pure source.
class VectorStream {
 public:
  VectorStream(std::vector<DomainSpec> source, std::vector<DomainSpec> invasion,
               VectorTaskParams params, int batch_size,
               std::pair<int, int> ratio, std::uint64_t seed);
  std::vector<VectorSample> next();
  int batch_size() const { return batch_; }
  int source_per_batch() const { return n_source_; }

 private:
  std::vector<DomainSpec> source_, invasion_;
  VectorTaskParams params_;
  int batch_, n_source_;
  std::uint64_t seed_, counter_ = 0;
};

class NucleusStream {
 public:
  NucleusStream(std::vector<DomainSpec> source, std::vector<DomainSpec> invasion,
                NucleusTaskParams params, int batch_size,
                std::pair<int, int> ratio, std::uint64_t seed);
  std::vector<NucleusSample> next();
  int batch_size() const { return batch_; }
  int source_per_batch() const { return n_source_; }

 private:
  std::vector<DomainSpec> source_, invasion_;
  NucleusTaskParams params_;
  int batch_, n_source_;
  std::uint64_t seed_, counter_ = 0;
};

// Validates the source/invasion split of one batch against a ratio.
std::pair<int, int> split_batch(int batch_size, std::pair<int, int> ratio,
                                bool has_invasion);

// Dataset dump: manifest.json plus, per domain, either a samples.csv (vector)
// or per-sample raw float64 images with plain-text "x y class" annotation
// files (nucleus). verify_dataset regenerates from the manifest and compares.
void export_dataset(const std::filesystem::path& dir, Task task,
                    std::span<const DomainSpec> specs,
                    const VectorTaskParams& vparams,
                    const NucleusTaskParams& nparams, int count,
                    std::uint64_t seed);
bool verify_dataset(const std::filesystem::path& dir);

}  // namespace dgp
