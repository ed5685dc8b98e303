#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dgp/tensor.hpp"

namespace dgp {

enum class Family { kMlp, kEncDec };
enum class ModuleTag { kEncoder, kDecoder, kHead };

const char* family_name(Family f);
Family family_from_name(const std::string& s);
const char* tag_name(ModuleTag t);

struct ModelConfig {
  Family family = Family::kMlp;
  std::vector<int> input_shape;  // {features} for mlp, {c,h,w} for encdec
  std::vector<int> widths;       // hidden widths (mlp) or channels per level
  int output_dim = 0;            // class count (mlp) or output channels
  std::uint64_t seed = 0;

  void validate() const;
};

struct ParamEntry {
  std::string name;
  ModuleTag tag;
  Tensor param;
  std::int64_t offset = 0;
  std::int64_t length = 0;
};

// Flat, module-tagged view over every trainable tensor of one model. Entry
// offsets partition [0, total) exactly; validate() checks that after
// construction and tests re-check it after pruning.
class ParamRegistry {
 public:
  ParamRegistry() = default;
  explicit ParamRegistry(std::vector<ParamEntry> entries);

  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::int64_t total() const { return total_; }

  double get(std::int64_t flat) const;
  void set(std::int64_t flat, double v);
  double grad_at(std::int64_t flat) const;
  ModuleTag tag_of(std::int64_t flat) const;

  std::vector<double> snapshot() const;
  void restore(std::span<const double> flat);
  void zero_grad();

  std::array<std::int64_t, 3> tag_totals() const;
  void validate() const;

 private:
  const ParamEntry& entry_for(std::int64_t flat) const;
  std::vector<ParamEntry> entries_;
  std::int64_t total_ = 0;
};

class Model {
 public:
  virtual ~Model() = default;
  // Pure function of (parameters, input); mlp maps [b,d] to logits [b,k],
  // encdec maps [b,c,h,w] to per-channel sigmoid maps [b,output_dim,h,w].
  virtual Tensor forward(Tape& tape, const Tensor& input) = 0;
  virtual const ModelConfig& config() const = 0;
  ParamRegistry& registry() { return registry_; }
  const ParamRegistry& registry() const { return registry_; }

 protected:
  ParamRegistry registry_;
};

// He-uniform init for relu layers, Xavier-uniform for the head, zero biases;
// deterministic in config.seed.
std::unique_ptr<Model> build_model(const ModelConfig& config);

}  // namespace dgp
