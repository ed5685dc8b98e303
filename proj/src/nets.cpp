#include "dgp/nets.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dgp/rng.hpp"

namespace dgp {

const char* family_name(Family f) {
  return f == Family::kMlp ? "mlp" : "encdec";
}

Family family_from_name(const std::string& s) {
  if (s == "mlp") return Family::kMlp;
  if (s == "encdec") return Family::kEncDec;
  throw std::invalid_argument("unknown model family '" + s + "'");
}

const char* tag_name(ModuleTag t) {
  switch (t) {
    case ModuleTag::kEncoder: return "encoder";
    case ModuleTag::kDecoder: return "decoder";
    case ModuleTag::kHead: return "head";
  }
  return "?";
}

void ModelConfig::validate() const {
  if (widths.empty()) throw std::invalid_argument("model config: widths empty");
  for (int w : widths)
    if (w < 1) throw std::invalid_argument("model config: width < 1");
  if (output_dim < 1) throw std::invalid_argument("model config: output_dim < 1");
  if (family == Family::kMlp) {
    if (input_shape.size() != 1 || input_shape[0] < 1)
      throw std::invalid_argument("model config: mlp input shape must be [d]");
  } else {
    if (input_shape.size() != 3)
      throw std::invalid_argument("model config: encdec input shape must be [c,h,w]");
    for (int d : input_shape)
      if (d < 1) throw std::invalid_argument("model config: bad input dimension");
    const int levels = static_cast<int>(widths.size());
    const int downs = 1 << (levels - 1);
    if (input_shape[1] % downs != 0 || input_shape[2] % downs != 0)
      throw std::invalid_argument(
          "model config: spatial dims must be divisible by 2^(levels-1)");
  }
}

ParamRegistry::ParamRegistry(std::vector<ParamEntry> entries)
    : entries_(std::move(entries)) {
  std::int64_t off = 0;
  for (auto& e : entries_) {
    e.offset = off;
    e.length = e.param.numel();
    off += e.length;
  }
  total_ = off;
  validate();
}

void ParamRegistry::validate() const {
  std::int64_t off = 0;
  for (const auto& e : entries_) {
    if (e.offset != off || e.length != e.param.numel() || !e.param.requires_grad())
      throw std::logic_error("param registry does not partition the flat vector");
    off += e.length;
  }
  if (off != total_)
    throw std::logic_error("param registry total inconsistent");
}

const ParamEntry& ParamRegistry::entry_for(std::int64_t flat) const {
  if (flat < 0 || flat >= total_)
    throw std::out_of_range("registry index " + std::to_string(flat));
  auto it = std::upper_bound(
      entries_.begin(), entries_.end(), flat,
      [](std::int64_t v, const ParamEntry& e) { return v < e.offset; });
  return *(it - 1);
}

double ParamRegistry::get(std::int64_t flat) const {
  const auto& e = entry_for(flat);
  return e.param.value()[static_cast<std::size_t>(flat - e.offset)];
}

void ParamRegistry::set(std::int64_t flat, double v) {
  const auto& e = entry_for(flat);
  e.param.node()->value[static_cast<std::size_t>(flat - e.offset)] = v;
}

double ParamRegistry::grad_at(std::int64_t flat) const {
  const auto& e = entry_for(flat);
  if (!e.param.has_grad()) return 0.0;
  return e.param.node()->grad[static_cast<std::size_t>(flat - e.offset)];
}

ModuleTag ParamRegistry::tag_of(std::int64_t flat) const {
  return entry_for(flat).tag;
}

std::vector<double> ParamRegistry::snapshot() const {
  std::vector<double> out(static_cast<std::size_t>(total_));
  for (const auto& e : entries_)
    std::copy(e.param.value().begin(), e.param.value().end(),
              out.begin() + static_cast<std::ptrdiff_t>(e.offset));
  return out;
}

void ParamRegistry::restore(std::span<const double> flat) {
  if (static_cast<std::int64_t>(flat.size()) != total_)
    throw std::invalid_argument("restore: length " + std::to_string(flat.size()) +
                                " does not match registry total " +
                                std::to_string(total_));
  for (auto& e : entries_)
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(e.offset),
              flat.begin() + static_cast<std::ptrdiff_t>(e.offset + e.length),
              e.param.value().begin());
}

void ParamRegistry::zero_grad() {
  for (auto& e : entries_)
    e.param.node()->grad.assign(e.param.value().size(), 0.0);
}

std::array<std::int64_t, 3> ParamRegistry::tag_totals() const {
  std::array<std::int64_t, 3> out{0, 0, 0};
  for (const auto& e : entries_) out[static_cast<int>(e.tag)] += e.length;
  return out;
}

namespace {

Tensor he_uniform(std::vector<int> shape, int fan_in, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> data(static_cast<std::size_t>(numel_of(shape)));
  for (double& v : data) v = rng.uniform(-limit, limit);
  return Tensor::from_data(std::move(shape), std::move(data), true);
}

Tensor xavier_uniform(std::vector<int> shape, int fan_in, int fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> data(static_cast<std::size_t>(numel_of(shape)));
  for (double& v : data) v = rng.uniform(-limit, limit);
  return Tensor::from_data(std::move(shape), std::move(data), true);
}

class MlpModel final : public Model {
 public:
  explicit MlpModel(const ModelConfig& cfg) : cfg_(cfg) {
    Rng rng = Rng(cfg.seed).fork("mlp-init");
    std::vector<ParamEntry> entries;
    int in = cfg.input_shape[0];
    for (std::size_t l = 0; l < cfg.widths.size(); ++l) {
      const int out = cfg.widths[l];
      Rng layer_rng = rng.fork(static_cast<std::uint64_t>(l));
      weights_.push_back(he_uniform({in, out}, in, layer_rng));
      biases_.push_back(Tensor::zeros({out}, true));
      const std::string base = "fc" + std::to_string(l + 1);
      entries.push_back({base + ".w", ModuleTag::kEncoder, weights_.back(), 0, 0});
      entries.push_back({base + ".b", ModuleTag::kEncoder, biases_.back(), 0, 0});
      in = out;
    }
    Rng head_rng = rng.fork("head");
    weights_.push_back(xavier_uniform({in, cfg.output_dim}, in, cfg.output_dim, head_rng));
    biases_.push_back(Tensor::zeros({cfg.output_dim}, true));
    entries.push_back({"head.w", ModuleTag::kHead, weights_.back(), 0, 0});
    entries.push_back({"head.b", ModuleTag::kHead, biases_.back(), 0, 0});
    registry_ = ParamRegistry(std::move(entries));
  }

  Tensor forward(Tape& tape, const Tensor& input) override {
    if (input.shape().size() != 2 || input.shape()[1] != cfg_.input_shape[0])
      throw std::invalid_argument("mlp forward: expected [b," +
                                  std::to_string(cfg_.input_shape[0]) + "], got " +
                                  shape_str(input.shape()));
    Tensor h = input;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      h = add_bias_rows(tape, matmul(tape, h, weights_[l]), biases_[l]);
      if (l + 1 < weights_.size()) h = relu(tape, h);
    }
    return h;
  }

  const ModelConfig& config() const override { return cfg_; }

 private:
  ModelConfig cfg_;
  std::vector<Tensor> weights_;
  std::vector<Tensor> biases_;
};

// U-shaped encoder/decoder: one 3x3 conv + relu per level on the way down
// with 2x2 pooling between levels, nearest upsampling with one skip concat
// and one 3x3 conv + relu per level on the way up, then a 1x1 head conv with
// a per-channel sigmoid.
class EncDecModel final : public Model {
 public:
  explicit EncDecModel(const ModelConfig& cfg) : cfg_(cfg) {
    Rng rng = Rng(cfg.seed).fork("encdec-init");
    std::vector<ParamEntry> entries;
    const int levels = static_cast<int>(cfg.widths.size());
    int in = cfg.input_shape[0];
    for (int l = 0; l < levels; ++l) {
      const int out = cfg.widths[static_cast<std::size_t>(l)];
      Rng lr = rng.fork(static_cast<std::uint64_t>(l));
      enc_w_.push_back(he_uniform({out, in, 3, 3}, in * 9, lr));
      enc_b_.push_back(Tensor::zeros({out}, true));
      const std::string base = "enc" + std::to_string(l + 1);
      entries.push_back({base + ".w", ModuleTag::kEncoder, enc_w_.back(), 0, 0});
      entries.push_back({base + ".b", ModuleTag::kEncoder, enc_b_.back(), 0, 0});
      in = out;
    }
    for (int l = levels - 2; l >= 0; --l) {
      const int skip = cfg.widths[static_cast<std::size_t>(l)];
      const int deep = cfg.widths[static_cast<std::size_t>(l + 1)];
      const int out = skip;
      Rng lr = rng.fork(1000 + static_cast<std::uint64_t>(l));
      dec_w_.push_back(he_uniform({out, deep + skip, 3, 3}, (deep + skip) * 9, lr));
      dec_b_.push_back(Tensor::zeros({out}, true));
      const std::string base = "dec" + std::to_string(l + 1);
      entries.push_back({base + ".w", ModuleTag::kDecoder, dec_w_.back(), 0, 0});
      entries.push_back({base + ".b", ModuleTag::kDecoder, dec_b_.back(), 0, 0});
    }
    Rng hr = rng.fork("head");
    const int head_in = cfg.widths[0];
    head_w_ = xavier_uniform({cfg.output_dim, head_in, 1, 1}, head_in,
                             cfg.output_dim, hr);
    head_b_ = Tensor::zeros({cfg.output_dim}, true);
    entries.push_back({"head.w", ModuleTag::kHead, head_w_, 0, 0});
    entries.push_back({"head.b", ModuleTag::kHead, head_b_, 0, 0});
    registry_ = ParamRegistry(std::move(entries));
  }

  Tensor forward(Tape& tape, const Tensor& input) override {
    if (input.shape().size() != 4 || input.shape()[1] != cfg_.input_shape[0] ||
        input.shape()[2] != cfg_.input_shape[1] ||
        input.shape()[3] != cfg_.input_shape[2])
      throw std::invalid_argument("encdec forward: input " +
                                  shape_str(input.shape()) +
                                  " does not match configured shape");
    const int levels = static_cast<int>(cfg_.widths.size());
    std::vector<Tensor> skips;
    Tensor h = input;
    for (int l = 0; l < levels; ++l) {
      h = relu(tape, conv2d(tape, h, enc_w_[static_cast<std::size_t>(l)],
                            enc_b_[static_cast<std::size_t>(l)]));
      if (l + 1 < levels) {
        skips.push_back(h);
        h = max_pool2d(tape, h);
      }
    }
    for (std::size_t d = 0; d < dec_w_.size(); ++d) {
      h = nearest_upsample2d(tape, h);
      h = concat_channels(tape, h, skips[skips.size() - 1 - d]);
      h = relu(tape, conv2d(tape, h, dec_w_[d], dec_b_[d]));
    }
    return sigmoid(tape, conv2d(tape, h, head_w_, head_b_));
  }

  const ModelConfig& config() const override { return cfg_; }

 private:
  ModelConfig cfg_;
  std::vector<Tensor> enc_w_, enc_b_, dec_w_, dec_b_;
  Tensor head_w_, head_b_;
};

}  // namespace

std::unique_ptr<Model> build_model(const ModelConfig& config) {
  config.validate();
  if (config.family == Family::kMlp) return std::make_unique<MlpModel>(config);
  return std::make_unique<EncDecModel>(config);
}

}  // namespace dgp
