#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "dgp/checkpoint.hpp"
#include "dgp/nets.hpp"
#include "dgp/optim.hpp"
#include "testutil.hpp"

using namespace dgp;

namespace {

ModelConfig mlp_config(std::vector<int> widths = {16, 16}, int classes = 5,
                       std::uint64_t seed = 7) {
  ModelConfig c;
  c.family = Family::kMlp;
  c.input_shape = {8};
  c.widths = std::move(widths);
  c.output_dim = classes;
  c.seed = seed;
  return c;
}

ModelConfig encdec_config(std::uint64_t seed = 7) {
  ModelConfig c;
  c.family = Family::kEncDec;
  c.input_shape = {3, 32, 32};
  c.widths = {4, 8};
  c.output_dim = 5;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("mlp 8-16-16-5 registers 501 parameters") {
  auto model = build_model(mlp_config());
  CHECK(model->registry().total() == 8 * 16 + 16 + 16 * 16 + 16 + 16 * 5 + 5);
  CHECK(model->registry().total() == 501);
}

TEST_CASE("registry tags partition all parameters") {
  auto model = build_model(encdec_config());
  const auto& reg = model->registry();
  reg.validate();
  const auto totals = reg.tag_totals();
  CHECK(totals[0] + totals[1] + totals[2] == reg.total());
  CHECK(totals[0] > 0);  // encoder
  CHECK(totals[1] > 0);  // decoder
  CHECK(totals[2] > 0);  // head
  // Offsets are contiguous and every entry carries exactly one tag.
  std::int64_t off = 0;
  for (const auto& e : reg.entries()) {
    CHECK(e.offset == off);
    off += e.length;
  }
  CHECK(off == reg.total());
}

TEST_CASE("same seed gives identical initial parameter vectors") {
  auto a = build_model(encdec_config(42));
  auto b = build_model(encdec_config(42));
  CHECK(a->registry().snapshot() == b->registry().snapshot());
  auto c = build_model(encdec_config(43));
  CHECK(a->registry().snapshot() != c->registry().snapshot());
}

TEST_CASE("encdec forward: 32x32 input, 4 categories -> 5 channel maps") {
  auto model = build_model(encdec_config());
  Rng rng(5);
  Tape tape;
  Tensor x = Tensor::from_data({2, 3, 32, 32},
                               testutil::sample_uniform(rng, 2 * 3 * 32 * 32, 0, 1));
  Tensor y = model->forward(tape, x);
  CHECK(y.shape() == std::vector<int>{2, 5, 32, 32});
  for (double v : y.value()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("mlp on zero input emits the output biases") {
  auto model = build_model(mlp_config({4}, 3));
  auto& reg = model->registry();
  // Set the head bias through the flat view; relu(0 * w + 0) stays zero, so
  // logits equal head.b exactly.
  for (const auto& e : reg.entries())
    if (e.name == "head.b")
      for (std::int64_t i = 0; i < e.length; ++i)
        reg.set(e.offset + i, 0.5 + static_cast<double>(i));
  // Zero the hidden bias so the relu input is exactly zero.
  for (const auto& e : reg.entries())
    if (e.name == "fc1.b")
      for (std::int64_t i = 0; i < e.length; ++i) reg.set(e.offset + i, 0.0);
  Tape tape;
  Tensor x = Tensor::zeros({1, 8});
  Tensor y = model->forward(tape, x);
  CHECK(y.value() == std::vector<double>{0.5, 1.5, 2.5});
}

TEST_CASE("forward is pure given parameters and input") {
  auto model = build_model(encdec_config());
  Rng rng(9);
  const auto data = testutil::sample_uniform(rng, 3 * 32 * 32, 0, 1);
  Tape t1, t2;
  Tensor x1 = Tensor::from_data({1, 3, 32, 32}, data);
  Tensor x2 = Tensor::from_data({1, 3, 32, 32}, data);
  CHECK(model->forward(t1, x1).value() == model->forward(t2, x2).value());
}

TEST_CASE("snapshot/restore round trip is bit-exact") {
  auto model = build_model(mlp_config());
  auto& reg = model->registry();
  const auto before = reg.snapshot();
  const auto tag_counts = reg.tag_totals();

  for (std::int64_t i = 0; i < reg.total(); i += 3) reg.set(i, 123.456 + i);
  CHECK(reg.snapshot() != before);
  reg.restore(before);
  CHECK(reg.snapshot() == before);
  CHECK(reg.tag_totals() == tag_counts);

  std::vector<double> wrong(static_cast<std::size_t>(reg.total()) - 1, 0.0);
  CHECK_THROWS_AS(reg.restore(wrong), std::invalid_argument);
}

TEST_CASE("parameters change under training iff the update is nonzero") {
  auto model = build_model(mlp_config());
  auto& reg = model->registry();
  const auto init = reg.snapshot();

  OptimHyper hyper;
  hyper.algo = "sgd";
  hyper.lr = 0.0;
  auto opt0 = Optimizer::make(hyper, reg.total());
  reg.zero_grad();
  for (const auto& e : reg.entries())
    for (auto& g : e.param.node()->grad) g = 1.0;
  opt0->step(reg, {});
  CHECK(reg.snapshot() == init);  // lr * g == 0

  hyper.lr = 0.1;
  auto opt1 = Optimizer::make(hyper, reg.total());
  opt1->step(reg, {});
  CHECK(reg.snapshot() != init);
}

TEST_CASE("training is deterministic: same seed, same steps, same bits") {
  auto run_once = [] {
    auto model = build_model(mlp_config({8}, 3, 11));
    auto& reg = model->registry();
    auto opt = Optimizer::make(OptimHyper{}, reg.total());
    Rng rng(77);
    for (int step = 0; step < 5; ++step) {
      Tape tape;
      Tensor x = Tensor::from_data({4, 8}, testutil::sample_uniform(rng, 32, -1, 1));
      Tensor logits = model->forward(tape, x);
      Tensor loss = loss_softmax_ce(tape, logits, {0, 1, 2, 0});
      reg.zero_grad();
      backward(tape, loss);
      opt->step(reg, {});
    }
    return reg.snapshot();
  };
  CHECK(run_once() == run_once());
}

TEST_CASE("invalid model configs are rejected") {
  ModelConfig c = mlp_config();
  c.widths = {};
  CHECK_THROWS_AS(build_model(c), std::invalid_argument);
  c = mlp_config();
  c.output_dim = 0;
  CHECK_THROWS_AS(build_model(c), std::invalid_argument);
  c = encdec_config();
  c.input_shape = {3, 31, 31};  // not divisible by 2^(levels-1)
  CHECK_THROWS_AS(build_model(c), std::invalid_argument);
}

TEST_CASE("checkpoint save/load round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "dgp_nets_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "model.ckpt";

  auto model = build_model(encdec_config(99));
  Checkpoint out;
  out.model = model->config();
  out.seed = 1234;
  out.params = model->registry().snapshot();
  out.mask.assign(out.params.size(), 1);
  out.mask[3] = 0;
  out.mask[out.params.size() - 1] = 0;
  save_checkpoint(path, out);

  const auto in = load_checkpoint(path);
  CHECK(in.seed == 1234);
  CHECK(in.model.family == Family::kEncDec);
  CHECK(in.model.widths == out.model.widths);
  CHECK(in.params == out.params);  // bit-exact float64 round trip
  CHECK(in.mask == out.mask);

  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), std::runtime_error);
  std::filesystem::remove_all(dir);
}
