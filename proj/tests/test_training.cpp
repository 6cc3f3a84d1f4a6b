// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>

#include "doctest.h"
#include "xtal2dos/error.hpp"
#include "xtal2dos/training.hpp"

using namespace xtal2dos;

namespace {

TrainConfig tiny(const std::string& decoder = "transformer") {
  TrainConfig c;
  c.decoder = decoder;
  c.d_hid = 8;
  c.encoder_layers = 2;
  c.encoder_heads = 2;
  c.decoder_layers = 1;
  c.decoder_heads = 2;
  c.l_y = 6;
  c.batch_size = 4;
  c.seed = 17;
  return c;
}

Dataset tiny_data(std::size_t count = 10, std::size_t l_y = 6) {
  SyntheticOptions opt;
  opt.count = count;
  opt.l_y = l_y;
  opt.seed = 5;
  opt.max_atoms = 8;
  return generate_synthetic(opt);
}

std::vector<double> flat_parameters(Trainer& t) {
  std::vector<double> out;
  for (auto* p : t.model().parameters()) out.insert(out.end(), p->value.begin(), p->value.end());
  return out;
}

}  // namespace

TEST_CASE("adam: zero gradient leaves the parameter unchanged and the first step moves by lr") {
  Parameter a("a", {3});
  a.value = {1.0, -2.0, 0.5};
  Parameter b("b", {3});
  b.value = a.value;
  Parameter* ps[] = {&a, &b};
  AdamState st;
  st.reset(ps);
  a.grad = {0.0, 0.0, 0.0};
  b.grad = {4.0, -0.01, 1e3};
  adam_step(ps, st, AdamOptions{});
  CHECK(a.value == std::vector<double>{1.0, -2.0, 0.5});
  CHECK(b.value[0] == doctest::Approx(1.0 - 1e-3).epsilon(1e-9));
  CHECK(b.value[1] == doctest::Approx(-2.0 + 1e-3).epsilon(1e-9));
  CHECK(b.value[2] == doctest::Approx(0.5 - 1e-3).epsilon(1e-9));
  CHECK(st.t == 1);
}

TEST_CASE("adam: identical parameters with identical gradients stay identical") {
  Parameter a("a", {2}), b("b", {2});
  a.value = b.value = {0.3, 0.7};
  Parameter* ps[] = {&a, &b};
  AdamState st;
  st.reset(ps);
  for (int k = 0; k < 5; ++k) {
    a.grad = b.grad = {0.1 * k, -0.2};
    adam_step(ps, st, AdamOptions{});
  }
  CHECK(a.value == b.value);
}

TEST_CASE("adam: a non-finite gradient names the parameter and changes nothing") {
  Parameter a("encoder.ok", {1}), b("decoder.bad", {1});
  a.value = {1.0};
  b.value = {2.0};
  Parameter* ps[] = {&a, &b};
  AdamState st;
  st.reset(ps);
  a.grad = {1.0};
  b.grad = {std::numeric_limits<double>::quiet_NaN()};
  try {
    adam_step(ps, st, AdamOptions{});
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("decoder.bad") != std::string::npos);
  }
  CHECK(a.value[0] == 1.0);
  CHECK(st.t == 0);
  CHECK(st.m[0][0] == 0.0);
}

TEST_CASE("gradient clipping rescales to the global norm") {
  Parameter a("a", {1}), b("b", {1});
  a.grad = {3.0};
  b.grad = {4.0};
  Parameter* ps[] = {&a, &b};
  CHECK(clip_gradient_norm(ps, 1.0) == doctest::Approx(5.0));
  CHECK(a.grad[0] == doctest::Approx(0.6));
  CHECK(b.grad[0] == doctest::Approx(0.8));
  CHECK(clip_gradient_norm(ps, 2.0) == doctest::Approx(1.0));
  CHECK(a.grad[0] == doctest::Approx(0.6));
}

TEST_CASE("batches fold a trailing singleton") {
  std::vector<std::size_t> order(7);
  std::iota(order.begin(), order.end(), 0);
  const auto b3 = make_batches(order, 3);
  REQUIRE(b3.size() == 2);
  CHECK(b3[1] == std::vector<std::size_t>{3, 4, 5, 6});
  const auto b2 = make_batches(std::span(order).first(6), 2);
  CHECK(b2.size() == 3);
  const auto big = make_batches(order, 32);
  REQUIRE(big.size() == 1);
  CHECK(big[0].size() == 7);
  CHECK(make_batches(std::span<const std::size_t>{}, 4).empty());
}

TEST_CASE("config json round trip, overrides and validation") {
  TrainConfig c = tiny();
  const TrainConfig back = TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  const TrainConfig merged = TrainConfig::from_json(R"({"lr": 0.01, "decoder": "rnn"})", c);
  CHECK(merged.lr == 0.01);
  CHECK(merged.decoder == "rnn");
  CHECK(merged.d_hid == 8);
  CHECK_THROWS_AS(TrainConfig::from_json(R"({"learning_rate": 0.01})"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json(R"({"lr": "fast"})"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json("{"), ConfigError);

  TrainConfig bad = tiny("chunk_rnn");
  bad.chunk = 5;
  bad.loss = "kl";
  bad.head = "softplus";
  bad.batch_size = 0;
  const auto problems = bad.problems();
  CHECK(problems.size() == 3);
  try {
    bad.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("chunk") != std::string::npos);
    CHECK(msg.find("softmax") != std::string::npos);
    CHECK(msg.find("batch_size") != std::string::npos);
  }
  TrainConfig gkl = tiny();
  gkl.loss = "generalized_kl";
  gkl.head = "softplus";
  CHECK(gkl.problems().empty());
}

TEST_CASE("a zero learning rate leaves every parameter unchanged") {
  TrainConfig c = tiny();
  c.lr = 0.0;
  Trainer t(c);
  const Dataset data = tiny_data();
  const auto before = flat_parameters(t);
  t.train_epoch(data, data.all_indices());
  CHECK(flat_parameters(t) == before);
}

TEST_CASE("the same seed reproduces losses and parameters bitwise") {
  const Dataset data = tiny_data();
  Trainer a(tiny()), b(tiny());
  for (int e = 0; e < 2; ++e) {
    CHECK(a.train_epoch(data, data.all_indices()).loss == b.train_epoch(data, data.all_indices()).loss);
  }
  CHECK(flat_parameters(a) == flat_parameters(b));
  TrainConfig other = tiny();
  other.seed = 18;
  Trainer c(other);
  CHECK(flat_parameters(c) != flat_parameters(a));
}

TEST_CASE("training lowers the loss") {
  TrainConfig c = tiny();
  c.lr = 3e-3;
  Trainer t(c);
  const Dataset data = tiny_data(16);
  const double first = t.train_epoch(data, data.all_indices()).loss;
  double last = first;
  for (int e = 0; e < 9; ++e) last = t.train_epoch(data, data.all_indices()).loss;
  CHECK(last < first);
  CHECK(t.epoch() == 10);
}

TEST_CASE("checkpoints round trip and resume matches uninterrupted training") {
  const Dataset data = tiny_data();
  for (const std::string kind : {"rnn", "rnn_attn", "chunk_rnn", "chunk_rnn_attn", "transformer"}) {
    CAPTURE(kind);
    TrainConfig c = tiny(kind);
    c.chunk = kind.starts_with("chunk") ? 2 : 0;
    Trainer straight(c);
    straight.train_epoch(data, data.all_indices());
    straight.train_epoch(data, data.all_indices());

    Trainer first(c);
    first.train_epoch(data, data.all_indices());
    const std::string bytes = first.serialize();
    auto resumed = Trainer::deserialize(bytes);
    CHECK(resumed->serialize() == bytes);
    resumed->train_epoch(data, data.all_indices());
    CHECK(resumed->epoch() == 2);
    CHECK(resumed->serialize() == straight.serialize());
  }
}

TEST_CASE("checkpoint files: save, load and corruption") {
  const auto dir = std::filesystem::temp_directory_path() / "x2d_training_test";
  std::filesystem::create_directories(dir);
  Trainer t(tiny());
  t.save(dir / "a.ckpt");
  auto loaded = Trainer::load(dir / "a.ckpt");
  CHECK(loaded->serialize() == t.serialize());
  std::string bytes = t.serialize();
  bytes[0] = 'Y';
  CHECK_THROWS_AS(Trainer::deserialize(bytes), FormatError);
  CHECK_THROWS_AS(Trainer::deserialize(t.serialize().substr(0, 40)), FormatError);
  CHECK_THROWS_AS(Trainer::load(dir / "missing.ckpt"), IoError);
}

TEST_CASE("evaluation is repeatable and prediction export has one row per bin") {
  Dataset data = tiny_data();
  Trainer t(tiny());
  t.train_epoch(data, data.all_indices());
  const auto idx = data.all_indices();
  CHECK(t.evaluate(data, idx).to_json() == t.evaluate(data, idx).to_json());
  const auto preds = t.predict(data, idx);
  REQUIRE(preds.size() == data.size());
  for (const auto& row : preds) CHECK(std::accumulate(row.begin(), row.end(), 0.0) == doctest::Approx(1.0));
  const std::string csv = t.predict_csv(data, idx);
  CHECK(csv.rfind("id,position,prediction,target\n", 0) == 0);
  CHECK(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')) == 1 + data.size() * 6);
  CHECK_THROWS_AS(t.evaluate(data, std::span<const std::size_t>{}), ValidationError);
  CHECK_THROWS_AS(t.set_bin_width(0.0), ConfigError);
  t.set_bin_width(0.5);
  CHECK(t.config().bin_width == 0.5);
}

TEST_CASE("a model predicting the target exactly scores perfectly") {
  // Uniform targets against a zeroed decoder head give a uniform softmax.
  Dataset data = tiny_data(4);
  for (auto& s : data.samples) s.target.values.assign(6, 1.0 / 6.0);
  Trainer t(tiny());
  for (auto* p : t.model().parameters()) {
    if (p->name.starts_with("decoder.head")) std::fill(p->value.begin(), p->value.end(), 0.0);
  }
  const auto report = t.evaluate(data, data.all_indices());
  CHECK_FALSE(report.r2.has_value());
  CHECK(*report.mae < 1e-15);
  CHECK(*report.wd < 1e-15);
}

TEST_CASE("log rows") {
  EpochStats s{3, 0.25, 1.5};
  CHECK(train_log_row(s, nullptr) == "3,0.25,,,1.5");
  MetricReport r;
  r.r2 = 0.5;
  CHECK(train_log_row(s, &r) == "3,0.25,0.5,,1.5");
  CHECK(std::string(kTrainLogHeader) == "epoch,train_loss,val_r2,val_wd,seconds");
}
