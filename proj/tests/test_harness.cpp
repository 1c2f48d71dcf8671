#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "stcnet/binio.hpp"
#include "stcnet/harness.hpp"

using stcnet::ArgumentError;
using stcnet::ConfigError;
using stcnet::FormatError;
using stcnet::NumericError;
using stcnet::Tensor;
using namespace stcnet::harness;
namespace data = stcnet::data;
namespace model = stcnet::model;
namespace nn = stcnet::nn;

namespace {

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

data::Dataset tiny_dataset(int per_class, uint64_t seed = 5) {
  data::SynthSpec spec;
  spec.num_nodes = 5;
  spec.frames = 8;
  spec.num_classes = 2;
  spec.per_class = per_class;
  spec.noise_std = 0.05;
  spec.seed = seed;
  return data::generate_synthetic(spec);
}

model::ModelConfig tiny_model() {
  model::ModelConfig mc;
  mc.block_channels = {4, 4, 4, 4, 4, 4, 4, 4, 4, 4};
  mc.stc.k = 2;
  return mc;
}

ScoreFile make_scores(std::vector<int> labels, std::vector<std::vector<double>> rows) {
  ScoreFile sf;
  sf.stream = "joint";
  sf.sigma = 0;
  sf.num_classes = static_cast<int>(rows.at(0).size());
  sf.labels = std::move(labels);
  sf.scores = std::move(rows);
  return sf;
}

}  // namespace

TEST_CASE("learning rate ramps linearly then follows the cosine") {
  TrainConfig cfg;  // epochs 90, warmup 5, 0.1 -> 1e-4
  CHECK(lr_schedule(0, 0.0, cfg) == 0.0);
  CHECK(lr_schedule(2, 0.5, cfg) == doctest::Approx(0.1 * 2.5 / 5.0).epsilon(1e-12));
  CHECK(lr_schedule(4, 1.0, cfg) == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(lr_schedule(5, 0.0, cfg) == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(lr_schedule(47, 0.5, cfg) == doctest::Approx(1e-4 + (0.1 - 1e-4) / 2.0).epsilon(1e-12));
  CHECK(std::abs(lr_schedule(89, 1.0, cfg) - 1e-4) < 1e-9);

  for (int e = 0; e + 1 < 5; ++e) CHECK(lr_schedule(e, 0.0, cfg) < lr_schedule(e + 1, 0.0, cfg));
  for (int e = 5; e + 1 < 90; ++e) CHECK(lr_schedule(e, 0.0, cfg) > lr_schedule(e + 1, 0.0, cfg));

  TrainConfig no_warm;
  no_warm.warmup_epochs = 0;
  CHECK(lr_schedule(0, 0.0, no_warm) == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("sgd with zero learning rate leaves parameters untouched") {
  nn::ParamStore<float> ps;
  auto& w = ps.add("w", Tensor<float>({3}, 2.0f));
  w.grad = Tensor<float>({3}, 1.5f);
  std::vector<Tensor<float>> vel;
  std::vector<float> before = w.value.v;
  for (int step = 0; step < 4; ++step) sgd_step(ps, vel, 0.0, 0.9, 4e-4);
  CHECK(w.value.v == before);
}

TEST_CASE("sgd follows the nesterov recurrence") {
  nn::ParamStore<float> ps;
  auto& w = ps.add("w", Tensor<float>({1}, 1.0f));
  std::vector<Tensor<float>> vel;

  w.grad = Tensor<float>({1}, 0.5f);
  sgd_step(ps, vel, 0.1, 0.9, 0.0);
  CHECK(w.value.at(0) == doctest::Approx(0.905).epsilon(1e-6));
  w.grad = Tensor<float>({1}, 0.5f);
  sgd_step(ps, vel, 0.1, 0.9, 0.0);
  CHECK(w.value.at(0) == doctest::Approx(0.7695).epsilon(1e-6));

  // coupled weight decay enters the gradient before the momentum update
  nn::ParamStore<float> ps2;
  auto& u = ps2.add("u", Tensor<float>({1}, 2.0f));
  u.grad = Tensor<float>({1}, 0.0f);
  std::vector<Tensor<float>> vel2;
  sgd_step(ps2, vel2, 0.1, 0.9, 0.1);
  CHECK(u.value.at(0) == doctest::Approx(2.0 - 0.1 * (0.2 + 0.9 * 0.2)).epsilon(1e-6));

  // frozen parameters are skipped
  nn::ParamStore<float> ps3;
  auto& f = ps3.add("buffer", Tensor<float>({2}, 1.0f));
  f.trainable = false;
  f.grad = Tensor<float>({2}, 9.0f);
  std::vector<Tensor<float>> vel3(7);  // wrong layout is rebuilt on entry
  sgd_step(ps3, vel3, 0.5, 0.9, 0.0);
  CHECK(f.value.v == std::vector<float>{1.0f, 1.0f});
  CHECK(vel3.size() == ps3.size());
}

TEST_CASE("train config validation") {
  TrainConfig ok;
  ok.validate();
  TrainConfig c;
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), ArgumentError);
  c = TrainConfig{};
  c.warmup_epochs = 90;
  CHECK_THROWS_AS(c.validate(), ArgumentError);
  c = TrainConfig{};
  c.warmup_epochs = -1;
  CHECK_THROWS_AS(c.validate(), ArgumentError);
  c = TrainConfig{};
  c.base_lr = 0;
  CHECK_THROWS_AS(c.validate(), ArgumentError);
  c = TrainConfig{};
  c.final_lr = 0;
  CHECK_THROWS_AS(c.validate(), ArgumentError);
  c = TrainConfig{};
  c.momentum = 1.0;
  CHECK_THROWS_AS(c.validate(), ArgumentError);
  c = TrainConfig{};
  c.momentum = -0.1;
  CHECK_THROWS_AS(c.validate(), ArgumentError);
  c = TrainConfig{};
  c.weight_decay = -1;
  CHECK_THROWS_AS(c.validate(), ArgumentError);
  c = TrainConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ArgumentError);
  c = TrainConfig{};
  c.sigma = -1;
  CHECK_THROWS_AS(c.validate(), ArgumentError);
}

TEST_CASE("training is reproducible down to the checkpoint bytes") {
  auto full = tiny_dataset(8);
  auto [train_ds, val_ds] = data::split_per_class(full, 6);

  TrainConfig tc;
  tc.epochs = 3;
  tc.warmup_epochs = 1;
  tc.batch_size = 4;
  tc.seed = 7;

  std::string ck1 = temp_path("stcnet_test_run1.stck");
  std::string ck2 = temp_path("stcnet_test_run2.stck");
  std::string mpath = temp_path("stcnet_test_metrics.jsonl");
  TrainResult r1 = train(tc, tiny_model(), train_ds, val_ds, ck1, mpath);
  TrainResult r2 = train(tc, tiny_model(), train_ds, val_ds, ck2);

  CHECK(r1.metrics == r2.metrics);
  CHECK(r1.val_acc == r2.val_acc);
  CHECK(stcnet::read_file_bytes(ck1) == stcnet::read_file_bytes(ck2));
  CHECK(stcnet::read_file_bytes(mpath) == r1.metrics);

  // metrics lines: monotone epochs, logged lr equals the schedule at step 0
  std::istringstream lines(r1.metrics);
  std::string line;
  int epoch = 0;
  while (std::getline(lines, line)) {
    auto j = nlohmann::json::parse(line);
    CHECK(j.at("epoch").get<int>() == epoch);
    CHECK(j.at("lr").get<double>() == lr_schedule(epoch, 0.0, tc));
    CHECK(std::isfinite(j.at("train_loss").get<double>()));
    double ta = j.at("train_acc").get<double>();
    CHECK((0.0 <= ta && ta <= 1.0));
    CHECK(j.at("val_acc").get<double>() == r1.val_acc[static_cast<size_t>(epoch)]);
    ++epoch;
  }
  CHECK(epoch == 3);

  double best = *std::max_element(r1.val_acc.begin(), r1.val_acc.end());
  CHECK(r1.best_val_acc == best);
  CHECK(r1.val_acc[static_cast<size_t>(r1.best_epoch)] == best);

  // the stored checkpoint reproduces the best epoch's validation accuracy
  int epoch_out = -1;
  auto net = stcnet::ckpt::load_checkpoint(ck1, &epoch_out);
  CHECK(epoch_out == r1.best_epoch);
  EvalResult ev = evaluate(net, val_ds);
  CHECK(ev.accuracy == r1.best_val_acc);

  std::filesystem::remove(ck1);
  std::filesystem::remove(ck2);
  std::filesystem::remove(mpath);
}

TEST_CASE("train rejects inconsistent inputs") {
  auto a = tiny_dataset(2);
  data::SynthSpec other;
  other.num_nodes = 10;
  other.frames = 8;
  other.num_classes = 2;
  other.per_class = 2;
  auto b = data::generate_synthetic(other);
  TrainConfig tc;
  tc.epochs = 1;
  tc.warmup_epochs = 0;
  CHECK_THROWS_AS(train(tc, tiny_model(), a, b), ArgumentError);

  model::ModelConfig mc = tiny_model();
  mc.num_classes = 2;
  data::SynthSpec three = {};
  three.num_nodes = 5;
  three.frames = 8;
  three.num_classes = 3;
  three.per_class = 2;
  auto c = data::generate_synthetic(three);
  CHECK_THROWS_AS(train(tc, mc, c, c), ConfigError);
}

TEST_CASE("exploding updates abort with a numeric diagnostic") {
  auto ds = tiny_dataset(3);
  TrainConfig tc;
  tc.epochs = 1;
  tc.warmup_epochs = 0;
  tc.batch_size = 2;
  tc.weight_decay = 1e30;
  CHECK_THROWS_AS(train(tc, tiny_model(), ds, ds), NumericError);
}

TEST_CASE("evaluation emits probabilities consistent with its accuracy") {
  auto ds = tiny_dataset(4);
  model::ModelConfig mc = tiny_model();
  mc.skeleton = ds.graph;
  mc.num_classes = 2;
  model::StcNet<float> net(mc, 17);

  EvalResult res = evaluate(net, ds);
  CHECK(res.scores.stream == std::string("joint"));
  CHECK(res.scores.sigma == 0);
  CHECK(res.scores.num_classes == 2);
  CHECK(res.scores.labels == ds.labels);
  REQUIRE(res.scores.scores.size() == static_cast<size_t>(ds.size()));

  int64_t correct = 0;
  for (size_t i = 0; i < res.scores.scores.size(); ++i) {
    const auto& row = res.scores.scores[i];
    REQUIRE(row.size() == 2);
    CHECK(std::abs(row[0] + row[1] - 1.0) <= 1e-6);
    size_t pred = row[1] > row[0] ? 1 : 0;
    if (static_cast<int>(pred) == ds.labels[i]) ++correct;
  }
  CHECK(res.accuracy == static_cast<double>(correct) / static_cast<double>(ds.size()));

  // scoring one sample at a time changes nothing
  EvalResult solo = evaluate(net, ds, 1);
  CHECK(solo.accuracy == res.accuracy);
  CHECK(solo.scores.scores == res.scores.scores);
}

TEST_CASE("evaluation rejects incompatible datasets") {
  auto ds = tiny_dataset(2);
  model::ModelConfig mc = tiny_model();
  mc.skeleton = ds.graph;
  mc.num_classes = 2;
  model::StcNet<float> net(mc, 1);

  data::SynthSpec big;
  big.num_nodes = 10;
  big.frames = 8;
  big.num_classes = 2;
  big.per_class = 2;
  CHECK_THROWS_AS(evaluate(net, data::generate_synthetic(big)), ConfigError);

  data::Dataset two_ch = ds;
  two_ch.samples = Tensor<float>({ds.size(), 2, 8, 5}, 0.5f);
  CHECK_THROWS_AS(evaluate(net, two_ch), ConfigError);

  data::SynthSpec three = {};
  three.num_nodes = 5;
  three.frames = 8;
  three.num_classes = 3;
  three.per_class = 1;
  CHECK_THROWS_AS(evaluate(net, data::generate_synthetic(three)), ConfigError);
  CHECK_THROWS_AS(evaluate(net, ds, 0), ArgumentError);
}

TEST_CASE("score files round-trip through json") {
  ScoreFile sf = make_scores({1, 0}, {{0.25, 0.75}, {0.5, 0.5}});
  sf.stream = "bone";
  sf.sigma = 2;
  std::string path = temp_path("stcnet_test_scores.json");
  write_scores(sf, path);
  ScoreFile back = read_scores(path);
  CHECK(back.stream == sf.stream);
  CHECK(back.sigma == sf.sigma);
  CHECK(back.num_classes == sf.num_classes);
  CHECK(back.labels == sf.labels);
  CHECK(back.scores == sf.scores);
  std::filesystem::remove(path);
}

TEST_CASE("score files validate probability rows both ways") {
  std::string path = temp_path("stcnet_test_badscores.json");
  ScoreFile bad = make_scores({0}, {{0.9, 0.2}});
  CHECK_THROWS_AS(write_scores(bad, path), ArgumentError);
  bad = make_scores({0, 1}, {{0.5, 0.5}});
  CHECK_THROWS_AS(write_scores(bad, path), ArgumentError);
  bad = make_scores({0}, {{0.5, 0.25, 0.25}});
  bad.num_classes = 2;
  CHECK_THROWS_AS(write_scores(bad, path), ArgumentError);

  stcnet::write_file_bytes(path, "{ not json");
  CHECK_THROWS_AS(read_scores(path), FormatError);
  stcnet::write_file_bytes(path, R"({"stream":"joint","sigma":0})");
  CHECK_THROWS_AS(read_scores(path), FormatError);
  stcnet::write_file_bytes(
      path, R"({"stream":"joint","sigma":0,"num_classes":2,"labels":[0],"scores":[[0.9,0.2]]})");
  CHECK_THROWS_AS(read_scores(path), FormatError);
  stcnet::write_file_bytes(
      path, R"({"stream":"joint","sigma":0,"num_classes":0,"labels":[],"scores":[]})");
  CHECK_THROWS_AS(read_scores(path), FormatError);
  std::filesystem::remove(path);
}

TEST_CASE("ensembling sums probability rows") {
  ScoreFile a = make_scores({1, 0, 1}, {{0.6, 0.4}, {0.7, 0.3}, {0.2, 0.8}});
  ScoreFile b = make_scores({1, 0, 1}, {{0.1, 0.9}, {0.55, 0.45}, {0.6, 0.4}});
  EnsembleResult r = ensemble({a, b});
  CHECK(r.per_stream_accuracy == std::vector<double>{2.0 / 3.0, 2.0 / 3.0});
  CHECK(r.fused_accuracy == 1.0);

  // fusing a stream with itself preserves its predictions
  EnsembleResult self = ensemble({a, a});
  CHECK(self.fused_accuracy == self.per_stream_accuracy[0]);

  // a uniform stream cannot move the argmax of the informative one
  ScoreFile flat = make_scores({1, 0, 1}, {{0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}});
  CHECK(ensemble({a, flat}).fused_accuracy == ensemble({a}).fused_accuracy);

  // common positive scaling changes no prediction
  ScoreFile a2 = a, b2 = b;
  for (auto* f : {&a2, &b2})
    for (auto& row : f->scores)
      for (double& x : row) x *= 2.5;
  EnsembleResult scaled = ensemble({a2, b2});
  CHECK(scaled.fused_accuracy == r.fused_accuracy);
  CHECK(scaled.per_stream_accuracy == r.per_stream_accuracy);
}

TEST_CASE("ensembling rejects mismatched inputs") {
  ScoreFile a = make_scores({0, 1}, {{0.9, 0.1}, {0.3, 0.7}});
  ScoreFile b = make_scores({0, 0}, {{0.9, 0.1}, {0.3, 0.7}});
  CHECK_THROWS_AS(ensemble({a, b}), ArgumentError);
  ScoreFile c = make_scores({0, 1}, {{0.5, 0.25, 0.25}, {0.1, 0.8, 0.1}});
  CHECK_THROWS_AS(ensemble({a, c}), ArgumentError);
  CHECK_THROWS_AS(ensemble({}), ArgumentError);
  ScoreFile d = a;
  d.scores.pop_back();
  CHECK_THROWS_AS(ensemble({d}), ArgumentError);
}

TEST_CASE("random scores sit at chance accuracy") {
  std::mt19937 rng(31);
  std::uniform_real_distribution<double> unif(0.01, 1.0);
  ScoreFile sf;
  sf.stream = "joint";
  sf.num_classes = 4;
  for (int i = 0; i < 2000; ++i) {
    std::vector<double> row(4);
    double sum = 0;
    for (auto& x : row) {
      x = unif(rng);
      sum += x;
    }
    for (auto& x : row) x /= sum;
    sf.scores.push_back(row);
    sf.labels.push_back(static_cast<int>(rng() % 4));
  }
  EnsembleResult r = ensemble({sf});
  CHECK(std::abs(r.per_stream_accuracy[0] - 0.25) < 0.05);
}

TEST_CASE("curve export writes one validated record per block and pathway") {
  auto ds = tiny_dataset(2);
  model::ModelConfig mc = tiny_model();
  mc.skeleton = ds.graph;
  mc.num_classes = 2;
  model::StcNet<float> net(mc, 3);

  std::string svg_dir = temp_path("stcnet_test_svg");
  std::filesystem::create_directories(svg_dir);
  CurveExportOptions opts;
  opts.svg_dir = svg_dir;
  std::string text = export_curves(net, ds, {0, 2}, opts);
  auto j = nlohmann::json::parse(text);
  REQUIRE(j.is_array());
  REQUIRE(j.size() == 8);  // two samples x (block 3 twice, blocks 6 and 9 once)

  int block3 = 0, motion = 0;
  for (const auto& rec : j) {
    int64_t sample = rec.at("sample").get<int64_t>();
    CHECK((sample == 0 || sample == 2));
    int blk = rec.at("block").get<int>();
    CHECK((blk == 3 || blk == 6 || blk == 9));
    if (blk == 3) ++block3;
    std::string pathway = rec.at("pathway").get<std::string>();
    CHECK((pathway == "main" || pathway == "motion"));
    if (pathway == "motion") ++motion;
    CHECK(rec.at("label").get<int>() == ds.labels[static_cast<size_t>(sample)]);
    int t_len = rec.at("T").get<int>();
    int v_len = rec.at("V").get<int>();
    CHECK(v_len == 5);
    const auto& curves = rec.at("curves");
    REQUIRE(curves.size() == 5);
    for (int v = 0; v < 5; ++v) {
      const auto& row = curves[static_cast<size_t>(v)];
      REQUIRE(static_cast<int>(row.size()) == t_len);
      CHECK(row[0].get<int>() == v);
      for (const auto& idx : row) {
        CHECK(idx.get<int>() >= 0);
        CHECK(idx.get<int>() < 5);
      }
    }
  }
  CHECK(block3 == 4);
  CHECK(motion == 2);

  for (int64_t id : {0, 2}) {
    for (const char* tail : {"_main", "_motion"}) {
      std::string f = svg_dir + "/sample" + std::to_string(id) + "_block3" + tail + ".svg";
      CHECK(std::filesystem::exists(f));
    }
    std::string f6 = svg_dir + "/sample" + std::to_string(id) + "_block6_main.svg";
    REQUIRE(std::filesystem::exists(f6));
    std::string svg = stcnet::read_file_bytes(f6);
    CHECK(svg.find("<svg") == 0);
    CHECK(svg.find("<polyline") != std::string::npos);
  }
  std::filesystem::remove_all(svg_dir);

  CHECK_THROWS_AS(export_curves(net, ds, {4}), ArgumentError);
  CHECK_THROWS_AS(export_curves(net, ds, {-1}), ArgumentError);
  model::ModelConfig plain = mc;
  plain.stc_blocks.clear();
  model::StcNet<float> no_stc(plain, 3);
  CHECK_THROWS_AS(export_curves(no_stc, ds, {0}), ArgumentError);
}

TEST_CASE("stream names parse and print") {
  CHECK(parse_stream("joint") == model::Stream::kJoint);
  CHECK(parse_stream("bone") == model::Stream::kBone);
  CHECK(stream_name(model::Stream::kJoint) == std::string("joint"));
  CHECK(stream_name(model::Stream::kBone) == std::string("bone"));
  CHECK_THROWS_AS(parse_stream("flow"), ArgumentError);
}
