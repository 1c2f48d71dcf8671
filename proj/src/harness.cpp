#include "stcnet/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "json.hpp"
#include "stcnet/binio.hpp"

namespace stcnet::harness {

using ordered_json = nlohmann::ordered_json;

namespace {

Tensor<float> gather_batch(const Tensor<float>& samples, const std::vector<int64_t>& ids) {
  int64_t c = samples.dim(1), t = samples.dim(2), v = samples.dim(3);
  int64_t stride = c * t * v;
  Tensor<float> out({static_cast<int64_t>(ids.size()), c, t, v});
  for (size_t i = 0; i < ids.size(); ++i) {
    const float* src = samples.data() + ids[i] * stride;
    std::copy(src, src + stride, out.data() + static_cast<int64_t>(i) * stride);
  }
  return out;
}

std::vector<double> softmax_row(const float* row, int64_t n) {
  double mx = row[0];
  for (int64_t i = 1; i < n; ++i) mx = std::max(mx, static_cast<double>(row[i]));
  std::vector<double> p(static_cast<size_t>(n));
  double sum = 0;
  for (int64_t i = 0; i < n; ++i) {
    p[static_cast<size_t>(i)] = std::exp(static_cast<double>(row[i]) - mx);
    sum += p[static_cast<size_t>(i)];
  }
  for (auto& x : p) x /= sum;
  return p;
}

size_t argmax(const std::vector<double>& v) {
  size_t best = 0;
  for (size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

Tensor<float> stream_input(const model::ModelConfig& cfg, const data::Dataset& ds) {
  if (cfg.stream == model::Stream::kBone) return model::bone_vector(ds.samples, ds.graph);
  return ds.samples;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ArgumentError("train: epochs must be >= 1");
  if (warmup_epochs < 0 || warmup_epochs >= epochs)
    throw ArgumentError("train: warmup_epochs must be in [0, epochs)");
  if (!(base_lr > 0) || !(final_lr > 0)) throw ArgumentError("train: learning rates must be > 0");
  if (!(momentum >= 0) || momentum >= 1) throw ArgumentError("train: momentum must be in [0, 1)");
  if (!(weight_decay >= 0)) throw ArgumentError("train: weight_decay must be >= 0");
  if (batch_size < 1) throw ArgumentError("train: batch_size must be >= 1");
  if (sigma < 0) throw ArgumentError("train: sigma must be >= 0");
}

double lr_schedule(int epoch, double step_fraction, const TrainConfig& cfg) {
  double progress = epoch + step_fraction;
  if (progress < cfg.warmup_epochs) return cfg.base_lr * progress / cfg.warmup_epochs;
  double u = (progress - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs);
  return cfg.final_lr +
         (cfg.base_lr - cfg.final_lr) * (1.0 + std::cos(std::numbers::pi * u)) / 2.0;
}

void sgd_step(nn::ParamStore<float>& params, std::vector<Tensor<float>>& velocity, double lr,
              double momentum, double weight_decay) {
  if (velocity.size() != params.size()) {
    velocity.clear();
    velocity.reserve(params.size());
    for (size_t i = 0; i < params.size(); ++i)
      velocity.emplace_back(params.at(i).value.shape, 0.0f);
  }
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params.at(i);
    if (!p.trainable) continue;
    auto& vel = velocity[i];
    for (size_t j = 0; j < p.value.v.size(); ++j) {
      double g = static_cast<double>(p.grad.v[j]) +
                 weight_decay * static_cast<double>(p.value.v[j]);
      double v = momentum * static_cast<double>(vel.v[j]) + g;
      vel.v[j] = static_cast<float>(v);
      p.value.v[j] = static_cast<float>(static_cast<double>(p.value.v[j]) -
                                        lr * (g + momentum * v));
    }
  }
}

TrainResult train(const TrainConfig& tc, model::ModelConfig mc, const data::Dataset& train_ds,
                  const data::Dataset& val_ds, const std::string& checkpoint_path,
                  const std::string& metrics_path) {
  tc.validate();
  train_ds.validate();
  val_ds.validate();
  if (train_ds.graph.num_nodes != val_ds.graph.num_nodes ||
      train_ds.graph.root != val_ds.graph.root ||
      train_ds.graph.parents() != val_ds.graph.parents())
    throw ArgumentError("train: train and val skeletons differ");

  mc.skeleton = train_ds.graph;
  mc.in_channels = static_cast<int>(train_ds.samples.dim(1));
  mc.sigma = tc.sigma;
  mc.stream = tc.stream;
  int max_label = 0;
  for (int l : train_ds.labels) max_label = std::max(max_label, l);
  for (int l : val_ds.labels) max_label = std::max(max_label, l);
  if (mc.num_classes == 0) mc.num_classes = max_label + 1;
  if (max_label >= mc.num_classes)
    throw ConfigError("train: label " + std::to_string(max_label) +
                      " exceeds num_classes = " + std::to_string(mc.num_classes));

  model::StcNet<float> net(mc, tc.seed);
  Tensor<float> tx = stream_input(net.config(), train_ds);

  int64_t n = train_ds.size();
  if (n < 1) throw ArgumentError("train: empty training set");
  int64_t steps_per_epoch = (n + tc.batch_size - 1) / tc.batch_size;

  std::ofstream mf;
  if (!metrics_path.empty()) {
    mf.open(metrics_path, std::ios::trunc);
    if (!mf) throw FormatError("cannot open file for writing: " + metrics_path);
  }

  TrainResult result;
  std::vector<Tensor<float>> velocity;
  std::vector<Tensor<float>> best_params;
  double best_val = -1;
  int best_epoch = 0;
  uint64_t global_step = 0;

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    RngStream shuffle(tc.seed, "shuffle", static_cast<uint64_t>(epoch));
    for (int64_t i = n - 1; i > 0; --i) {
      int64_t j = static_cast<int64_t>(shuffle.next_u64() % static_cast<uint64_t>(i + 1));
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }

    double loss_sum = 0;
    int64_t correct = 0;
    for (int64_t b0 = 0; b0 < n; b0 += tc.batch_size) {
      int64_t b1 = std::min(n, b0 + tc.batch_size);
      std::vector<int64_t> ids(order.begin() + b0, order.begin() + b1);
      Tensor<float> bx = gather_batch(tx, ids);
      std::vector<int> blabels;
      for (int64_t id : ids) blabels.push_back(train_ds.labels[static_cast<size_t>(id)]);

      net.params().zero_grads();
      nn::Tape<float> tape;
      RngStream noise(tc.seed, "train.gumbel", global_step);
      auto out = net.forward(tape, bx, nn::Mode::kTrain, noise, ids);
      Tensor<float> probs;
      auto loss = tape.softmax_ce(out, blabels, &probs);
      double lval = static_cast<double>(tape.val(loss).v[0]);
      if (!std::isfinite(lval)) {
        const char* tag = tape.first_nonfinite();
        throw NumericError(std::string("train: non-finite loss; first non-finite tensor: ") +
                           (tag ? tag : "loss"));
      }
      tape.backward(loss);
      double lr = lr_schedule(epoch, static_cast<double>(b0 / tc.batch_size) /
                                         static_cast<double>(steps_per_epoch),
                              tc);
      sgd_step(net.params(), velocity, lr, tc.momentum, tc.weight_decay);

      loss_sum += lval * static_cast<double>(ids.size());
      for (size_t i = 0; i < ids.size(); ++i) {
        const float* row = probs.data() + static_cast<int64_t>(i) * mc.num_classes;
        int64_t best = 0;
        for (int64_t c = 1; c < mc.num_classes; ++c)
          if (row[c] > row[best]) best = c;
        if (static_cast<int>(best) == blabels[i]) ++correct;
      }
      ++global_step;
    }

    double train_loss = loss_sum / static_cast<double>(n);
    double train_acc = static_cast<double>(correct) / static_cast<double>(n);
    EvalResult ev = evaluate(net, val_ds, tc.batch_size);

    ordered_json line{{"epoch", epoch},
                      {"lr", lr_schedule(epoch, 0.0, tc)},
                      {"train_loss", train_loss},
                      {"train_acc", train_acc},
                      {"val_acc", ev.accuracy}};
    std::string text = line.dump();
    result.metrics += text + "\n";
    if (mf) {
      mf << text << "\n";
      mf.flush();
    }
    result.train_loss.push_back(train_loss);
    result.train_acc.push_back(train_acc);
    result.val_acc.push_back(ev.accuracy);

    if (ev.accuracy > best_val) {
      best_val = ev.accuracy;
      best_epoch = epoch;
      best_params.clear();
      for (size_t i = 0; i < net.params().size(); ++i)
        best_params.push_back(net.params().at(i).value);
    }
  }

  for (size_t i = 0; i < net.params().size(); ++i)
    net.params().at(i).value = best_params[i];
  result.best_epoch = best_epoch;
  result.best_val_acc = best_val;
  if (!checkpoint_path.empty()) ckpt::save_checkpoint(checkpoint_path, net, best_epoch);
  return result;
}

EvalResult evaluate(const model::StcNet<float>& net, const data::Dataset& ds, int batch_size) {
  ds.validate();
  if (batch_size < 1) throw ArgumentError("eval: batch_size must be >= 1");
  const model::ModelConfig& cfg = net.config();
  if (ds.graph.num_nodes != cfg.skeleton.num_nodes)
    throw ConfigError("eval: dataset node count does not match the model");
  if (ds.samples.dim(1) != cfg.in_channels)
    throw ConfigError("eval: dataset channel count does not match the model");
  for (int l : ds.labels)
    if (l >= cfg.num_classes)
      throw ConfigError("eval: label " + std::to_string(l) + " exceeds the model class count");

  Tensor<float> x = stream_input(cfg, ds);
  EvalResult res;
  res.scores.stream = stream_name(cfg.stream);
  res.scores.sigma = cfg.sigma;
  res.scores.num_classes = cfg.num_classes;
  res.scores.labels = ds.labels;

  int64_t n = ds.size();
  int64_t correct = 0;
  for (int64_t b0 = 0; b0 < n; b0 += batch_size) {
    int64_t b1 = std::min(n, b0 + batch_size);
    std::vector<int64_t> ids;
    for (int64_t i = b0; i < b1; ++i) ids.push_back(i);
    Tensor<float> scores = net.scores(gather_batch(x, ids), nn::Mode::kEval);
    for (size_t i = 0; i < ids.size(); ++i) {
      std::vector<double> p =
          softmax_row(scores.data() + static_cast<int64_t>(i) * cfg.num_classes,
                      cfg.num_classes);
      if (static_cast<int>(argmax(p)) == ds.labels[static_cast<size_t>(ids[i])]) ++correct;
      res.scores.scores.push_back(std::move(p));
    }
  }
  res.accuracy = n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0;
  return res;
}

void write_scores(const ScoreFile& sf, const std::string& path) {
  if (sf.labels.size() != sf.scores.size())
    throw ArgumentError("scores: label count does not match the score rows");
  for (const auto& row : sf.scores) {
    if (static_cast<int>(row.size()) != sf.num_classes)
      throw ArgumentError("scores: row length does not match num_classes");
    double sum = 0;
    for (double x : row) sum += x;
    if (std::abs(sum - 1.0) > 1e-6)
      throw ArgumentError("scores: probability row does not sum to 1");
  }
  ordered_json j{{"stream", sf.stream},
                 {"sigma", sf.sigma},
                 {"num_classes", sf.num_classes},
                 {"labels", sf.labels},
                 {"scores", sf.scores}};
  write_file_bytes(path, j.dump());
}

ScoreFile read_scores(const std::string& path) {
  nlohmann::json j = nlohmann::json::parse(read_file_bytes(path), nullptr, false);
  if (j.is_discarded()) throw FormatError("scores: invalid JSON in " + path);
  ScoreFile sf;
  try {
    sf.stream = j.at("stream").get<std::string>();
    sf.sigma = j.at("sigma").get<int>();
    sf.num_classes = j.at("num_classes").get<int>();
    sf.labels = j.at("labels").get<std::vector<int>>();
    sf.scores = j.at("scores").get<std::vector<std::vector<double>>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("scores: ") + e.what());
  }
  if (sf.num_classes < 1) throw FormatError("scores: num_classes must be positive");
  if (sf.labels.size() != sf.scores.size())
    throw FormatError("scores: label count does not match the score rows");
  for (const auto& row : sf.scores) {
    if (static_cast<int>(row.size()) != sf.num_classes)
      throw FormatError("scores: row length does not match num_classes");
    double sum = 0;
    for (double x : row) sum += x;
    if (std::abs(sum - 1.0) > 1e-6)
      throw FormatError("scores: probability row does not sum to 1");
  }
  return sf;
}

EnsembleResult ensemble(const std::vector<ScoreFile>& files) {
  if (files.empty()) throw ArgumentError("ensemble: no score files");
  const ScoreFile& f0 = files[0];
  for (const ScoreFile& f : files) {
    if (f.num_classes != f0.num_classes) throw ArgumentError("ensemble: class counts differ");
    if (f.labels != f0.labels) throw ArgumentError("ensemble: sample sets differ");
    if (f.scores.size() != f.labels.size())
      throw ArgumentError("ensemble: label count does not match the score rows");
  }
  size_t n = f0.labels.size();
  EnsembleResult res;
  for (const ScoreFile& f : files) {
    int64_t correct = 0;
    for (size_t i = 0; i < n; ++i)
      if (static_cast<int>(argmax(f.scores[i])) == f.labels[i]) ++correct;
    res.per_stream_accuracy.push_back(n ? static_cast<double>(correct) / n : 0.0);
  }
  int64_t correct = 0;
  for (size_t i = 0; i < n; ++i) {
    std::vector<double> fused(static_cast<size_t>(f0.num_classes), 0.0);
    for (const ScoreFile& f : files)
      for (size_t c = 0; c < fused.size(); ++c) fused[c] += f.scores[i][c];
    if (static_cast<int>(argmax(fused)) == f0.labels[i]) ++correct;
  }
  res.fused_accuracy = n ? static_cast<double>(correct) / n : 0.0;
  return res;
}

namespace {

// Minimal static rendering: frame-0 joints as circles, each curve as a
// polyline through the positions of its selected nodes at their frames.
std::string render_svg(const data::Dataset& ds, int64_t sample, const stc::CurveSet<float>& cs) {
  int64_t t_in = ds.samples.dim(2);
  int v = cs.V;
  auto px = [&](int t, int node) {
    return static_cast<double>(ds.samples.at(sample, 0, t, node));
  };
  bool has_y = ds.samples.dim(1) > 1;
  auto py = [&](int t, int node) {
    return has_y ? static_cast<double>(ds.samples.at(sample, 1, t, node)) : 0.0;
  };
  double xmin = 1e30, xmax = -1e30, ymin = 1e30, ymax = -1e30;
  for (int64_t t = 0; t < t_in; ++t)
    for (int n = 0; n < v; ++n) {
      xmin = std::min(xmin, px(static_cast<int>(t), n));
      xmax = std::max(xmax, px(static_cast<int>(t), n));
      ymin = std::min(ymin, py(static_cast<int>(t), n));
      ymax = std::max(ymax, py(static_cast<int>(t), n));
    }
  double span = std::max({xmax - xmin, ymax - ymin, 1e-6});
  double scale = 400.0 / span;
  auto sx = [&](double x) { return 10.0 + (x - xmin) * scale; };
  auto sy = [&](double y) { return 10.0 + (ymax - y) * scale; };
  // Map a curve step to a source frame so the polyline tracks real motion.
  auto frame_of = [&](int step) {
    return static_cast<int>(std::min<int64_t>(t_in - 1, static_cast<int64_t>(step) * t_in / cs.T));
  };

  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"420\" height=\"420\">\n";
  std::vector<int> par = ds.graph.parents();
  for (int n = 0; n < v; ++n) {
    if (par[static_cast<size_t>(n)] < 0) continue;
    int p = par[static_cast<size_t>(n)];
    s += "<line x1=\"" + std::to_string(sx(px(0, n))) + "\" y1=\"" + std::to_string(sy(py(0, n))) +
         "\" x2=\"" + std::to_string(sx(px(0, p))) + "\" y2=\"" + std::to_string(sy(py(0, p))) +
         "\" stroke=\"#cccccc\" stroke-width=\"1\"/>\n";
  }
  for (int start = 0; start < v; ++start) {
    int hue = start * 360 / v;
    std::string pts = std::to_string(sx(px(frame_of(0), start))) + "," +
                      std::to_string(sy(py(frame_of(0), start)));
    for (int t = 0; t + 1 < cs.T; ++t) {
      int node = cs.at(t, start);
      int f = frame_of(t + 1);
      pts += " " + std::to_string(sx(px(f, node))) + "," + std::to_string(sy(py(f, node)));
    }
    s += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"hsl(" + std::to_string(hue) +
         ",70%,45%)\" stroke-width=\"1.2\" opacity=\"0.8\"/>\n";
  }
  for (int n = 0; n < v; ++n)
    s += "<circle cx=\"" + std::to_string(sx(px(0, n))) + "\" cy=\"" +
         std::to_string(sy(py(0, n))) + "\" r=\"3\" fill=\"#333333\"/>\n";
  s += "</svg>\n";
  return s;
}

}  // namespace

std::string export_curves(const model::StcNet<float>& net, const data::Dataset& ds,
                          const std::vector<int64_t>& samples, const CurveExportOptions& opts) {
  ds.validate();
  const model::ModelConfig& cfg = net.config();
  if (cfg.stc_blocks.empty()) throw ArgumentError("export: the model has no stc blocks");
  if (ds.graph.num_nodes != cfg.skeleton.num_nodes)
    throw ConfigError("export: dataset node count does not match the model");
  if (ds.samples.dim(1) != cfg.in_channels)
    throw ConfigError("export: dataset channel count does not match the model");

  Tensor<float> x = stream_input(cfg, ds);
  ordered_json out = ordered_json::array();
  for (int64_t id : samples) {
    if (id < 0 || id >= ds.size()) throw ArgumentError("export: sample id out of range");
    model::StcNet<float>::Capture cap;
    std::array<int64_t, 1> ids{id};
    net.scores(gather_batch(x, {id}), nn::Mode::kEval, RngStream(), ids, &cap);
    for (size_t e = 0; e < cap.blocks.size(); ++e) {
      const stc::CurveSet<float>& cs = cap.curves[e][0];
      stc::validate_curveset(cs, cfg.skeleton.num_nodes);
      ordered_json curves = ordered_json::array();
      for (int v = 0; v < cs.V; ++v) {
        std::vector<int> row{v};
        for (int t = 0; t + 1 < cs.T; ++t) row.push_back(cs.at(t, v));
        curves.push_back(row);
      }
      ordered_json rec{{"sample", id},
                       {"block", cap.blocks[e]},
                       {"pathway", cap.motion_pathway[e] ? "motion" : "main"},
                       {"label", ds.labels[static_cast<size_t>(id)]},
                       {"T", cs.T},
                       {"V", cs.V},
                       {"curves", curves}};
      out.push_back(rec);
      if (!opts.svg_dir.empty()) {
        std::string name = opts.svg_dir + "/sample" + std::to_string(id) + "_block" +
                           std::to_string(cap.blocks[e]) +
                           (cap.motion_pathway[e] ? "_motion" : "_main") + ".svg";
        write_file_bytes(name, render_svg(ds, id, cs));
      }
    }
  }
  return out.dump(2);
}

const char* stream_name(model::Stream s) {
  return s == model::Stream::kBone ? "bone" : "joint";
}

model::Stream parse_stream(const std::string& s) {
  if (s == "joint") return model::Stream::kJoint;
  if (s == "bone") return model::Stream::kBone;
  throw ArgumentError("unknown stream: " + s + " (expected joint or bone)");
}

}  // namespace stcnet::harness
