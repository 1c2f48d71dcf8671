#pragma once

#include <string>
#include <vector>

#include "stcnet/checkpoint.hpp"
#include "stcnet/data.hpp"
#include "stcnet/model.hpp"

namespace stcnet::harness {

struct TrainConfig {
  int epochs = 90;
  int warmup_epochs = 5;
  double base_lr = 0.1;
  double final_lr = 1e-4;
  double momentum = 0.9;  // Nesterov
  double weight_decay = 4e-4;
  int batch_size = 16;
  uint64_t seed = 1;
  int sigma = 0;
  model::Stream stream = model::Stream::kJoint;

  void validate() const;
};

// Linear warmup from 0 over warmup_epochs, then cosine from base_lr to
// final_lr; step_fraction in [0,1] is the position within the epoch.
double lr_schedule(int epoch, double step_fraction, const TrainConfig& cfg);

// One Nesterov SGD update over every trainable parameter; weight decay is
// coupled (added to the raw gradient). velocity must match the store layout.
void sgd_step(nn::ParamStore<float>& params, std::vector<Tensor<float>>& velocity, double lr,
              double momentum, double weight_decay);

struct TrainResult {
  std::string metrics;  // JSON-lines, one object per epoch
  std::vector<double> train_loss, train_acc, val_acc;
  int best_epoch = 0;
  double best_val_acc = 0;
};

// Trains on train_ds, tracks val_ds accuracy, and writes the best-val-epoch
// checkpoint. Skeleton/channels/classes and sigma/stream are filled into mc
// from the dataset and train config. Empty paths skip the respective file.
TrainResult train(const TrainConfig& tc, model::ModelConfig mc, const data::Dataset& train_ds,
                  const data::Dataset& val_ds, const std::string& checkpoint_path = "",
                  const std::string& metrics_path = "");

struct ScoreFile {
  std::string stream;  // "joint" or "bone"
  int sigma = 0;
  int num_classes = 0;
  std::vector<int> labels;
  std::vector<std::vector<double>> scores;  // post-softmax rows, sum to 1
};

struct EvalResult {
  double accuracy = 0;
  ScoreFile scores;
};

// Noise-free eval forward over the whole dataset; applies the model's stream
// transform (bone vectors) to the raw coordinates first.
EvalResult evaluate(const model::StcNet<float>& net, const data::Dataset& ds,
                    int batch_size = 16);

void write_scores(const ScoreFile& sf, const std::string& path);
ScoreFile read_scores(const std::string& path);

struct EnsembleResult {
  double fused_accuracy = 0;
  std::vector<double> per_stream_accuracy;
};

// Unweighted sum of probability rows; argmax of the fused row predicts.
EnsembleResult ensemble(const std::vector<ScoreFile>& files);

struct CurveExportOptions {
  std::string svg_dir;  // empty: no rendering
};

// JSON array with one record per (sample, STC block): the per-starting-node
// curve index rows, starting node included.
std::string export_curves(const model::StcNet<float>& net, const data::Dataset& ds,
                          const std::vector<int64_t>& samples,
                          const CurveExportOptions& opts = {});

const char* stream_name(model::Stream s);
model::Stream parse_stream(const std::string& s);

}  // namespace stcnet::harness
