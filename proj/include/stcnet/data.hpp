#pragma once

#include <string>
#include <utility>
#include <vector>

#include "stcnet/graph.hpp"
#include "stcnet/tensor.hpp"

namespace stcnet::data {

struct SynthSpec {
  int num_nodes = 15;
  int frames = 32;
  int num_classes = 4;
  int per_class = 100;
  double noise_std = 0.05;
  uint64_t seed = 1;

  void validate() const;
};

struct Dataset {
  graph::SkeletonGraph graph;
  Tensor<float> samples;  // (N, 3, T, V)
  std::vector<int> labels;

  int64_t size() const { return samples.rank() == 4 ? samples.dim(0) : 0; }
  Tensor<float> sample(int64_t n) const;  // one (C, T, V) slice
  void validate() const;
};

// Body-like tree: spine chain plus two arms (at the spine top) and two legs
// (at the root). Chain length is num_nodes/5; the spine absorbs the remainder.
graph::SkeletonGraph body_graph(int num_nodes);

// Joints moved by the given class (one limb chain; class picks limb and tempo).
std::vector<int> animated_joints(int num_nodes, int cls);

Dataset generate_synthetic(const SynthSpec& spec);

// Per class: first train_per_class samples to the first set, the rest to the second.
std::pair<Dataset, Dataset> split_per_class(const Dataset& ds, int train_per_class);

void write_dataset(const Dataset& ds, const std::string& path);
Dataset read_dataset(const std::string& path);

// Center on the root joint of frame 0, then resize the time axis by uniform
// index sampling (repeat-pads when the target is longer).
Dataset preprocess(const Dataset& ds, int target_frames);

}  // namespace stcnet::data
