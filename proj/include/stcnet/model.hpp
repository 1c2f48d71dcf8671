#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "stcnet/graph.hpp"
#include "stcnet/stc.hpp"

namespace stcnet::model {

using nn::Mode;
using nn::ParamStore;
using nn::Parameter;
using nn::Tape;

enum class Stream { kJoint, kBone };

struct ModelConfig {
  graph::SkeletonGraph skeleton;
  int in_channels = 3;
  std::array<int, 10> block_channels{64, 64, 64, 64, 128, 128, 128, 256, 256, 256};
  std::array<int, 10> temporal_strides{1, 1, 1, 1, 2, 1, 1, 2, 1, 1};
  std::vector<int> stc_blocks{3, 6, 9};  // 1-indexed
  int sigma = 0;
  stc::StcConfig stc;
  int num_classes = 0;
  Stream stream = Stream::kJoint;

  void validate() const;
  bool is_stc_block(int block_1indexed) const;
};

// Uniformly rescales block widths (rounded to a multiple of 4, floor 4).
ModelConfig scaled_channels(ModelConfig cfg, double width_scale);

// Frame-difference features; the final frame is zero so T is preserved.
template <class S>
Tensor<S> motion_vector(const Tensor<S>& x);

// Joint-minus-parent features; the root column keeps its own coordinates.
template <class S>
Tensor<S> bone_vector(const Tensor<S>& x, const graph::SkeletonGraph& g);

// One directional graph convolution stage: sum_k A_k F W_k.
template <class S>
typename Tape<S>::Var dkgc_forward(Tape<S>& t, typename Tape<S>::Var f,
                                   const graph::AdjacencyKernelSet& kernels,
                                   const std::array<Parameter<S>*, 3>& w);

template <class S>
class StcNet {
 public:
  struct Capture {
    std::vector<int> blocks;                             // 1-indexed block ids
    std::vector<bool> motion_pathway;                    // true for the motion copy
    std::vector<std::vector<stc::CurveSet<S>>> curves;   // per block, per sample
  };

  StcNet(ModelConfig cfg, uint64_t seed);
  StcNet(StcNet&&) = default;
  StcNet& operator=(StcNet&&) = default;

  // batch is (N, in_channels, T, V); returns (N, num_classes) raw scores.
  typename Tape<S>::Var forward(Tape<S>& t, const Tensor<S>& batch, Mode mode,
                                const RngStream& noise_base = RngStream(),
                                std::span<const int64_t> sample_ids = {},
                                Capture* capture = nullptr) const;

  // Grad-free convenience forward.
  Tensor<S> scores(const Tensor<S>& batch, Mode mode,
                   const RngStream& noise_base = RngStream(),
                   std::span<const int64_t> sample_ids = {}, Capture* capture = nullptr) const;

  ParamStore<S>& params() { return params_; }
  const ParamStore<S>& params() const { return params_; }
  const ModelConfig& config() const { return cfg_; }

 private:
  struct Block {
    int cin = 0, cout = 0, stride = 1;
    bool use_stc = false;
    // spatial
    stc::StcModule<S> stc_module;
    Parameter<S>* pw_w = nullptr;
    std::array<Parameter<S>*, 3> w_d1{}, w_d2{};
    nn::BnParams<S> sp_bn;
    // temporal: four branches, each with a pointwise reduction
    std::array<Parameter<S>*, 4> red{};
    std::array<nn::BnParams<S>, 4> red_bn;
    Parameter<S>* conv1 = nullptr;
    Parameter<S>* conv2 = nullptr;
    nn::BnParams<S> conv1_bn, conv2_bn, pool_bn;
    // residual projection (absent when cin==cout and stride==1)
    Parameter<S>* res_w = nullptr;
    nn::BnParams<S> res_bn;
  };

  Block make_block(const std::string& prefix, int block_1indexed, int cin, int cout, int stride,
                   RngStream& rng);
  typename Tape<S>::Var block_forward(Tape<S>& t, const Block& b, typename Tape<S>::Var x,
                                      Mode mode, const RngStream& noise_base,
                                      std::span<const int64_t> sample_ids, int block_1indexed,
                                      int noise_slot, Capture* capture) const;

  ModelConfig cfg_;
  ParamStore<S> params_;
  graph::AdjacencyKernelSet kernels_d1_, kernels_d2_;
  nn::BnParams<S> data_bn_joint_, data_bn_motion_;
  std::vector<Block> path_a_, path_b_;  // blocks 1..4, coordinate and motion pathways
  std::vector<Block> trunk_;            // blocks 5..10
  Parameter<S>* cls_w_ = nullptr;
  Parameter<S>* cls_b_ = nullptr;
};

int64_t count_params(const ModelConfig& cfg);
// Forward FLOPs for batch 1 at T frames; multiply-accumulate counts as 2.
double count_flops(const ModelConfig& cfg, int frames);

}  // namespace stcnet::model
