#pragma once

#include <span>
#include <string>
#include <vector>

#include "stcnet/nn.hpp"

namespace stcnet::stc {

using nn::Mode;
using nn::ParamStore;
using nn::Parameter;
using nn::Tape;

struct StcConfig {
  int k = 4;
  double temperature = 1.0;
  int c_mid = 0;  // 0 -> channels / 4, floored at 1
  bool exclude_same_node = true;
  bool straight_line = false;  // pure nearest-neighbor chaining

  int effective_k() const { return straight_line ? 1 : k; }
  int resolve_c_mid(int channels) const {
    if (c_mid > 0) return c_mid;
    return channels >= 4 ? channels / 4 : 1;
  }
  void validate(int num_nodes) const;
};

// Curves traced from every starting node across consecutive frames.
template <class S>
struct CurveSet {
  int T = 0;  // frames of the source feature map (steps = T-1)
  int V = 0;
  std::vector<int> indices;  // (T-1) x V: node visited at step t by curve v
  Tensor<S> features;        // (C, T-1, V)

  int at(int t, int v) const { return indices[static_cast<size_t>(t * V + v)]; }
};

template <class S>
void validate_curveset(const CurveSet<S>& cs, int num_nodes);

// k nearest nodes of frame t+1 to F[:, t, v] in channel space, ascending by
// distance, ties broken toward the lower node index. Exclusion drops node v.
template <class S>
std::vector<int> interframe_knn(const Tensor<S>& sample, int t, int v, const StcConfig& cfg);

// Node-selection agent: shared channel embedding plus a pairwise scoring MLP
// over [query || candidate] embeddings.
template <class S>
struct StcAgent {
  Parameter<S>* embed_w = nullptr;  // (C, Cm)
  Parameter<S>* w1 = nullptr;       // (2Cm, Cm)
  Parameter<S>* b1 = nullptr;
  Parameter<S>* w2 = nullptr;       // (Cm, 1)
  Parameter<S>* b2 = nullptr;
  int c_mid = 0;
};

template <class S>
StcAgent<S> make_stc_agent(ParamStore<S>& ps, const std::string& prefix, int channels, int c_mid,
                           RngStream& rng);

template <class S>
struct BatchSelect {
  std::vector<int> index;          // chosen candidate slot per row
  typename Tape<S>::Var weights;   // (B, k) differentiable gather weights
};

// Scores candidates against queries; train mode adds Gumbel noise and emits
// straight-through one-hot weights, eval emits noise-free one-hot weights,
// soft mode emits the softmax itself.
template <class S>
BatchSelect<S> select_nodes_batch(Tape<S>& t, typename Tape<S>::Var query_embed /*(B,Cm)*/,
                                  typename Tape<S>::Var cand_embeds /*(B,k,Cm)*/,
                                  const StcAgent<S>& agent, const StcConfig& cfg, Mode mode,
                                  const Tensor<S>* gumbel_noise);

template <class S>
struct SelectResult {
  int index = -1;
  typename Tape<S>::Var weights;  // (1, k)
};

template <class S>
SelectResult<S> select_next_node(Tape<S>& t, typename Tape<S>::Var query_embed /*(1,Cm)*/,
                                 typename Tape<S>::Var cand_embeds /*(1,k,Cm)*/,
                                 const StcAgent<S>& agent, const StcConfig& cfg, Mode mode,
                                 RngStream& rng);

template <class S>
struct CurveBatch {
  std::vector<CurveSet<S>> sets;      // per sample
  typename Tape<S>::Var features;     // (N, C, T-1, V)
};

// Traces curves for a whole batch. Gumbel noise for sample n, step t, curve v,
// slot j comes from noise_base.fork(sample_ids[n]) at a counter derived from
// (t, v, j), so results do not depend on batch composition.
template <class S>
CurveBatch<S> generate_curves_batch(Tape<S>& t, typename Tape<S>::Var x /*(N,C,T,V)*/,
                                    const StcConfig& cfg, const StcAgent<S>& agent, Mode mode,
                                    const RngStream& noise_base,
                                    std::span<const int64_t> sample_ids);

// Single-sample wrapper; x is (C,T,V).
template <class S>
CurveSet<S> generate_curves(Tape<S>& t, typename Tape<S>::Var x, const StcConfig& cfg,
                            const StcAgent<S>& agent, Mode mode, const RngStream& rng,
                            typename Tape<S>::Var* features_out = nullptr);

// Curve aggregation parameters.
template <class S>
struct StcParams {
  Parameter<S>* score_intra = nullptr;    // (C)
  Parameter<S>* score_inter = nullptr;    // (C)
  Parameter<S>* reduce_intra_w = nullptr; // (C, Cm)
  Parameter<S>* reduce_intra_b = nullptr;
  Parameter<S>* reduce_inter_w = nullptr;
  Parameter<S>* reduce_inter_b = nullptr;
  Parameter<S>* phi_w = nullptr;          // (C, Cm)
  Parameter<S>* phi_b = nullptr;
  Parameter<S>* w_intra = nullptr;        // (Cm, Cm)
  Parameter<S>* w_inter = nullptr;        // (Cm, Cm)
  Parameter<S>* w_agg = nullptr;          // (2Cm, C), zero-init
  int c_mid = 0;
};

template <class S>
StcParams<S> make_stc_params(ParamStore<S>& ps, const std::string& prefix, int channels, int c_mid,
                             RngStream& rng);

// Attentive intra/inter pooling + cross attention against the input map,
// residual added; with w_agg at zero this is the identity.
template <class S>
typename Tape<S>::Var curve_aggregate_batch(Tape<S>& t, typename Tape<S>::Var f_in /*(N,C,T,V)*/,
                                            typename Tape<S>::Var curve_feats /*(N,C,T-1,V)*/,
                                            const StcParams<S>& p);

// Single-sample wrapper over a fixed CurveSet; f_in is (C,T,V).
template <class S>
typename Tape<S>::Var curve_aggregate(Tape<S>& t, typename Tape<S>::Var f_in,
                                      const CurveSet<S>& curves, const StcParams<S>& p);

// Full module: generate curves, aggregate, add residual.
template <class S>
class StcModule {
 public:
  StcModule() = default;
  StcModule(ParamStore<S>& ps, const std::string& prefix, int channels, StcConfig cfg,
            RngStream& rng);

  typename Tape<S>::Var forward(Tape<S>& t, typename Tape<S>::Var x, Mode mode,
                                const RngStream& noise_base, std::span<const int64_t> sample_ids,
                                std::vector<CurveSet<S>>* capture = nullptr) const;

  const StcConfig& config() const { return cfg_; }
  int channels() const { return channels_; }

 private:
  StcConfig cfg_;
  int channels_ = 0;
  StcAgent<S> agent_;
  StcParams<S> params_;
};

}  // namespace stcnet::stc
