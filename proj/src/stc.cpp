#include "stcnet/stc.hpp"

#include <algorithm>
#include <cmath>

namespace stcnet::stc {

void StcConfig::validate(int num_nodes) const {
  int kq = effective_k();
  int bound = exclude_same_node ? num_nodes - 1 : num_nodes;
  if (kq < 1 || kq > bound)
    throw ArgumentError("stc: k must be in [1, " + std::to_string(bound) + "], got " +
                        std::to_string(kq));
  if (!(temperature > 0)) throw ArgumentError("stc: temperature must be positive");
}

template <class S>
void validate_curveset(const CurveSet<S>& cs, int num_nodes) {
  if (cs.T < 2 || cs.V < 1) throw ShapeError("curveset: T >= 2 and V >= 1 required");
  if (static_cast<int>(cs.indices.size()) != (cs.T - 1) * cs.V)
    throw ShapeError("curveset: index count mismatch");
  for (int idx : cs.indices)
    if (idx < 0 || idx >= num_nodes) throw ArgumentError("curveset: node index out of range");
  if (cs.features.rank() != 3 || cs.features.dim(1) != cs.T - 1 || cs.features.dim(2) != cs.V)
    throw ShapeError("curveset: feature shape mismatch");
}

namespace {

// k best (squared distance, node) pairs ascending, ties toward lower index.
template <class S>
void knn_into(const S* query, const Tensor<S>& x, int64_t n, int64_t t1, int exclude, int kq,
              std::vector<std::pair<double, int>>& scratch, int32_t* out) {
  int64_t c = x.dim(1), tdim = x.dim(2), vdim = x.dim(3);
  scratch.clear();
  for (int64_t u = 0; u < vdim; ++u) {
    if (u == exclude) continue;
    double d2 = 0;
    const S* base = x.data() + ((n * c) * tdim + t1) * vdim + u;
    for (int64_t ch = 0; ch < c; ++ch) {
      double d = static_cast<double>(query[ch]) - static_cast<double>(base[ch * tdim * vdim]);
      d2 += d * d;
    }
    scratch.emplace_back(d2, static_cast<int>(u));
  }
  std::sort(scratch.begin(), scratch.end());
  for (int j = 0; j < kq; ++j) out[j] = scratch[static_cast<size_t>(j)].second;
}

}  // namespace

template <class S>
std::vector<int> interframe_knn(const Tensor<S>& sample, int t, int v, const StcConfig& cfg) {
  if (sample.rank() != 3) throw ShapeError("interframe_knn: (C,T,V) sample expected");
  int64_t tdim = sample.dim(1), vdim = sample.dim(2);
  if (t < 0 || t >= tdim - 1) throw ArgumentError("interframe_knn: frame out of range");
  if (v < 0 || v >= vdim) throw ArgumentError("interframe_knn: node out of range");
  cfg.validate(static_cast<int>(vdim));
  int kq = cfg.effective_k();
  Tensor<S> x4 = sample;
  x4.shape = {1, sample.dim(0), tdim, vdim};
  std::vector<S> q(static_cast<size_t>(sample.dim(0)));
  for (int64_t ch = 0; ch < sample.dim(0); ++ch) q[static_cast<size_t>(ch)] = sample.at(ch, t, v);
  std::vector<std::pair<double, int>> scratch;
  std::vector<int32_t> out(static_cast<size_t>(kq));
  knn_into(q.data(), x4, 0, t + 1, cfg.exclude_same_node ? v : -1, kq, scratch, out.data());
  return std::vector<int>(out.begin(), out.end());
}

template <class S>
StcAgent<S> make_stc_agent(ParamStore<S>& ps, const std::string& prefix, int channels, int c_mid,
                           RngStream& rng) {
  if (c_mid < 1) throw ConfigError("stc: c_mid must be >= 1");
  StcAgent<S> a;
  a.c_mid = c_mid;
  a.embed_w = &ps.add(prefix + ".embed.w",
                      nn::xavier_uniform<S>({channels, c_mid}, channels, c_mid, rng));
  a.w1 = &ps.add(prefix + ".agent.w1",
                 nn::xavier_uniform<S>({2 * c_mid, c_mid}, 2 * c_mid, c_mid, rng));
  a.b1 = &ps.add(prefix + ".agent.b1", Tensor<S>({c_mid}, S(0)));
  a.w2 = &ps.add(prefix + ".agent.w2", nn::xavier_uniform<S>({c_mid, 1}, c_mid, 1, rng));
  a.b2 = &ps.add(prefix + ".agent.b2", Tensor<S>({1}, S(0)));
  return a;
}

template <class S>
BatchSelect<S> select_nodes_batch(Tape<S>& t, typename Tape<S>::Var query_embed,
                                  typename Tape<S>::Var cand_embeds, const StcAgent<S>& agent,
                                  const StcConfig& cfg, Mode mode, const Tensor<S>* gumbel_noise) {
  using Var = typename Tape<S>::Var;
  const Tensor<S>& qv = t.val(query_embed);
  const Tensor<S>& cv = t.val(cand_embeds);
  if (qv.rank() != 2 || cv.rank() != 3 || qv.dim(0) != cv.dim(0) || qv.dim(1) != cv.dim(2))
    throw ShapeError("select: query " + qv.shape_str() + " vs candidates " + cv.shape_str());
  int64_t b = qv.dim(0), k = cv.dim(1), cm = qv.dim(1);
  Var pair = t.pair_concat(query_embed, cand_embeds);
  Var flat = t.reshape(pair, {b * k, 2 * cm});
  Var h = t.relu(t.linear(flat, t.param(*agent.w1), t.param(*agent.b1)));
  Var sc = t.reshape(t.linear(h, t.param(*agent.w2), t.param(*agent.b2)), {b, k});
  Var z = sc;
  if (mode == Mode::kTrain) {
    if (!gumbel_noise || !gumbel_noise->same_shape(t.val(sc)))
      throw ShapeError("select: gumbel noise shape mismatch");
    z = t.add_const(z, *gumbel_noise);
  }
  z = t.scale(z, static_cast<S>(1.0 / cfg.temperature));
  Var soft = t.softmax_lastdim(z);
  BatchSelect<S> out;
  out.index.resize(static_cast<size_t>(b));
  const Tensor<S>& zv = t.val(z);
  for (int64_t i = 0; i < b; ++i) {
    int best = 0;
    for (int64_t j = 1; j < k; ++j)
      if (zv.at(i, j) > zv.at(i, best)) best = static_cast<int>(j);
    out.index[static_cast<size_t>(i)] = best;
  }
  out.weights = mode == Mode::kSoft ? soft : t.straight_through(soft, out.index);
  return out;
}

template <class S>
SelectResult<S> select_next_node(Tape<S>& t, typename Tape<S>::Var query_embed,
                                 typename Tape<S>::Var cand_embeds, const StcAgent<S>& agent,
                                 const StcConfig& cfg, Mode mode, RngStream& rng) {
  int64_t k = t.val(cand_embeds).dim(1);
  Tensor<S> noise({1, k});
  if (mode == Mode::kTrain)
    for (int64_t j = 0; j < k; ++j)
      noise.at(0, j) = static_cast<S>(-std::log(-std::log(rng.next_u01())));
  BatchSelect<S> sel = select_nodes_batch(t, query_embed, cand_embeds, agent, cfg, mode,
                                          mode == Mode::kTrain ? &noise : nullptr);
  SelectResult<S> out;
  out.index = sel.index[0];
  out.weights = sel.weights;
  return out;
}

template <class S>
CurveBatch<S> generate_curves_batch(Tape<S>& t, typename Tape<S>::Var x, const StcConfig& cfg,
                                    const StcAgent<S>& agent, Mode mode,
                                    const RngStream& noise_base,
                                    std::span<const int64_t> sample_ids) {
  using Var = typename Tape<S>::Var;
  const Tensor<S>& xv = t.val(x);
  if (xv.rank() != 4) throw ShapeError("generate_curves: rank-4 input expected");
  int64_t n = xv.dim(0), c = xv.dim(1), tdim = xv.dim(2), vdim = xv.dim(3);
  if (tdim < 2) throw ArgumentError("generate_curves: at least two frames required");
  cfg.validate(static_cast<int>(vdim));
  if (!sample_ids.empty() && static_cast<int64_t>(sample_ids.size()) != n)
    throw ShapeError("generate_curves: sample id count mismatch");
  int kq = cfg.effective_k();
  int64_t b = n * vdim;

  std::vector<RngStream> noise(static_cast<size_t>(n));
  if (mode == Mode::kTrain)
    for (int64_t i = 0; i < n; ++i)
      noise[static_cast<size_t>(i)] =
          noise_base.fork(sample_ids.empty() ? static_cast<uint64_t>(i)
                                             : static_cast<uint64_t>(sample_ids[i]));

  CurveBatch<S> out;
  out.sets.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    out.sets[static_cast<size_t>(i)].T = static_cast<int>(tdim);
    out.sets[static_cast<size_t>(i)].V = static_cast<int>(vdim);
    out.sets[static_cast<size_t>(i)].indices.assign(static_cast<size_t>((tdim - 1) * vdim), -1);
  }

  Var embed_w = t.param(*agent.embed_w);

  // start: each curve sits on its own node at frame 0
  std::vector<int32_t> idx0(static_cast<size_t>(b));
  std::vector<int> prev(static_cast<size_t>(b));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t cvn = 0; cvn < vdim; ++cvn) {
      idx0[static_cast<size_t>(i * vdim + cvn)] = static_cast<int32_t>(cvn);
      prev[static_cast<size_t>(i * vdim + cvn)] = static_cast<int>(cvn);
    }
  Var cur = t.reshape(t.gather_nodes(x, 0, idx0, vdim, 1), {b, c});

  std::vector<Var> steps;
  std::vector<std::pair<double, int>> scratch;
  std::vector<int32_t> idx(static_cast<size_t>(b * kq));
  for (int64_t step = 0; step + 1 < tdim; ++step) {
    const Tensor<S>& curv = t.val(cur);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t cvn = 0; cvn < vdim; ++cvn) {
        int64_t row = i * vdim + cvn;
        knn_into(curv.data() + row * c, xv, i, step + 1,
                 cfg.exclude_same_node ? prev[static_cast<size_t>(row)] : -1, kq, scratch,
                 idx.data() + row * kq);
      }
    t.add_flops(3.0 * static_cast<double>(b) * vdim * c);
    Var cand = t.gather_nodes(x, step + 1, idx, vdim, kq);
    Var q_emb = t.linear(cur, embed_w);
    Var cand_emb =
        t.reshape(t.linear(t.reshape(cand, {b * kq, c}), embed_w), {b, kq, agent.c_mid});
    Tensor<S> gnoise({b, kq});
    if (mode == Mode::kTrain)
      for (int64_t i = 0; i < n; ++i)
        for (int64_t cvn = 0; cvn < vdim; ++cvn)
          for (int64_t j = 0; j < kq; ++j) {
            double u = noise[static_cast<size_t>(i)].u01_at(
                static_cast<uint64_t>((step * vdim + cvn) * kq + j));
            gnoise.at(i * vdim + cvn, j) = static_cast<S>(-std::log(-std::log(u)));
          }
    BatchSelect<S> sel = select_nodes_batch(t, q_emb, cand_emb, agent, cfg, mode,
                                            mode == Mode::kTrain ? &gnoise : nullptr);
    for (int64_t row = 0; row < b; ++row) {
      int node = idx[static_cast<size_t>(row * kq + sel.index[static_cast<size_t>(row)])];
      out.sets[static_cast<size_t>(row / vdim)]
          .indices[static_cast<size_t>(step * vdim + row % vdim)] = node;
      prev[static_cast<size_t>(row)] = node;
    }
    Var next = t.weighted_gather(cand, sel.weights);
    steps.push_back(next);
    cur = next;
  }
  out.features = t.stack_steps(steps, n, vdim);
  const Tensor<S>& fv = t.val(out.features);
  for (int64_t i = 0; i < n; ++i) {
    Tensor<S> f({c, tdim - 1, vdim});
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t st = 0; st < tdim - 1; ++st)
        for (int64_t cvn = 0; cvn < vdim; ++cvn) f.at(ch, st, cvn) = fv.at(i, ch, st, cvn);
    out.sets[static_cast<size_t>(i)].features = std::move(f);
  }
  return out;
}

template <class S>
CurveSet<S> generate_curves(Tape<S>& t, typename Tape<S>::Var x, const StcConfig& cfg,
                            const StcAgent<S>& agent, Mode mode, const RngStream& rng,
                            typename Tape<S>::Var* features_out) {
  const Tensor<S>& xv = t.val(x);
  if (xv.rank() != 3) throw ShapeError("generate_curves: (C,T,V) sample expected");
  typename Tape<S>::Var x4 = t.reshape(x, {1, xv.dim(0), xv.dim(1), xv.dim(2)});
  CurveBatch<S> batch = generate_curves_batch(t, x4, cfg, agent, mode, rng, {});
  if (features_out) *features_out = batch.features;
  return std::move(batch.sets[0]);
}

template <class S>
StcParams<S> make_stc_params(ParamStore<S>& ps, const std::string& prefix, int channels, int c_mid,
                             RngStream& rng) {
  if (c_mid < 1) throw ConfigError("stc: c_mid must be >= 1");
  StcParams<S> p;
  p.c_mid = c_mid;
  int64_t c = channels, cm = c_mid;
  p.score_intra = &ps.add(prefix + ".score_intra", nn::xavier_uniform<S>({c}, c, 1, rng));
  p.score_inter = &ps.add(prefix + ".score_inter", nn::xavier_uniform<S>({c}, c, 1, rng));
  p.reduce_intra_w =
      &ps.add(prefix + ".reduce_intra.w", nn::xavier_uniform<S>({c, cm}, c, cm, rng));
  p.reduce_intra_b = &ps.add(prefix + ".reduce_intra.b", Tensor<S>({cm}, S(0)));
  p.reduce_inter_w =
      &ps.add(prefix + ".reduce_inter.w", nn::xavier_uniform<S>({c, cm}, c, cm, rng));
  p.reduce_inter_b = &ps.add(prefix + ".reduce_inter.b", Tensor<S>({cm}, S(0)));
  p.phi_w = &ps.add(prefix + ".phi.w", nn::xavier_uniform<S>({c, cm}, c, cm, rng));
  p.phi_b = &ps.add(prefix + ".phi.b", Tensor<S>({cm}, S(0)));
  p.w_intra = &ps.add(prefix + ".w_intra", nn::xavier_uniform<S>({cm, cm}, cm, cm, rng));
  p.w_inter = &ps.add(prefix + ".w_inter", nn::xavier_uniform<S>({cm, cm}, cm, cm, rng));
  p.w_agg = &ps.add(prefix + ".w_agg", Tensor<S>({2 * cm, c}, S(0)));
  return p;
}

template <class S>
typename Tape<S>::Var curve_aggregate_batch(Tape<S>& t, typename Tape<S>::Var f_in,
                                            typename Tape<S>::Var curve_feats,
                                            const StcParams<S>& p) {
  using Var = typename Tape<S>::Var;
  const Tensor<S>& fv = t.val(f_in);
  const Tensor<S>& cv = t.val(curve_feats);
  if (fv.rank() != 4 || cv.rank() != 4) throw ShapeError("curve_aggregate: rank-4 inputs expected");
  int64_t n = fv.dim(0), c = fv.dim(1), tdim = fv.dim(2), vdim = fv.dim(3);
  if (cv.dim(0) != n || cv.dim(1) != c || cv.dim(2) != tdim - 1 || cv.dim(3) != vdim)
    throw ShapeError("curve_aggregate: curve features " + cv.shape_str() + " do not match input " +
                     fv.shape_str());

  // pool over curves (intra: along the step axis stays, curve axis pooled)
  Var intra = t.attnpool_last(curve_feats, t.param(*p.score_intra));  // (N,C,T-1)
  Var inter = t.attnpool_mid(curve_feats, t.param(*p.score_inter));   // (N,C,V)
  Var curve_intra =
      t.pointwise(intra, t.param(*p.reduce_intra_w), t.param(*p.reduce_intra_b));  // (N,Cm,T-1)
  Var curve_inter =
      t.pointwise(inter, t.param(*p.reduce_inter_w), t.param(*p.reduce_inter_b));  // (N,Cm,V)

  Var phi = t.pointwise(f_in, t.param(*p.phi_w), t.param(*p.phi_b));  // (N,Cm,T,V)
  int64_t cm = p.c_mid;
  Var phi_flat = t.reshape(phi, {n, cm, tdim * vdim});

  // attention over the curve axis; (N, T*V, M) rows softmaxed over M
  Var attn_intra = t.softmax_lastdim(t.bmm(phi_flat, curve_intra, true, false));
  Var attn_inter = t.softmax_lastdim(t.bmm(phi_flat, curve_inter, true, false));
  Var f_intra = t.bmm(t.pointwise(curve_intra, t.param(*p.w_intra)), attn_intra, false, true);
  Var f_inter = t.bmm(t.pointwise(curve_inter, t.param(*p.w_inter)), attn_inter, false, true);

  Var cat = t.concat_dim1({f_intra, f_inter});             // (N, 2Cm, T*V)
  Var agg = t.pointwise(cat, t.param(*p.w_agg));           // (N, C, T*V)
  return t.add(f_in, t.reshape(agg, {n, c, tdim, vdim}));
}

template <class S>
typename Tape<S>::Var curve_aggregate(Tape<S>& t, typename Tape<S>::Var f_in,
                                      const CurveSet<S>& curves, const StcParams<S>& p) {
  const Tensor<S>& fv = t.val(f_in);
  if (fv.rank() != 3) throw ShapeError("curve_aggregate: (C,T,V) sample expected");
  int64_t c = fv.dim(0), tdim = fv.dim(1), vdim = fv.dim(2);
  typename Tape<S>::Var f4 = t.reshape(f_in, {1, c, tdim, vdim});
  Tensor<S> feats = curves.features;
  feats.shape = {1, c, tdim - 1, vdim};
  typename Tape<S>::Var cf = t.leaf(std::move(feats), "curve_features");
  typename Tape<S>::Var out = curve_aggregate_batch(t, f4, cf, p);
  return t.reshape(out, {c, tdim, vdim});
}

template <class S>
StcModule<S>::StcModule(ParamStore<S>& ps, const std::string& prefix, int channels, StcConfig cfg,
                        RngStream& rng)
    : cfg_(cfg), channels_(channels) {
  int cm = cfg.resolve_c_mid(channels);
  agent_ = make_stc_agent<S>(ps, prefix, channels, cm, rng);
  params_ = make_stc_params<S>(ps, prefix, channels, cm, rng);
}

template <class S>
typename Tape<S>::Var StcModule<S>::forward(Tape<S>& t, typename Tape<S>::Var x, Mode mode,
                                            const RngStream& noise_base,
                                            std::span<const int64_t> sample_ids,
                                            std::vector<CurveSet<S>>* capture) const {
  CurveBatch<S> curves = generate_curves_batch(t, x, cfg_, agent_, mode, noise_base, sample_ids);
  typename Tape<S>::Var out = curve_aggregate_batch(t, x, curves.features, params_);
  if (capture) *capture = std::move(curves.sets);
  return out;
}

#define STC_INSTANTIATE(S)                                                                        \
  template void validate_curveset<S>(const CurveSet<S>&, int);                                    \
  template std::vector<int> interframe_knn<S>(const Tensor<S>&, int, int, const StcConfig&);      \
  template StcAgent<S> make_stc_agent<S>(ParamStore<S>&, const std::string&, int, int,            \
                                         RngStream&);                                             \
  template BatchSelect<S> select_nodes_batch<S>(Tape<S>&, typename Tape<S>::Var,                  \
                                                typename Tape<S>::Var, const StcAgent<S>&,        \
                                                const StcConfig&, Mode, const Tensor<S>*);        \
  template SelectResult<S> select_next_node<S>(Tape<S>&, typename Tape<S>::Var,                   \
                                               typename Tape<S>::Var, const StcAgent<S>&,         \
                                               const StcConfig&, Mode, RngStream&);               \
  template CurveBatch<S> generate_curves_batch<S>(Tape<S>&, typename Tape<S>::Var,                \
                                                  const StcConfig&, const StcAgent<S>&, Mode,     \
                                                  const RngStream&, std::span<const int64_t>);    \
  template CurveSet<S> generate_curves<S>(Tape<S>&, typename Tape<S>::Var, const StcConfig&,      \
                                          const StcAgent<S>&, Mode, const RngStream&,             \
                                          typename Tape<S>::Var*);                                \
  template StcParams<S> make_stc_params<S>(ParamStore<S>&, const std::string&, int, int,          \
                                           RngStream&);                                           \
  template typename Tape<S>::Var curve_aggregate_batch<S>(Tape<S>&, typename Tape<S>::Var,        \
                                                          typename Tape<S>::Var,                  \
                                                          const StcParams<S>&);                   \
  template typename Tape<S>::Var curve_aggregate<S>(Tape<S>&, typename Tape<S>::Var,              \
                                                    const CurveSet<S>&, const StcParams<S>&);     \
  template class StcModule<S>;

STC_INSTANTIATE(float)
STC_INSTANTIATE(double)

}  // namespace stcnet::stc
