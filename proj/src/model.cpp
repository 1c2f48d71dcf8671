#include "stcnet/model.hpp"

#include <algorithm>
#include <cmath>

#include "stcnet/nn.hpp"

namespace stcnet::model {

namespace {

// Input/output channel counts of a block in the assembled network.
void block_io(const ModelConfig& cfg, int b, int& cin, int& cout) {
  if (b == 1)
    cin = cfg.in_channels;
  else if (b == 5)
    cin = 2 * cfg.block_channels[3];
  else
    cin = cfg.block_channels[static_cast<size_t>(b - 2)];
  cout = cfg.block_channels[static_cast<size_t>(b - 1)];
}

}  // namespace

void ModelConfig::validate() const {
  skeleton.validate();
  if (in_channels < 1) throw ConfigError("model: in_channels must be >= 1");
  if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
  if (sigma < 0) throw ConfigError("model: sigma must be >= 0");
  for (int i = 0; i < 10; ++i) {
    if (block_channels[static_cast<size_t>(i)] < 4 ||
        block_channels[static_cast<size_t>(i)] % 4 != 0)
      throw ConfigError(
          "model: block_channels must be positive multiples of 4 "
          "(channel split and temporal reduction must be exact)");
    if (temporal_strides[static_cast<size_t>(i)] < 1)
      throw ConfigError("model: temporal strides must be >= 1");
  }
  std::vector<int> seen;
  for (int b : stc_blocks) {
    if (b < 1 || b > 10) throw ConfigError("model: stc block ids must be in 1..10");
    if (std::find(seen.begin(), seen.end(), b) != seen.end())
      throw ConfigError("model: duplicate stc block id " + std::to_string(b));
    seen.push_back(b);
    int cin = 0, cout = 0;
    block_io(*this, b, cin, cout);
    if (cin != cout)
      throw ConfigError("model: stc block " + std::to_string(b) +
                        " must preserve the channel count (" + std::to_string(cin) +
                        " != " + std::to_string(cout) + ")");
  }
  if (!stc_blocks.empty()) stc.validate(skeleton.num_nodes);
}

bool ModelConfig::is_stc_block(int block_1indexed) const {
  return std::find(stc_blocks.begin(), stc_blocks.end(), block_1indexed) != stc_blocks.end();
}

ModelConfig scaled_channels(ModelConfig cfg, double width_scale) {
  if (!(width_scale > 0)) throw ArgumentError("model: width scale must be positive");
  for (auto& c : cfg.block_channels) {
    auto scaled = static_cast<int>(std::lround(static_cast<double>(c) * width_scale / 4.0)) * 4;
    c = std::max(4, scaled);
  }
  return cfg;
}

template <class S>
Tensor<S> motion_vector(const Tensor<S>& x) {
  if (x.rank() == 3) {
    int64_t c = x.dim(0), tt = x.dim(1), v = x.dim(2);
    Tensor<S> out(x.shape, S(0));
    for (int64_t ci = 0; ci < c; ++ci)
      for (int64_t ti = 0; ti + 1 < tt; ++ti)
        for (int64_t vi = 0; vi < v; ++vi)
          out.at(ci, ti, vi) = x.at(ci, ti + 1, vi) - x.at(ci, ti, vi);
    return out;
  }
  if (x.rank() != 4) throw ShapeError("motion_vector: (C,T,V) or (N,C,T,V) input expected");
  int64_t n = x.dim(0), c = x.dim(1), tt = x.dim(2), v = x.dim(3);
  Tensor<S> out(x.shape, S(0));
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t ci = 0; ci < c; ++ci)
      for (int64_t ti = 0; ti + 1 < tt; ++ti)
        for (int64_t vi = 0; vi < v; ++vi)
          out.at(ni, ci, ti, vi) = x.at(ni, ci, ti + 1, vi) - x.at(ni, ci, ti, vi);
  return out;
}

template <class S>
Tensor<S> bone_vector(const Tensor<S>& x, const graph::SkeletonGraph& g) {
  int64_t rank = x.rank();
  if (rank != 3 && rank != 4)
    throw ShapeError("bone_vector: (C,T,V) or (N,C,T,V) input expected");
  int64_t v = x.dim(rank - 1);
  if (v != g.num_nodes) throw ShapeError("bone_vector: node count does not match the skeleton");
  std::vector<int> par = g.parents();
  Tensor<S> out = x;
  int64_t lead = x.numel() / v;
  for (int64_t i = 0; i < lead; ++i) {
    const S* src = x.data() + i * v;
    S* dst = out.data() + i * v;
    for (int64_t vi = 0; vi < v; ++vi) {
      int p = par[static_cast<size_t>(vi)];
      if (p >= 0) dst[vi] = src[vi] - src[p];
    }
  }
  return out;
}

template <class S>
typename Tape<S>::Var dkgc_forward(Tape<S>& t, typename Tape<S>::Var f,
                                   const graph::AdjacencyKernelSet& kernels,
                                   const std::array<Parameter<S>*, 3>& w) {
  const Tensor<S>& x = t.val(f);
  if (x.dim(x.rank() - 1) != kernels.a_id.dim(0))
    throw ShapeError("dkgc_forward: node count does not match the kernel set");
  std::array<const Tensor<double>*, 3> a{&kernels.a_cp, &kernels.a_id, &kernels.a_cf};
  typename Tape<S>::Var out{};
  for (int i = 0; i < 3; ++i) {
    auto mixed = t.node_mix(f, a[static_cast<size_t>(i)]->template cast<S>());
    auto proj = t.pointwise(mixed, t.param(*w[static_cast<size_t>(i)]));
    out = (i == 0) ? proj : t.add(out, proj);
  }
  return out;
}

template <class S>
StcNet<S>::StcNet(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  int d1 = 2 * cfg_.sigma + 1;
  kernels_d1_ = graph::kernel_set(cfg_.skeleton, d1);
  kernels_d2_ = graph::kernel_set(cfg_.skeleton, d1 + 1);

  RngStream rng(seed, "init");
  data_bn_joint_ = nn::make_bn(params_, "input_bn.main", cfg_.in_channels);
  data_bn_motion_ = nn::make_bn(params_, "input_bn.motion", cfg_.in_channels);

  for (int b = 1; b <= 4; ++b) {
    int cin = 0, cout = 0;
    block_io(cfg_, b, cin, cout);
    int stride = cfg_.temporal_strides[static_cast<size_t>(b - 1)];
    path_a_.push_back(make_block("main.block" + std::to_string(b), b, cin, cout, stride, rng));
    path_b_.push_back(make_block("motion.block" + std::to_string(b), b, cin, cout, stride, rng));
  }
  for (int b = 5; b <= 10; ++b) {
    int cin = 0, cout = 0;
    block_io(cfg_, b, cin, cout);
    int stride = cfg_.temporal_strides[static_cast<size_t>(b - 1)];
    trunk_.push_back(make_block("trunk.block" + std::to_string(b), b, cin, cout, stride, rng));
  }
  int cfinal = cfg_.block_channels[9];
  cls_w_ = &params_.add("classifier.w", nn::xavier_uniform<S>({cfinal, cfg_.num_classes}, cfinal,
                                                              cfg_.num_classes, rng));
  cls_b_ = &params_.add("classifier.b", Tensor<S>({cfg_.num_classes}, S(0)));
}

template <class S>
typename StcNet<S>::Block StcNet<S>::make_block(const std::string& prefix, int block_1indexed,
                                                int cin, int cout, int stride, RngStream& rng) {
  Block b;
  b.cin = cin;
  b.cout = cout;
  b.stride = stride;
  b.use_stc = cfg_.is_stc_block(block_1indexed);
  if (b.use_stc)
    b.stc_module = stc::StcModule<S>(params_, prefix + ".stc", cin, cfg_.stc, rng);
  else
    b.pw_w = &params_.add(prefix + ".stage.w", nn::xavier_uniform<S>({cin, cout}, cin, cout, rng));

  int h = cout / 2;
  static const char* const kDir[3] = {"cp", "id", "cf"};
  for (int i = 0; i < 3; ++i) {
    b.w_d1[static_cast<size_t>(i)] = &params_.add(
        prefix + ".gc1." + kDir[i], nn::xavier_uniform<S>({h, h}, h, h, rng));
    b.w_d2[static_cast<size_t>(i)] = &params_.add(
        prefix + ".gc2." + kDir[i], nn::xavier_uniform<S>({h, h}, h, h, rng));
  }
  b.sp_bn = nn::make_bn(params_, prefix + ".gc_bn", cout);

  int c4 = cout / 4;
  for (int i = 0; i < 4; ++i) {
    std::string bp = prefix + ".t" + std::to_string(i + 1);
    b.red[static_cast<size_t>(i)] =
        &params_.add(bp + ".reduce", nn::xavier_uniform<S>({cout, c4}, cout, c4, rng));
    b.red_bn[static_cast<size_t>(i)] = nn::make_bn(params_, bp + ".reduce_bn", c4);
  }
  b.conv1 = &params_.add(prefix + ".t1.conv",
                         nn::xavier_uniform<S>({5, c4, c4}, 5 * c4, 5 * c4, rng));
  b.conv1_bn = nn::make_bn(params_, prefix + ".t1.bn", c4);
  b.conv2 = &params_.add(prefix + ".t2.conv",
                         nn::xavier_uniform<S>({5, c4, c4}, 5 * c4, 5 * c4, rng));
  b.conv2_bn = nn::make_bn(params_, prefix + ".t2.bn", c4);
  b.pool_bn = nn::make_bn(params_, prefix + ".t3.bn", c4);

  if (cin != cout || stride != 1) {
    b.res_w = &params_.add(prefix + ".res.w", nn::xavier_uniform<S>({cin, cout}, cin, cout, rng));
    b.res_bn = nn::make_bn(params_, prefix + ".res.bn", cout);
  }
  return b;
}

template <class S>
typename Tape<S>::Var StcNet<S>::block_forward(Tape<S>& t, const Block& b,
                                               typename Tape<S>::Var x, Mode mode,
                                               const RngStream& noise_base,
                                               std::span<const int64_t> sample_ids,
                                               int block_1indexed, int noise_slot,
                                               Capture* capture) const {
  bool train = mode == Mode::kTrain;
  typename Tape<S>::Var stage;
  if (b.use_stc) {
    std::vector<stc::CurveSet<S>>* cap = nullptr;
    if (capture) {
      capture->blocks.push_back(block_1indexed);
      capture->motion_pathway.push_back(noise_slot > 16);
      capture->curves.emplace_back();
      cap = &capture->curves.back();
    }
    stage = b.stc_module.forward(t, x, mode, noise_base.fork(static_cast<uint64_t>(noise_slot)),
                                 sample_ids, cap);
  } else {
    stage = t.pointwise(x, t.param(*b.pw_w));
  }

  int64_t sc = t.val(stage).dim(1);
  auto h1 = t.slice_dim1(stage, 0, sc / 2);
  auto h2 = t.slice_dim1(stage, sc / 2, sc);
  auto g1 = dkgc_forward(t, h1, kernels_d1_, b.w_d1);
  auto g2 = dkgc_forward(t, h2, kernels_d2_, b.w_d2);
  auto sp = t.relu(nn::apply_bn(t, t.concat_dim1({g1, g2}), b.sp_bn, train));

  std::vector<typename Tape<S>::Var> branches;
  for (int i = 0; i < 4; ++i) {
    auto r = t.pointwise(sp, t.param(*b.red[static_cast<size_t>(i)]));
    r = t.relu(nn::apply_bn(t, r, b.red_bn[static_cast<size_t>(i)], train));
    switch (i) {
      case 0:
        r = t.temporal_conv(r, t.param(*b.conv1), 5, 1, b.stride);
        r = nn::apply_bn(t, r, b.conv1_bn, train);
        break;
      case 1:
        r = t.temporal_conv(r, t.param(*b.conv2), 5, 2, b.stride);
        r = nn::apply_bn(t, r, b.conv2_bn, train);
        break;
      case 2:
        r = t.maxpool_t(r, 3, b.stride);
        r = nn::apply_bn(t, r, b.pool_bn, train);
        break;
      default:
        r = t.subsample_t(r, b.stride);
        break;
    }
    branches.push_back(r);
  }
  auto tc = t.concat_dim1(branches);

  auto res = x;
  if (b.res_w) {
    res = t.subsample_t(x, b.stride);
    res = t.pointwise(res, t.param(*b.res_w));
    res = nn::apply_bn(t, res, b.res_bn, train);
  }
  return t.relu(t.add(tc, res));
}

template <class S>
typename Tape<S>::Var StcNet<S>::forward(Tape<S>& t, const Tensor<S>& batch, Mode mode,
                                         const RngStream& noise_base,
                                         std::span<const int64_t> sample_ids,
                                         Capture* capture) const {
  if (batch.rank() != 4) throw ShapeError("stcnet: (N,C,T,V) batch expected");
  if (batch.dim(1) != cfg_.in_channels || batch.dim(3) != cfg_.skeleton.num_nodes)
    throw ShapeError("stcnet: batch shape " + batch.shape_str() +
                     " does not match the model config");
  if (batch.dim(2) < 1) throw ShapeError("stcnet: empty time axis");
  int64_t n = batch.dim(0);
  std::vector<int64_t> default_ids;
  if (sample_ids.empty()) {
    default_ids.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) default_ids[static_cast<size_t>(i)] = i;
    sample_ids = default_ids;
  } else if (static_cast<int64_t>(sample_ids.size()) != n) {
    throw ArgumentError("stcnet: sample_ids length must match the batch");
  }
  bool train = mode == Mode::kTrain;

  auto a = nn::apply_bn(t, t.leaf(batch, "input"), data_bn_joint_, train);
  auto b = nn::apply_bn(t, t.leaf(motion_vector(batch), "input_motion"), data_bn_motion_, train);
  for (int i = 0; i < 4; ++i) {
    a = block_forward(t, path_a_[static_cast<size_t>(i)], a, mode, noise_base, sample_ids, i + 1,
                      i + 1, capture);
    b = block_forward(t, path_b_[static_cast<size_t>(i)], b, mode, noise_base, sample_ids, i + 1,
                      16 + i + 1, capture);
  }
  auto x = t.concat_dim1({a, b});
  for (int i = 0; i < 6; ++i)
    x = block_forward(t, trunk_[static_cast<size_t>(i)], x, mode, noise_base, sample_ids, i + 5,
                      i + 5, capture);
  return t.linear(t.gap(x), t.param(*cls_w_), t.param(*cls_b_));
}

template <class S>
Tensor<S> StcNet<S>::scores(const Tensor<S>& batch, Mode mode, const RngStream& noise_base,
                            std::span<const int64_t> sample_ids, Capture* capture) const {
  Tape<S> t(false);
  auto out = forward(t, batch, mode, noise_base, sample_ids, capture);
  return t.val(out);
}

int64_t count_params(const ModelConfig& cfg) {
  StcNet<float> net(cfg, 0);
  return net.params().num_trainable();
}

double count_flops(const ModelConfig& cfg, int frames) {
  if (frames < 1) throw ArgumentError("count_flops: frames must be >= 1");
  StcNet<float> net(cfg, 0);
  Tensor<float> batch({1, cfg.in_channels, frames, cfg.skeleton.num_nodes}, 0.0f);
  Tape<float> t(false);
  net.forward(t, batch, Mode::kEval);
  return t.flops();
}

template Tensor<float> motion_vector(const Tensor<float>&);
template Tensor<double> motion_vector(const Tensor<double>&);
template Tensor<float> bone_vector(const Tensor<float>&, const graph::SkeletonGraph&);
template Tensor<double> bone_vector(const Tensor<double>&, const graph::SkeletonGraph&);
template Tape<float>::Var dkgc_forward(Tape<float>&, Tape<float>::Var,
                                       const graph::AdjacencyKernelSet&,
                                       const std::array<Parameter<float>*, 3>&);
template Tape<double>::Var dkgc_forward(Tape<double>&, Tape<double>::Var,
                                        const graph::AdjacencyKernelSet&,
                                        const std::array<Parameter<double>*, 3>&);
template class StcNet<float>;
template class StcNet<double>;

}  // namespace stcnet::model
