#pragma once

#include <functional>
#include <string>
#include <vector>

#include "stcnet/rng.hpp"
#include "stcnet/tape.hpp"
#include "stcnet/tensor.hpp"

namespace stcnet::nn {

template <class S>
Tensor<S> xavier_uniform(std::vector<int64_t> shape, int64_t fan_in, int64_t fan_out,
                         RngStream& rng) {
  Tensor<S> t(std::move(shape));
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& x : t.v) x = static_cast<S>((rng.next_u01() * 2.0 - 1.0) * bound);
  return t;
}

// Batch-norm parameter bundle (gamma, beta trainable; running stats buffers).
template <class S>
struct BnParams {
  Parameter<S>* gamma = nullptr;
  Parameter<S>* beta = nullptr;
  Parameter<S>* run_mean = nullptr;
  Parameter<S>* run_var = nullptr;
};

template <class S>
BnParams<S> make_bn(ParamStore<S>& ps, const std::string& prefix, int64_t c) {
  BnParams<S> bn;
  bn.gamma = &ps.add(prefix + ".gamma", Tensor<S>({c}, S(1)));
  bn.beta = &ps.add(prefix + ".beta", Tensor<S>({c}, S(0)));
  bn.run_mean = &ps.add(prefix + ".running_mean", Tensor<S>({c}, S(0)), false);
  bn.run_var = &ps.add(prefix + ".running_var", Tensor<S>({c}, S(1)), false);
  return bn;
}

template <class S>
typename Tape<S>::Var apply_bn(Tape<S>& t, typename Tape<S>::Var x, const BnParams<S>& bn,
                               bool training) {
  return t.batchnorm(x, t.param(*bn.gamma), t.param(*bn.beta), *bn.run_mean, *bn.run_var,
                     training);
}

// ---- categorical selection ----

template <class S>
struct GumbelPick {
  std::vector<S> onehot;
  std::vector<S> soft;
  int index = -1;
};

// Train mode perturbs logits with Gumbel noise; eval is noise-free argmax.
// The one-hot sample always matches the argmax of the soft weights.
template <class S>
GumbelPick<S> gumbel_softmax(const std::vector<S>& logits, double temperature, Mode mode,
                             RngStream& rng) {
  if (logits.empty()) throw ShapeError("gumbel_softmax: empty logits");
  if (!(temperature > 0)) throw ArgumentError("gumbel_softmax: temperature must be positive");
  size_t k = logits.size();
  std::vector<double> z(k);
  for (size_t i = 0; i < k; ++i) {
    double g = 0;
    if (mode == Mode::kTrain) {
      double u = rng.next_u01();
      g = -std::log(-std::log(u));
    }
    z[i] = (static_cast<double>(logits[i]) + g) / temperature;
  }
  size_t best = 0;
  for (size_t i = 1; i < k; ++i)
    if (z[i] > z[best]) best = i;
  double mx = z[best];
  double sum = 0;
  GumbelPick<S> out;
  out.soft.resize(k);
  out.onehot.assign(k, S(0));
  for (size_t i = 0; i < k; ++i) {
    double e = std::exp(z[i] - mx);
    out.soft[i] = static_cast<S>(e);
    sum += e;
  }
  for (size_t i = 0; i < k; ++i) out.soft[i] = static_cast<S>(static_cast<double>(out.soft[i]) / sum);
  out.index = static_cast<int>(best);
  out.onehot[best] = S(1);
  return out;
}

// ---- attentive pooling primitive ----

// x is (C,M); score_j = sum_c w[c] x[c,j]; returns sum_j softmax(score)_j * x[:,j].
template <class S>
std::vector<S> attentive_pool(const Tensor<S>& x, const std::vector<S>& w) {
  if (x.rank() != 2) throw ShapeError("attentive_pool: (C,M) matrix expected");
  int64_t c = x.dim(0), m = x.dim(1);
  if (m == 0) throw ShapeError("attentive_pool: empty pooling axis");
  if (static_cast<int64_t>(w.size()) != c)
    throw ShapeError("attentive_pool: weight length mismatch");
  std::vector<double> score(static_cast<size_t>(m), 0.0);
  for (int64_t j = 0; j < m; ++j)
    for (int64_t ch = 0; ch < c; ++ch)
      score[static_cast<size_t>(j)] += static_cast<double>(w[static_cast<size_t>(ch)]) * x.at(ch, j);
  double mx = score[0];
  for (double s : score) mx = std::max(mx, s);
  double sum = 0;
  for (auto& s : score) {
    s = std::exp(s - mx);
    sum += s;
  }
  std::vector<S> out(static_cast<size_t>(c), S(0));
  for (int64_t j = 0; j < m; ++j) {
    double a = score[static_cast<size_t>(j)] / sum;
    for (int64_t ch = 0; ch < c; ++ch)
      out[static_cast<size_t>(ch)] += static_cast<S>(a * x.at(ch, j));
  }
  return out;
}

// ---- finite-difference gradient checking ----

struct GradCheckResult {
  double max_rel_err = 0;
  std::string worst_param;
  int64_t coords_checked = 0;
};

// `f(with_grad)` evaluates the loss from current parameter values; when
// with_grad it must also accumulate analytic gradients into the store.
// Central differences with step h, relative error per coordinate.
template <class S>
GradCheckResult grad_check(ParamStore<S>& params, const std::function<double(bool)>& f,
                           double h = 1e-5) {
  params.zero_grads();
  f(true);
  std::vector<Tensor<S>> analytic;
  for (size_t i = 0; i < params.size(); ++i) analytic.push_back(params.at(i).grad);
  GradCheckResult res;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Parameter<S>& p = params.at(pi);
    if (!p.trainable) continue;
    for (int64_t i = 0; i < p.value.numel(); ++i) {
      S saved = p.value.at(i);
      p.value.at(i) = saved + static_cast<S>(h);
      double lp = f(false);
      p.value.at(i) = saved - static_cast<S>(h);
      double lm = f(false);
      p.value.at(i) = saved;
      double num = (lp - lm) / (2.0 * h);
      double ana = static_cast<double>(analytic[pi].at(i));
      double rel = std::abs(ana - num) / std::max(1e-8, std::abs(ana) + std::abs(num));
      ++res.coords_checked;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = p.name;
      }
    }
  }
  return res;
}

}  // namespace stcnet::nn
