#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <deque>
#include <vector>

#include "stcnet/errors.hpp"
#include "stcnet/gemm.hpp"
#include "stcnet/tensor.hpp"

namespace stcnet::nn {

enum class Mode { kTrain, kEval, kSoft };

template <class S>
struct Parameter {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;
  bool trainable = true;

  void zero_grad() { std::fill(grad.v.begin(), grad.v.end(), S(0)); }
};

template <class S>
class ParamStore {
 public:
  Parameter<S>& add(std::string name, Tensor<S> init, bool trainable = true) {
    if (find(name)) throw ConfigError("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter<S>>();
    p->name = std::move(name);
    p->grad = Tensor<S>(init.shape, S(0));
    p->value = std::move(init);
    p->trainable = trainable;
    items_.push_back(std::move(p));
    return *items_.back();
  }
  Parameter<S>* find(std::string_view name) {
    for (auto& p : items_)
      if (p->name == name) return p.get();
    return nullptr;
  }
  size_t size() const { return items_.size(); }
  Parameter<S>& at(size_t i) { return *items_[i]; }
  const Parameter<S>& at(size_t i) const { return *items_[i]; }
  int64_t num_trainable() const {
    int64_t n = 0;
    for (auto& p : items_)
      if (p->trainable) n += p->value.numel();
    return n;
  }
  void zero_grads() {
    for (auto& p : items_) p->zero_grad();
  }

 private:
  std::vector<std::unique_ptr<Parameter<S>>> items_;
};

// Reverse-mode tape. Nodes are appended in topological order; backward walks
// ids in reverse. With grads disabled only forward values are stored.
template <class S>
class Tape {
 public:
  struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
  };

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  const Tensor<S>& val(Var v) const { return nodes_[static_cast<size_t>(v.id)].val; }
  Tensor<S>& grad(Var v) { return g(v.id); }
  bool needs(Var v) const { return nodes_[static_cast<size_t>(v.id)].needs_grad; }
  size_t size() const { return nodes_.size(); }
  double flops() const { return flops_; }
  void add_flops(double f) { flops_ += f; }

  // Tag of the first node holding a non-finite value, or nullptr.
  const char* first_nonfinite() const {
    for (const auto& n : nodes_)
      if (!n.val.all_finite()) return n.tag;
    return nullptr;
  }

  void backward(Var loss) {
    if (!grad_enabled_) throw ArgumentError("backward on a grad-disabled tape");
    if (val(loss).numel() != 1) throw ShapeError("backward expects a scalar loss");
    g(loss.id).v[0] = S(1);
    for (int32_t id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (n.back && n.grad.numel()) n.back(*this);
    }
  }

  // ---- leaves ----

  Var leaf(Tensor<S> v, const char* tag = "leaf") {
    return push(std::move(v), false, nullptr, tag);
  }

  Var param(Parameter<S>& p) {
    bool need = grad_enabled_ && p.trainable;
    Parameter<S>* pp = &p;
    int32_t self = next_id();
    std::function<void(Tape&)> bk;
    if (need)
      bk = [self, pp](Tape& t) {
        const Tensor<S>& dy = t.nodes_[static_cast<size_t>(self)].grad;
        for (size_t i = 0; i < dy.v.size(); ++i) pp->grad.v[i] += dy.v[i];
      };
    return push(Tensor<S>(p.value), need, std::move(bk), "param");
  }

  // ---- elementwise and structural ----

  Var add(Var a, Var b) {
    const Tensor<S>& A = val(a);
    const Tensor<S>& B = val(b);
    if (!A.same_shape(B)) throw ShapeError("add: shape mismatch " + A.shape_str() + " vs " + B.shape_str());
    Tensor<S> out(A.shape);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = A.v[i] + B.v[i];
    flops_ += static_cast<double>(out.numel());
    bool need = needs(a) || needs(b);
    std::function<void(Tape&)> bk;
    if (grad_enabled_ && need) {
      int32_t ia = a.id, ib = b.id, self = next_id();
      bk = [=](Tape& t) {
        const Tensor<S>& dy = t.nodes_[static_cast<size_t>(self)].grad;
        if (t.needs(Var{ia})) {
          Tensor<S>& da = t.g(ia);
          for (size_t i = 0; i < dy.v.size(); ++i) da.v[i] += dy.v[i];
        }
        if (t.needs(Var{ib})) {
          Tensor<S>& db = t.g(ib);
          for (size_t i = 0; i < dy.v.size(); ++i) db.v[i] += dy.v[i];
        }
      };
    }
    return push(std::move(out), need, std::move(bk), "add");
  }

  Var relu(Var x) {
    const Tensor<S>& X = val(x);
    Tensor<S> out(X.shape);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = X.v[i] > S(0) ? X.v[i] : S(0);
    flops_ += static_cast<double>(out.numel());
    bool need = needs(x);
    std::function<void(Tape&)> bk;
    if (grad_enabled_ && need) {
      int32_t ix = x.id, self = next_id();
      bk = [=](Tape& t) {
        const Tensor<S>& dy = t.nodes_[static_cast<size_t>(self)].grad;
        const Tensor<S>& X2 = t.val(Var{ix});
        Tensor<S>& dx = t.g(ix);
        for (size_t i = 0; i < dy.v.size(); ++i)
          if (X2.v[i] > S(0)) dx.v[i] += dy.v[i];
      };
    }
    return push(std::move(out), need, std::move(bk), "relu");
  }

  Var scale(Var x, S c) {
    const Tensor<S>& X = val(x);
    Tensor<S> out(X.shape);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = X.v[i] * c;
    flops_ += static_cast<double>(out.numel());
    bool need = needs(x);
    std::function<void(Tape&)> bk;
    if (grad_enabled_ && need) {
      int32_t ix = x.id, self = next_id();
      bk = [=](Tape& t) {
        const Tensor<S>& dy = t.nodes_[static_cast<size_t>(self)].grad;
        Tensor<S>& dx = t.g(ix);
        for (size_t i = 0; i < dy.v.size(); ++i) dx.v[i] += dy.v[i] * c;
      };
    }
    return push(std::move(out), need, std::move(bk), "scale");
  }

  Var add_const(Var x, const Tensor<S>& c) {
    const Tensor<S>& X = val(x);
    if (!X.same_shape(c)) throw ShapeError("add_const: shape mismatch");
    Tensor<S> out(X.shape);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = X.v[i] + c.v[i];
    flops_ += static_cast<double>(out.numel());
    bool need = needs(x);
    std::function<void(Tape&)> bk;
    if (grad_enabled_ && need) {
      int32_t ix = x.id, self = next_id();
      bk = [=](Tape& t) {
        const Tensor<S>& dy = t.nodes_[static_cast<size_t>(self)].grad;
        Tensor<S>& dx = t.g(ix);
        for (size_t i = 0; i < dy.v.size(); ++i) dx.v[i] += dy.v[i];
      };
    }
    return push(std::move(out), need, std::move(bk), "add_const");
  }

  Var reshape(Var x, std::vector<int64_t> shape) {
    const Tensor<S>& X = val(x);
    Tensor<S> out(std::move(shape));
    if (out.numel() != X.numel()) throw ShapeError("reshape: element count mismatch");
    out.v = X.v;
    bool need = needs(x);
    std::function<void(Tape&)> bk;
    if (grad_enabled_ && need) {
      int32_t ix = x.id, self = next_id();
      bk = [=](Tape& t) {
        const Tensor<S>& dy = t.nodes_[static_cast<size_t>(self)].grad;
        Tensor<S>& dx = t.g(ix);
        for (size_t i = 0; i < dy.v.size(); ++i) dx.v[i] += dy.v[i];
      };
    }
    return push(std::move(out), need, std::move(bk), "reshape");
  }

  Var concat_dim1(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_dim1: no inputs");
    const Tensor<S>& first = val(parts[0]);
    if (first.rank() < 2) throw ShapeError("concat_dim1: rank >= 2 expected");
    int64_t n = first.dim(0);
    int64_t inner = first.numel() / (n * first.dim(1));
    int64_t ctotal = 0;
    bool need = false;
    for (Var p : parts) {
      const Tensor<S>& t = val(p);
      if (t.rank() != first.rank() || t.dim(0) != n || t.numel() / (n * t.dim(1)) != inner)
        throw ShapeError("concat_dim1: incompatible shapes");
      ctotal += t.dim(1);
      need = need || needs(p);
    }
    std::vector<int64_t> shape = first.shape;
    shape[1] = ctotal;
    Tensor<S> out(shape);
    int64_t off = 0;
    for (Var p : parts) {
      const Tensor<S>& t = val(p);
      int64_t c = t.dim(1);
      for (int64_t i = 0; i < n; ++i)
        std::memcpy(out.data() + (i * ctotal + off) * inner, t.data() + i * c * inner,
                    static_cast<size_t>(c * inner) * sizeof(S));
      off += c;
    }
    std::function<void(Tape&)> bk;
    if (grad_enabled_ && need) {
      std::vector<int32_t> ids;
      std::vector<int64_t> cs;
      for (Var p : parts) {
        ids.push_back(p.id);
        cs.push_back(val(p).dim(1));
      }
      int32_t self = next_id();
      bk = [=](Tape& t) {
        const Tensor<S>& dy = t.nodes_[static_cast<size_t>(self)].grad;
        int64_t o = 0;
        for (size_t pi = 0; pi < ids.size(); ++pi) {
          if (t.needs(Var{ids[pi]})) {
            Tensor<S>& dx = t.g(ids[pi]);
            for (int64_t i = 0; i < n; ++i) {
              const S* src = dy.data() + (i * ctotal + o) * inner;
              S* dst = dx.data() + i * cs[pi] * inner;
              for (int64_t j = 0; j < cs[pi] * inner; ++j) dst[j] += src[j];
            }
          }
          o += cs[pi];
        }
      };
    }
    return push(std::move(out), need, std::move(bk), "concat");
  }

  Var slice_dim1(Var x, int64_t c0, int64_t c1) {
    const Tensor<S>& X = val(x);
    if (X.rank() < 2 || c0 < 0 || c1 > X.dim(1) || c0 >= c1)
      throw ShapeError("slice_dim1: bad channel range");
    int64_t n = X.dim(0);
    int64_t c = X.dim(1);
    int64_t inner = X.numel() / (n * c);
    std::vector<int64_t> shape = X.shape;
    shape[1] = c1 - c0;
    Tensor<S> out(shape);
    for (int64_t i = 0; i < n; ++i)
      std::memcpy(out.data() + i * (c1 - c0) * inner, X.data() + (i * c + c0) * inner,
                  static_cast<size_t>((c1 - c0) * inner) * sizeof(S));
    bool need = needs(x);
    std::function<void(Tape&)> bk;
    if (grad_enabled_ && need) {
      int32_t ix = x.id, self = next_id();
      bk = [=](Tape& t) {
        const Tensor<S>& dy = t.nodes_[static_cast<size_t>(self)].grad;
        Tensor<S>& dx = t.g(ix);
        for (int64_t i = 0; i < n; ++i) {
          const S* src = dy.data() + i * (c1 - c0) * inner;
          S* dst = dx.data() + (i * c + c0) * inner;
          for (int64_t j = 0; j < (c1 - c0) * inner; ++j) dst[j] += src[j];
        }
      };
    }
    return push(std::move(out), need, std::move(bk), "slice");
  }

  // ---- dense linear algebra ----

  Var matmul(Var a, Var b) {
    const Tensor<S>& A = val(a);
    const Tensor<S>& B = val(b);
    if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
      throw ShapeError("matmul: incompatible shapes " + A.shape_str() + " x " + B.shape_str());
    int64_t M = A.dim(0), K = A.dim(1), N = B.dim(1);
    Tensor<S> out({M, N});
    gemm<S>(false, false, M, N, K, A.data(), K, B.data(), N, out.data(), N, false);
    flops_ += 2.0 * static_cast<double>(M) * N * K;
    bool need = needs(a) || needs(b);
    std::function<void(Tape&)> bk;
    if (grad_enabled_ && need) {
      int32_t ia = a.id, ib = b.id, self = next_id();
      bk = [=](Tape& t) {
        const Tensor<S>& dy = t.nodes_[static_cast<size_t>(self)].grad;
        if (t.needs(Var{ia}))
          gemm<S>(false, true, M, K, N, dy.data(), N, t.val(Var{ib}).data(), N, t.g(ia).data(), K,
                  true);
        if (t.needs(Var{ib}))
          gemm<S>(true, false, K, N, M, t.val(Var{ia}).data(), K, dy.data(), N, t.g(ib).data(), N,
                  true);
      };
    }
    return push(std::move(out), need, std::move(bk), "matmul");
  }

  // y = x W (+ bias); x (B,K), W (K,N), bias (N).
  Var linear(Var x, Var w, Var bias = Var{}) {
    const Tensor<S>& X = val(x);
    const Tensor<S>& W = val(w);
    if (X.rank() != 2 || W.rank() != 2 || X.dim(1) != W.dim(0))
      throw ShapeError("linear: incompatible shapes " + X.shape_str() + " x " + W.shape_str());
    int64_t B = X.dim(0), K = X.dim(1), N = W.dim(1);
    Tensor<S> out({B, N});
    gemm<S>(false, false, B, N, K, X.data(), K, W.data(), N, out.data(), N, false);
    flops_ += 2.0 * static_cast<double>(B) * N * K;
    if (bias.valid()) {
      const Tensor<S>& bv = val(bias);
      if (bv.numel() != N) throw ShapeError("linear: bias length mismatch");
      for (int64_t i = 0; i < B; ++i)
        for (int64_t j = 0; j < N; ++j) out.at(i, j) += bv.at(j);
      flops_ += static_cast<double>(B * N);
    }
    bool need = needs(x) || needs(w) || (bias.valid() && needs(bias));
    std::function<void(Tape&)> bk;
    if (grad_enabled_ && need) {
      int32_t ix = x.id, iw = w.id, ibias = bias.valid() ? bias.id : -1, self = next_id();
      bk = [=](Tape& t) {
        const Tensor<S>& dy = t.nodes_[static_cast<size_t>(self)].grad;
        if (t.needs(Var{ix}))
          gemm<S>(false, true, B, K, N, dy.data(), N, t.val(Var{iw}).data(), N, t.g(ix).data(), K,
                  true);
        if (t.needs(Var{iw}))
          gemm<S>(true, false, K, N, B, t.val(Var{ix}).data(), K, dy.data(), N, t.g(iw).data(), N,
                  true);
        if (ibias >= 0 && t.needs(Var{ibias})) {
          Tensor<S>& db = t.g(ibias);
          for (int64_t i = 0; i < B; ++i)
            for (int64_t j = 0; j < N; ++j) db.at(j) += dy.at(i, j);
        }
      };
    }
    return push(std::move(out), need, std::move(bk), "linear");
  }

  // Batched matmul with transpose flags; a is (B,M,K) post-transpose, b (B,K,N).
  Var bmm(Var a, Var b, bool ta, bool tb) {
    const Tensor<S>& A = val(a);
    const Tensor<S>& B = val(b);
    if (A.rank() != 3 || B.rank() != 3 || A.dim(0) != B.dim(0))
      throw ShapeError("bmm: rank-3 tensors with equal batch expected");
    int64_t nb = A.dim(0);
    int64_t M = ta ? A.dim(2) : A.dim(1);
    int64_t K = ta ? A.dim(1) : A.dim(2);
    int64_t Kb = tb ? B.dim(2) : B.dim(1);
    int64_t N = tb ? B.dim(1) : B.dim(2);
    if (K != Kb) throw ShapeError("bmm: inner dimension mismatch");
    Tensor<S> out({nb, M, N});
    int64_t sa = A.dim(1) * A.dim(2), sb = B.dim(1) * B.dim(2), so = M * N;
    for (int64_t i = 0; i < nb; ++i)
      gemm<S>(ta, tb, M, N, K, A.data() + i * sa, A.dim(2), B.data() + i * sb, B.dim(2),
              out.data() + i * so, N, false);
    flops_ += 2.0 * static_cast<double>(nb) * M * N * K;
    bool need = needs(a) || needs(b);
    std::function<void(Tape&)> bk;
    if (grad_enabled_ && need) {
      int32_t ia = a.id, ib = b.id, self = next_id();
      bk = [=](Tape& t) {
        const Tensor<S>& dy = t.nodes_[static_cast<size_t>(self)].grad;
        const Tensor<S>& Av = t.val(Var{ia});
        const Tensor<S>& Bv = t.val(Var{ib});
        for (int64_t i = 0; i < nb; ++i) {
          const S* dyp = dy.data() + i * so;
          const S* ap = Av.data() + i * sa;
          const S* bp = Bv.data() + i * sb;
          if (t.needs(Var{ia})) {
            S* dap = t.g(ia).data() + i * sa;
            if (!ta)
              gemm<S>(false, !tb, M, K, N, dyp, N, bp, Bv.dim(2), dap, Av.dim(2), true);
            else
              gemm<S>(tb, true, K, M, N, bp, Bv.dim(2), dyp, N, dap, Av.dim(2), true);
          }
          if (t.needs(Var{ib})) {
            S* dbp = t.g(ib).data() + i * sb;
            if (!tb)
              gemm<S>(!ta, false, K, N, M, ap, Av.dim(2), dyp, N, dbp, Bv.dim(2), true);
            else
              gemm<S>(true, ta, N, K, M, dyp, N, ap, Av.dim(2), dbp, Bv.dim(2), true);
          }
        }
      };
    }
    return push(std::move(out), need, std::move(bk), "bmm");
  }

  // 1x1 channel map on (N,C,...) tensors; W (Cin,Cout), optional bias (Cout).
  Var pointwise(Var x, Var w, Var bias = Var{}) {
    const Tensor<S>& X = val(x);
    const Tensor<S>& W = val(w);
    if (X.rank() < 3) throw ShapeError("pointwise: rank >= 3 expected");
    if (W.rank() != 2 || W.dim(0) != X.dim(1))
      throw ShapeError("pointwise: weight shape mismatch, x " + X.shape_str() + " w " +
                       W.shape_str());
    int64_t n = X.dim(0), cin = X.dim(1), cout = W.dim(1);
    int64_t p = X.numel() / (n * cin);
    std::vector<int64_t> shape = X.shape;
    shape[1] = cout;
    Tensor<S> out(shape);
    for (int64_t i = 0; i < n; ++i)
      gemm<S>(true, false, cout, p, cin, W.data(), cout, X.data() + i * cin * p, p,
              out.data() + i * cout * p, p, false);
    flops_ += 2.0 * static_cast<double>(n) * cout * cin * p;
    if (bias.valid()) {
      const Tensor<S>& bv = val(bias);
      if (bv.numel() != cout) throw ShapeError("pointwise: bias length mismatch");
      for (int64_t i = 0; i < n; ++i)
        for (int64_t c = 0; c < cout; ++c) {
          S b = bv.at(c);
          S* row = out.data() + (i * cout + c) * p;
          for (int64_t j = 0; j < p; ++j) row[j] += b;
        }
      flops_ += static_cast<double>(n * cout * p);
    }
    bool need = needs(x) || needs(w) || (bias.valid() && needs(bias));
    std::function<void(Tape&)> bk;
    if (grad_enabled_ && need) {
      int32_t ix = x.id, iw = w.id, ibias = bias.valid() ? bias.id : -1, self = next_id();
      bk = [=](Tape& t) {
        const Tensor<S>& dy = t.nodes_[static_cast<size_t>(self)].grad;
        const Tensor<S>& Xv = t.val(Var{ix});
        const Tensor<S>& Wv = t.val(Var{iw});
        for (int64_t i = 0; i < n; ++i) {
          const S* dyp = dy.data() + i * cout * p;
          if (t.needs(Var{ix}))
            gemm<S>(false, false, cin, p, cout, Wv.data(), cout, dyp, p,
                    t.g(ix).data() + i * cin * p, p, true);
          if (t.needs(Var{iw}))
            gemm<S>(false, true, cin, cout, p, Xv.data() + i * cin * p, p, dyp, p, t.g(iw).data(),
                    cout, true);
        }
        if (ibias >= 0 && t.needs(Var{ibias})) {
          Tensor<S>& db = t.g(ibias);
          for (int64_t i = 0; i < n; ++i)
            for (int64_t c = 0; c < cout; ++c) {
              const S* row = dy.data() + (i * cout + c) * p;
              S s = S(0);
              for (int64_t j = 0; j < p; ++j) s += row[j];
              db.at(c) += s;
            }
        }
      };
    }
    return push(std::move(out), need, std::move(bk), "pointwise");
  }

  // Joint mixing with a constant matrix: out[n,c,t,v] = sum_u A[v,u] x[n,c,t,u].
  Var node_mix(Var x, const Tensor<S>& a) {
    const Tensor<S>& X = val(x);
    if (X.rank() != 4) throw ShapeError("node_mix: rank-4 input expected");
    int64_t vdim = X.dim(3);
    if (a.rank() != 2 || a.dim(0) != vdim || a.dim(1) != vdim)
      throw ShapeError("node_mix: matrix must be (V,V)");
    int64_t rows = X.numel() / vdim;
    Tensor<S> out(X.shape);
    for (int64_t r = 0; r < rows; ++r) {
      const S* xr = X.data() + r * vdim;
      S* yr = out.data() + r * vdim;
      for (int64_t i = 0; i < vdim; ++i) {
        const S* ar = a.data() + i * vdim;
        S s = S(0);
        for (int64_t u = 0; u < vdim; ++u) s += ar[u] * xr[u];
        yr[i] = s;
      }
    }
    flops_ += 2.0 * static_cast<double>(rows) * vdim * vdim;
    bool need = needs(x);
    std::function<void(Tape&)> bk;
    if (grad_enabled_ && need) {
      int32_t ix = x.id, self = next_id();
      Tensor<S> amat = a;
      bk = [=, amat = std::move(amat)](Tape& t) {
        const Tensor<S>& dy = t.nodes_[static_cast<size_t>(self)].grad;
        Tensor<S>& dx = t.g(ix);
        for (int64_t r = 0; r < rows; ++r) {
          const S* dyr = dy.data() + r * vdim;
          S* dxr = dx.data() + r * vdim;
          for (int64_t i = 0; i < vdim; ++i) {
            S d = dyr[i];
            if (d == S(0)) continue;
            const S* ar = amat.data() + i * vdim;
            for (int64_t u = 0; u < vdim; ++u) dxr[u] += ar[u] * d;
          }
        }
      };
    }
    return push(std::move(out), need, std::move(bk), "node_mix");
  }

  // ---- temporal ops on (N,C,T,V) ----

  // Same-padded dilated conv over T. W is (k, Cin, Cout).
  Var temporal_conv(Var x, Var w, int kernel, int dilation, int stride) {
    const Tensor<S>& X = val(x);
    const Tensor<S>& W = val(w);
    if (X.rank() != 4) throw ShapeError("temporal_conv: rank-4 input expected");
    if (kernel < 1 || kernel % 2 == 0) throw ArgumentError("temporal_conv: kernel must be odd");
    if (dilation < 1 || stride < 1) throw ArgumentError("temporal_conv: dilation/stride must be >= 1");
    if (W.rank() != 3 || W.dim(0) != kernel || W.dim(1) != X.dim(1))
      throw ShapeError("temporal_conv: weight shape mismatch");
    int64_t n = X.dim(0), cin = X.dim(1), tdim = X.dim(2), vdim = X.dim(3);
    int64_t cout = W.dim(2);
    if (tdim < 1) throw ShapeError("temporal_conv: empty time axis");
    int64_t tout = (tdim - 1) / stride + 1;
    int64_t pad = static_cast<int64_t>(dilation) * (kernel - 1) / 2;
    Tensor<S> out({n, cout, tout, vdim}, S(0));
    for (int64_t i = 0; i < n; ++i)
      for (int64_t to = 0; to < tout; ++to)
        for (int64_t j = 0; j < kernel; ++j) {
          int64_t ti = to * stride - pad + j * dilation;
          if (ti < 0 || ti >= tdim) continue;
          for (int64_t ci = 0; ci < cin; ++ci) {
            const S* xr = X.data() + ((i * cin + ci) * tdim + ti) * vdim;
            const S* wr = W.data() + (j * cin + ci) * cout;
            for (int64_t co = 0; co < cout; ++co) {
              S wv = wr[co];
              S* yr = out.data() + ((i * cout + co) * tout + to) * vdim;
              for (int64_t u = 0; u < vdim; ++u) yr[u] += wv * xr[u];
            }
          }
        }
    flops_ += 2.0 * static_cast<double>(n) * tout * kernel * cin * cout * vdim;
    bool need = needs(x) || needs(w);
    std::function<void(Tape&)> bk;
    if (grad_enabled_ && need) {
      int32_t ix = x.id, iw = w.id, self = next_id();
      bk = [=](Tape& t) {
        const Tensor<S>& dy = t.nodes_[static_cast<size_t>(self)].grad;
        const Tensor<S>& Xv = t.val(Var{ix});
        const Tensor<S>& Wv = t.val(Var{iw});
        bool nx = t.needs(Var{ix}), nw = t.needs(Var{iw});
        Tensor<S>* dx = nx ? &t.g(ix) : nullptr;
        Tensor<S>* dw = nw ? &t.g(iw) : nullptr;
        for (int64_t i = 0; i < n; ++i)
          for (int64_t to = 0; to < tout; ++to)
            for (int64_t j = 0; j < kernel; ++j) {
              int64_t ti = to * stride - pad + j * dilation;
              if (ti < 0 || ti >= tdim) continue;
              for (int64_t ci = 0; ci < cin; ++ci) {
                const S* xr = Xv.data() + ((i * cin + ci) * tdim + ti) * vdim;
                S* dxr = nx ? dx->data() + ((i * cin + ci) * tdim + ti) * vdim : nullptr;
                const S* wr = Wv.data() + (j * cin + ci) * cout;
                S* dwr = nw ? dw->data() + (j * cin + ci) * cout : nullptr;
                for (int64_t co = 0; co < cout; ++co) {
                  const S* dyr = dy.data() + ((i * cout + co) * tout + to) * vdim;
                  if (nx) {
                    S wv = wr[co];
                    for (int64_t u = 0; u < vdim; ++u) dxr[u] += wv * dyr[u];
                  }
                  if (nw) {
                    S s = S(0);
                    for (int64_t u = 0; u < vdim; ++u) s += xr[u] * dyr[u];
                    dwr[co] += s;
                  }
                }
              }
            }
      };
    }
    return push(std::move(out), need, std::move(bk), "temporal_conv");
  }

  // Same-padded max pool over T (pad with -inf); ties keep the earliest frame.
  Var maxpool_t(Var x, int kernel, int stride) {
    const Tensor<S>& X = val(x);
    if (X.rank() != 4) throw ShapeError("maxpool_t: rank-4 input expected");
    if (kernel < 1 || kernel % 2 == 0) throw ArgumentError("maxpool_t: kernel must be odd");
    if (stride < 1) throw ArgumentError("maxpool_t: stride must be >= 1");
    int64_t n = X.dim(0), c = X.dim(1), tdim = X.dim(2), vdim = X.dim(3);
    int64_t tout = (tdim - 1) / stride + 1;
    int64_t pad = (kernel - 1) / 2;
    Tensor<S> out({n, c, tout, vdim});
    auto arg = std::make_shared<std::vector<int32_t>>(out.v.size());
    int64_t planes = n * c;
    for (int64_t pc = 0; pc < planes; ++pc)
      for (int64_t to = 0; to < tout; ++to)
        for (int64_t u = 0; u < vdim; ++u) {
          S best = -std::numeric_limits<S>::infinity();
          int32_t bt = -1;
          for (int64_t j = 0; j < kernel; ++j) {
            int64_t ti = to * stride - pad + j;
            if (ti < 0 || ti >= tdim) continue;
            S xv = X.data()[(pc * tdim + ti) * vdim + u];
            if (xv > best) {
              best = xv;
              bt = static_cast<int32_t>(ti);
            }
          }
          out.data()[(pc * tout + to) * vdim + u] = best;
          (*arg)[static_cast<size_t>((pc * tout + to) * vdim + u)] = bt;
        }
    bool need = needs(x);
    std::function<void(Tape&)> bk;
    if (grad_enabled_ && need) {
      int32_t ix = x.id, self = next_id();
      bk = [=](Tape& t) {
        const Tensor<S>& dy = t.nodes_[static_cast<size_t>(self)].grad;
        Tensor<S>& dx = t.g(ix);
        for (int64_t pc = 0; pc < planes; ++pc)
          for (int64_t to = 0; to < tout; ++to)
            for (int64_t u = 0; u < vdim; ++u) {
              int64_t o = (pc * tout + to) * vdim + u;
              int32_t ti = (*arg)[static_cast<size_t>(o)];
              if (ti >= 0) dx.data()[(pc * tdim + ti) * vdim + u] += dy.data()[o];
            }
      };
    }
    return push(std::move(out), need, std::move(bk), "maxpool_t");
  }

  Var subsample_t(Var x, int stride) {
    const Tensor<S>& X = val(x);
    if (X.rank() != 4) throw ShapeError("subsample_t: rank-4 input expected");
    if (stride < 1) throw ArgumentError("subsample_t: stride must be >= 1");
    if (stride == 1) return x;
    int64_t n = X.dim(0), c = X.dim(1), tdim = X.dim(2), vdim = X.dim(3);
    int64_t tout = (tdim - 1) / stride + 1;
    Tensor<S> out({n, c, tout, vdim});
    int64_t planes = n * c;
    for (int64_t pc = 0; pc < planes; ++pc)
      for (int64_t to = 0; to < tout; ++to)
        std::memcpy(out.data() + (pc * tout + to) * vdim, X.data() + (pc * tdim + to * stride) * vdim,
                    static_cast<size_t>(vdim) * sizeof(S));
    bool need = needs(x);
    std::function<void(Tape&)> bk;
    if (grad_enabled_ && need) {
      int32_t ix = x.id, self = next_id();
      bk = [=](Tape& t) {
        const Tensor<S>& dy = t.nodes_[static_cast<size_t>(self)].grad;
        Tensor<S>& dx = t.g(ix);
        for (int64_t pc = 0; pc < planes; ++pc)
          for (int64_t to = 0; to < tout; ++to) {
            const S* src = dy.data() + (pc * tout + to) * vdim;
            S* dst = dx.data() + (pc * tdim + to * stride) * vdim;
            for (int64_t u = 0; u < vdim; ++u) dst[u] += src[u];
          }
      };
    }
    return push(std::move(out), need, std::move(bk), "subsample_t");
  }

  // Per-channel batch norm over (N,T,V). Buffers are updated in train mode.
  Var batchnorm(Var x, Var gamma, Var beta, Parameter<S>& run_mean, Parameter<S>& run_var,
                bool training, double momentum = 0.1, double eps = 1e-5) {
    const Tensor<S>& X = val(x);
    if (X.rank() != 4) throw ShapeError("batchnorm: rank-4 input expected");
    int64_t n = X.dim(0), c = X.dim(1), tdim = X.dim(2), vdim = X.dim(3);
    int64_t m = n * tdim * vdim;
    if (val(gamma).numel() != c || val(beta).numel() != c)
      throw ShapeError("batchnorm: gamma/beta length mismatch");
    auto mean = std::make_shared<std::vector<S>>(static_cast<size_t>(c));
    auto istd = std::make_shared<std::vector<S>>(static_cast<size_t>(c));
    if (training) {
      for (int64_t ch = 0; ch < c; ++ch) {
        double s = 0, s2 = 0;
        for (int64_t i = 0; i < n; ++i) {
          const S* p = X.data() + ((i * c + ch) * tdim) * vdim;
          for (int64_t j = 0; j < tdim * vdim; ++j) {
            double xv = static_cast<double>(p[j]);
            s += xv;
            s2 += xv * xv;
          }
        }
        double mu = s / static_cast<double>(m);
        double var = s2 / static_cast<double>(m) - mu * mu;
        if (var < 0) var = 0;
        (*mean)[static_cast<size_t>(ch)] = static_cast<S>(mu);
        (*istd)[static_cast<size_t>(ch)] = static_cast<S>(1.0 / std::sqrt(var + eps));
        double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
        run_mean.value.at(ch) =
            static_cast<S>((1.0 - momentum) * static_cast<double>(run_mean.value.at(ch)) +
                           momentum * mu);
        run_var.value.at(ch) =
            static_cast<S>((1.0 - momentum) * static_cast<double>(run_var.value.at(ch)) +
                           momentum * unbiased);
      }
    } else {
      for (int64_t ch = 0; ch < c; ++ch) {
        (*mean)[static_cast<size_t>(ch)] = run_mean.value.at(ch);
        (*istd)[static_cast<size_t>(ch)] =
            static_cast<S>(1.0 / std::sqrt(static_cast<double>(run_var.value.at(ch)) + eps));
      }
    }
    const Tensor<S>& gv = val(gamma);
    const Tensor<S>& bv = val(beta);
    Tensor<S> out(X.shape);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t ch = 0; ch < c; ++ch) {
        S mu = (*mean)[static_cast<size_t>(ch)];
        S is = (*istd)[static_cast<size_t>(ch)];
        S gg = gv.at(ch), bb = bv.at(ch);
        const S* p = X.data() + ((i * c + ch) * tdim) * vdim;
        S* q = out.data() + ((i * c + ch) * tdim) * vdim;
        for (int64_t j = 0; j < tdim * vdim; ++j) q[j] = (p[j] - mu) * is * gg + bb;
      }
    flops_ += 4.0 * static_cast<double>(X.numel());
    bool need = needs(x) || needs(gamma) || needs(beta);
    std::function<void(Tape&)> bk;
    if (grad_enabled_ && need) {
      int32_t ix = x.id, ig = gamma.id, ib = beta.id, self = next_id();
      bool train_stats = training;
      bk = [=](Tape& t) {
        const Tensor<S>& dy = t.nodes_[static_cast<size_t>(self)].grad;
        const Tensor<S>& Xv = t.val(Var{ix});
        const Tensor<S>& gv2 = t.val(Var{ig});
        for (int64_t ch = 0; ch < c; ++ch) {
          S mu = (*mean)[static_cast<size_t>(ch)];
          S is = (*istd)[static_cast<size_t>(ch)];
          double sum_dy = 0, sum_dy_xhat = 0;
          for (int64_t i = 0; i < n; ++i) {
            const S* xp = Xv.data() + ((i * c + ch) * tdim) * vdim;
            const S* dp = dy.data() + ((i * c + ch) * tdim) * vdim;
            for (int64_t j = 0; j < tdim * vdim; ++j) {
              sum_dy += static_cast<double>(dp[j]);
              sum_dy_xhat += static_cast<double>(dp[j]) * static_cast<double>((xp[j] - mu) * is);
            }
          }
          if (t.needs(Var{ib})) t.g(ib).at(ch) += static_cast<S>(sum_dy);
          if (t.needs(Var{ig})) t.g(ig).at(ch) += static_cast<S>(sum_dy_xhat);
          if (t.needs(Var{ix})) {
            Tensor<S>& dx = t.g(ix);
            S gg = gv2.at(ch);
            double inv_m = 1.0 / static_cast<double>(m);
            for (int64_t i = 0; i < n; ++i) {
              const S* xp = Xv.data() + ((i * c + ch) * tdim) * vdim;
              const S* dp = dy.data() + ((i * c + ch) * tdim) * vdim;
              S* dxp = dx.data() + ((i * c + ch) * tdim) * vdim;
              for (int64_t j = 0; j < tdim * vdim; ++j) {
                double xhat = static_cast<double>((xp[j] - mu) * is);
                double d = static_cast<double>(dp[j]);
                double g = train_stats ? (d - sum_dy * inv_m - xhat * sum_dy_xhat * inv_m) : d;
                dxp[j] += static_cast<S>(g * static_cast<double>(gg) * static_cast<double>(is));
              }
            }
          }
        }
      };
    }
    return push(std::move(out), need, std::move(bk), "batchnorm");
  }

  // ---- reductions, softmax, loss ----

  Var gap(Var x) {
    const Tensor<S>& X = val(x);
    if (X.rank() != 4) throw ShapeError("gap: rank-4 input expected");
    int64_t n = X.dim(0), c = X.dim(1), inner = X.dim(2) * X.dim(3);
    Tensor<S> out({n, c});
    for (int64_t i = 0; i < n; ++i)
      for (int64_t ch = 0; ch < c; ++ch) {
        const S* p = X.data() + (i * c + ch) * inner;
        double s = 0;
        for (int64_t j = 0; j < inner; ++j) s += static_cast<double>(p[j]);
        out.at(i, ch) = static_cast<S>(s / static_cast<double>(inner));
      }
    flops_ += static_cast<double>(X.numel());
    bool need = needs(x);
    std::function<void(Tape&)> bk;
    if (grad_enabled_ && need) {
      int32_t ix = x.id, self = next_id();
      bk = [=](Tape& t) {
        const Tensor<S>& dy = t.nodes_[static_cast<size_t>(self)].grad;
        Tensor<S>& dx = t.g(ix);
        S inv = static_cast<S>(1.0 / static_cast<double>(inner));
        for (int64_t i = 0; i < n; ++i)
          for (int64_t ch = 0; ch < c; ++ch) {
            S d = dy.at(i, ch) * inv;
            S* p = dx.data() + (i * c + ch) * inner;
            for (int64_t j = 0; j < inner; ++j) p[j] += d;
          }
      };
    }
    return push(std::move(out), need, std::move(bk), "gap");
  }

  Var softmax_lastdim(Var x) {
    const Tensor<S>& X = val(x);
    if (X.rank() < 1) throw ShapeError("softmax: rank >= 1 expected");
    int64_t last = X.dim(X.rank() - 1);
    int64_t rows = X.numel() / last;
    Tensor<S> out(X.shape);
    for (int64_t r = 0; r < rows; ++r) {
      const S* p = X.data() + r * last;
      S* q = out.data() + r * last;
      S mx = p[0];
      for (int64_t j = 1; j < last; ++j) mx = std::max(mx, p[j]);
      double s = 0;
      for (int64_t j = 0; j < last; ++j) {
        double e = std::exp(static_cast<double>(p[j] - mx));
        q[j] = static_cast<S>(e);
        s += e;
      }
      S inv = static_cast<S>(1.0 / s);
      for (int64_t j = 0; j < last; ++j) q[j] *= inv;
    }
    flops_ += 5.0 * static_cast<double>(X.numel());
    bool need = needs(x);
    std::function<void(Tape&)> bk;
    if (grad_enabled_ && need) {
      int32_t ix = x.id, self = next_id();
      bk = [=](Tape& t) {
        const Tensor<S>& dy = t.nodes_[static_cast<size_t>(self)].grad;
        const Tensor<S>& y = t.nodes_[static_cast<size_t>(self)].val;
        Tensor<S>& dx = t.g(ix);
        for (int64_t r = 0; r < rows; ++r) {
          const S* yp = y.data() + r * last;
          const S* dp = dy.data() + r * last;
          S* xp = dx.data() + r * last;
          double dot = 0;
          for (int64_t j = 0; j < last; ++j) dot += static_cast<double>(yp[j]) * dp[j];
          for (int64_t j = 0; j < last; ++j)
            xp[j] += yp[j] * (dp[j] - static_cast<S>(dot));
        }
      };
    }
    return push(std::move(out), need, std::move(bk), "softmax");
  }

  // Mean softmax cross-entropy over the batch; optionally copies out probabilities.
  Var softmax_ce(Var x, const std::vector<int>& labels, Tensor<S>* probs_out = nullptr) {
    const Tensor<S>& X = val(x);
    if (X.rank() != 2) throw ShapeError("softmax_ce: (N,K) scores expected");
    int64_t n = X.dim(0), k = X.dim(1);
    if (static_cast<int64_t>(labels.size()) != n)
      throw ShapeError("softmax_ce: label count mismatch");
    for (int y : labels)
      if (y < 0 || y >= k) throw ArgumentError("softmax_ce: label out of range");
    auto probs = std::make_shared<Tensor<S>>(std::vector<int64_t>{n, k});
    double loss = 0;
    for (int64_t i = 0; i < n; ++i) {
      const S* p = X.data() + i * k;
      S* q = probs->data() + i * k;
      S mx = p[0];
      for (int64_t j = 1; j < k; ++j) mx = std::max(mx, p[j]);
      double s = 0;
      for (int64_t j = 0; j < k; ++j) {
        double e = std::exp(static_cast<double>(p[j] - mx));
        q[j] = static_cast<S>(e);
        s += e;
      }
      for (int64_t j = 0; j < k; ++j) q[j] = static_cast<S>(static_cast<double>(q[j]) / s);
      loss -= std::log(std::max(static_cast<double>(q[labels[static_cast<size_t>(i)]]),
                                1e-300));
    }
    loss /= static_cast<double>(n);
    flops_ += 6.0 * static_cast<double>(X.numel());
    if (probs_out) *probs_out = *probs;
    Tensor<S> out({1});
    out.at(0) = static_cast<S>(loss);
    bool need = needs(x);
    std::function<void(Tape&)> bk;
    if (grad_enabled_ && need) {
      int32_t ix = x.id, self = next_id();
      std::vector<int> lab = labels;
      bk = [=](Tape& t) {
        S d = t.nodes_[static_cast<size_t>(self)].grad.at(0);
        Tensor<S>& dx = t.g(ix);
        S inv = static_cast<S>(1.0 / static_cast<double>(n));
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < k; ++j) {
            S p = probs->at(i, j);
            S onehot = j == lab[static_cast<size_t>(i)] ? S(1) : S(0);
            dx.at(i, j) += d * inv * (p - onehot);
          }
      };
    }
    return push(std::move(out), need, std::move(bk), "softmax_ce");
  }

  // ---- gather/select ops for curve tracing ----

  // out[(n*Q+q), j, c] = x[n, c, frame, idx[(n*Q+q)*k + j]]
  Var gather_nodes(Var x, int64_t frame, const std::vector<int32_t>& idx, int64_t Q, int64_t k) {
    const Tensor<S>& X = val(x);
    if (X.rank() != 4) throw ShapeError("gather_nodes: rank-4 input expected");
    int64_t n = X.dim(0), c = X.dim(1), tdim = X.dim(2), vdim = X.dim(3);
    if (frame < 0 || frame >= tdim) throw ArgumentError("gather_nodes: frame out of range");
    if (static_cast<int64_t>(idx.size()) != n * Q * k)
      throw ShapeError("gather_nodes: index count mismatch");
    Tensor<S> out({n * Q, k, c});
    for (int64_t i = 0; i < n; ++i)
      for (int64_t q = 0; q < Q; ++q)
        for (int64_t j = 0; j < k; ++j) {
          int32_t u = idx[static_cast<size_t>((i * Q + q) * k + j)];
          if (u < 0 || u >= vdim) throw ArgumentError("gather_nodes: node index out of range");
          S* dst = out.data() + ((i * Q + q) * k + j) * c;
          const S* src = X.data() + ((i * c) * tdim + frame) * vdim + u;
          for (int64_t ch = 0; ch < c; ++ch) dst[ch] = src[ch * tdim * vdim];
        }
    bool need = needs(x);
    std::function<void(Tape&)> bk;
    if (grad_enabled_ && need) {
      int32_t ix = x.id, self = next_id();
      auto ids = std::make_shared<std::vector<int32_t>>(idx);
      bk = [=](Tape& t) {
        const Tensor<S>& dy = t.nodes_[static_cast<size_t>(self)].grad;
        Tensor<S>& dx = t.g(ix);
        for (int64_t i = 0; i < n; ++i)
          for (int64_t q = 0; q < Q; ++q)
            for (int64_t j = 0; j < k; ++j) {
              int32_t u = (*ids)[static_cast<size_t>((i * Q + q) * k + j)];
              const S* src = dy.data() + ((i * Q + q) * k + j) * c;
              S* dst = dx.data() + ((i * c) * tdim + frame) * vdim + u;
              for (int64_t ch = 0; ch < c; ++ch) dst[ch * tdim * vdim] += src[ch];
            }
      };
    }
    return push(std::move(out), need, std::move(bk), "gather_nodes");
  }

  // [query || candidate] pairs: q (B,C), cand (B,k,C) -> (B,k,2C)
  Var pair_concat(Var q, Var cand) {
    const Tensor<S>& Q = val(q);
    const Tensor<S>& C = val(cand);
    if (Q.rank() != 2 || C.rank() != 3 || Q.dim(0) != C.dim(0) || Q.dim(1) != C.dim(2))
      throw ShapeError("pair_concat: incompatible shapes");
    int64_t b = Q.dim(0), k = C.dim(1), c = Q.dim(1);
    Tensor<S> out({b, k, 2 * c});
    for (int64_t i = 0; i < b; ++i)
      for (int64_t j = 0; j < k; ++j) {
        S* dst = out.data() + (i * k + j) * 2 * c;
        std::memcpy(dst, Q.data() + i * c, static_cast<size_t>(c) * sizeof(S));
        std::memcpy(dst + c, C.data() + (i * k + j) * c, static_cast<size_t>(c) * sizeof(S));
      }
    bool need = needs(q) || needs(cand);
    std::function<void(Tape&)> bk;
    if (grad_enabled_ && need) {
      int32_t iq = q.id, ic = cand.id, self = next_id();
      bk = [=](Tape& t) {
        const Tensor<S>& dy = t.nodes_[static_cast<size_t>(self)].grad;
        for (int64_t i = 0; i < b; ++i)
          for (int64_t j = 0; j < k; ++j) {
            const S* src = dy.data() + (i * k + j) * 2 * c;
            if (t.needs(Var{iq})) {
              S* dq = t.g(iq).data() + i * c;
              for (int64_t ch = 0; ch < c; ++ch) dq[ch] += src[ch];
            }
            if (t.needs(Var{ic})) {
              S* dc = t.g(ic).data() + (i * k + j) * c;
              for (int64_t ch = 0; ch < c; ++ch) dc[ch] += src[c + ch];
            }
          }
      };
    }
    return push(std::move(out), need, std::move(bk), "pair_concat");
  }

  // Forward emits one-hot rows; backward passes gradients straight to `soft`.
  Var straight_through(Var soft, const std::vector<int>& hard) {
    const Tensor<S>& Sv = val(soft);
    if (Sv.rank() != 2 || static_cast<int64_t>(hard.size()) != Sv.dim(0))
      throw ShapeError("straight_through: (B,k) weights expected");
    int64_t b = Sv.dim(0), k = Sv.dim(1);
    Tensor<S> out({b, k}, S(0));
    for (int64_t i = 0; i < b; ++i) {
      int h = hard[static_cast<size_t>(i)];
      if (h < 0 || h >= k) throw ArgumentError("straight_through: index out of range");
      out.at(i, h) = S(1);
    }
    bool need = needs(soft);
    std::function<void(Tape&)> bk;
    if (grad_enabled_ && need) {
      int32_t is = soft.id, self = next_id();
      bk = [=](Tape& t) {
        const Tensor<S>& dy = t.nodes_[static_cast<size_t>(self)].grad;
        Tensor<S>& ds = t.g(is);
        for (size_t i = 0; i < dy.v.size(); ++i) ds.v[i] += dy.v[i];
      };
    }
    return push(std::move(out), need, std::move(bk), "straight_through");
  }

  // out[b,c] = sum_j w[b,j] * cand[b,j,c]
  Var weighted_gather(Var cand, Var w) {
    const Tensor<S>& C = val(cand);
    const Tensor<S>& W = val(w);
    if (C.rank() != 3 || W.rank() != 2 || C.dim(0) != W.dim(0) || C.dim(1) != W.dim(1))
      throw ShapeError("weighted_gather: incompatible shapes");
    int64_t b = C.dim(0), k = C.dim(1), c = C.dim(2);
    Tensor<S> out({b, c}, S(0));
    for (int64_t i = 0; i < b; ++i)
      for (int64_t j = 0; j < k; ++j) {
        S wv = W.at(i, j);
        if (wv == S(0)) continue;
        const S* src = C.data() + (i * k + j) * c;
        S* dst = out.data() + i * c;
        for (int64_t ch = 0; ch < c; ++ch) dst[ch] += wv * src[ch];
      }
    flops_ += 2.0 * static_cast<double>(b * k * c);
    bool need = needs(cand) || needs(w);
    std::function<void(Tape&)> bk;
    if (grad_enabled_ && need) {
      int32_t ic = cand.id, iw = w.id, self = next_id();
      bk = [=](Tape& t) {
        const Tensor<S>& dy = t.nodes_[static_cast<size_t>(self)].grad;
        const Tensor<S>& Cv = t.val(Var{ic});
        const Tensor<S>& Wv = t.val(Var{iw});
        for (int64_t i = 0; i < b; ++i)
          for (int64_t j = 0; j < k; ++j) {
            const S* cv = Cv.data() + (i * k + j) * c;
            const S* dyr = dy.data() + i * c;
            if (t.needs(Var{ic})) {
              S wv = Wv.at(i, j);
              S* dc = t.g(ic).data() + (i * k + j) * c;
              for (int64_t ch = 0; ch < c; ++ch) dc[ch] += wv * dyr[ch];
            }
            if (t.needs(Var{iw})) {
              S s = S(0);
              for (int64_t ch = 0; ch < c; ++ch) s += cv[ch] * dyr[ch];
              t.g(iw).at(i, j) += s;
            }
          }
      };
    }
    return push(std::move(out), need, std::move(bk), "weighted_gather");
  }

  // Stack per-step features: steps[t] is (N*Q, C) -> (N, C, T, Q)
  Var stack_steps(const std::vector<Var>& steps, int64_t n, int64_t q) {
    if (steps.empty()) throw ShapeError("stack_steps: no steps");
    int64_t tsteps = static_cast<int64_t>(steps.size());
    int64_t c = val(steps[0]).dim(1);
    bool need = false;
    for (Var s : steps) {
      const Tensor<S>& t = val(s);
      if (t.rank() != 2 || t.dim(0) != n * q || t.dim(1) != c)
        throw ShapeError("stack_steps: incompatible step shapes");
      need = need || needs(s);
    }
    Tensor<S> out({n, c, tsteps, q});
    for (int64_t tt = 0; tt < tsteps; ++tt) {
      const Tensor<S>& sv = val(steps[static_cast<size_t>(tt)]);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t cv = 0; cv < q; ++cv) {
          const S* src = sv.data() + (i * q + cv) * c;
          for (int64_t ch = 0; ch < c; ++ch) out.at(i, ch, tt, cv) = src[ch];
        }
    }
    std::function<void(Tape&)> bk;
    if (grad_enabled_ && need) {
      std::vector<int32_t> ids;
      for (Var s : steps) ids.push_back(s.id);
      int32_t self = next_id();
      bk = [=](Tape& t) {
        const Tensor<S>& dy = t.nodes_[static_cast<size_t>(self)].grad;
        for (int64_t tt = 0; tt < tsteps; ++tt) {
          if (!t.needs(Var{ids[static_cast<size_t>(tt)]})) continue;
          Tensor<S>& ds = t.g(ids[static_cast<size_t>(tt)]);
          for (int64_t i = 0; i < n; ++i)
            for (int64_t cv = 0; cv < q; ++cv) {
              S* dst = ds.data() + (i * q + cv) * c;
              for (int64_t ch = 0; ch < c; ++ch) dst[ch] += dy.at(i, ch, tt, cv);
            }
        }
      };
    }
    return push(std::move(out), need, std::move(bk), "stack_steps");
  }

  // Attentive pooling over the last axis: x (N,C,M,K) -> (N,C,M),
  // scores s[n,m,k] = sum_c w[c] x[n,c,m,k], weights softmax over k.
  Var attnpool_last(Var x, Var w) { return attnpool(x, w, /*over_last=*/true); }

  // Attentive pooling over the third axis: x (N,C,M,K) -> (N,C,K).
  Var attnpool_mid(Var x, Var w) { return attnpool(x, w, /*over_last=*/false); }

 private:
  struct Node {
    Tensor<S> val;
    Tensor<S> grad;
    std::function<void(Tape&)> back;
    bool needs_grad = false;
    const char* tag = "";
  };

  int32_t next_id() const { return static_cast<int32_t>(nodes_.size()); }

  Var push(Tensor<S> v, bool need, std::function<void(Tape&)> bk, const char* tag) {
    Node n;
    n.val = std::move(v);
    n.back = std::move(bk);
    n.needs_grad = need && grad_enabled_;
    n.tag = tag;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size()) - 1};
  }

  Tensor<S>& g(int32_t id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.grad.numel()) n.grad = Tensor<S>(n.val.shape, S(0));
    return n.grad;
  }

  Var attnpool(Var x, Var w, bool over_last) {
    const Tensor<S>& X = val(x);
    const Tensor<S>& W = val(w);
    if (X.rank() != 4) throw ShapeError("attnpool: rank-4 input expected");
    int64_t n = X.dim(0), c = X.dim(1), m = X.dim(2), k = X.dim(3);
    if ((over_last && k == 0) || (!over_last && m == 0))
      throw ShapeError("attnpool: empty pooling axis");
    if (W.numel() != c) throw ShapeError("attnpool: score weight length mismatch");
    // scores[n,m,k] then softmax over the pooled axis
    auto alpha = std::make_shared<Tensor<S>>(std::vector<int64_t>{n, m, k});
    for (int64_t i = 0; i < n; ++i)
      for (int64_t mm = 0; mm < m; ++mm)
        for (int64_t kk = 0; kk < k; ++kk) {
          double s = 0;
          for (int64_t ch = 0; ch < c; ++ch)
            s += static_cast<double>(W.at(ch)) * X.at(i, ch, mm, kk);
          alpha->at(i, mm, kk) = static_cast<S>(s);
        }
    flops_ += 2.0 * static_cast<double>(n * m * k * c);
    // softmax along pooled axis
    if (over_last) {
      for (int64_t i = 0; i < n; ++i)
        for (int64_t mm = 0; mm < m; ++mm) {
          S mx = alpha->at(i, mm, 0);
          for (int64_t kk = 1; kk < k; ++kk) mx = std::max(mx, alpha->at(i, mm, kk));
          double sum = 0;
          for (int64_t kk = 0; kk < k; ++kk) {
            double e = std::exp(static_cast<double>(alpha->at(i, mm, kk) - mx));
            alpha->at(i, mm, kk) = static_cast<S>(e);
            sum += e;
          }
          for (int64_t kk = 0; kk < k; ++kk)
            alpha->at(i, mm, kk) = static_cast<S>(static_cast<double>(alpha->at(i, mm, kk)) / sum);
        }
    } else {
      for (int64_t i = 0; i < n; ++i)
        for (int64_t kk = 0; kk < k; ++kk) {
          S mx = alpha->at(i, 0, kk);
          for (int64_t mm = 1; mm < m; ++mm) mx = std::max(mx, alpha->at(i, mm, kk));
          double sum = 0;
          for (int64_t mm = 0; mm < m; ++mm) {
            double e = std::exp(static_cast<double>(alpha->at(i, mm, kk) - mx));
            alpha->at(i, mm, kk) = static_cast<S>(e);
            sum += e;
          }
          for (int64_t mm = 0; mm < m; ++mm)
            alpha->at(i, mm, kk) = static_cast<S>(static_cast<double>(alpha->at(i, mm, kk)) / sum);
        }
    }
    flops_ += 5.0 * static_cast<double>(n * m * k);
    Tensor<S> out(over_last ? std::vector<int64_t>{n, c, m} : std::vector<int64_t>{n, c, k}, S(0));
    for (int64_t i = 0; i < n; ++i)
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t mm = 0; mm < m; ++mm)
          for (int64_t kk = 0; kk < k; ++kk) {
            S av = alpha->at(i, mm, kk);
            if (over_last)
              out.at(i, ch, mm) += av * X.at(i, ch, mm, kk);
            else
              out.at(i, ch, kk) += av * X.at(i, ch, mm, kk);
          }
    flops_ += 2.0 * static_cast<double>(n * c * m * k);
    bool need = needs(x) || needs(w);
    std::function<void(Tape&)> bk;
    if (grad_enabled_ && need) {
      int32_t ix = x.id, iw = w.id, self = next_id();
      bk = [=](Tape& t) {
        const Tensor<S>& dy = t.nodes_[static_cast<size_t>(self)].grad;
        const Tensor<S>& Xv = t.val(Var{ix});
        const Tensor<S>& Wv = t.val(Var{iw});
        // d_alpha[n,m,k] = sum_c dy[target] * x[n,c,m,k]
        Tensor<S> dalpha({n, m, k}, S(0));
        for (int64_t i = 0; i < n; ++i)
          for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t mm = 0; mm < m; ++mm)
              for (int64_t kk = 0; kk < k; ++kk) {
                S d = over_last ? dy.at(i, ch, mm) : dy.at(i, ch, kk);
                dalpha.at(i, mm, kk) += d * Xv.at(i, ch, mm, kk);
              }
        // softmax backward along pooled axis -> dscore
        Tensor<S> dscore({n, m, k}, S(0));
        if (over_last) {
          for (int64_t i = 0; i < n; ++i)
            for (int64_t mm = 0; mm < m; ++mm) {
              double dot = 0;
              for (int64_t kk = 0; kk < k; ++kk)
                dot += static_cast<double>(alpha->at(i, mm, kk)) * dalpha.at(i, mm, kk);
              for (int64_t kk = 0; kk < k; ++kk)
                dscore.at(i, mm, kk) =
                    alpha->at(i, mm, kk) * (dalpha.at(i, mm, kk) - static_cast<S>(dot));
            }
        } else {
          for (int64_t i = 0; i < n; ++i)
            for (int64_t kk = 0; kk < k; ++kk) {
              double dot = 0;
              for (int64_t mm = 0; mm < m; ++mm)
                dot += static_cast<double>(alpha->at(i, mm, kk)) * dalpha.at(i, mm, kk);
              for (int64_t mm = 0; mm < m; ++mm)
                dscore.at(i, mm, kk) =
                    alpha->at(i, mm, kk) * (dalpha.at(i, mm, kk) - static_cast<S>(dot));
            }
        }
        bool nx = t.needs(Var{ix}), nw = t.needs(Var{iw});
        if (nx) {
          Tensor<S>& dx = t.g(ix);
          for (int64_t i = 0; i < n; ++i)
            for (int64_t ch = 0; ch < c; ++ch)
              for (int64_t mm = 0; mm < m; ++mm)
                for (int64_t kk = 0; kk < k; ++kk) {
                  S d = over_last ? dy.at(i, ch, mm) : dy.at(i, ch, kk);
                  dx.at(i, ch, mm, kk) +=
                      d * alpha->at(i, mm, kk) + dscore.at(i, mm, kk) * Wv.at(ch);
                }
        }
        if (nw) {
          Tensor<S>& dw = t.g(iw);
          for (int64_t i = 0; i < n; ++i)
            for (int64_t ch = 0; ch < c; ++ch)
              for (int64_t mm = 0; mm < m; ++mm)
                for (int64_t kk = 0; kk < k; ++kk)
                  dw.at(ch) += dscore.at(i, mm, kk) * Xv.at(i, ch, mm, kk);
        }
      };
    }
    return push(std::move(out), need, std::move(bk), "attnpool");
  }

  // deque: references returned by val()/grad() stay valid as nodes are added
  std::deque<Node> nodes_;
  bool grad_enabled_ = true;
  double flops_ = 0;
};

}  // namespace stcnet::nn
