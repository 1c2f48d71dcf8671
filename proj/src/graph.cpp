#include "stcnet/graph.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <set>

#include "stcnet/errors.hpp"

namespace stcnet::graph {

namespace {

std::vector<std::vector<int>> undirected_adjacency(const SkeletonGraph& g) {
  std::vector<std::vector<int>> adj(static_cast<size_t>(g.num_nodes));
  for (auto [a, b] : g.edges) {
    adj[static_cast<size_t>(a)].push_back(b);
    adj[static_cast<size_t>(b)].push_back(a);
  }
  return adj;
}

Tensor<int64_t> identity_matrix(int n) {
  Tensor<int64_t> m({n, n}, 0);
  for (int i = 0; i < n; ++i) m.at(i, i) = 1;
  return m;
}

Tensor<int64_t> matmul_int(const Tensor<int64_t>& a, const Tensor<int64_t>& b) {
  int64_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  Tensor<int64_t> out({n, m}, 0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t p = 0; p < k; ++p) {
      int64_t x = a.at(i, p);
      if (!x) continue;
      for (int64_t j = 0; j < m; ++j) out.at(i, j) += x * b.at(p, j);
    }
  return out;
}

Tensor<int64_t> add_identity(const Tensor<int64_t>& a) {
  Tensor<int64_t> out = a;
  for (int64_t i = 0; i < a.dim(0); ++i) out.at(i, i) += 1;
  return out;
}

Tensor<int64_t> matpow_int(const Tensor<int64_t>& a, int p) {
  Tensor<int64_t> out = identity_matrix(static_cast<int>(a.dim(0)));
  for (int i = 0; i < p; ++i) out = matmul_int(out, a);
  return out;
}

}  // namespace

void SkeletonGraph::validate() const {
  if (num_nodes < 1) throw StructuralError("graph: num_nodes must be >= 1");
  if (root < 0 || root >= num_nodes) throw StructuralError("graph: root index out of range");
  if (static_cast<int>(edges.size()) != num_nodes - 1)
    throw StructuralError("graph: edge count must be num_nodes - 1");
  std::set<std::pair<int, int>> seen;
  for (auto [a, b] : edges) {
    if (a < 0 || a >= num_nodes || b < 0 || b >= num_nodes)
      throw StructuralError("graph: edge index out of range");
    if (a == b) throw StructuralError("graph: self-loop");
    auto key = std::minmax(a, b);
    if (!seen.insert({key.first, key.second}).second)
      throw StructuralError("graph: duplicate edge");
  }
  // V-1 distinct edges: connected <=> acyclic tree.
  auto adj = undirected_adjacency(*this);
  std::vector<char> vis(static_cast<size_t>(num_nodes), 0);
  std::queue<int> q;
  q.push(root);
  vis[static_cast<size_t>(root)] = 1;
  int count = 0;
  while (!q.empty()) {
    int u = q.front();
    q.pop();
    ++count;
    for (int w : adj[static_cast<size_t>(u)])
      if (!vis[static_cast<size_t>(w)]) {
        vis[static_cast<size_t>(w)] = 1;
        q.push(w);
      }
  }
  if (count != num_nodes) throw StructuralError("graph: disconnected (not a tree)");
}

std::vector<int> SkeletonGraph::root_distances() const {
  auto adj = undirected_adjacency(*this);
  std::vector<int> dist(static_cast<size_t>(num_nodes), -1);
  std::queue<int> q;
  q.push(root);
  dist[static_cast<size_t>(root)] = 0;
  while (!q.empty()) {
    int u = q.front();
    q.pop();
    for (int w : adj[static_cast<size_t>(u)])
      if (dist[static_cast<size_t>(w)] < 0) {
        dist[static_cast<size_t>(w)] = dist[static_cast<size_t>(u)] + 1;
        q.push(w);
      }
  }
  return dist;
}

std::vector<int> SkeletonGraph::parents() const {
  auto dist = root_distances();
  std::vector<int> par(static_cast<size_t>(num_nodes), -1);
  for (auto [a, b] : edges) {
    if (dist[static_cast<size_t>(a)] + 1 == dist[static_cast<size_t>(b)])
      par[static_cast<size_t>(b)] = a;
    else
      par[static_cast<size_t>(a)] = b;
  }
  return par;
}

Tensor<int64_t> lambda_binarize(const Tensor<double>& m) {
  Tensor<int64_t> out(m.shape);
  for (size_t i = 0; i < m.v.size(); ++i) {
    double x = m.v[i];
    if (std::isnan(x)) throw NumericError("lambda_binarize: NaN entry");
    out.v[i] = x >= 1.0 ? 1 : 0;
  }
  return out;
}

Tensor<int64_t> lambda_binarize(const Tensor<int64_t>& m) {
  Tensor<int64_t> out(m.shape);
  for (size_t i = 0; i < m.v.size(); ++i) out.v[i] = m.v[i] >= 1 ? 1 : 0;
  return out;
}

AdjacencyKernelSet partition_adjacency(const SkeletonGraph& g) {
  g.validate();
  int n = g.num_nodes;
  AdjacencyKernelSet ks;
  ks.dilation = 1;
  ks.u_cp = Tensor<int64_t>({n, n}, 0);
  ks.u_cf = Tensor<int64_t>({n, n}, 0);
  ks.u_id = identity_matrix(n);
  auto dist = g.root_distances();
  for (auto [a, b] : g.edges) {
    int parent = a, child = b;
    if (dist[static_cast<size_t>(a)] > dist[static_cast<size_t>(b)]) std::swap(parent, child);
    ks.u_cp.at(child, parent) = 1;
    ks.u_cf.at(parent, child) = 1;
  }
  ks.a_cp = normalize_adjacency(ks.u_cp.cast<double>());
  ks.a_id = normalize_adjacency(ks.u_id.cast<double>());
  ks.a_cf = normalize_adjacency(ks.u_cf.cast<double>());
  return ks;
}

Tensor<int64_t> dilated_adjacency(const AdjacencyKernelSet& base, int d, Direction dir) {
  if (d < 1) throw ArgumentError("dilated_adjacency: dilation must be >= 1");
  if (dir == Direction::kIdentity) return base.u_id;
  const Tensor<int64_t>& a1 = dir == Direction::kCentripetal ? base.u_cp : base.u_cf;
  if (d == 1) return a1;
  int n = static_cast<int>(a1.dim(0));
  // Symmetric hop-1 matrix: cp + cf.
  Tensor<int64_t> sym({n, n}, 0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j)
      sym.at(i, j) = (base.u_cp.at(i, j) | base.u_cf.at(i, j));
  Tensor<int64_t> b = add_identity(a1);
  Tensor<int64_t> s1 = add_identity(sym);
  Tensor<int64_t> far = lambda_binarize(matmul_int(b, matpow_int(s1, d - 1)));
  Tensor<int64_t> near = lambda_binarize(matmul_int(b, matpow_int(s1, d - 2)));
  Tensor<int64_t> out({n, n}, 0);
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = far.v[i] - near.v[i];
  return out;
}

Tensor<double> normalize_adjacency(const Tensor<double>& m) {
  if (m.rank() != 2 || m.dim(0) != m.dim(1))
    throw ShapeError("normalize_adjacency: square matrix expected");
  int64_t n = m.dim(0);
  for (double x : m.v)
    if (!(x >= 0.0)) throw ArgumentError("normalize_adjacency: negative or non-finite entry");
  std::vector<double> deg(static_cast<size_t>(n), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    double s = 0;
    for (int64_t j = 0; j < n; ++j) s += m.at(i, j);
    deg[static_cast<size_t>(i)] = s > 0 ? s : 1.0;
  }
  Tensor<double> out({n, n});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j)
      out.at(i, j) =
          m.at(i, j) / std::sqrt(deg[static_cast<size_t>(i)] * deg[static_cast<size_t>(j)]);
  return out;
}

AdjacencyKernelSet kernel_set(const SkeletonGraph& g, int d) {
  AdjacencyKernelSet base = partition_adjacency(g);
  if (d == 1) return base;
  AdjacencyKernelSet ks;
  ks.dilation = d;
  ks.u_cp = dilated_adjacency(base, d, Direction::kCentripetal);
  ks.u_id = dilated_adjacency(base, d, Direction::kIdentity);
  ks.u_cf = dilated_adjacency(base, d, Direction::kCentrifugal);
  ks.a_cp = normalize_adjacency(ks.u_cp.cast<double>());
  ks.a_id = normalize_adjacency(ks.u_id.cast<double>());
  ks.a_cf = normalize_adjacency(ks.u_cf.cast<double>());
  return ks;
}

}  // namespace stcnet::graph
