#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <vector>

#include "doctest.h"
#include "stcnet/errors.hpp"
#include "stcnet/graph.hpp"

using stcnet::ArgumentError;
using stcnet::NumericError;
using stcnet::ShapeError;
using stcnet::StructuralError;
using stcnet::Tensor;
using namespace stcnet::graph;

namespace {

SkeletonGraph from_parents(const std::vector<int>& parent, int root) {
  SkeletonGraph g;
  g.num_nodes = static_cast<int>(parent.size());
  g.root = root;
  for (int i = 0; i < g.num_nodes; ++i)
    if (parent[static_cast<size_t>(i)] >= 0) g.edges.push_back({parent[static_cast<size_t>(i)], i});
  return g;
}

SkeletonGraph path_graph(int n, int root = 0) {
  std::vector<int> parent(static_cast<size_t>(n), -1);
  for (int i = 1; i < n; ++i) parent[static_cast<size_t>(i)] = i - 1;
  return from_parents(parent, root);
}

SkeletonGraph star_graph(int leaves) {
  std::vector<int> parent(static_cast<size_t>(leaves + 1), -1);
  for (int i = 1; i <= leaves; ++i) parent[static_cast<size_t>(i)] = 0;
  return from_parents(parent, 0);
}

// Random labeled tree: attach each node to an earlier one, then relabel and
// pick an arbitrary root so edge orientation is exercised both ways.
SkeletonGraph random_tree(std::mt19937& rng, int n) {
  std::vector<int> label(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) label[static_cast<size_t>(i)] = i;
  std::shuffle(label.begin(), label.end(), rng);
  SkeletonGraph g;
  g.num_nodes = n;
  for (int i = 1; i < n; ++i) {
    int p = static_cast<int>(rng() % static_cast<unsigned>(i));
    int a = label[static_cast<size_t>(p)], b = label[static_cast<size_t>(i)];
    if (rng() & 1) std::swap(a, b);
    g.edges.push_back({a, b});
  }
  g.root = static_cast<int>(rng() % static_cast<unsigned>(n));
  return g;
}

std::vector<std::vector<int>> all_pairs_distance(const SkeletonGraph& g) {
  int n = g.num_nodes;
  std::vector<std::vector<int>> adj(static_cast<size_t>(n));
  for (auto [a, b] : g.edges) {
    adj[static_cast<size_t>(a)].push_back(b);
    adj[static_cast<size_t>(b)].push_back(a);
  }
  std::vector<std::vector<int>> dist(static_cast<size_t>(n),
                                     std::vector<int>(static_cast<size_t>(n), -1));
  for (int s = 0; s < n; ++s) {
    std::vector<int> frontier{s};
    dist[static_cast<size_t>(s)][static_cast<size_t>(s)] = 0;
    while (!frontier.empty()) {
      std::vector<int> next;
      for (int u : frontier)
        for (int w : adj[static_cast<size_t>(u)])
          if (dist[static_cast<size_t>(s)][static_cast<size_t>(w)] < 0) {
            dist[static_cast<size_t>(s)][static_cast<size_t>(w)] =
                dist[static_cast<size_t>(s)][static_cast<size_t>(u)] + 1;
            next.push_back(w);
          }
      frontier = std::move(next);
    }
  }
  return dist;
}

// Walk-set oracle, built from scratch: entry (i,j) of lambda((A1+I)(S+I)^m) is 1
// iff some x reachable from i in the directed first hop (or x = i) lies within
// tree distance m of j. The dilated kernel is the set difference of the m = d-1
// and m = d-2 supports.
Tensor<int64_t> oracle_dilated(const SkeletonGraph& g, int d, Direction dir) {
  int n = g.num_nodes;
  auto dist = all_pairs_distance(g);
  auto rd = g.root_distances();
  std::vector<std::vector<int>> step(static_cast<size_t>(n));
  for (auto [a, b] : g.edges) {
    int parent = a, child = b;
    if (rd[static_cast<size_t>(a)] > rd[static_cast<size_t>(b)]) std::swap(parent, child);
    if (dir == Direction::kCentripetal) step[static_cast<size_t>(child)].push_back(parent);
    if (dir == Direction::kCentrifugal) step[static_cast<size_t>(parent)].push_back(child);
  }
  auto reach = [&](int i, int j, int m) {
    if (m < 0) return false;
    if (dist[static_cast<size_t>(i)][static_cast<size_t>(j)] <= m) return true;
    for (int x : step[static_cast<size_t>(i)])
      if (dist[static_cast<size_t>(x)][static_cast<size_t>(j)] <= m) return true;
    return false;
  };
  Tensor<int64_t> out({n, n}, 0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      out.at(i, j) = (reach(i, j, d - 1) && !reach(i, j, d - 2)) ? 1 : 0;
  return out;
}

int diameter(const SkeletonGraph& g) {
  auto dist = all_pairs_distance(g);
  int best = 0;
  for (auto& row : dist)
    for (int x : row) best = std::max(best, x);
  return best;
}

}  // namespace

TEST_CASE("partition of a path orients every edge toward the root") {
  auto g = path_graph(5);
  auto ks = partition_adjacency(g);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) {
      CHECK(ks.u_cp.at(i, j) == ((j == i - 1) ? 1 : 0));
      CHECK(ks.u_cf.at(i, j) == ((j == i + 1) ? 1 : 0));
      CHECK(ks.u_id.at(i, j) == ((i == j) ? 1 : 0));
    }
}

TEST_CASE("partition of a single node has empty directional kernels") {
  SkeletonGraph g;
  g.num_nodes = 1;
  auto ks = partition_adjacency(g);
  CHECK(ks.u_cp.at(0, 0) == 0);
  CHECK(ks.u_cf.at(0, 0) == 0);
  CHECK(ks.u_id.at(0, 0) == 1);
}

TEST_CASE("partition of a star points cf away from the hub") {
  auto g = star_graph(3);
  auto ks = partition_adjacency(g);
  for (int j = 1; j <= 3; ++j) {
    CHECK(ks.u_cf.at(0, j) == 1);
    CHECK(ks.u_cp.at(j, 0) == 1);
    CHECK(ks.u_cf.at(j, 0) == 0);
  }
  CHECK(doctest::Approx(ks.a_cf.at(0, 1)).epsilon(1e-12) == 1.0 / std::sqrt(3.0));
}

TEST_CASE("cp plus cf reconstructs the symmetric adjacency") {
  std::mt19937 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    auto g = random_tree(rng, 2 + static_cast<int>(rng() % 7));
    auto ks = partition_adjacency(g);
    Tensor<int64_t> sym({g.num_nodes, g.num_nodes}, 0);
    for (auto [a, b] : g.edges) {
      sym.at(a, b) = 1;
      sym.at(b, a) = 1;
    }
    for (size_t i = 0; i < sym.v.size(); ++i)
      CHECK(ks.u_cp.v[i] + ks.u_cf.v[i] == sym.v[i]);
  }
}

TEST_CASE("lambda_binarize thresholds at one inclusive") {
  Tensor<double> m({2, 2});
  m.at(0, 0) = 0.5;
  m.at(0, 1) = 1.0;
  m.at(1, 0) = 3.0;
  m.at(1, 1) = 0.0;
  auto b = lambda_binarize(m);
  CHECK(b.at(0, 0) == 0);
  CHECK(b.at(0, 1) == 1);
  CHECK(b.at(1, 0) == 1);
  CHECK(b.at(1, 1) == 0);
}

TEST_CASE("lambda_binarize maps identity to identity and zeros to zeros") {
  Tensor<double> id({3, 3}, 0.0);
  for (int i = 0; i < 3; ++i) id.at(i, i) = 1.0;
  auto b = lambda_binarize(id);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(b.at(i, j) == (i == j ? 1 : 0));
  Tensor<double> z({3, 3}, 0.0);
  for (int64_t x : lambda_binarize(z).v) CHECK(x == 0);
}

TEST_CASE("lambda_binarize is idempotent and rejects NaN") {
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> u(-2.0, 4.0);
  Tensor<double> m({4, 4});
  for (auto& x : m.v) x = u(rng);
  auto once = lambda_binarize(m);
  auto twice = lambda_binarize(once);
  CHECK(once.v == twice.v);
  m.at(2, 2) = std::nan("");
  CHECK_THROWS_AS(lambda_binarize(m), NumericError);
}

TEST_CASE("normalize_adjacency matches hand-computed degrees") {
  Tensor<double> id({3, 3}, 0.0);
  for (int i = 0; i < 3; ++i) id.at(i, i) = 1.0;
  auto a = normalize_adjacency(id);
  for (int i = 0; i < 3; ++i) CHECK(a.at(i, i) == doctest::Approx(1.0));

  auto star = star_graph(3);
  auto ks = partition_adjacency(star);
  auto cf = normalize_adjacency(ks.u_cf.cast<double>());
  // hub row sum 3, leaf rows are all zero so their degree falls back to 1
  for (int j = 1; j <= 3; ++j) CHECK(cf.at(0, j) == doctest::Approx(1.0 / std::sqrt(3.0)));

  Tensor<double> z({4, 4}, 0.0);
  for (double x : normalize_adjacency(z).v) CHECK(x == 0.0);
}

TEST_CASE("normalize_adjacency preserves the zero pattern") {
  std::mt19937 rng(17);
  for (int trial = 0; trial < 30; ++trial) {
    Tensor<double> m({6, 6}, 0.0);
    for (auto& x : m.v)
      if (rng() % 3 == 0) x = 1.0 + static_cast<double>(rng() % 4);
    auto a = normalize_adjacency(m);
    for (size_t i = 0; i < m.v.size(); ++i) CHECK((a.v[i] == 0.0) == (m.v[i] == 0.0));
    CHECK(a.all_finite());
  }
}

TEST_CASE("normalize_adjacency rejects bad input") {
  Tensor<double> neg({2, 2}, 0.0);
  neg.at(0, 1) = -1.0;
  CHECK_THROWS_AS(normalize_adjacency(neg), ArgumentError);
  Tensor<double> rect({2, 3}, 0.0);
  CHECK_THROWS_AS(normalize_adjacency(rect), ShapeError);
}

TEST_CASE("dilation one returns the base partition unchanged") {
  std::mt19937 rng(23);
  for (int trial = 0; trial < 100; ++trial) {
    auto g = random_tree(rng, 2 + static_cast<int>(rng() % 7));
    auto base = partition_adjacency(g);
    CHECK(dilated_adjacency(base, 1, Direction::kCentripetal).v == base.u_cp.v);
    CHECK(dilated_adjacency(base, 1, Direction::kCentrifugal).v == base.u_cf.v);
    CHECK(dilated_adjacency(base, 1, Direction::kIdentity).v == base.u_id.v);
  }
}

TEST_CASE("dilated kernels equal the walk-set oracle on random trees") {
  std::mt19937 rng(31);
  int trials = 0;
  for (int n = 2; n <= 8; ++n)
    for (int rep = 0; rep < 30; ++rep) {
      auto g = random_tree(rng, n);
      auto base = partition_adjacency(g);
      for (int d = 2; d <= 4; ++d)
        for (Direction dir : {Direction::kCentripetal, Direction::kCentrifugal}) {
          auto got = dilated_adjacency(base, d, dir);
          auto want = oracle_dilated(g, d, dir);
          REQUIRE(got.v == want.v);
        }
      ++trials;
    }
  CHECK(trials >= 200);
}

TEST_CASE("path fixture: dilation 2 cp row of node 2 hits columns 0 and 3") {
  auto g = path_graph(5);
  auto got = dilated_adjacency(partition_adjacency(g), 2, Direction::kCentripetal);
  for (int j = 0; j < 5; ++j) CHECK(got.at(2, j) == ((j == 0 || j == 3) ? 1 : 0));
}

TEST_CASE("dilation beyond diameter plus one vanishes") {
  for (auto g : {path_graph(3), path_graph(5), star_graph(4)}) {
    auto base = partition_adjacency(g);
    int d = diameter(g) + 2;
    for (Direction dir : {Direction::kCentripetal, Direction::kCentrifugal})
      for (int64_t x : dilated_adjacency(base, d, dir).v) CHECK(x == 0);
  }
}

TEST_CASE("identity kernel stays the identity at every dilation") {
  std::mt19937 rng(37);
  for (int trial = 0; trial < 20; ++trial) {
    auto g = random_tree(rng, 2 + static_cast<int>(rng() % 7));
    for (int d = 1; d <= 5; ++d) {
      auto ks = kernel_set(g, d);
      for (int64_t i = 0; i < ks.u_id.dim(0); ++i)
        for (int64_t j = 0; j < ks.u_id.dim(1); ++j)
          CHECK(ks.u_id.at(i, j) == (i == j ? 1 : 0));
    }
  }
}

TEST_CASE("dilated kernels are binary with zero diagonal") {
  std::mt19937 rng(41);
  for (int trial = 0; trial < 40; ++trial) {
    auto g = random_tree(rng, 2 + static_cast<int>(rng() % 7));
    for (int d = 2; d <= 4; ++d) {
      auto ks = kernel_set(g, d);
      for (const auto* m : {&ks.u_cp, &ks.u_cf}) {
        for (int64_t x : m->v) CHECK((x == 0 || x == 1));
        for (int64_t i = 0; i < m->dim(0); ++i) CHECK(m->at(i, i) == 0);
      }
      CHECK(ks.a_cp.all_finite());
      CHECK(ks.a_cf.all_finite());
      for (double x : ks.a_cp.v) CHECK(x >= 0.0);
    }
  }
}

TEST_CASE("supports of distinct dilations never overlap") {
  std::mt19937 rng(43);
  for (int trial = 0; trial < 40; ++trial) {
    auto g = random_tree(rng, 2 + static_cast<int>(rng() % 7));
    auto base = partition_adjacency(g);
    for (Direction dir : {Direction::kCentripetal, Direction::kCentrifugal})
      for (int d = 2; d <= 4; ++d)
        for (int e = d + 1; e <= 5; ++e) {
          auto a = dilated_adjacency(base, d, dir);
          auto b = dilated_adjacency(base, e, dir);
          for (size_t i = 0; i < a.v.size(); ++i) CHECK(a.v[i] * b.v[i] == 0);
        }
  }
}

// cp/cf transposition holds at d = 1 and on path graphs, but the dilation
// formula breaks it on branching trees: after one hub hop the symmetric-walk
// tail reaches siblings from a leaf, while the reverse direction cannot.
TEST_CASE("dilated cp/cf transposition holds on paths but not on stars") {
  for (int n : {3, 5, 8}) {
    auto base = partition_adjacency(path_graph(n));
    for (int d = 2; d <= 4; ++d) {
      auto cp = dilated_adjacency(base, d, Direction::kCentripetal);
      auto cf = dilated_adjacency(base, d, Direction::kCentrifugal);
      for (int64_t i = 0; i < cp.dim(0); ++i)
        for (int64_t j = 0; j < cp.dim(1); ++j) CHECK(cp.at(i, j) == cf.at(j, i));
    }
  }
  auto star = kernel_set(star_graph(4), 2);
  CHECK(star.u_cp.at(1, 2) == 1);  // leaf reaches sibling through the hub
  CHECK(star.u_cf.at(2, 1) == 0);  // hub cannot: every node is one hop away
}

TEST_CASE("oracle agrees with the documented star rows at dilation 2") {
  auto ks = kernel_set(star_graph(4), 2);
  for (int j = 0; j < 5; ++j) {
    CHECK(ks.u_cp.at(0, j) == (j == 0 ? 0 : 1));
    CHECK(ks.u_cp.at(1, j) == (j >= 2 ? 1 : 0));
  }
}

TEST_CASE("root_distances and parents derive from BFS") {
  auto g = star_graph(3);
  auto dist = g.root_distances();
  CHECK(dist == std::vector<int>{0, 1, 1, 1});
  auto par = g.parents();
  CHECK(par == std::vector<int>{-1, 0, 0, 0});

  std::mt19937 rng(47);
  for (int trial = 0; trial < 30; ++trial) {
    auto t = random_tree(rng, 2 + static_cast<int>(rng() % 7));
    auto d = t.root_distances();
    auto p = t.parents();
    CHECK(d[static_cast<size_t>(t.root)] == 0);
    CHECK(p[static_cast<size_t>(t.root)] == -1);
    for (int i = 0; i < t.num_nodes; ++i)
      if (i != t.root)
        CHECK(d[static_cast<size_t>(i)] == d[static_cast<size_t>(p[static_cast<size_t>(i)])] + 1);
  }
}

TEST_CASE("graph validation names each structural violation") {
  SkeletonGraph g;
  g.num_nodes = 0;
  CHECK_THROWS_AS(g.validate(), StructuralError);

  g = path_graph(3);
  g.root = 5;
  CHECK_THROWS_AS(g.validate(), StructuralError);

  g = path_graph(3);
  g.edges.push_back({0, 2});
  CHECK_THROWS_AS(g.validate(), StructuralError);

  g = path_graph(4);
  g.edges[2] = {1, 1};
  CHECK_THROWS_AS(g.validate(), StructuralError);

  g = path_graph(4);
  g.edges[2] = {0, 1};  // duplicate edge
  CHECK_THROWS_AS(g.validate(), StructuralError);

  g = path_graph(4);
  g.edges[2] = {0, 2};  // cycle 0-1-2, node 3 unreachable
  CHECK_THROWS_AS(g.validate(), StructuralError);

  CHECK_THROWS_AS(dilated_adjacency(partition_adjacency(path_graph(3)), 0,
                                    Direction::kCentripetal),
                  ArgumentError);
}
