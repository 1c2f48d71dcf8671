#pragma once

#include <utility>
#include <vector>

#include "stcnet/tensor.hpp"

namespace stcnet::graph {

// Rooted tree over skeleton joints. Edge pairs may arrive in either order;
// direction relative to the root is derived from hop distance.
struct SkeletonGraph {
  int num_nodes = 0;
  std::vector<std::pair<int, int>> edges;  // (parent, child)
  int root = 0;

  void validate() const;                    // StructuralError on any violation
  std::vector<int> root_distances() const;  // BFS hops from root
  std::vector<int> parents() const;         // parent per node, -1 at root
};

enum class Direction { kCentripetal, kIdentity, kCentrifugal };

// One dilation's worth of directional kernels.
struct AdjacencyKernelSet {
  int dilation = 1;
  Tensor<double> a_cp, a_id, a_cf;   // degree-normalized
  Tensor<int64_t> u_cp, u_id, u_cf;  // unnormalized binary counterparts
};

// 1 where the entry is >= 1, else 0. NaN input -> NumericError.
Tensor<int64_t> lambda_binarize(const Tensor<double>& m);
Tensor<int64_t> lambda_binarize(const Tensor<int64_t>& m);

// Hop-1 kernels: a_cp links child->parent, a_cf parent->child, a_id = I.
AdjacencyKernelSet partition_adjacency(const SkeletonGraph& g);

// Exact-hop-band kernel for dilation d built from the hop-1 set.
// d == 1 returns the base kernel; the identity kernel is I at every d.
Tensor<int64_t> dilated_adjacency(const AdjacencyKernelSet& base, int d, Direction dir);

// Symmetric degree normalization with row-sum degrees; zero rows get degree 1.
Tensor<double> normalize_adjacency(const Tensor<double>& m);

// Full kernel set (unnormalized + normalized) for one dilation.
AdjacencyKernelSet kernel_set(const SkeletonGraph& g, int d);

}  // namespace stcnet::graph
