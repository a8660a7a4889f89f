#ifndef NETREG_GRAPH_HPP
#define NETREG_GRAPH_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include "netreg/diagnostics.hpp"

namespace netreg {

using Index = Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using SparseMatrix = Eigen::SparseMatrix<double>;

/// Undirected edge between two vertices with a nonnegative length.
struct Edge {
  Index source;
  Index target;
  double distance;
};

/*
 * Simple undirected graph on dense vertex ids [0, n) with distance-labeled
 * edges and per-edge similarity weights in (0, 1].  Edges are stored with
 * source < target, sorted lexicographically; duplicate pairs keep the
 * shortest distance.  A freshly built graph carries unit weights.
 */
class WeightedGraph {
 public:
  WeightedGraph() = default;

  WeightedGraph(Index num_vertices, std::vector<Edge> edges,
                std::vector<std::string> labels = {})
      : n_(num_vertices), labels_(std::move(labels)) {
    if (n_ < 0) throw Error("graph: negative vertex count");
    if (!labels_.empty() && static_cast<Index>(labels_.size()) != n_)
      throw Error("graph: label count does not match vertex count");

    std::map<std::pair<Index, Index>, double> unique;
    Index duplicates = 0;
    for (const auto& e : edges) {
      if (e.source < 0 || e.source >= n_ || e.target < 0 || e.target >= n_)
        throw Error("graph: edge endpoint out of range [0, " +
                    std::to_string(n_) + ")");
      if (e.source == e.target)
        throw Error("graph: self-loop at vertex " + std::to_string(e.source));
      if (!std::isfinite(e.distance) || e.distance < 0.0)
        throw Error("graph: edge distances must be finite and >= 0");
      auto key = std::minmax(e.source, e.target);
      auto [it, inserted] = unique.emplace(key, e.distance);
      if (!inserted) {
        ++duplicates;
        it->second = std::min(it->second, e.distance);
      }
    }
    if (duplicates > 0)
      warn("graph: " + std::to_string(duplicates) +
           " duplicate edge(s) collapsed to their minimum distance");

    edges_.reserve(unique.size());
    for (const auto& [key, d] : unique)
      edges_.push_back({key.first, key.second, d});
    weights_ = VectorXd::Ones(static_cast<Index>(edges_.size()));
  }

  Index num_vertices() const { return n_; }
  Index num_edges() const { return static_cast<Index>(edges_.size()); }
  const std::vector<Edge>& edges() const { return edges_; }
  const VectorXd& weights() const { return weights_; }
  const std::vector<std::string>& labels() const { return labels_; }

  std::string label(Index v) const {
    return labels_.empty() ? std::to_string(v) : labels_[static_cast<std::size_t>(v)];
  }

  /// Copy of this graph with new per-edge similarity weights.
  WeightedGraph with_weights(VectorXd weights) const {
    if (weights.size() != num_edges())
      throw Error("graph: weight vector length does not match edge count");
    for (Index e = 0; e < weights.size(); ++e)
      if (!(weights[e] > 0.0 && weights[e] <= 1.0))
        throw Error("graph: weights must lie in (0, 1]");
    WeightedGraph g = *this;
    g.weights_ = std::move(weights);
    return g;
  }

  /// Neighbor lists sorted by ascending vertex id.
  std::vector<std::vector<Index>> adjacency() const {
    std::vector<std::vector<Index>> adj(static_cast<std::size_t>(n_));
    for (const auto& e : edges_) {
      adj[static_cast<std::size_t>(e.source)].push_back(e.target);
      adj[static_cast<std::size_t>(e.target)].push_back(e.source);
    }
    for (auto& list : adj) std::sort(list.begin(), list.end());
    return adj;
  }

  std::vector<double> distances() const {
    std::vector<double> d;
    d.reserve(edges_.size());
    for (const auto& e : edges_) d.push_back(e.distance);
    return d;
  }

 private:
  Index n_ = 0;
  std::vector<Edge> edges_;
  VectorXd weights_;
  std::vector<std::string> labels_;
};

/// Incidence and Laplacian operators of a weighted graph.
struct LaplacianOps {
  SparseMatrix incidence;  // |E| x |V|, entries +-sqrt(w)
  SparseMatrix laplacian;  // D_w - W
  VectorXd degrees;

  Index num_vertices() const { return laplacian.rows(); }

  /// beta' L beta, the weighted sum of squared differences across edges.
  double quadratic_form(const VectorXd& beta) const {
    if (beta.size() != laplacian.rows())
      throw Error("quadratic_form: vector length does not match graph size");
    return beta.dot(laplacian * beta);
  }
};

/// Linear-interpolation sample quantile (type 7).
inline double sample_quantile(std::vector<double> values, double q) {
  if (values.empty()) throw Error("quantile of an empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw Error("quantile level must be in [0, 1]");
  std::sort(values.begin(), values.end());
  const double h = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

/// Range psi such that exp(-quantile/psi) equals the target similarity.
inline double calibrate_range(std::span<const double> distances,
                              double target_quantile = 0.5,
                              double target_similarity = 0.8) {
  if (distances.empty()) throw Error("calibrate_range: no distances");
  if (!(target_similarity > 0.0 && target_similarity < 1.0))
    throw Error("calibrate_range: target similarity must be in (0, 1)");
  const double q = sample_quantile({distances.begin(), distances.end()},
                                   target_quantile);
  if (!(q > 0.0))
    throw Error(
        "calibrate_range: degenerate metric, the target quantile of the "
        "distances is zero");
  return -q / std::log(target_similarity);
}

/// Exponential-decay similarity weights, anchored so the shortest edge gets 1.
inline WeightedGraph apply_weights(const WeightedGraph& graph, double range) {
  if (!(range > 0.0) || !std::isfinite(range))
    throw Error("apply_weights: range must be positive and finite");
  VectorXd w(graph.num_edges());
  if (graph.num_edges() == 0) return graph.with_weights(w);
  double d_min = std::numeric_limits<double>::infinity();
  for (const auto& e : graph.edges()) d_min = std::min(d_min, e.distance);
  for (Index k = 0; k < w.size(); ++k) {
    const double d = graph.edges()[static_cast<std::size_t>(k)].distance;
    // Floor keeps huge distances inside (0, 1].
    w[k] = std::max(std::exp(-(d - d_min) / range),
                    std::numeric_limits<double>::min());
  }
  return graph.with_weights(std::move(w));
}

inline LaplacianOps build_laplacian(const WeightedGraph& graph) {
  const Index n = graph.num_vertices();
  const Index m = graph.num_edges();
  const auto& edges = graph.edges();
  const auto& w = graph.weights();

  using Triplet = Eigen::Triplet<double>;
  std::vector<Triplet> inc, lap;
  inc.reserve(static_cast<std::size_t>(2 * m));
  lap.reserve(static_cast<std::size_t>(4 * m + n));
  VectorXd degrees = VectorXd::Zero(n);
  for (Index e = 0; e < m; ++e) {
    const auto& edge = edges[static_cast<std::size_t>(e)];
    const double root = std::sqrt(w[e]);
    inc.emplace_back(e, edge.source, root);
    inc.emplace_back(e, edge.target, -root);
    lap.emplace_back(edge.source, edge.target, -w[e]);
    lap.emplace_back(edge.target, edge.source, -w[e]);
    degrees[edge.source] += w[e];
    degrees[edge.target] += w[e];
  }
  for (Index v = 0; v < n; ++v) lap.emplace_back(v, v, degrees[v]);

  LaplacianOps ops;
  ops.incidence.resize(m, n);
  ops.incidence.setFromTriplets(inc.begin(), inc.end());
  ops.laplacian.resize(n, n);
  ops.laplacian.setFromTriplets(lap.begin(), lap.end());
  ops.degrees = std::move(degrees);
  return ops;
}

/// Component id per vertex (ids assigned in order of the smallest member).
inline std::vector<Index> connected_components(const WeightedGraph& graph,
                                               Index* count = nullptr) {
  const auto adj = graph.adjacency();
  std::vector<Index> comp(static_cast<std::size_t>(graph.num_vertices()), -1);
  Index next = 0;
  std::vector<Index> stack;
  for (Index s = 0; s < graph.num_vertices(); ++s) {
    if (comp[static_cast<std::size_t>(s)] >= 0) continue;
    comp[static_cast<std::size_t>(s)] = next;
    stack.assign(1, s);
    while (!stack.empty()) {
      const Index v = stack.back();
      stack.pop_back();
      for (Index u : adj[static_cast<std::size_t>(v)])
        if (comp[static_cast<std::size_t>(u)] < 0) {
          comp[static_cast<std::size_t>(u)] = next;
          stack.push_back(u);
        }
    }
    ++next;
  }
  if (count) *count = next;
  return comp;
}

/// A subgraph together with the parent id of each of its vertices.
struct InducedSubgraph {
  WeightedGraph graph;
  std::vector<Index> parent_ids;
};

/// Subgraph induced by `vertices`; vertex k of the result is vertices[k].
inline InducedSubgraph induced_subgraph(const WeightedGraph& graph,
                                        std::span<const Index> vertices) {
  std::vector<Index> local(static_cast<std::size_t>(graph.num_vertices()), -1);
  for (std::size_t k = 0; k < vertices.size(); ++k) {
    const Index v = vertices[k];
    if (v < 0 || v >= graph.num_vertices())
      throw Error("induced_subgraph: vertex out of range");
    if (local[static_cast<std::size_t>(v)] >= 0)
      throw Error("induced_subgraph: repeated vertex");
    local[static_cast<std::size_t>(v)] = static_cast<Index>(k);
  }
  std::vector<Edge> edges;
  std::vector<double> kept_weights;
  for (std::size_t e = 0; e < graph.edges().size(); ++e) {
    const auto& edge = graph.edges()[e];
    const Index a = local[static_cast<std::size_t>(edge.source)];
    const Index b = local[static_cast<std::size_t>(edge.target)];
    if (a >= 0 && b >= 0) edges.push_back({a, b, edge.distance});
  }
  std::vector<std::string> labels;
  labels.reserve(vertices.size());
  for (Index v : vertices) labels.push_back(graph.label(v));

  InducedSubgraph out{
      WeightedGraph(static_cast<Index>(vertices.size()), edges, std::move(labels)),
      {vertices.begin(), vertices.end()}};

  // Re-attach parent weights in the subgraph's canonical edge order.
  std::map<std::pair<Index, Index>, double> parent_weight;
  for (std::size_t e = 0; e < graph.edges().size(); ++e) {
    const auto& edge = graph.edges()[e];
    parent_weight[{edge.source, edge.target}] = graph.weights()[static_cast<Index>(e)];
  }
  VectorXd w(out.graph.num_edges());
  for (Index e = 0; e < w.size(); ++e) {
    const auto& edge = out.graph.edges()[static_cast<std::size_t>(e)];
    auto key = std::minmax(vertices[static_cast<std::size_t>(edge.source)],
                           vertices[static_cast<std::size_t>(edge.target)]);
    w[e] = parent_weight.at(key);
  }
  out.graph = out.graph.with_weights(std::move(w));
  return out;
}

/*
 * Breadth-first order from `source`: whole layers in turn, each layer sorted
 * by ascending vertex id.  Returns the first `size` vertices.
 */
inline std::vector<Index> bfs_order(const WeightedGraph& graph, Index source,
                                    Index size,
                                    const std::vector<std::vector<Index>>* adjacency = nullptr) {
  if (source < 0 || source >= graph.num_vertices())
    throw Error("bfs: source vertex out of range");
  if (size < 1) throw Error("bfs: size must be at least 1");
  std::vector<std::vector<Index>> own;
  if (!adjacency) {
    own = graph.adjacency();
    adjacency = &own;
  }
  std::vector<char> seen(static_cast<std::size_t>(graph.num_vertices()), 0);
  std::vector<Index> order{source};
  std::vector<Index> layer{source};
  seen[static_cast<std::size_t>(source)] = 1;
  while (static_cast<Index>(order.size()) < size && !layer.empty()) {
    std::vector<Index> next;
    for (Index v : layer)
      for (Index u : (*adjacency)[static_cast<std::size_t>(v)])
        if (!seen[static_cast<std::size_t>(u)]) {
          seen[static_cast<std::size_t>(u)] = 1;
          next.push_back(u);
        }
    std::sort(next.begin(), next.end());
    for (Index u : next) {
      if (static_cast<Index>(order.size()) == size) break;
      order.push_back(u);
    }
    layer = std::move(next);
  }
  if (static_cast<Index>(order.size()) < size) {
    Index reachable = 0;
    for (char s : seen) reachable += s;
    throw Error("bfs: requested " + std::to_string(size) +
                " vertices but the component of the source has only " +
                std::to_string(reachable));
  }
  return order;
}

/// Connected induced subgraph of `size` vertices grown by BFS from `source`.
inline InducedSubgraph bfs_subgraph(const WeightedGraph& graph, Index source,
                                    Index size) {
  const auto order = bfs_order(graph, source, size);
  return induced_subgraph(graph, order);
}

}  // namespace netreg

#endif  // NETREG_GRAPH_HPP
