// Test-only helpers: random graphs and dense reference computations that do
// not go through the library code paths they are used to check.
#ifndef NETREG_TEST_SUPPORT_HPP
#define NETREG_TEST_SUPPORT_HPP

#include <cmath>
#include <random>
#include <set>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "netreg/graph.hpp"

namespace netreg::testing {

/// Random spanning tree plus `extra` chords, distances uniform on (0.05, 2).
inline WeightedGraph random_graph(Index n, Index extra, std::mt19937_64& rng,
                                  bool connected = true) {
  std::uniform_real_distribution<double> dist(0.05, 2.0);
  std::set<std::pair<Index, Index>> used;
  std::vector<Edge> edges;
  auto add = [&](Index a, Index b) {
    if (a == b) return;
    auto key = std::minmax(a, b);
    if (used.insert(key).second) edges.push_back({a, b, dist(rng)});
  };
  if (connected)
    for (Index v = 1; v < n; ++v) add(v, std::uniform_int_distribution<Index>(0, v - 1)(rng));
  std::uniform_int_distribution<Index> pick(0, n - 1);
  for (Index k = 0; k < extra; ++k) add(pick(rng), pick(rng));
  return WeightedGraph(n, edges);
}

inline WeightedGraph path_graph(Index n) {
  std::vector<Edge> edges;
  for (Index v = 0; v + 1 < n; ++v) edges.push_back({v, v + 1, 1.0});
  return WeightedGraph(n, edges);
}

inline WeightedGraph grid_graph(Index rows, Index cols) {
  std::vector<Edge> edges;
  auto id = [cols](Index r, Index c) { return r * cols + c; };
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) {
      if (c + 1 < cols) edges.push_back({id(r, c), id(r, c + 1), 1.0});
      if (r + 1 < rows) edges.push_back({id(r, c), id(r + 1, c), 1.0});
    }
  return WeightedGraph(rows * cols, edges);
}

/// Weighted graph with exp-decay weights at range 1 (test shorthand).
inline WeightedGraph weighted(const WeightedGraph& g) {
  return apply_weights(g, 1.0);
}

/// Dense D - W assembled entry by entry.
inline Eigen::MatrixXd dense_laplacian(const WeightedGraph& g) {
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(g.num_vertices(), g.num_vertices());
  for (std::size_t e = 0; e < g.edges().size(); ++e) {
    const auto& edge = g.edges()[e];
    const double w = g.weights()[static_cast<Index>(e)];
    L(edge.source, edge.target) -= w;
    L(edge.target, edge.source) -= w;
    L(edge.source, edge.source) += w;
    L(edge.target, edge.target) += w;
  }
  return L;
}

/// sum over edges of w (b_i - b_j)^2.
inline double edge_sum_form(const WeightedGraph& g, const Eigen::VectorXd& beta) {
  double s = 0.0;
  for (std::size_t e = 0; e < g.edges().size(); ++e) {
    const auto& edge = g.edges()[e];
    const double d = beta[edge.source] - beta[edge.target];
    s += g.weights()[static_cast<Index>(e)] * d * d;
  }
  return s;
}

inline Eigen::VectorXd random_normal(Index n, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> z(0.0, sd);
  Eigen::VectorXd v(n);
  for (Index i = 0; i < n; ++i) v[i] = z(rng);
  return v;
}

inline Eigen::MatrixXd random_matrix(Index rows, Index cols, std::mt19937_64& rng,
                                     double sd = 1.0) {
  std::normal_distribution<double> z(0.0, sd);
  Eigen::MatrixXd m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = z(rng);
  return m;
}

/// Poisson draws with the given means.
inline Eigen::VectorXd poisson_draws(const Eigen::VectorXd& mu, std::mt19937_64& rng) {
  Eigen::VectorXd y(mu.size());
  for (Index v = 0; v < mu.size(); ++v)
    y[v] = static_cast<double>(std::poisson_distribution<long>(mu[v])(rng));
  return y;
}

}  // namespace netreg::testing

#endif  // NETREG_TEST_SUPPORT_HPP
