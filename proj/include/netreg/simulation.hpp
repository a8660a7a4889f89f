#ifndef NETREG_SIMULATION_HPP
#define NETREG_SIMULATION_HPP

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "netreg/glm.hpp"
#include "netreg/graph.hpp"
#include "netreg/hotzone.hpp"
#include "netreg/parallel.hpp"
#include "netreg/rank_selection.hpp"
#include "netreg/spectral.hpp"
#include "netreg/tuner.hpp"

namespace netreg {

using Rng = std::mt19937_64;

/*
 * Synthetic street network: a rows x cols lattice of intersections with
 * jittered coordinates, each street segment dropped with probability
 * `drop`, distances Euclidean in units of one block.  Vertex labels are
 * "r<row>c<col>".
 */
inline WeightedGraph street_grid(Index rows, Index cols, std::uint64_t seed, double jitter = 0.25,
                                 double drop = 0.1) {
  if (rows < 1 || cols < 1) throw Error("street_grid: need at least one row and one column");
  if (!(jitter >= 0 && jitter < 0.5)) throw Error("street_grid: jitter must lie in [0, 0.5)");
  if (!(drop >= 0 && drop < 1)) throw Error("street_grid: drop probability must lie in [0, 1)");
  Rng rng(seed);
  std::uniform_real_distribution<double> shake(-jitter, jitter);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const Index n = rows * cols;
  std::vector<double> x(static_cast<std::size_t>(n)), y(static_cast<std::size_t>(n));
  std::vector<std::string> labels;
  labels.reserve(static_cast<std::size_t>(n));
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) {
      const auto v = static_cast<std::size_t>(r * cols + c);
      x[v] = static_cast<double>(c) + shake(rng);
      y[v] = static_cast<double>(r) + shake(rng);
      labels.push_back("r" + std::to_string(r) + "c" + std::to_string(c));
    }
  std::vector<Edge> edges;
  auto link = [&](Index a, Index b) {
    if (unit(rng) < drop) return;
    const auto i = static_cast<std::size_t>(a), j = static_cast<std::size_t>(b);
    edges.push_back({a, b, std::hypot(x[i] - x[j], y[i] - y[j])});
  };
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) {
      if (c + 1 < cols) link(r * cols + c, r * cols + c + 1);
      if (r + 1 < rows) link(r * cols + c, (r + 1) * cols + c);
    }
  return WeightedGraph(n, std::move(edges), std::move(labels));
}

/*
 * One draw from N(0, (lambda A)^-) for a symmetric PSD A: eigenpairs with
 * xi_i > 1e-10 xi_max contribute z_i (lambda xi_i)^{-1/2} v_i, null directions
 * contribute nothing.
 */
inline VectorXd sample_prior_theta(const MatrixXd& gram, double lambda, Rng& rng) {
  if (!(lambda > 0)) throw Error("sample_prior_theta: lambda must be positive");
  if (gram.rows() != gram.cols()) throw Error("sample_prior_theta: gram must be square");
  const Index m = gram.rows();
  if (m == 0) return VectorXd();
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(0.5 * (gram + gram.transpose()));
  const double top = std::max(eig.eigenvalues().maxCoeff(), 0.0);
  std::normal_distribution<double> z(0.0, 1.0);
  VectorXd theta = VectorXd::Zero(m);
  for (Index i = 0; i < m; ++i) {
    const double xi = eig.eigenvalues()[i];
    const double draw = z(rng);
    if (xi > 1e-10 * top) theta += draw / std::sqrt(lambda * xi) * eig.eigenvectors().col(i);
  }
  return theta;
}

inline VectorXd sample_prior_theta(const MatrixXd& design, const SparseMatrix& laplacian,
                                   double lambda, std::uint64_t seed) {
  Rng rng(seed);
  return sample_prior_theta(laplacian_gram(design, laplacian), lambda, rng);
}

/// Negative binomial draw with mean mu and variance mu + mu^2 / size (gamma-Poisson mixture).
inline double negative_binomial(double mu, double size, Rng& rng) {
  if (!(size > 0)) throw Error("negative_binomial: size must be positive");
  if (!(mu >= 0)) throw Error("negative_binomial: mean must be nonnegative");
  if (mu == 0) return 0.0;
  const double rate = std::gamma_distribution<double>(size, mu / size)(rng);
  if (!(rate > 0)) return 0.0;
  return static_cast<double>(std::poisson_distribution<long long>(rate)(rng));
}

struct ScenarioConfig {
  Index subgraph_size = 200;  // 818 matches the paper's neighborhoods
  Index num_zones = 3;
  Index zone_size = 40;
  double zeta = -2.5;
  Index tau = 10;  // universal generating rank
  double lambda = 1.0;
  Index num_covariates = 2;
  double nb_size = 1.0;
  double range_quantile = 0.5;
  double range_similarity = 0.8;
  int zone_attempts = 100;
};

struct Scenario {
  WeightedGraph graph;  // weighted subgraph, labels from the base graph
  std::vector<Index> base_ids;
  double range = 1.0;
  MatrixXd covariates;  // n x p, without the intercept
  std::vector<std::vector<Index>> hot_zones;
  std::vector<int> background;  // Z_v: 1 background, 0 hot
  Index tau = 0;
  double lambda = 1.0;
  VectorXd theta;
  double zeta = 0.0;
  VectorXd mean;
  VectorXd counts;
  std::uint64_t seed = 0;

  Index num_vertices() const { return graph.num_vertices(); }
};

/*
 * Generating protocol: BFS subgraph from a uniform source, calibrated weights,
 * covariates N(0, 1), theta from the smoothing prior at a universal rank,
 * BFS-grown hot zones, then negative binomial counts with mean
 * exp(Z zeta + (1 - Z) D_X theta).
 */
inline Scenario generate_scenario(const WeightedGraph& base, const ScenarioConfig& cfg,
                                  std::uint64_t seed) {
  const Index n = cfg.subgraph_size;
  if (n < 3) throw Error("simulate: subgraph size must be at least 3");
  if (cfg.tau < 1 || cfg.tau > n) throw Error("simulate: generating rank must lie in [1, n]");
  if (cfg.num_zones < 0 || cfg.zone_size < 1 || cfg.zone_size > n)
    throw Error("simulate: zone size must lie in [1, n]");
  if (cfg.num_covariates < 0) throw Error("simulate: negative covariate count");
  Rng rng(seed);

  Index components = 0;
  const auto comp = connected_components(base, &components);
  std::vector<Index> comp_size(static_cast<std::size_t>(components), 0);
  for (Index c : comp) ++comp_size[static_cast<std::size_t>(c)];
  std::vector<Index> sources;
  for (Index v = 0; v < base.num_vertices(); ++v)
    if (comp_size[static_cast<std::size_t>(comp[static_cast<std::size_t>(v)])] >= n)
      sources.push_back(v);
  if (sources.empty())
    throw Error("simulate: base graph has no connected component with " + std::to_string(n) +
                " vertices");
  const Index source =
      sources[std::uniform_int_distribution<std::size_t>(0, sources.size() - 1)(rng)];
  auto sub = bfs_subgraph(base, source, n);

  Scenario s;
  s.seed = seed;
  s.base_ids = std::move(sub.parent_ids);
  const auto distances = sub.graph.distances();
  s.range = calibrate_range(distances, cfg.range_quantile, cfg.range_similarity);
  s.graph = apply_weights(sub.graph, s.range);
  const auto ops = build_laplacian(s.graph);
  const auto basis = eigenbasis(ops, cfg.tau);

  std::normal_distribution<double> z(0.0, 1.0);
  s.covariates.resize(n, cfg.num_covariates);
  for (Index j = 0; j < cfg.num_covariates; ++j)
    for (Index v = 0; v < n; ++v) s.covariates(v, j) = z(rng);
  s.tau = cfg.tau;
  s.lambda = cfg.lambda;
  const std::vector<Index> ranks(static_cast<std::size_t>(cfg.num_covariates + 1), cfg.tau);
  const auto design = build_design(s.covariates, basis, ranks);
  s.theta = sample_prior_theta(laplacian_gram(design.matrix(), ops.laplacian), cfg.lambda, rng);

  const auto adjacency = s.graph.adjacency();
  std::vector<char> claimed(static_cast<std::size_t>(n), 0);
  for (Index k = 0; k < cfg.num_zones; ++k) {
    std::vector<Index> zone;
    bool clean = false;
    for (int attempt = 0; attempt < cfg.zone_attempts && !clean; ++attempt) {
      std::vector<Index> open;
      for (Index v = 0; v < n; ++v)
        if (!claimed[static_cast<std::size_t>(v)]) open.push_back(v);
      if (open.empty()) break;
      const Index start = open[std::uniform_int_distribution<std::size_t>(0, open.size() - 1)(rng)];
      zone = bfs_order(s.graph, start, cfg.zone_size, &adjacency);
      clean = std::none_of(zone.begin(), zone.end(),
                           [&](Index v) { return claimed[static_cast<std::size_t>(v)] != 0; });
    }
    if (!clean) {
      if (zone.empty())
        zone = bfs_order(s.graph, std::uniform_int_distribution<Index>(0, n - 1)(rng),
                         cfg.zone_size, &adjacency);
      warn("simulate: hot zone " + std::to_string(k + 1) + " overlaps an earlier zone after " +
           std::to_string(cfg.zone_attempts) + " attempts");
    }
    std::sort(zone.begin(), zone.end());
    for (Index v : zone) claimed[static_cast<std::size_t>(v)] = 1;
    s.hot_zones.push_back(std::move(zone));
  }

  s.zeta = cfg.zeta;
  s.background.assign(static_cast<std::size_t>(n), 1);
  for (const auto& zone : s.hot_zones)
    for (Index v : zone) s.background[static_cast<std::size_t>(v)] = 0;
  const VectorXd hot = design.matrix() * s.theta;
  const double background_mean = std::exp(cfg.zeta);
  s.mean.resize(n);
  s.counts.resize(n);
  for (Index v = 0; v < n; ++v) {
    s.mean[v] = s.background[static_cast<std::size_t>(v)]
                    ? background_mean
                    : std::exp(std::min(hot[v], link::kMaxEta));
    s.counts[v] = negative_binomial(s.mean[v], cfg.nb_size, rng);
  }
  return s;
}

/// sum |y - mu| / sum y over the selected vertices (all when `members` is empty).
inline double relative_error(const VectorXd& y, const VectorXd& mu,
                             std::span<const Index> members = {}) {
  if (y.size() != mu.size()) throw Error("relative_error: length mismatch");
  double num = 0.0, den = 0.0;
  auto add = [&](Index v) {
    num += std::abs(y[v] - mu[v]);
    den += y[v];
  };
  if (members.empty())
    for (Index v = 0; v < y.size(); ++v) add(v);
  else
    for (Index v : members) add(v);
  if (den == 0.0) return num == 0.0 ? 0.0 : std::numeric_limits<double>::quiet_NaN();
  return num / den;
}

struct ComparisonOptions {
  Index basis_rank = 30;
  double alpha0 = 0.9;
  double alpha1 = 0.9;
  double elicitation_pct = 0.05;
  TuneOptions tune;
  HotzoneOptions hotzone;
  double quartile = 0.75;
  double condition_limit = 1e10;
};

struct StratumError {
  std::string stratum;  // "HZ1".."HZk" or "BG"
  double relative_error = 0.0;
};

struct ModelOutcome {
  std::string model;  // Mod1..Mod4
  bool ok = false;
  std::string error;
  VectorXd mean;
  std::vector<StratumError> strata;
  double seconds = 0.0;
};

struct ComparisonReport {
  Index replicate = 0;
  std::uint64_t seed = 0;
  std::vector<ModelOutcome> models;
  VectorXd background_posterior;  // Mod4 pi
  double lambda = 0.0;
  double v0 = 0.0;
  std::vector<Index> ranks;
  Index intercept_rank = 0;  // Mod1 tau
  double seconds = 0.0;

  const ModelOutcome& model(const std::string& name) const {
    for (const auto& m : models)
      if (m.model == name) return m;
    throw Error("comparison: no model named " + name);
  }
};

/// Background vertices of a scenario, ascending.
inline std::vector<Index> background_vertices(const Scenario& s) {
  std::vector<Index> out;
  for (Index v = 0; v < s.num_vertices(); ++v)
    if (s.background[static_cast<std::size_t>(v)]) out.push_back(v);
  return out;
}

/// Union of the hot zones, ascending.
inline std::vector<Index> hot_vertices(const Scenario& s) {
  std::vector<Index> out;
  for (Index v = 0; v < s.num_vertices(); ++v)
    if (!s.background[static_cast<std::size_t>(v)]) out.push_back(v);
  return out;
}

/*
 * Fits the four comparison models to one scenario:
 *   Mod1 intercept-only spectral Poisson at the largest rank whose penalized
 *        normal matrix has condition number below the limit,
 *   Mod2 covariate Poisson without the network,
 *   Mod3 the smoothed model with tuned ranks and lambda,
 *   Mod4 the hot-zone mixture started from Mod3.
 * A failing model is recorded and the others still run.
 */
inline ComparisonReport run_comparison(const Scenario& s, const ComparisonOptions& opt,
                                       Index replicate = 0) {
  using Clock = std::chrono::steady_clock;
  const auto started = Clock::now();
  const Index n = s.num_vertices();
  ComparisonReport report;
  report.replicate = replicate;
  report.seed = s.seed;

  const auto ops = build_laplacian(s.graph);
  const Index K = std::max<Index>(2, std::min(opt.basis_rank, n - 1));
  const auto basis = eigenbasis(ops, K);
  const auto elicited = elicit_tau_hyperparams(
      std::span<const double>(basis.eigenvalues.data(), static_cast<std::size_t>(K)),
      opt.elicitation_pct, opt.alpha0, opt.alpha1, K);
  const auto prior = tau_prior(opt.alpha0, opt.alpha1, elicited.rho, K);

  const auto background = background_vertices(s);
  auto score = [&](ModelOutcome& m) {
    for (std::size_t k = 0; k < s.hot_zones.size(); ++k)
      m.strata.push_back({"HZ" + std::to_string(k + 1), relative_error(s.counts, m.mean, s.hot_zones[k])});
    m.strata.push_back({"BG", relative_error(s.counts, m.mean, background)});
  };
  auto run = [&](const std::string& name, auto&& body) {
    ModelOutcome m;
    m.model = name;
    const auto t0 = Clock::now();
    try {
      m.mean = body();
      m.ok = true;
      score(m);
    } catch (const std::exception& e) {
      m.error = e.what();
      warn("comparison: " + name + " failed: " + m.error);
    }
    m.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    return m;
  };

  // Mod3 first: Mod1 and Mod4 reuse its lambda, Mod4 its fit.
  TuneResult tuned;
  SmoothedFit smoothed;
  bool have_smoothed = false;
  auto mod3 = run("Mod3", [&] {
    TuneProblem problem{s.counts, s.covariates, basis, ops.laplacian, prior};
    tuned = tune(problem, opt.tune);
    smoothed = fit_smoothed(s.counts, s.covariates, basis, ops.laplacian, tuned.ranks, tuned.lambda);
    have_smoothed = true;
    report.lambda = tuned.lambda;
    report.v0 = tuned.v0;
    report.ranks = tuned.ranks;
    return smoothed.fit.fitted;
  });

  const double lambda = have_smoothed ? tuned.lambda : opt.tune.initial_lambda;
  auto mod1 = run("Mod1", [&] {
    for (Index t = K; t >= 1; --t) {
      GlmSpec spec;
      spec.response = s.counts;
      spec.prior_precision = (lambda * basis.eigenvalues.head(t)).asDiagonal();
      spec.validate_prior = false;
      try {
        const auto f = fit(basis.eigenvectors.leftCols(t), spec);
        if (condition_number(f) < opt.condition_limit) {
          report.intercept_rank = t;
          return f.fitted;
        }
      } catch (const SingularSystemError&) {
      }
    }
    throw Error("no intercept rank gives a well-conditioned normal matrix");
  });

  auto mod2 = run("Mod2", [&] {
    GlmSpec spec;
    spec.response = s.counts;
    spec.tol = 1e-13;
    return fit(with_intercept(s.covariates), spec).fitted;
  });

  auto mod4 = run("Mod4", [&] {
    if (!have_smoothed) throw Error("needs the Mod3 fit, which failed");
    HotzoneInputs in;
    in.counts = s.counts;
    in.design_x = smoothed.design.matrix();
    in.design_u = in.design_x;
    in.gram_x = smoothed.gram;
    in.gram_u = smoothed.gram;
    in.lambda_theta = tuned.lambda;
    in.lambda_omega = tuned.lambda;
    const auto init = initialize_hotzone(in, smoothed.fit.fitted, opt.quartile, opt.hotzone);
    const auto model = run_hotzone_em(in, init.state, opt.hotzone);
    report.background_posterior = model.state.pi;
    return predict_hotzone(in, model.state);
  });

  report.models = {std::move(mod1), std::move(mod2), std::move(mod3), std::move(mod4)};
  report.seconds = std::chrono::duration<double>(Clock::now() - started).count();
  return report;
}

/// Relative error over the union of the hot zones.
inline double pooled_hot_error(const Scenario& s, const ModelOutcome& m) {
  if (!m.ok) return std::numeric_limits<double>::quiet_NaN();
  return relative_error(s.counts, m.mean, hot_vertices(s));
}

struct Replicate {
  Scenario scenario;
  ComparisonReport report;
};

/// Per-replicate seed derived from the study seed (splitmix64 step).
inline std::uint64_t replicate_seed(std::uint64_t seed, Index replicate) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(replicate + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Generates and compares `replicates` scenarios, in parallel across replicates.
inline std::vector<Replicate> run_study(const WeightedGraph& base, const ScenarioConfig& cfg,
                                        ComparisonOptions opt, Index replicates, std::uint64_t seed,
                                        unsigned threads = 0) {
  if (replicates < 1) throw Error("simulate: need at least one replicate");
  const unsigned workers = thread_count(threads);
  if (workers > 1) opt.tune.threads = 1;
  std::vector<Replicate> out(static_cast<std::size_t>(replicates));
  parallel_for(out.size(), workers, [&](std::size_t r) {
    const auto index = static_cast<Index>(r);
    out[r].scenario = generate_scenario(base, cfg, replicate_seed(seed, index));
    out[r].report = run_comparison(out[r].scenario, opt, index);
  });
  return out;
}

/// Fraction of entries outside (lo, hi).
inline double fraction_outside(const VectorXd& pi, double lo = 0.2, double hi = 0.8) {
  if (pi.size() == 0) return std::numeric_limits<double>::quiet_NaN();
  Index count = 0;
  for (Index v = 0; v < pi.size(); ++v)
    if (!(pi[v] > lo && pi[v] < hi)) ++count;
  return static_cast<double>(count) / static_cast<double>(pi.size());
}

// Scenario file: one JSON document with the graph, the truth and the counts.

inline nlohmann::json vector_json(const VectorXd& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

inline VectorXd json_vector(const nlohmann::json& j) {
  const auto values = j.get<std::vector<double>>();
  return Eigen::Map<const VectorXd>(values.data(), static_cast<Index>(values.size()));
}

inline nlohmann::json scenario_json(const Scenario& s) {
  nlohmann::json edges = nlohmann::json::array();
  for (std::size_t e = 0; e < s.graph.edges().size(); ++e) {
    const auto& edge = s.graph.edges()[e];
    edges.push_back({edge.source, edge.target, edge.distance, s.graph.weights()[static_cast<Index>(e)]});
  }
  nlohmann::json cov = nlohmann::json::array();
  for (Index j = 0; j < s.covariates.cols(); ++j) cov.push_back(vector_json(s.covariates.col(j)));
  return {{"format", "netreg-scenario-1"},
          {"seed", s.seed},
          {"num_vertices", s.num_vertices()},
          {"labels", s.graph.labels()},
          {"base_ids", s.base_ids},
          {"edges", edges},
          {"range", s.range},
          {"covariates", cov},
          {"hot_zones", s.hot_zones},
          {"background", s.background},
          {"tau", s.tau},
          {"lambda", s.lambda},
          {"theta", vector_json(s.theta)},
          {"zeta", s.zeta},
          {"mean", vector_json(s.mean)},
          {"counts", vector_json(s.counts)}};
}

inline Scenario scenario_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "netreg-scenario-1") throw Error("scenario: unrecognized file format");
  Scenario s;
  const Index n = j.at("num_vertices").get<Index>();
  std::vector<Edge> edges;
  std::vector<double> weights;
  for (const auto& e : j.at("edges")) {
    edges.push_back({e.at(0).get<Index>(), e.at(1).get<Index>(), e.at(2).get<double>()});
    weights.push_back(e.at(3).get<double>());
  }
  WeightedGraph g(n, edges, j.at("labels").get<std::vector<std::string>>());
  if (g.num_edges() != static_cast<Index>(weights.size()))
    throw Error("scenario: edge list is not in canonical form");
  s.graph = g.with_weights(Eigen::Map<const VectorXd>(weights.data(), static_cast<Index>(weights.size())));
  s.seed = j.at("seed").get<std::uint64_t>();
  s.base_ids = j.at("base_ids").get<std::vector<Index>>();
  s.range = j.at("range").get<double>();
  const auto& cov = j.at("covariates");
  s.covariates.resize(n, static_cast<Index>(cov.size()));
  for (std::size_t c = 0; c < cov.size(); ++c) s.covariates.col(static_cast<Index>(c)) = json_vector(cov[c]);
  s.hot_zones = j.at("hot_zones").get<std::vector<std::vector<Index>>>();
  s.background = j.at("background").get<std::vector<int>>();
  s.tau = j.at("tau").get<Index>();
  s.lambda = j.at("lambda").get<double>();
  s.theta = json_vector(j.at("theta"));
  s.zeta = j.at("zeta").get<double>();
  s.mean = json_vector(j.at("mean"));
  s.counts = json_vector(j.at("counts"));
  if (s.counts.size() != n || s.mean.size() != n || static_cast<Index>(s.background.size()) != n)
    throw Error("scenario: per-vertex arrays do not match the vertex count");
  return s;
}

inline void save_scenario(const std::filesystem::path& path, const Scenario& s) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("scenario: cannot write " + path.string());
  out << scenario_json(s).dump(1) << '\n';
  if (!out) throw Error("scenario: write failed for " + path.string());
}

inline Scenario load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("scenario: cannot read " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("scenario: " + path.string() + " is not valid JSON: " + e.what());
  }
  return scenario_from_json(j);
}

}  // namespace netreg

#endif  // NETREG_SIMULATION_HPP
