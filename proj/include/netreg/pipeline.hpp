#ifndef NETREG_PIPELINE_HPP
#define NETREG_PIPELINE_HPP

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"
#include "netreg/glm.hpp"
#include "netreg/graph.hpp"
#include "netreg/hotzone.hpp"
#include "netreg/io.hpp"
#include "netreg/rank_selection.hpp"
#include "netreg/simulation.hpp"
#include "netreg/spectral.hpp"
#include "netreg/tuner.hpp"

namespace netreg {

inline constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Run configuration

struct SimulationSettings {
  Index grid_rows = 40;
  Index grid_cols = 40;
  Index subgraph_size = 200;
  Index zones = 3;
  Index zone_size = 40;
  double zeta = -2.5;
  Index tau = 10;
  double lambda = 1.0;
  Index covariates = 2;
  double nb_size = 1.0;
  Index replicates = 20;
  bool compare = true;
  bool write_inputs = true;
  Index basis_rank = 30;  // rank used when fitting the comparison models
  bool check = false;     // fail unless the hot-zone model wins often enough
  double win_fraction = 0.8;
};

struct RunConfig {
  std::string edges;
  std::string vertices;
  std::string output = "netreg-out";
  std::string id_column = "vertex";
  std::string response = "count";
  std::vector<std::string> covariates;   // empty: all non-id, non-response columns
  std::vector<std::string> categorical;  // forced categorical columns
  std::optional<double> range;           // unset: calibrate
  double range_quantile = 0.5;
  double range_similarity = 0.8;
  std::optional<Index> basis_rank;  // unset: min(n - 1, 250)
  bool basis_cache = true;
  double alpha0 = 0.9;
  double alpha1 = 0.9;
  std::optional<double> rho;  // unset: elicited
  double elicitation_pct = 0.05;
  std::vector<double> v0_grid{0.1, 0.2, 0.4, 0.6, 0.8};
  double kappa = 4.0;
  double lambda_lo = 1e-4;
  double lambda_hi = 1e4;
  double lambda_tol = 1e-2;
  int max_alternations = 10;
  std::string family = "poisson";
  bool hotzone = true;
  std::optional<std::vector<std::string>> u_columns;  // unset: U = X
  double quartile = 0.75;
  std::optional<double> lambda_omega;  // unset: the tuned lambda
  double em_tol = 1e-6;
  int em_max_iter = 200;
  double hotzone_tol = 1e-6;
  int hotzone_max_iter = 500;
  std::uint64_t seed = 0;
  unsigned threads = 0;
  SimulationSettings simulation;
};

namespace detail {

template <class T>
nlohmann::json optional_json(const std::optional<T>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

/// Reads known keys from `j` into the fields and rejects anything else.
class ConfigReader {
 public:
  ConfigReader(const nlohmann::json& j, std::string scope) : j_(j), scope_(std::move(scope)) {
    if (!j_.is_object()) throw Error("config: " + where("") + " must be a JSON object");
  }

  template <class T>
  void get(const char* key, T& field) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      field = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw Error("config: key '" + where(key) + "' has the wrong type");
    }
  }

  template <class T>
  void get(const char* key, std::optional<T>& field) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    if (j_.at(key).is_null()) {
      field.reset();
      return;
    }
    T value{};
    get(key, value);
    field = std::move(value);
  }

  const nlohmann::json& sub(const char* key) {
    seen_.insert(key);
    static const nlohmann::json empty = nlohmann::json::object();
    return j_.contains(key) ? j_.at(key) : empty;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw Error("config: unknown key '" + where(key) + "'");
  }

 private:
  std::string where(const std::string& key) const {
    if (scope_.empty()) return key;
    return key.empty() ? scope_ : scope_ + "." + key;
  }
  const nlohmann::json& j_;
  std::string scope_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline nlohmann::json to_json(const SimulationSettings& s) {
  return {{"grid_rows", s.grid_rows},     {"grid_cols", s.grid_cols},
          {"subgraph_size", s.subgraph_size}, {"zones", s.zones},
          {"zone_size", s.zone_size},     {"zeta", s.zeta},
          {"tau", s.tau},                 {"lambda", s.lambda},
          {"covariates", s.covariates},   {"nb_size", s.nb_size},
          {"replicates", s.replicates},   {"compare", s.compare},
          {"write_inputs", s.write_inputs}, {"basis_rank", s.basis_rank},
          {"check", s.check},             {"win_fraction", s.win_fraction}};
}

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"edges", c.edges},
          {"vertices", c.vertices},
          {"output", c.output},
          {"id_column", c.id_column},
          {"response", c.response},
          {"covariates", c.covariates},
          {"categorical", c.categorical},
          {"range", detail::optional_json(c.range)},
          {"range_quantile", c.range_quantile},
          {"range_similarity", c.range_similarity},
          {"basis_rank", detail::optional_json(c.basis_rank)},
          {"basis_cache", c.basis_cache},
          {"alpha0", c.alpha0},
          {"alpha1", c.alpha1},
          {"rho", detail::optional_json(c.rho)},
          {"elicitation_pct", c.elicitation_pct},
          {"v0_grid", c.v0_grid},
          {"kappa", c.kappa},
          {"lambda_lo", c.lambda_lo},
          {"lambda_hi", c.lambda_hi},
          {"lambda_tol", c.lambda_tol},
          {"max_alternations", c.max_alternations},
          {"family", c.family},
          {"hotzone", c.hotzone},
          {"u_columns", detail::optional_json(c.u_columns)},
          {"quartile", c.quartile},
          {"lambda_omega", detail::optional_json(c.lambda_omega)},
          {"em_tol", c.em_tol},
          {"em_max_iter", c.em_max_iter},
          {"hotzone_tol", c.hotzone_tol},
          {"hotzone_max_iter", c.hotzone_max_iter},
          {"seed", c.seed},
          {"threads", c.threads},
          {"simulation", to_json(c.simulation)}};
}

inline void validate(const RunConfig& c) {
  auto positive = [](double x, const char* key) {
    if (!(x > 0) || !std::isfinite(x)) throw Error(std::string("config: ") + key + " must be positive");
  };
  positive(c.lambda_tol, "lambda_tol");
  positive(c.em_tol, "em_tol");
  positive(c.hotzone_tol, "hotzone_tol");
  positive(c.lambda_lo, "lambda_lo");
  positive(c.kappa, "kappa");
  positive(c.range_quantile + 1.0, "range_quantile");
  if (!(c.lambda_hi > c.lambda_lo)) throw Error("config: lambda_hi must exceed lambda_lo");
  if (c.range && !(*c.range > 0)) throw Error("config: range must be positive");
  if (c.lambda_omega && !(*c.lambda_omega > 0)) throw Error("config: lambda_omega must be positive");
  if (c.basis_rank && *c.basis_rank < 2) throw Error("config: basis_rank must be at least 2");
  if (c.v0_grid.empty()) throw Error("config: v0_grid is empty");
  for (double v : c.v0_grid)
    if (!(v > 0 && v < 1)) throw Error("config: v0_grid entries must lie in (0, 1)");
  if (!(c.quartile > 0 && c.quartile < 1)) throw Error("config: quartile must lie in (0, 1)");
  if (c.em_max_iter < 1 || c.hotzone_max_iter < 1 || c.max_alternations < 1)
    throw Error("config: iteration limits must be at least 1");
  if (c.family != "poisson")
    throw Error("config: family '" + c.family +
                "' is not supported for count responses; the pipeline fits family \"poisson\"");
  if (c.simulation.replicates < 1) throw Error("config: simulation.replicates must be at least 1");
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::ConfigReader r(j, "");
  r.get("edges", c.edges);
  r.get("vertices", c.vertices);
  r.get("output", c.output);
  r.get("id_column", c.id_column);
  r.get("response", c.response);
  r.get("covariates", c.covariates);
  r.get("categorical", c.categorical);
  r.get("range", c.range);
  r.get("range_quantile", c.range_quantile);
  r.get("range_similarity", c.range_similarity);
  r.get("basis_rank", c.basis_rank);
  r.get("basis_cache", c.basis_cache);
  r.get("alpha0", c.alpha0);
  r.get("alpha1", c.alpha1);
  r.get("rho", c.rho);
  r.get("elicitation_pct", c.elicitation_pct);
  r.get("v0_grid", c.v0_grid);
  r.get("kappa", c.kappa);
  r.get("lambda_lo", c.lambda_lo);
  r.get("lambda_hi", c.lambda_hi);
  r.get("lambda_tol", c.lambda_tol);
  r.get("max_alternations", c.max_alternations);
  r.get("family", c.family);
  r.get("hotzone", c.hotzone);
  r.get("u_columns", c.u_columns);
  r.get("quartile", c.quartile);
  r.get("lambda_omega", c.lambda_omega);
  r.get("em_tol", c.em_tol);
  r.get("em_max_iter", c.em_max_iter);
  r.get("hotzone_tol", c.hotzone_tol);
  r.get("hotzone_max_iter", c.hotzone_max_iter);
  r.get("seed", c.seed);
  r.get("threads", c.threads);
  const auto& sim = r.sub("simulation");
  detail::ConfigReader s(sim, "simulation");
  auto& m = c.simulation;
  s.get("grid_rows", m.grid_rows);
  s.get("grid_cols", m.grid_cols);
  s.get("subgraph_size", m.subgraph_size);
  s.get("zones", m.zones);
  s.get("zone_size", m.zone_size);
  s.get("zeta", m.zeta);
  s.get("tau", m.tau);
  s.get("lambda", m.lambda);
  s.get("covariates", m.covariates);
  s.get("nb_size", m.nb_size);
  s.get("replicates", m.replicates);
  s.get("compare", m.compare);
  s.get("write_inputs", m.write_inputs);
  s.get("basis_rank", m.basis_rank);
  s.get("check", m.check);
  s.get("win_fraction", m.win_fraction);
  s.finish();
  r.finish();
  validate(c);
  return c;
}

/*
 * Applies "key=value" overrides; dotted keys reach nested objects.  The value
 * is read as JSON when it parses, else as a string.
 */
inline nlohmann::json apply_overrides(nlohmann::json base, const std::vector<std::string>& sets) {
  for (const auto& item : sets) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0)
      throw Error("override '" + item + "' must look like key=value");
    const std::string key = item.substr(0, eq), text = item.substr(eq + 1);
    nlohmann::json value;
    try {
      value = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception&) {
      value = text;
    }
    nlohmann::json* node = &base;
    std::stringstream path(key);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(path, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      auto& next = (*node)[parts[i]];
      if (next.is_null()) next = nlohmann::json::object();
      node = &next;
    }
    (*node)[parts.back()] = value;
  }
  return base;
}

inline RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& sets = {}) {
  nlohmann::json j = path.empty() ? nlohmann::json::object() : read_json(path);
  return config_from_json(apply_overrides(std::move(j), sets));
}

/// FNV-1a of the canonical JSON text of the configuration.
inline std::string config_hash(const RunConfig& c) {
  Fnv1a h;
  for (char ch : to_json(c).dump()) h.add(ch);
  return hex_key(h.value());
}

inline std::string file_hash(const std::filesystem::path& path) {
  Fnv1a h;
  for (char ch : read_text(path)) h.add(ch);
  return hex_key(h.value());
}

// ---------------------------------------------------------------------------
// Stages

/// Wraps a pipeline stage so failures name it.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error("stage " + stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

/// Timings per stage plus captured warnings; feeds the run manifest.
class RunLog {
 public:
  template <class Fn>
  auto stage(const std::string& name, Fn&& fn) -> decltype(fn()) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      if constexpr (std::is_void_v<decltype(fn())>) {
        fn();
        record(name, t0);
      } else {
        auto result = fn();
        record(name, t0);
        return result;
      }
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(name, e.what());
    }
  }

  /// Records a warning; true the first time this text is seen.
  bool warning(std::string_view msg) {
    for (auto& [text, count] : warnings_)
      if (text == msg) {
        ++count;
        return false;
      }
    warnings_.emplace_back(std::string(msg), 1);
    return true;
  }

  nlohmann::json warnings() const {
    nlohmann::json w = nlohmann::json::array();
    for (const auto& [text, count] : warnings_) w.push_back({{"message", text}, {"count", count}});
    return w;
  }

  nlohmann::json timings() const {
    nlohmann::json t = nlohmann::json::object();
    for (const auto& [name, sec] : timings_) t[name] = sec;
    return t;
  }

 private:
  void record(const std::string& name, std::chrono::steady_clock::time_point t0) {
    timings_.emplace_back(name, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  std::vector<std::pair<std::string, double>> timings_;
  std::vector<std::pair<std::string, int>> warnings_;
};

/// Records warnings in the run log; each distinct message is echoed to stderr once.
class CapturedWarnings {
 public:
  explicit CapturedWarnings(RunLog& log, bool echo = true)
      : sink_([&log, echo](std::string_view msg) {
          if (log.warning(msg) && echo) std::cerr << "netreg warning: " << msg << '\n';
        }) {}

 private:
  ScopedWarningSink sink_;
};

inline std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

/// Keys of the manifest that legitimately change between identical runs.
inline const std::vector<std::string>& volatile_manifest_keys() {
  static const std::vector<std::string> keys{"started_at", "finished_at", "timings"};
  return keys;
}

// ---------------------------------------------------------------------------
// Loaded problem

struct LoadedProblem {
  WeightedGraph graph;  // weighted
  double range = 1.0;
  LaplacianOps ops;
  SpectralBasis basis;
  std::uint64_t key = 0;
  VertexData data;
  TauPrior prior;
};

inline CovariateRequest covariate_request(const RunConfig& c, bool response_required = true) {
  CovariateRequest req;
  req.id_column = c.id_column;
  req.response = c.response;
  req.response_required = response_required;
  req.columns = c.covariates;
  req.categorical = c.categorical;
  return req;
}

inline SpectralBasis basis_for(const RunConfig& c, const WeightedGraph& g, double range,
                               const LaplacianOps& ops, Index K) {
  if (!c.basis_cache) return eigenbasis(ops, K);
  return cached_eigenbasis(g, range, ops, K, std::filesystem::path(c.output));
}

inline LoadedProblem load_problem(const RunConfig& c, RunLog& log) {
  if (c.edges.empty()) throw StageError("load", "no edge list given (config key 'edges')");
  if (c.vertices.empty()) throw StageError("load", "no vertex table given (config key 'vertices')");
  LoadedProblem p;
  auto raw = log.stage("load", [&] { return read_edge_list(c.edges); });
  p.data = log.stage("load", [&] { return read_vertex_data(c.vertices, raw, covariate_request(c)); });
  p.range = log.stage("calibrate", [&] {
    return c.range ? *c.range
                   : calibrate_range(raw.distances(), c.range_quantile, c.range_similarity);
  });
  p.graph = log.stage("calibrate", [&] { return apply_weights(raw, p.range); });
  log.stage("eigenbasis", [&] {
    const Index n = p.graph.num_vertices();
    const Index K = c.basis_rank ? *c.basis_rank : default_basis_rank(n);
    if (K > n) throw Error("basis_rank " + std::to_string(K) + " exceeds the vertex count " + std::to_string(n));
    p.ops = build_laplacian(p.graph);
    p.basis = basis_for(c, p.graph, p.range, p.ops, K);
    p.key = basis_key(p.graph, p.range, K);
    double rho = 1.0;
    if (c.rho) {
      rho = *c.rho;
    } else {
      const auto e = elicit_tau_hyperparams(
          std::span<const double>(p.basis.eigenvalues.data(), static_cast<std::size_t>(K)),
          c.elicitation_pct, c.alpha0, c.alpha1, K);
      rho = e.rho;
    }
    p.prior = tau_prior(c.alpha0, c.alpha1, rho, K);
  });
  return p;
}

inline TuneOptions tune_options(const RunConfig& c) {
  TuneOptions t;
  t.v0_grid = c.v0_grid;
  t.lambda_lo = c.lambda_lo;
  t.lambda_hi = c.lambda_hi;
  t.lambda_tol = c.lambda_tol;
  t.max_alternations = c.max_alternations;
  t.threads = c.threads;
  t.spike_slab.kappa = c.kappa;
  t.spike_slab.em_tol = c.em_tol;
  t.spike_slab.em_max_iter = c.em_max_iter;
  return t;
}

// ---------------------------------------------------------------------------
// Model artifact

struct ModelArtifact {
  std::vector<std::string> labels;
  double range = 1.0;
  Index basis_rank = 0;
  std::string basis_key;
  std::string id_column = "vertex";
  std::string response = "count";
  CovariateSchema schema;
  std::vector<std::string> predictors;  // intercept first
  std::vector<Index> ranks;
  std::vector<Index> u_predictors;  // indices into predictors, intercept = 0
  double v0 = 0.0;
  double lambda_theta = 1.0;
  double lambda_omega = 1.0;
  double loop = 0.0;
  bool hotzone = true;
  VectorXd theta;
  VectorXd omega;
  double zeta = 0.0;
};

inline nlohmann::json artifact_json(const ModelArtifact& a) {
  nlohmann::json cols = nlohmann::json::array();
  for (const auto& c : a.schema.columns)
    cols.push_back({{"name", c.name}, {"categorical", c.categorical}, {"levels", c.levels}});
  return {{"format", "netreg-model-1"},
          {"labels", a.labels},
          {"range", a.range},
          {"basis_rank", a.basis_rank},
          {"basis_key", a.basis_key},
          {"id_column", a.id_column},
          {"response", a.response},
          {"columns", cols},
          {"predictors", a.predictors},
          {"ranks", a.ranks},
          {"u_predictors", a.u_predictors},
          {"v0", a.v0},
          {"lambda_theta", a.lambda_theta},
          {"lambda_omega", a.lambda_omega},
          {"loop", format_double(a.loop)},
          {"hotzone", a.hotzone},
          {"theta", vector_json(a.theta)},
          {"omega", vector_json(a.omega)},
          {"zeta", format_double(a.zeta)}};
}

inline ModelArtifact artifact_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "netreg-model-1") throw Error("model artifact: unrecognized format");
  ModelArtifact a;
  try {
    a.labels = j.at("labels").get<std::vector<std::string>>();
    a.range = j.at("range").get<double>();
    a.basis_rank = j.at("basis_rank").get<Index>();
    a.basis_key = j.at("basis_key").get<std::string>();
    a.id_column = j.at("id_column").get<std::string>();
    a.response = j.at("response").get<std::string>();
    for (const auto& c : j.at("columns"))
      a.schema.columns.push_back({c.at("name").get<std::string>(), c.at("categorical").get<bool>(),
                                  c.at("levels").get<std::vector<std::string>>()});
    a.predictors = j.at("predictors").get<std::vector<std::string>>();
    a.ranks = j.at("ranks").get<std::vector<Index>>();
    a.u_predictors = j.at("u_predictors").get<std::vector<Index>>();
    a.v0 = j.at("v0").get<double>();
    a.lambda_theta = j.at("lambda_theta").get<double>();
    a.lambda_omega = j.at("lambda_omega").get<double>();
    a.hotzone = j.at("hotzone").get<bool>();
    a.theta = json_vector(j.at("theta"));
    a.omega = json_vector(j.at("omega"));
    if (!parse_double(j.at("zeta").get<std::string>(), a.zeta) &&
        j.at("zeta").get<std::string>() != "-inf")
      throw Error("model artifact: bad zeta");
    if (j.at("zeta").get<std::string>() == "-inf") a.zeta = -std::numeric_limits<double>::infinity();
    const auto loop = j.at("loop").get<std::string>();
    a.loop = loop == "inf" ? std::numeric_limits<double>::infinity() : 0.0;
    if (loop != "inf" && !parse_double(loop, a.loop)) throw Error("model artifact: bad loop");
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("model artifact: ") + e.what());
  }
  if (a.ranks.size() != a.predictors.size())
    throw Error("model artifact: one rank per predictor expected");
  return a;
}

inline void save_artifact(const std::filesystem::path& path, const ModelArtifact& a) {
  write_json(path, artifact_json(a));
}

inline ModelArtifact load_artifact(const std::filesystem::path& path) {
  return artifact_from_json(read_json(path));
}

/// Column selection of U as predictor indices, intercept always included.
inline std::vector<Index> u_predictor_indices(const std::optional<std::vector<std::string>>& u,
                                              const std::vector<std::string>& predictors) {
  std::vector<Index> out;
  if (!u) {
    for (Index j = 0; j < static_cast<Index>(predictors.size()); ++j) out.push_back(j);
    return out;
  }
  out.push_back(0);
  for (const auto& name : *u) {
    const auto it = std::find(predictors.begin() + 1, predictors.end(), name);
    if (it == predictors.end())
      throw Error("u_columns entry '" + name + "' is not an expanded covariate column");
    out.push_back(static_cast<Index>(it - predictors.begin()));
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

/// D_U: the intercept plus the selected covariates, each at its X rank.
inline DesignMatrix latent_design(const MatrixXd& X, const SpectralBasis& basis,
                                  const std::vector<Index>& ranks, const std::vector<Index>& u) {
  MatrixXd U(X.rows(), static_cast<Index>(u.size()) - 1);
  std::vector<Index> u_ranks{ranks[0]};
  for (std::size_t k = 1; k < u.size(); ++k) {
    U.col(static_cast<Index>(k) - 1) = X.col(u[k] - 1);
    u_ranks.push_back(ranks[static_cast<std::size_t>(u[k])]);
  }
  return build_design(U, basis, u_ranks);
}

struct Predictions {
  std::vector<std::string> labels;
  VectorXd y;  // empty when unknown
  VectorXd mu;
  VectorXd pi;
  MatrixXd beta;  // predictors x n
  std::vector<std::string> predictors;
};

/// Predictions from fitted coefficients on a design; pi is the posterior when y is known.
inline Predictions predict_from(const ModelArtifact& a, const SpectralBasis& basis, const MatrixXd& X,
                                const VectorXd& y) {
  Predictions p;
  p.labels = a.labels;
  p.y = y;
  p.predictors = a.predictors;
  const auto dx = build_design(X, basis, a.ranks);
  const VectorXd hot = dx.matrix() * a.theta;
  p.beta = vertex_coefficients(a.theta, dx, basis);
  if (!a.hotzone) {
    p.pi = VectorXd::Zero(hot.size());
    p.mu = hot.array().min(link::kMaxEta).exp().matrix();
    return p;
  }
  const auto du = latent_design(X, basis, a.ranks, a.u_predictors);
  const VectorXd latent = du.matrix() * a.omega;
  if (y.size() == hot.size()) {
    p.pi = estep_pi(y, hot, latent, a.zeta);
  } else {
    p.pi.resize(hot.size());
    for (Index v = 0; v < hot.size(); ++v) p.pi[v] = std::exp(detail::log_sigmoid(latent[v]));
  }
  p.mu = predict_hotzone(p.pi, a.zeta, hot);
  return p;
}

inline void write_predictions(const std::filesystem::path& path, const Predictions& p) {
  std::vector<std::string> header{"vertex", "y", "mu", "pi"};
  for (const auto& name : p.predictors) header.push_back("beta_" + name);
  CsvWriter out(path, header);
  for (Index v = 0; v < p.mu.size(); ++v) {
    std::vector<std::string> row{p.labels[static_cast<std::size_t>(v)],
                                 p.y.size() ? format_double(p.y[v]) : std::string(),
                                 format_double(p.mu[v]), format_double(p.pi[v])};
    for (Index j = 0; j < p.beta.rows(); ++j) row.push_back(format_double(p.beta(j, v)));
    out.row(row);
  }
  out.close();
}

// ---------------------------------------------------------------------------
// Commands

struct FitResult {
  ModelArtifact artifact;
  Predictions predictions;
  TuneResult tuning;
  int hotzone_iterations = 0;
  bool hotzone_converged = false;
  std::filesystem::path output;
};

inline nlohmann::json base_manifest(const std::string& command, const RunConfig& c,
                                    const std::string& started) {
  return {{"format", "netreg-manifest-1"},
          {"command", command},
          {"version", kVersion},
          {"eigen_version", std::to_string(EIGEN_WORLD_VERSION) + "." +
                                std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                std::to_string(EIGEN_MINOR_VERSION)},
          {"compiler", __VERSION__},
          {"config", to_json(c)},
          {"config_hash", config_hash(c)},
          {"seed", c.seed},
          {"started_at", started}};
}

inline void finish_manifest(nlohmann::json& m, const RunLog& log, const std::filesystem::path& dir) {
  m["finished_at"] = utc_now();
  m["timings"] = log.timings();
  m["warnings"] = log.warnings();
  write_json(dir / "manifest.json", m);
}

inline nlohmann::json input_hashes(const RunConfig& c) {
  return {{"edges", {{"path", c.edges}, {"fnv1a", file_hash(c.edges)}}},
          {"vertices", {{"path", c.vertices}, {"fnv1a", file_hash(c.vertices)}}}};
}

/// calibrate, eigenbasis, tune, select ranks, hot-zone EM; writes every fit output.
inline FitResult run_fit(const RunConfig& c, bool echo_warnings = true) {
  validate(c);
  RunLog log;
  CapturedWarnings capture(log, echo_warnings);
  const auto started = utc_now();
  const std::filesystem::path dir(c.output);
  log.stage("write", [&] { std::filesystem::create_directories(dir); });
  const auto p = load_problem(c, log);
  FitResult out;
  out.output = dir;
  const auto& y = p.data.response;
  const auto& X = p.data.covariates;

  out.tuning = log.stage("tune", [&] {
    return tune({y, X, p.basis, p.ops.laplacian, p.prior}, tune_options(c));
  });
  const auto& tuned = out.tuning;
  const auto predictors = predictor_names(p.data.names);
  const auto smoothed = log.stage("select_ranks", [&] {
    return fit_smoothed(y, X, p.basis, p.ops.laplacian, tuned.ranks, tuned.lambda);
  });

  auto& a = out.artifact;
  a.labels = p.graph.labels();
  if (a.labels.empty())
    for (Index v = 0; v < p.graph.num_vertices(); ++v) a.labels.push_back(p.graph.label(v));
  a.range = p.range;
  a.basis_rank = p.basis.rank();
  a.basis_key = hex_key(p.key);
  a.id_column = c.id_column;
  a.response = c.response;
  a.schema = p.data.schema;
  a.predictors = predictors;
  a.ranks = tuned.ranks;
  a.v0 = tuned.v0;
  a.lambda_theta = tuned.lambda;
  a.lambda_omega = c.lambda_omega ? *c.lambda_omega : tuned.lambda;
  a.loop = tuned.loop;
  a.hotzone = c.hotzone;
  a.theta = smoothed.fit.coefficients;
  a.u_predictors = log.stage("hotzone_em", [&] { return u_predictor_indices(c.u_columns, predictors); });
  a.zeta = 0.0;
  a.omega = VectorXd();

  if (c.hotzone) {
    log.stage("hotzone_em", [&] {
      const auto du = latent_design(X, p.basis, tuned.ranks, a.u_predictors);
      HotzoneInputs in;
      in.counts = y;
      in.design_x = smoothed.design.matrix();
      in.design_u = du.matrix();
      in.gram_x = smoothed.gram;
      in.gram_u = laplacian_gram(in.design_u, p.ops.laplacian);
      in.lambda_theta = a.lambda_theta;
      in.lambda_omega = a.lambda_omega;
      HotzoneOptions ho;
      ho.tol = c.hotzone_tol;
      ho.max_iter = c.hotzone_max_iter;
      const auto init = initialize_hotzone(in, smoothed.fit.fitted, c.quartile, ho);
      const auto model = run_hotzone_em(in, init.state, ho);
      a.theta = model.state.theta;
      a.omega = model.state.omega;
      a.zeta = model.state.zeta;
      out.hotzone_iterations = model.iterations;
      out.hotzone_converged = model.converged;
    });
  }

  out.predictions = predict_from(a, p.basis, X, y);
  log.stage("write", [&] {
    save_artifact(dir / "model.json", a);
    write_predictions(dir / "predictions.csv", out.predictions);
    write_rank_report(dir / "ranks.csv", tuned.selection, predictors);
    write_tuning_report(dir / "tuning.csv", tuned.records);
    write_vertex_map(dir / "vertex_map.csv", p.graph);
  });

  auto m = base_manifest("fit", c, started);
  m["inputs"] = input_hashes(c);
  m["outputs"] = {"model.json", "predictions.csv", "ranks.csv", "tuning.csv", "vertex_map.csv"};
  m["basis_key"] = a.basis_key;
  nlohmann::json chains = nlohmann::json::array();
  for (const auto& ch : tuned.chains)
    chains.push_back({{"v0", ch.v0}, {"alternations", ch.alternations}, {"converged", ch.converged},
                      {"lambda", ch.lambda}, {"loop", format_double(ch.loop)}, {"ranks", ch.ranks}});
  m["iterations"] = {{"tune_chains", chains},
                     {"select_ranks_cycles", tuned.selection.cycles},
                     {"hotzone_em", out.hotzone_iterations},
                     {"hotzone_converged", out.hotzone_converged}};
  m["selected"] = {{"v0", tuned.v0}, {"lambda", tuned.lambda}, {"loop", format_double(tuned.loop)},
                   {"ranks", tuned.ranks}};
  finish_manifest(m, log, dir);
  return out;
}

/// calibrate, eigenbasis, tune; writes the tuning and rank reports.
inline TuneResult run_tune(const RunConfig& c, bool echo_warnings = true) {
  validate(c);
  RunLog log;
  CapturedWarnings capture(log, echo_warnings);
  const auto started = utc_now();
  const std::filesystem::path dir(c.output);
  std::filesystem::create_directories(dir);
  const auto p = load_problem(c, log);
  auto result = log.stage("tune", [&] {
    return tune({p.data.response, p.data.covariates, p.basis, p.ops.laplacian, p.prior}, tune_options(c));
  });
  log.stage("write", [&] {
    write_tuning_report(dir / "tuning.csv", result.records);
    write_rank_report(dir / "ranks.csv", result.selection, predictor_names(p.data.names));
    write_vertex_map(dir / "vertex_map.csv", p.graph);
  });
  auto m = base_manifest("tune", c, started);
  m["inputs"] = input_hashes(c);
  m["outputs"] = {"tuning.csv", "ranks.csv", "vertex_map.csv"};
  m["selected"] = {{"v0", result.v0}, {"lambda", result.lambda}, {"loop", format_double(result.loop)},
                   {"ranks", result.ranks}};
  finish_manifest(m, log, dir);
  return result;
}

/// Applies a saved model to a graph and vertex table; the graph must reproduce the model's basis.
inline Predictions run_predict(const std::filesystem::path& model_path, const std::filesystem::path& edges,
                               const std::filesystem::path& vertices,
                               const std::filesystem::path& output_csv) {
  RunLog log;
  const auto a = log.stage("load", [&] { return load_artifact(model_path); });
  const auto raw = log.stage("load", [&] { return read_edge_list(edges); });
  const auto graph = log.stage("calibrate", [&] { return apply_weights(raw, a.range); });
  log.stage("calibrate", [&] {
    const auto key = hex_key(basis_key(graph, a.range, a.basis_rank));
    if (key != a.basis_key || graph.labels() != a.labels)
      throw Error("graph/basis mismatch: the model was fitted on basis " + a.basis_key +
                  " but the supplied graph gives basis " + key +
                  (graph.labels() != a.labels ? " (vertex ids also differ)" : ""));
  });
  CovariateRequest req;
  req.id_column = a.id_column;
  req.response = a.response;
  req.response_required = false;
  const auto data = log.stage("load", [&] { return read_vertex_data(vertices, graph, req, &a.schema); });
  const auto basis = log.stage("eigenbasis", [&] {
    const auto cache = model_path.parent_path() / ("basis-" + a.basis_key + ".bin");
    std::uint64_t key = 0;
    std::istringstream(a.basis_key) >> std::hex >> key;
    if (auto hit = load_basis(cache, key)) return *hit;
    return eigenbasis(build_laplacian(graph), a.basis_rank);
  });
  auto p = predict_from(a, basis, data.covariates, data.response);
  log.stage("write", [&] {
    if (output_csv.has_parent_path()) std::filesystem::create_directories(output_csv.parent_path());
    write_predictions(output_csv, p);
  });
  return p;
}

/// Writes a scenario in the fit input formats: edges.csv and vertices.csv.
inline void write_scenario_inputs(const std::filesystem::path& edges_path,
                                  const std::filesystem::path& vertices_path, const Scenario& s) {
  CsvWriter e(edges_path, {"src", "dst", "distance"});
  for (const auto& edge : s.graph.edges())
    e.row({s.graph.label(edge.source), s.graph.label(edge.target), format_double(edge.distance)});
  e.close();
  std::vector<std::string> header{"vertex", "count"};
  for (Index j = 0; j < s.covariates.cols(); ++j) header.push_back("x" + std::to_string(j + 1));
  CsvWriter v(vertices_path, header);
  for (Index i = 0; i < s.num_vertices(); ++i) {
    std::vector<std::string> row{s.graph.label(i), format_double(s.counts[i])};
    for (Index j = 0; j < s.covariates.cols(); ++j) row.push_back(format_double(s.covariates(i, j)));
    v.row(row);
  }
  v.close();
}

/// Summary of a comparison table: mean error per model and stratum, hot-zone model win rates.
struct ComparisonSummary {
  std::map<std::string, std::map<std::string, double>> mean_error;  // model -> stratum -> mean
  Index replicates = 0;
  double background_wins = 0.0;  // fraction of replicates where Mod4 beats Mod1-3 in BG
  double hot_wins = 0.0;         // same, on the mean of the HZ strata
};

inline ComparisonSummary summarize_comparison(const std::vector<ComparisonRow>& rows) {
  ComparisonSummary s;
  std::map<std::string, std::map<std::string, std::pair<double, int>>> acc;
  std::map<Index, std::map<std::string, std::pair<double, double>>> per_rep;  // model -> (BG, HZ mean)
  std::map<Index, std::map<std::string, int>> hz_count;
  for (const auto& r : rows) {
    auto& a = acc[r.model][r.stratum];
    if (std::isfinite(r.relative_error)) {
      a.first += r.relative_error;
      ++a.second;
    }
    auto& pr = per_rep[r.replicate][r.model];
    if (r.stratum == "BG") {
      pr.first = r.relative_error;
    } else {
      pr.second += r.relative_error;
      ++hz_count[r.replicate][r.model];
    }
  }
  for (const auto& [model, strata] : acc)
    for (const auto& [stratum, sum] : strata)
      s.mean_error[model][stratum] =
          sum.second ? sum.first / sum.second : std::numeric_limits<double>::quiet_NaN();
  s.replicates = static_cast<Index>(per_rep.size());
  Index bg = 0, hz = 0;
  for (auto& [rep, models] : per_rep) {
    for (auto& [model, pr] : models)
      if (hz_count[rep][model] > 0) pr.second /= hz_count[rep][model];
    if (!models.count("Mod4")) continue;
    const auto best = models.at("Mod4");
    bool win_bg = std::isfinite(best.first), win_hz = std::isfinite(best.second);
    for (const auto& other : {"Mod1", "Mod2", "Mod3"}) {
      if (!models.count(other)) continue;
      const auto o = models.at(other);
      win_bg = win_bg && (!std::isfinite(o.first) || best.first < o.first);
      win_hz = win_hz && (!std::isfinite(o.second) || best.second < o.second);
    }
    bg += win_bg;
    hz += win_hz;
  }
  if (s.replicates > 0) {
    s.background_wins = static_cast<double>(bg) / static_cast<double>(s.replicates);
    s.hot_wins = static_cast<double>(hz) / static_cast<double>(s.replicates);
  }
  return s;
}

struct SimulateResult {
  std::vector<Replicate> replicates;
  std::vector<ComparisonRow> rows;
  ComparisonSummary summary;
  bool check_passed = true;
};

inline std::string replicate_stem(Index r) {
  std::ostringstream s;
  s << "scenario_" << std::setw(3) << std::setfill('0') << r;
  return s.str();
}

/// Generates replicates, optionally fits the four comparison models, and writes everything.
inline SimulateResult run_simulate(const RunConfig& c, bool echo_warnings = true) {
  validate(c);
  RunLog log;
  CapturedWarnings capture(log, echo_warnings);
  const auto started = utc_now();
  const std::filesystem::path dir(c.output);
  std::filesystem::create_directories(dir);
  const auto& sim = c.simulation;
  ScenarioConfig sc;
  sc.subgraph_size = sim.subgraph_size;
  sc.num_zones = sim.zones;
  sc.zone_size = sim.zone_size;
  sc.zeta = sim.zeta;
  sc.tau = sim.tau;
  sc.lambda = sim.lambda;
  sc.num_covariates = sim.covariates;
  sc.nb_size = sim.nb_size;
  sc.range_quantile = c.range_quantile;
  sc.range_similarity = c.range_similarity;

  SimulateResult out;
  const auto base = log.stage("simulate", [&] { return street_grid(sim.grid_rows, sim.grid_cols, c.seed); });
  const unsigned workers = thread_count(c.threads);
  out.replicates.resize(static_cast<std::size_t>(sim.replicates));
  log.stage("simulate", [&] {
    ComparisonOptions opt;
    opt.basis_rank = sim.basis_rank;
    opt.alpha0 = c.alpha0;
    opt.alpha1 = c.alpha1;
    opt.elicitation_pct = c.elicitation_pct;
    opt.tune = tune_options(c);
    if (workers > 1) opt.tune.threads = 1;
    opt.hotzone.tol = c.hotzone_tol;
    opt.hotzone.max_iter = c.hotzone_max_iter;
    opt.quartile = c.quartile;
    parallel_for(out.replicates.size(), workers, [&](std::size_t r) {
      const auto index = static_cast<Index>(r);
      auto& rep = out.replicates[r];
      rep.scenario = generate_scenario(base, sc, replicate_seed(c.seed, index));
      if (sim.compare) rep.report = run_comparison(rep.scenario, opt, index);
    });
  });
  std::vector<std::string> outputs;
  log.stage("write", [&] {
    for (std::size_t r = 0; r < out.replicates.size(); ++r) {
      const auto stem = replicate_stem(static_cast<Index>(r));
      save_scenario(dir / (stem + ".json"), out.replicates[r].scenario);
      outputs.push_back(stem + ".json");
      if (sim.write_inputs) {
        write_scenario_inputs(dir / (stem + "_edges.csv"), dir / (stem + "_vertices.csv"),
                              out.replicates[r].scenario);
        outputs.push_back(stem + "_edges.csv");
        outputs.push_back(stem + "_vertices.csv");
      }
    }
    if (sim.compare) {
      for (const auto& rep : out.replicates) {
        const auto rows = comparison_rows(rep.report);
        out.rows.insert(out.rows.end(), rows.begin(), rows.end());
      }
      write_comparison(dir / "comparison.csv", out.rows);
      outputs.push_back("comparison.csv");
    }
  });

  auto m = base_manifest("simulate", c, started);
  m["outputs"] = outputs;
  if (sim.compare) {
    out.summary = summarize_comparison(out.rows);
    out.check_passed = out.summary.background_wins >= sim.win_fraction &&
                       out.summary.hot_wins >= sim.win_fraction;
    m["summary"] = {{"background_wins", out.summary.background_wins},
                    {"hot_wins", out.summary.hot_wins},
                    {"mean_error", out.summary.mean_error}};
  }
  finish_manifest(m, log, dir);
  return out;
}

}  // namespace netreg

#endif  // NETREG_PIPELINE_HPP
