#ifndef NETREG_GLM_HPP
#define NETREG_GLM_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "netreg/graph.hpp"

namespace netreg {

enum class Family { poisson, quasi_poisson, binomial, quasi_binomial, gaussian };

inline bool is_poisson(Family f) { return f == Family::poisson || f == Family::quasi_poisson; }
inline bool is_binomial(Family f) { return f == Family::binomial || f == Family::quasi_binomial; }
inline bool is_quasi(Family f) { return f == Family::quasi_poisson || f == Family::quasi_binomial; }

inline std::string to_string(Family f) {
  switch (f) {
    case Family::poisson: return "poisson";
    case Family::quasi_poisson: return "quasi-poisson";
    case Family::binomial: return "binomial";
    case Family::quasi_binomial: return "quasi-binomial";
    case Family::gaussian: return "gaussian";
  }
  return "?";
}

inline Family family_from_string(const std::string& name) {
  for (Family f : {Family::poisson, Family::quasi_poisson, Family::binomial,
                   Family::quasi_binomial, Family::gaussian})
    if (to_string(f) == name) return f;
  throw Error("unknown family '" + name + "'");
}

namespace link {

inline constexpr double kMaxEta = 700.0;

inline double inverse(Family f, double eta) {
  if (is_poisson(f)) return std::exp(std::min(eta, kMaxEta));
  if (is_binomial(f)) {
    // Logistic, evaluated without overflow on either tail.
    if (eta >= 0) return 1.0 / (1.0 + std::exp(-eta));
    const double e = std::exp(eta);
    return e / (1.0 + e);
  }
  return eta;
}

inline double forward(Family f, double mu) {
  if (is_poisson(f)) return std::log(mu);
  if (is_binomial(f)) return std::log(mu / (1.0 - mu));
  return mu;
}

/// Variance function V(mu); equals dmu/deta for the canonical links used here.
inline double variance(Family f, double mu) {
  if (is_poisson(f)) return mu;
  if (is_binomial(f)) return mu * (1.0 - mu);
  return 1.0;
}

}  // namespace link

namespace detail {

/// y log(y / mu) with the 0 log 0 = 0 convention.
inline double ylogy(double y, double mu) { return y > 0 ? y * std::log(y / mu) : 0.0; }

inline double unit_deviance(Family f, double y, double mu, double floor, bool& clamped) {
  if (is_poisson(f)) {
    if (mu < floor) { mu = floor; clamped = true; }
    return 2.0 * (ylogy(y, mu) - (y - mu));
  }
  if (is_binomial(f)) {
    if (mu < floor) { mu = floor; clamped = true; }
    if (mu > 1.0 - floor) { mu = 1.0 - floor; clamped = true; }
    return 2.0 * (ylogy(y, mu) + ylogy(1.0 - y, 1.0 - mu));
  }
  return (y - mu) * (y - mu);
}

inline double sum_deviance(Family f, const VectorXd& y, const VectorXd& mu, double floor,
                           bool& clamped) {
  double total = 0.0;
  for (Index v = 0; v < y.size(); ++v) total += unit_deviance(f, y[v], mu[v], floor, clamped);
  return total;
}

}  // namespace detail

/// Standard GLM deviance; fitted means at the boundary are clamped to `floor`.
inline double deviance(const VectorXd& y, const VectorXd& mu, Family family,
                       double floor = 1e-10) {
  if (y.size() != mu.size()) throw Error("deviance: length mismatch");
  bool clamped = false;
  const double d = detail::sum_deviance(family, y, mu, floor, clamped);
  if (clamped) {
    std::ostringstream msg;
    msg << "deviance: fitted mean at the support boundary clamped to " << floor;
    warn(msg.str());
  }
  return d;
}

struct GlmSpec {
  Family family = Family::poisson;
  VectorXd response;
  VectorXd offset;           // empty means zero
  MatrixXd prior_precision;  // empty means no penalty
  int max_iter = 100;
  double tol = 1e-8;         // on |delta objective| / (|objective| + 0.1)
  VectorXd start;            // optional warm start for the coefficients
  double boundary_floor = 1e-10;
  bool validate_prior = true;
};

struct GlmFit {
  VectorXd coefficients;
  VectorXd linear_predictor;
  VectorXd fitted;
  double deviance = 0.0;
  double penalty = 0.0;  // theta' P theta
  VectorXd leverages;
  VectorXd pearson_residuals;
  VectorXd working_weights;
  double loop = 0.0;
  bool loop_infinite = false;
  std::vector<Index> saturated;  // vertices with leverage numerically 1
  double dispersion = 1.0;
  bool converged = false;
  int iterations = 0;
  std::vector<double> objective_trace;
  MatrixXd normal_matrix;  // D'WD + P at the returned coefficients

  double objective() const { return deviance + penalty; }
};

/// Leave-one-out proxy sum r_v^2 / (1 - h_v); +inf when any leverage is 1.
inline double loop_statistic(const GlmFit& fit) {
  double total = 0.0;
  for (Index v = 0; v < fit.leverages.size(); ++v) {
    const double h = fit.leverages[v];
    if (h >= 1.0 - 1e-10) return std::numeric_limits<double>::infinity();
    total += fit.pearson_residuals[v] * fit.pearson_residuals[v] / (1.0 - h);
  }
  return total;
}

/// Symmetry and eigenvalue-floor checks for a prior precision.
inline void validate_precision(const MatrixXd& P) {
  if (P.rows() != P.cols()) throw Error("prior precision must be square");
  if (P.size() == 0) return;
  const double scale = std::max(1.0, P.cwiseAbs().maxCoeff());
  if ((P - P.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
    throw Error("prior precision is not symmetric");
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(P, Eigen::EigenvaluesOnly);
  if (eig.eigenvalues().minCoeff() < -1e-8 * scale)
    throw Error("prior precision is not positive semidefinite");
}

namespace detail {

/// Cholesky of a symmetric PSD system, with a logged 1e-10 diagonal jitter fallback.
inline Eigen::LLT<MatrixXd> factor_normal_matrix(const MatrixXd& A) {
  Eigen::LLT<MatrixXd> llt(A);
  if (llt.info() == Eigen::Success && llt.rcond() > 1e-15) return llt;
  const double scale = std::max(A.diagonal().cwiseAbs().mean(), 1.0);
  MatrixXd jittered = A;
  jittered.diagonal().array() += 1e-10 * scale;
  llt.compute(jittered);
  if (llt.info() == Eigen::Success && llt.rcond() > 1e-15) {
    warn("glm: normal equations near singular; applied 1e-10 diagonal jitter");
    return llt;
  }
  throw SingularSystemError(
      "glm: penalized normal equations are numerically singular; add a ridge "
      "term or increase the roughness penalty");
}

inline void validate_response(Family f, const VectorXd& y) {
  for (Index v = 0; v < y.size(); ++v) {
    const double yv = y[v];
    if (!std::isfinite(yv)) throw Error("glm: non-finite response");
    if (is_poisson(f)) {
      if (yv < 0) throw Error("glm: poisson-family responses must be >= 0");
      if (f == Family::poisson && yv != std::floor(yv))
        throw Error("glm: poisson responses must be integers (use quasi-poisson)");
    } else if (is_binomial(f)) {
      if (yv < 0 || yv > 1) throw Error("glm: binomial-family responses must lie in [0, 1]");
      if (f == Family::binomial && yv != 0.0 && yv != 1.0)
        throw Error("glm: binomial responses must be 0/1 (use quasi-binomial)");
    }
  }
}

inline double initial_mean(Family f, double y) {
  if (is_poisson(f)) return y + 0.1;
  if (is_binomial(f)) return (y + 0.5) / 2.0;
  return y;
}

}  // namespace detail

/*
 * Penalized IRLS: minimizes deviance(y, g^{-1}(D theta + offset)) + theta' P theta.
 * Each step solves (D'WD + P) theta = D'W z; a step that raises the penalized
 * objective is halved up to 20 times.  A fit that exhausts max_iter is returned
 * with converged = false.
 */
inline GlmFit fit(const MatrixXd& D, const GlmSpec& spec) {
  const Family fam = spec.family;
  const Index n = D.rows(), p = D.cols();
  const VectorXd& y = spec.response;
  if (y.size() != n) throw Error("glm: response length does not match design rows");
  const VectorXd offset = spec.offset.size() ? spec.offset : VectorXd::Zero(n);
  if (offset.size() != n) throw Error("glm: offset length does not match design rows");
  const bool penalized = spec.prior_precision.size() > 0;
  if (penalized && (spec.prior_precision.rows() != p || spec.prior_precision.cols() != p))
    throw Error("glm: prior precision must be " + std::to_string(p) + " x " + std::to_string(p));
  if (penalized && spec.validate_prior) validate_precision(spec.prior_precision);
  if (spec.start.size() && spec.start.size() != p)
    throw Error("glm: start vector length does not match design columns");
  detail::validate_response(fam, y);

  const double floor = spec.boundary_floor;
  bool clamped = false;

  auto mean_of = [&](const VectorXd& eta) {
    VectorXd mu(n);
    for (Index v = 0; v < n; ++v) mu[v] = link::inverse(fam, eta[v]);
    return mu;
  };
  auto penalty_of = [&](const VectorXd& theta) {
    return penalized ? theta.dot(spec.prior_precision * theta) : 0.0;
  };
  auto objective_of = [&](const VectorXd& theta) {
    const VectorXd mu = mean_of(D * theta + offset);
    bool c = false;
    return detail::sum_deviance(fam, y, mu, floor, c) + penalty_of(theta);
  };
  auto weights_of = [&](const VectorXd& mu) {
    VectorXd w(n);
    for (Index v = 0; v < n; ++v) w[v] = std::max(link::variance(fam, mu[v]), floor);
    return w;
  };
  auto normal_matrix = [&](const VectorXd& w) {
    MatrixXd A = D.transpose() * w.asDiagonal() * D;
    if (penalized) A += spec.prior_precision;
    return A;
  };

  GlmFit out;
  VectorXd theta = spec.start.size() ? spec.start : VectorXd::Zero(p);

  if (p > 0) {
    VectorXd eta, mu;
    double obj_prev;
    if (spec.start.size()) {
      eta = D * theta + offset;
      mu = mean_of(eta);
      obj_prev = objective_of(theta);
    } else {
      mu.resize(n);
      eta.resize(n);
      for (Index v = 0; v < n; ++v) {
        mu[v] = detail::initial_mean(fam, y[v]);
        eta[v] = link::forward(fam, mu[v]);
      }
      obj_prev = std::numeric_limits<double>::infinity();
    }
    out.objective_trace.push_back(obj_prev);

    for (int iter = 1; iter <= spec.max_iter; ++iter) {
      out.iterations = iter;
      const VectorXd w = weights_of(mu);
      const VectorXd z = (eta - offset).array() + (y - mu).array() / w.array();
      const auto llt = detail::factor_normal_matrix(normal_matrix(w));
      VectorXd proposal = llt.solve(D.transpose() * w.cwiseProduct(z));

      double obj = objective_of(proposal);
      int halvings = 0;
      while ((!std::isfinite(obj) || obj > obj_prev) && halvings < 20) {
        proposal = 0.5 * (proposal + theta);
        obj = objective_of(proposal);
        ++halvings;
      }
      if (!std::isfinite(obj) || obj > obj_prev) {
        // No descent along the Newton direction: theta is optimal to working precision.
        out.converged = std::isfinite(obj_prev);
        break;
      }
      const double change = std::abs(obj_prev - obj) / (std::abs(obj) + 0.1);
      theta = std::move(proposal);
      eta = D * theta + offset;
      mu = mean_of(eta);
      out.objective_trace.push_back(obj);
      obj_prev = obj;
      if (change < spec.tol) {
        out.converged = true;
        break;
      }
    }
  } else {
    out.converged = true;
  }

  out.coefficients = theta;
  out.linear_predictor = D * theta + offset;
  out.fitted = mean_of(out.linear_predictor);
  out.deviance = detail::sum_deviance(fam, y, out.fitted, floor, clamped);
  out.penalty = penalty_of(theta);
  if (clamped)
    warn("glm: fitted means at the support boundary were clamped when computing the deviance");

  // Leverages of W^{1/2} D (D'WD + P)^{-1} D' W^{1/2} at the final weights.
  out.working_weights = weights_of(out.fitted);
  out.leverages = VectorXd::Zero(n);
  if (p > 0) {
    out.normal_matrix = normal_matrix(out.working_weights);
    const auto llt = detail::factor_normal_matrix(out.normal_matrix);
    MatrixXd B = D.transpose() * out.working_weights.cwiseSqrt().asDiagonal();
    llt.matrixL().solveInPlace(B);
    out.leverages = B.colwise().squaredNorm().transpose().cwiseMin(1.0);
  } else {
    out.normal_matrix = MatrixXd(0, 0);
  }

  out.pearson_residuals.resize(n);
  for (Index v = 0; v < n; ++v) {
    const double var = std::max(link::variance(fam, out.fitted[v]), floor);
    out.pearson_residuals[v] = (y[v] - out.fitted[v]) / std::sqrt(var);
  }
  for (Index v = 0; v < n; ++v)
    if (out.leverages[v] >= 1.0 - 1e-10) out.saturated.push_back(v);
  out.loop = loop_statistic(out);
  out.loop_infinite = !std::isfinite(out.loop);
  if (is_quasi(fam)) {
    const double edf = out.leverages.sum();
    out.dispersion = out.pearson_residuals.squaredNorm() / std::max(1.0, static_cast<double>(n) - edf);
  }
  if (!out.converged)
    warn("glm: IRLS did not converge in " + std::to_string(spec.max_iter) +
         " iterations; returning the partial fit");
  return out;
}

/// Condition number of the final penalized normal-equations matrix.
inline double condition_number(const GlmFit& fit) {
  if (fit.normal_matrix.size() == 0) return 1.0;
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(fit.normal_matrix, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (!(lo > 0)) return std::numeric_limits<double>::infinity();
  return hi / lo;
}

}  // namespace netreg

#endif  // NETREG_GLM_HPP
