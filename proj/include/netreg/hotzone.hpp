#ifndef NETREG_HOTZONE_HPP
#define NETREG_HOTZONE_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "netreg/glm.hpp"

namespace netreg {

/*
 * Two-state mixture over vertices.  Z_v = 1 is the background state with flat
 * log-rate zeta; Z_v = 0 is the hot-zone state with log-rate D_X(v) theta.
 * Pr(Z_v = 1) = logistic(D_U(v) omega), and pi_v is its posterior given y_v.
 */
struct HotzoneInputs {
  VectorXd counts;
  MatrixXd design_x;  // D_X
  MatrixXd design_u;  // D_U
  MatrixXd gram_x;    // D_X' L D_X
  MatrixXd gram_u;    // D_U' L D_U
  double lambda_theta = 1.0;
  double lambda_omega = 1.0;

  Index num_vertices() const { return counts.size(); }
  void validate() const {
    const Index n = counts.size();
    if (design_x.rows() != n || design_u.rows() != n)
      throw Error("hotzone: design rows do not match the number of vertices");
    if (gram_x.rows() != design_x.cols() || gram_x.cols() != design_x.cols())
      throw Error("hotzone: gram_x does not match design_x");
    if (gram_u.rows() != design_u.cols() || gram_u.cols() != design_u.cols())
      throw Error("hotzone: gram_u does not match design_u");
    if (!(lambda_theta > 0) || !(lambda_omega > 0))
      throw Error("hotzone: roughness penalties must be positive");
    for (Index v = 0; v < n; ++v)
      if (!(counts[v] >= 0) || counts[v] != std::floor(counts[v]))
        throw Error("hotzone: counts must be nonnegative integers");
  }
};

struct HotzoneState {
  VectorXd theta;
  VectorXd omega;
  double zeta = 0.0;
  VectorXd pi;  // Pr(background | data) per vertex
};

struct HotzoneInit {
  HotzoneState state;
  std::vector<Index> hot;  // initial hot-zone vertices, ascending
  bool degenerate = false;  // the quartile cut fell inside a run of tied predictions
};

struct HotzoneOptions {
  double tol = 1e-6;  // relative change of the combined M-step deviance
  int max_iter = 500;
  double pi_clamp = 1e-12;
  double glm_tol = 1e-10;
};

struct HotzoneModel {
  HotzoneState state;
  double lambda_theta = 1.0;
  double lambda_omega = 1.0;
  std::vector<double> deviance_trace;       // combined M-step deviance per iteration
  std::vector<double> log_posterior_trace;  // observed-data log posterior, index 0 = initial
  int iterations = 0;
  bool converged = false;
};

namespace detail {

inline constexpr double kHotzoneFloor = 1e-200;

inline double log_poisson(double y, double log_mean) {
  const double e = std::min(log_mean, link::kMaxEta);
  return y * e - std::exp(e) - std::lgamma(y + 1.0);
}

/// log logistic(x) and log(1 - logistic(x)) without cancellation.
inline double log_sigmoid(double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }
inline double log_sigmoid_complement(double x) { return log_sigmoid(-x); }

inline double log_add(double a, double b) {
  const double m = std::max(a, b);
  if (m == -std::numeric_limits<double>::infinity()) return m;
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

inline VectorXd clamp_pi(const VectorXd& pi, double eps) {
  return pi.cwiseMax(eps).cwiseMin(1.0 - eps);
}

}  // namespace detail

/// Posterior probability of the background state for one vertex.
inline double background_posterior(double y, double hot_log_rate, double latent_eta, double zeta) {
  const double a = detail::log_sigmoid(latent_eta) + detail::log_poisson(y, zeta);
  const double b = detail::log_sigmoid_complement(latent_eta) + detail::log_poisson(y, hot_log_rate);
  return std::exp(a - detail::log_add(a, b));
}

inline VectorXd estep_pi(const VectorXd& y, const VectorXd& hot_log_rate, const VectorXd& latent_eta,
                         double zeta) {
  VectorXd pi(y.size());
  for (Index v = 0; v < y.size(); ++v)
    pi[v] = background_posterior(y[v], hot_log_rate[v], latent_eta[v], zeta);
  return pi;
}

inline VectorXd estep_pi(const HotzoneInputs& in, const HotzoneState& s) {
  return estep_pi(in.counts, in.design_x * s.theta, in.design_u * s.omega, s.zeta);
}

/// Weighted intercept-only Poisson MLE: log(sum pi y / sum pi).
inline double zeta_step(const VectorXd& y, const VectorXd& pi) {
  const double mass = pi.sum();
  if (!(mass > 0)) throw Error("hotzone: no background mass left for the zeta step");
  const double total = std::max(pi.dot(y), detail::kHotzoneFloor);
  return std::log(total / mass);
}

/// The same step as a quasi-Poisson regression of pi y on 1 with offset log pi.
inline double zeta_step_regression(const VectorXd& y, const VectorXd& pi, double eps = 1e-12) {
  const VectorXd p = detail::clamp_pi(pi, eps);
  GlmSpec spec;
  spec.family = Family::quasi_poisson;
  spec.response = p.cwiseProduct(y);
  spec.offset = p.array().log().matrix();
  spec.boundary_floor = detail::kHotzoneFloor;
  spec.tol = 1e-15;
  spec.start = VectorXd::Zero(1);
  return fit(MatrixXd::Ones(y.size(), 1), spec).coefficients[0];
}

/// Observed-data log posterior: mixture log-likelihood minus both roughness penalties.
inline double observed_log_posterior(const HotzoneInputs& in, const VectorXd& theta,
                                     const VectorXd& omega, double zeta) {
  const VectorXd hot = in.design_x * theta;
  const VectorXd latent = in.design_u * omega;
  double total = 0.0;
  for (Index v = 0; v < in.num_vertices(); ++v) {
    const double y = in.counts[v];
    total += detail::log_add(detail::log_sigmoid(latent[v]) + detail::log_poisson(y, zeta),
                             detail::log_sigmoid_complement(latent[v]) + detail::log_poisson(y, hot[v]));
  }
  return total - 0.5 * in.lambda_theta * theta.dot(in.gram_x * theta) -
         0.5 * in.lambda_omega * omega.dot(in.gram_u * omega);
}

namespace detail {

struct MStep {
  GlmFit fit;
  double deviance = 0.0;
};

inline MStep theta_step(const HotzoneInputs& in, const VectorXd& pi, const VectorXd& start,
                        const HotzoneOptions& opt) {
  const VectorXd hot = VectorXd::Ones(pi.size()) - pi;
  GlmSpec spec;
  spec.family = Family::quasi_poisson;
  spec.response = hot.cwiseProduct(in.counts);
  spec.offset = hot.array().log().matrix();
  spec.prior_precision = in.lambda_theta * in.gram_x;
  spec.validate_prior = false;
  spec.start = start;
  spec.tol = opt.glm_tol;
  spec.boundary_floor = kHotzoneFloor;
  MStep out{fit(in.design_x, spec), 0.0};
  out.deviance = out.fit.deviance;
  return out;
}

inline MStep omega_step(const HotzoneInputs& in, const VectorXd& pi, const VectorXd& start,
                        const HotzoneOptions& opt) {
  GlmSpec spec;
  spec.family = Family::quasi_binomial;
  spec.response = pi;
  spec.prior_precision = in.lambda_omega * in.gram_u;
  spec.validate_prior = false;
  spec.start = start;
  spec.tol = opt.glm_tol;
  spec.boundary_floor = kHotzoneFloor;
  MStep out{fit(in.design_u, spec), 0.0};
  out.deviance = out.fit.deviance;
  return out;
}

inline double zeta_deviance(const VectorXd& y, const VectorXd& pi, double zeta) {
  const VectorXd response = pi.cwiseProduct(y);
  const VectorXd mean = pi * std::exp(zeta);
  return deviance(response, mean, Family::quasi_poisson, kHotzoneFloor);
}

}  // namespace detail

/*
 * Starting point from a fitted single-state model.  The top (1 - quartile)
 * share of vertices by predicted count start in the hot state; ties are broken
 * by vertex id.  theta and omega come from one masked M-step each with pi set
 * to the indicator, and zeta is the log mean count over background vertices,
 * floored at log(0.5 / n).
 */
inline HotzoneInit initialize_hotzone(const HotzoneInputs& in, const VectorXd& predicted,
                                      double quartile = 0.75, const HotzoneOptions& opt = {}) {
  in.validate();
  const Index n = in.num_vertices();
  if (predicted.size() != n) throw Error("hotzone: predicted counts length mismatch");
  if (!(quartile > 0 && quartile < 1)) throw Error("hotzone: quartile must lie in (0, 1)");
  const Index hot_count = n - static_cast<Index>(std::floor(quartile * static_cast<double>(n) + 1e-9));
  if (hot_count <= 0 || hot_count >= n)
    throw Error("hotzone: quartile " + std::to_string(quartile) + " leaves the hot or background " +
                "stratum empty for n = " + std::to_string(n) + "; choose a different quartile");

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return predicted[a] > predicted[b]; });

  HotzoneInit init;
  init.hot.assign(order.begin(), order.begin() + hot_count);
  std::sort(init.hot.begin(), init.hot.end());
  init.degenerate = predicted[order[static_cast<std::size_t>(hot_count - 1)]] ==
                    predicted[order[static_cast<std::size_t>(hot_count)]];
  if (init.degenerate)
    warn("hotzone: initial hot/background split falls inside tied predictions; split by vertex id");

  VectorXd indicator = VectorXd::Ones(n);
  for (Index v : init.hot) indicator[v] = 0.0;
  const VectorXd pi = detail::clamp_pi(indicator, opt.pi_clamp);

  double background_sum = 0.0;
  for (Index v = 0; v < n; ++v) background_sum += indicator[v] * in.counts[v];
  const double background_mean = background_sum / static_cast<double>(n - hot_count);
  init.state.zeta = background_mean > 0 ? std::log(background_mean)
                                        : std::log(0.5 / static_cast<double>(n));
  init.state.theta =
      detail::theta_step(in, pi, VectorXd::Zero(in.design_x.cols()), opt).fit.coefficients;
  init.state.omega =
      detail::omega_step(in, pi, VectorXd::Zero(in.design_u.cols()), opt).fit.coefficients;
  init.state.pi = indicator;
  return init;
}

/// Expected counts pi e^zeta + (1 - pi) e^{D_X theta}.
inline VectorXd predict_hotzone(const VectorXd& pi, double zeta, const VectorXd& hot_log_rate) {
  VectorXd mu(pi.size());
  for (Index v = 0; v < pi.size(); ++v)
    mu[v] = pi[v] * std::exp(zeta) + (1.0 - pi[v]) * std::exp(std::min(hot_log_rate[v], link::kMaxEta));
  return mu;
}

inline VectorXd predict_hotzone(const HotzoneInputs& in, const HotzoneState& s) {
  return predict_hotzone(s.pi, s.zeta, in.design_x * s.theta);
}

/*
 * EM: E-step for pi, then the zeta, theta and omega M-steps, until the combined
 * M-step deviance changes by less than tol relative.
 */
inline HotzoneModel run_hotzone_em(const HotzoneInputs& in, const HotzoneState& start,
                                   const HotzoneOptions& opt = {}) {
  in.validate();
  if (start.theta.size() != in.design_x.cols() || start.omega.size() != in.design_u.cols())
    throw Error("hotzone: starting coefficients do not match the designs");
  HotzoneModel model;
  model.lambda_theta = in.lambda_theta;
  model.lambda_omega = in.lambda_omega;
  model.state = start;
  model.log_posterior_trace.push_back(
      observed_log_posterior(in, start.theta, start.omega, start.zeta));

  double previous = std::numeric_limits<double>::quiet_NaN();
  for (int it = 1; it <= opt.max_iter; ++it) {
    auto& s = model.state;
    s.pi = estep_pi(in, s);
    const VectorXd pi = detail::clamp_pi(s.pi, opt.pi_clamp);
    double combined = 0.0;
    std::string stage = "zeta";
    try {
      s.zeta = zeta_step(in.counts, pi);
      combined += detail::zeta_deviance(in.counts, pi, s.zeta);
      stage = "theta";
      const auto th = detail::theta_step(in, pi, s.theta, opt);
      s.theta = th.fit.coefficients;
      combined += th.deviance;
      stage = "omega";
      const auto om = detail::omega_step(in, pi, s.omega, opt);
      s.omega = om.fit.coefficients;
      combined += om.deviance;
    } catch (const Error& e) {
      throw Error("hotzone EM iteration " + std::to_string(it) + ", " + stage + " step: " + e.what());
    }
    if (!std::isfinite(combined))
      throw Error("hotzone EM iteration " + std::to_string(it) + ": combined deviance is not finite");
    model.iterations = it;
    model.deviance_trace.push_back(combined);
    model.log_posterior_trace.push_back(observed_log_posterior(in, s.theta, s.omega, s.zeta));
    if (std::isfinite(previous) && std::abs(combined - previous) / (std::abs(combined) + 0.1) < opt.tol) {
      model.converged = true;
      break;
    }
    previous = combined;
  }
  model.state.pi = estep_pi(in, model.state);
  if (!model.converged)
    warn("hotzone: EM did not converge in " + std::to_string(opt.max_iter) + " iterations");
  return model;
}

}  // namespace netreg

#endif  // NETREG_HOTZONE_HPP
