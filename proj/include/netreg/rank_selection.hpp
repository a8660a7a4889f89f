#ifndef NETREG_RANK_SELECTION_HPP
#define NETREG_RANK_SELECTION_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "netreg/glm.hpp"
#include "netreg/spectral.hpp"

namespace netreg {

/*
 * Prior over the basis rank tau in {0..K}:
 *   Pr(0) = 1 - a0,  Pr(1) = a0 (1 - a1),
 *   Pr(i) = a0 a1 rho^{i-1} / sum_{k=2..K} rho^{k-1}   for i >= 2.
 */
struct TauPrior {
  double alpha0 = 0.9;
  double alpha1 = 0.9;
  double rho = 1.0;
  Index max_rank = 2;
  VectorXd probs;  // length K + 1

  double mean() const {
    double m = 0.0;
    for (Index l = 0; l < probs.size(); ++l) m += static_cast<double>(l) * probs[l];
    return m;
  }
};

inline TauPrior tau_prior(double alpha0, double alpha1, double rho, Index K) {
  if (!(alpha0 >= 0 && alpha0 <= 1 && alpha1 >= 0 && alpha1 <= 1))
    throw Error("tau_prior: alpha0 and alpha1 must lie in [0, 1]");
  if (!(rho > 0) || !std::isfinite(rho)) throw Error("tau_prior: rho must be positive");
  if (K < 2) throw Error("tau_prior: maximum rank K must be at least 2");

  TauPrior prior{alpha0, alpha1, rho, K, VectorXd::Zero(K + 1)};
  prior.probs[0] = 1.0 - alpha0;
  prior.probs[1] = alpha0 * (1.0 - alpha1);
  // Geometric tail normalized in log space; rho^{K-1} overflows for large K.
  const double log_rho = std::log(rho);
  const double top = (log_rho >= 0 ? static_cast<double>(K - 1) : 1.0) * log_rho;
  double norm = 0.0;
  for (Index i = 2; i <= K; ++i) norm += std::exp(static_cast<double>(i - 1) * log_rho - top);
  for (Index i = 2; i <= K; ++i)
    prior.probs[i] =
        alpha0 * alpha1 * std::exp(static_cast<double>(i - 1) * log_rho - top) / norm;
  return prior;
}

struct TauElicitation {
  double rho = 1.0;
  Index target = 2;      // t, counted over the full ordered spectrum
  double expected = 0.0;  // E[tau] at the returned rho
  bool attained = false;
};

/*
 * Picks the target rank t as the first index whose eigenvalue is at least
 * 1/pct times the smallest nonzero eigenvalue, then solves E[tau] = t for rho by
 * bisection on log rho over [1e-3, 1e3].  `eigenvalues` is the ascending
 * spectrum including its zero eigenvalue(s); t is capped at K.
 */
inline TauElicitation elicit_tau_hyperparams(std::span<const double> eigenvalues, double pct,
                                             double alpha0, double alpha1, Index K) {
  if (!(pct > 0 && pct <= 1)) throw Error("elicit: pct must lie in (0, 1]");
  if (eigenvalues.empty()) throw Error("elicit: empty spectrum");
  const double top = *std::max_element(eigenvalues.begin(), eigenvalues.end());
  const double zero_tol = 1e-10 * std::max(top, 1e-300);
  std::size_t first_nonzero = eigenvalues.size();
  Index nonzero = 0;
  for (std::size_t i = 0; i < eigenvalues.size(); ++i)
    if (eigenvalues[i] > zero_tol) {
      if (first_nonzero == eigenvalues.size()) first_nonzero = i;
      ++nonzero;
    }
  if (nonzero < 3) throw Error("elicit: need at least three nonzero eigenvalues");

  TauElicitation out;
  const double base = eigenvalues[first_nonzero];
  Index t = -1;
  for (std::size_t i = first_nonzero; i < eigenvalues.size(); ++i)
    if (base / eigenvalues[i] <= pct) {
      t = static_cast<Index>(i) + 1;
      break;
    }
  if (t < 0 || t > K) {
    warn("elicit: no eigenvalue ratio reaches " + std::to_string(pct) +
         " within the basis; using t = K");
    t = K;
  }
  out.target = t;

  auto expectation = [&](double log_rho) {
    return tau_prior(alpha0, alpha1, std::exp(log_rho), K).mean();
  };
  double lo = std::log(1e-3), hi = std::log(1e3);
  const double target = static_cast<double>(t);
  if (expectation(hi) < target || expectation(lo) > target) {
    const bool too_high = expectation(hi) < target;
    out.rho = std::exp(too_high ? hi : lo);
    out.expected = expectation(too_high ? hi : lo);
    warn("elicit: E[tau] = " + std::to_string(target) +
         " is not reachable with the given alpha0, alpha1; rho clamped to the bracket");
    return out;
  }
  double mid = 0.5 * (lo + hi);
  for (int it = 0; it < 200 && hi - lo > 1e-12; ++it) {
    mid = 0.5 * (lo + hi);
    (expectation(mid) < target ? lo : hi) = mid;
  }
  out.rho = std::exp(mid);
  out.expected = expectation(mid);
  out.attained = std::abs(out.expected - target) < 0.05;
  return out;
}

/// A + eps (tr A / K) I with eps = 1e-8; makes every spike/slab covariance full rank.
inline MatrixXd regularized_gram(const MatrixXd& gram, double eps = 1e-8) {
  const Index K = gram.rows();
  double scale = gram.trace() / static_cast<double>(std::max<Index>(K, 1));
  if (!(scale > 0)) scale = 1.0;
  MatrixXd out = 0.5 * (gram + gram.transpose());
  out.diagonal().array() += eps * scale;
  return out;
}

/// How E[Sigma^{-1}] over tau is formed in the rank-selection M-step.
enum class PrecisionExpectation {
  /// lambda S^{1/2} A S^{1/2} with S = Diag(nu/V0 + 1 - nu).
  congruence,
  /// Exact E_tau[lambda M^{-1/2} A M^{-1/2}], entrywise in nu.
  exact,
};

/// lambda S^{1/2} A_eps S^{1/2}, S = Diag(nu_i / V0 + (1 - nu_i)).
inline MatrixXd expected_prior_precision(const VectorXd& nu, double v0, double lambda,
                                         const MatrixXd& gram) {
  if (nu.size() != gram.rows()) throw Error("expected_prior_precision: size mismatch");
  if (!(v0 > 0 && v0 < 1)) throw Error("expected_prior_precision: V0 must lie in (0, 1)");
  const VectorXd s = (nu.array() / v0 + (1.0 - nu.array())).sqrt().matrix();
  return lambda * s.asDiagonal() * regularized_gram(gram) * s.asDiagonal();
}

/*
 * Exact expectation of the conditional precision lambda M^{-1/2} A_eps M^{-1/2}.
 * With c = V0^{-1/2} and i <= k, the scale of entry (i, k) is
 *   (1 - nu_k) + c (nu_k - nu_i) + c^2 nu_i.
 */
inline MatrixXd expected_prior_precision_exact(const VectorXd& nu, double v0, double lambda,
                                               const MatrixXd& gram) {
  if (nu.size() != gram.rows()) throw Error("expected_prior_precision: size mismatch");
  if (!(v0 > 0 && v0 < 1)) throw Error("expected_prior_precision: V0 must lie in (0, 1)");
  const Index K = nu.size();
  const double c = 1.0 / std::sqrt(v0);
  MatrixXd out = regularized_gram(gram);
  for (Index k = 0; k < K; ++k)
    for (Index i = 0; i <= k; ++i) {
      const double scale = (1.0 - nu[k]) + c * (nu[k] - nu[i]) + c * c * nu[i];
      out(i, k) *= lambda * scale;
      if (i != k) out(k, i) = out(i, k);
    }
  return out;
}

struct TauPosterior {
  VectorXd probs;      // Pr(tau = l | theta), l = 0..K
  VectorXd nu;         // nu_i = Pr(tau < i), i = 1..K
  VectorXd log_joint;  // log Pr(theta | tau = l) + log Pr(tau = l)
  double log_marginal = 0.0;  // log sum_l exp(log_joint)
};

/*
 * Posterior over tau given the expansion coefficients.  theta | tau = l is
 * Gaussian with precision lambda M_l^{-1/2} A_eps M_l^{-1/2}; its quadratic
 * form is updated one coordinate at a time as l grows.
 */
inline TauPosterior estep_tau_posterior(const VectorXd& theta, const TauPrior& prior,
                                        double lambda, double v0, const MatrixXd& gram) {
  const Index K = theta.size();
  if (K != prior.max_rank || gram.rows() != K)
    throw Error("estep_tau_posterior: theta, prior and gram sizes disagree");
  const MatrixXd A = regularized_gram(gram);
  Eigen::LLT<MatrixXd> llt(A);
  if (llt.info() != Eigen::Success) throw Error("estep_tau_posterior: gram not positive definite");
  double logdet_a = 0.0;
  for (Index i = 0; i < K; ++i) logdet_a += 2.0 * std::log(llt.matrixL()(i, i));

  const double c = 1.0 / std::sqrt(v0);
  const double log_inv_v0 = -std::log(v0);
  const double base = 0.5 * (static_cast<double>(K) * std::log(lambda) + logdet_a) -
                      0.5 * static_cast<double>(K) * std::log(2.0 * std::numbers::pi);

  // l = 0: every coordinate in the spike.
  VectorXd u = c * theta;
  VectorXd g = A * u;
  double quad = u.dot(g);

  TauPosterior post;
  post.log_joint.resize(K + 1);
  for (Index l = 0; l <= K; ++l) {
    if (l > 0) {
      const Index k = l - 1;
      const double delta = theta[k] - u[k];
      quad += 2.0 * delta * g[k] + delta * delta * A(k, k);
      g += delta * A.col(k);
      u[k] = theta[k];
    }
    const double log_density =
        base + 0.5 * static_cast<double>(K - l) * log_inv_v0 - 0.5 * lambda * quad;
    post.log_joint[l] = prior.probs[l] > 0 ? log_density + std::log(prior.probs[l])
                                           : -std::numeric_limits<double>::infinity();
  }
  const double top = post.log_joint.maxCoeff();
  if (!std::isfinite(top))
    throw Error("estep_tau_posterior: every rank has zero posterior density");
  post.probs = (post.log_joint.array() - top).exp().matrix();
  const double total = post.probs.sum();
  post.probs /= total;
  post.log_marginal = top + std::log(total);

  post.nu.resize(K);
  double cum = 0.0;
  for (Index i = 1; i <= K; ++i) {
    cum += post.probs[i - 1];
    post.nu[i - 1] = std::min(cum, 1.0);
  }
  return post;
}

/// Generalized Hamming gain between rank indicators: K - max + kappa * min.
inline double centroid_gain(Index a, Index b, Index K, double kappa) {
  return static_cast<double>(K - std::max(a, b)) + kappa * static_cast<double>(std::min(a, b));
}

/// sum_tau G(omega(candidate), omega(tau)) pi_tau.
inline double expected_centroid_gain(Index candidate, std::span<const double> posterior,
                                     double kappa) {
  const Index K = static_cast<Index>(posterior.size()) - 1;
  double total = 0.0;
  for (Index t = 0; t <= K; ++t)
    total += centroid_gain(candidate, t, K, kappa) * posterior[static_cast<std::size_t>(t)];
  return total;
}

/*
 * Bayes estimate of tau under the generalized Hamming gain.  The expected gain
 * rises from j to j+1 exactly while the cumulative posterior through j stays
 * below kappa / (1 + kappa), so the maximizer is the number of such j.
 * Ties resolve to the smaller rank.
 */
inline Index sequential_centroid(std::span<const double> posterior, double kappa) {
  if (!(kappa > 0)) throw Error("sequential_centroid: kappa must be positive");
  if (posterior.empty()) throw Error("sequential_centroid: empty posterior");
  const Index K = static_cast<Index>(posterior.size()) - 1;
  const double threshold = kappa / (1.0 + kappa);
  double cum = 0.0;
  Index tau = 0;
  for (Index j = 0; j < K; ++j) {
    cum += posterior[static_cast<std::size_t>(j)];
    if (cum < threshold) ++tau;
    else break;
  }
  return tau;
}

inline Index sequential_centroid(const VectorXd& posterior, double kappa) {
  return sequential_centroid(std::span<const double>(posterior.data(), static_cast<std::size_t>(posterior.size())), kappa);
}

struct SpikeSlabOptions {
  double lambda = 1.0;
  double v0 = 0.4;
  double kappa = 4.0;
  double em_tol = 1e-6;
  int em_max_iter = 200;
  int max_cycles = 50;
  PrecisionExpectation expectation = PrecisionExpectation::exact;
};

inline MatrixXd spike_slab_precision(const VectorXd& nu, const MatrixXd& gram,
                                     const SpikeSlabOptions& opt) {
  return opt.expectation == PrecisionExpectation::exact
             ? expected_prior_precision_exact(nu, opt.v0, opt.lambda, gram)
             : expected_prior_precision(nu, opt.v0, opt.lambda, gram);
}

/// Poisson log-likelihood of counts y at log-mean eta (including log y!).
inline double poisson_log_likelihood(const VectorXd& y, const VectorXd& eta) {
  double total = 0.0;
  for (Index v = 0; v < y.size(); ++v) {
    const double e = std::min(eta[v], link::kMaxEta);
    total += y[v] * e - std::exp(e) - std::lgamma(y[v] + 1.0);
  }
  return total;
}

struct PredictorEmResult {
  VectorXd theta;
  TauPosterior posterior;
  std::vector<double> deviance_trace;
  std::vector<double> log_posterior_trace;  // log Pr(Y|theta) + log sum_l Pr(theta|l) Pr(l)
  int iterations = 0;
  bool converged = false;
};

/// Observed-data log posterior of one predictor's coefficients, marginal over tau.
inline double predictor_log_posterior(const VectorXd& y, const MatrixXd& block,
                                      const VectorXd& offset, const VectorXd& theta,
                                      const TauPrior& prior, const MatrixXd& gram,
                                      const SpikeSlabOptions& opt) {
  const VectorXd eta = block * theta + offset;
  return poisson_log_likelihood(y, eta) +
         estep_tau_posterior(theta, prior, opt.lambda, opt.v0, gram).log_marginal;
}

/*
 * EM for one predictor's coefficients with tau latent.  The first M-step uses
 * the prior's nu; afterwards E- and M-steps alternate until the M-step deviance
 * changes by less than em_tol.
 */
inline PredictorEmResult run_predictor_em(const VectorXd& y, const MatrixXd& block,
                                          const MatrixXd& gram, const VectorXd& offset,
                                          const TauPrior& prior, const SpikeSlabOptions& opt,
                                          const VectorXd& start = {}) {
  const Index K = block.cols();
  PredictorEmResult out;
  VectorXd nu(K);
  {
    double cum = 0.0;
    for (Index i = 1; i <= K; ++i) {
      cum += prior.probs[i - 1];
      nu[i - 1] = std::min(cum, 1.0);
    }
  }
  GlmSpec spec;
  spec.family = Family::poisson;
  spec.response = y;
  spec.offset = offset;
  spec.validate_prior = false;
  VectorXd theta = start.size() == K ? start : VectorXd::Zero(K);
  if (start.size() == K) {
    nu = estep_tau_posterior(theta, prior, opt.lambda, opt.v0, gram).nu;
  }
  double previous = std::numeric_limits<double>::quiet_NaN();
  for (int it = 1; it <= opt.em_max_iter; ++it) {
    spec.prior_precision = spike_slab_precision(nu, gram, opt);
    spec.start = theta;
    const GlmFit m = fit(block, spec);
    theta = m.coefficients;
    out.iterations = it;
    out.deviance_trace.push_back(m.deviance);
    out.posterior = estep_tau_posterior(theta, prior, opt.lambda, opt.v0, gram);
    nu = out.posterior.nu;
    out.log_posterior_trace.push_back(poisson_log_likelihood(y, m.linear_predictor) +
                                      out.posterior.log_marginal);
    if (std::isfinite(previous) && std::abs(m.deviance - previous) < opt.em_tol) {
      out.converged = true;
      break;
    }
    previous = m.deviance;
  }
  out.theta = theta;
  return out;
}

struct RankSelection {
  std::vector<Index> ranks;               // tau_j, j = 0..p
  std::vector<VectorXd> posteriors;       // Pr(tau_j = l | Y, theta_j)
  std::vector<VectorXd> coefficients;     // full-K theta_j from the last EM
  int cycles = 0;
  bool converged = false;
  std::vector<std::vector<double>> log_posterior_traces;  // last EM per predictor
};

/// Per-predictor blocks Diag(x_j) Phi_{1:K} and their Laplacian grams.
struct PredictorBlocks {
  std::vector<MatrixXd> blocks;
  std::vector<MatrixXd> grams;
};

inline PredictorBlocks predictor_blocks(const MatrixXd& X, const SpectralBasis& basis,
                                        const SparseMatrix& laplacian) {
  const MatrixXd cov = with_intercept(X);
  PredictorBlocks out;
  for (Index j = 0; j < cov.cols(); ++j) {
    out.blocks.push_back(predictor_block(cov.col(j), basis));
    out.grams.push_back(laplacian_gram(out.blocks.back(), laplacian));
  }
  return out;
}

/*
 * Cycles through the predictors (intercept first), fitting each one's EM with
 * the others' current contribution as offset, then setting tau_j by the
 * sequential centroid estimator.  Stops once a full cycle leaves tau unchanged.
 */
inline RankSelection select_ranks(const VectorXd& y, const PredictorBlocks& pb,
                                  const TauPrior& prior, const SpikeSlabOptions& opt,
                                  const RankSelection* warm = nullptr) {
  const Index P = static_cast<Index>(pb.blocks.size());
  if (P == 0) throw Error("select_ranks: no predictors");
  const Index n = y.size();
  const Index K = pb.blocks.front().cols();
  if (prior.max_rank != K) throw Error("select_ranks: prior K does not match the basis rank");

  RankSelection out;
  out.ranks.assign(static_cast<std::size_t>(P), -1);
  out.posteriors.assign(static_cast<std::size_t>(P), VectorXd());
  out.coefficients.assign(static_cast<std::size_t>(P), VectorXd::Zero(K));
  out.log_posterior_traces.assign(static_cast<std::size_t>(P), {});
  if (warm && static_cast<Index>(warm->coefficients.size()) == P) out.coefficients = warm->coefficients;

  std::vector<char> visited(static_cast<std::size_t>(P), warm ? 1 : 0);
  VectorXd eta = VectorXd::Zero(n);
  for (Index j = 0; j < P; ++j)
    eta += pb.blocks[static_cast<std::size_t>(j)] * out.coefficients[static_cast<std::size_t>(j)];

  for (int cycle = 1; cycle <= opt.max_cycles; ++cycle) {
    out.cycles = cycle;
    const auto before = out.ranks;
    for (Index j = 0; j < P; ++j) {
      const auto sj = static_cast<std::size_t>(j);
      const VectorXd own = pb.blocks[sj] * out.coefficients[sj];
      const VectorXd offset = eta - own;
      auto em = run_predictor_em(y, pb.blocks[sj], pb.grams[sj], offset, prior, opt,
                                 visited[sj] ? out.coefficients[sj] : VectorXd());
      visited[sj] = 1;
      out.coefficients[sj] = em.theta;
      eta = offset + pb.blocks[sj] * em.theta;
      out.posteriors[sj] = em.posterior.probs;
      out.ranks[sj] = sequential_centroid(em.posterior.probs, opt.kappa);
      out.log_posterior_traces[sj] = std::move(em.log_posterior_trace);
    }
    if (out.ranks == before) {
      out.converged = true;
      return out;
    }
  }
  warn("select_ranks: ranks still changing after " + std::to_string(opt.max_cycles) +
       " cycles; returning the last ranks");
  return out;
}

inline RankSelection select_ranks(const VectorXd& y, const MatrixXd& X, const SpectralBasis& basis,
                                  const SparseMatrix& laplacian, const TauPrior& prior,
                                  const SpikeSlabOptions& opt) {
  return select_ranks(y, predictor_blocks(X, basis, laplacian), prior, opt);
}

}  // namespace netreg

#endif  // NETREG_RANK_SELECTION_HPP
