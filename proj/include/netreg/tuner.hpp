#ifndef NETREG_TUNER_HPP
#define NETREG_TUNER_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "netreg/glm.hpp"
#include "netreg/parallel.hpp"
#include "netreg/rank_selection.hpp"
#include "netreg/spectral.hpp"

namespace netreg {

/// The smoothed single-state model at fixed ranks and roughness penalty.
struct SmoothedFit {
  DesignMatrix design;
  MatrixXd gram;  // D' L D
  GlmFit fit;
};

inline SmoothedFit fit_smoothed(const VectorXd& y, const MatrixXd& X, const SpectralBasis& basis,
                                const SparseMatrix& laplacian, std::span<const Index> ranks,
                                double lambda, const VectorXd& start = {}) {
  auto design = build_design(X, basis, ranks);
  MatrixXd gram = laplacian_gram(design.matrix(), laplacian);
  GlmSpec spec;
  spec.response = y;
  spec.prior_precision = lambda * gram;
  spec.validate_prior = false;
  if (start.size() == design.num_columns()) spec.start = start;
  GlmFit f = fit(design.matrix(), spec);
  return {std::move(design), std::move(gram), std::move(f)};
}

struct TuneProblem {
  VectorXd counts;
  MatrixXd covariates;  // without the intercept column
  SpectralBasis basis;
  SparseMatrix laplacian;
  TauPrior prior;
};

struct TuneOptions {
  std::vector<double> v0_grid{0.1, 0.2, 0.4, 0.6, 0.8};
  double lambda_lo = 1e-4;
  double lambda_hi = 1e4;
  double lambda_tol = 1e-2;  // relative width of the final lambda bracket
  double initial_lambda = 1.0;
  int max_alternations = 10;
  SpikeSlabOptions spike_slab;  // lambda and v0 are overwritten per evaluation
  unsigned threads = 0;         // 0 = NETREG_THREADS or hardware count
};

struct TuneRecord {
  double v0 = 0.0;
  double lambda = 0.0;
  double loop = 0.0;
  bool loop_infinite = false;
  std::vector<Index> ranks;
  int alternation = 0;
  bool final_search = false;  // part of the chain's last lambda search
};

struct ChainResult {
  double v0 = 0.0;
  double lambda = 0.0;
  double loop = std::numeric_limits<double>::infinity();
  std::vector<Index> ranks;
  RankSelection selection;
  int alternations = 0;
  bool converged = false;
  std::vector<TuneRecord> records;
};

struct TuneResult {
  double v0 = 0.0;
  double lambda = 0.0;
  double loop = 0.0;
  std::vector<Index> ranks;
  RankSelection selection;
  std::vector<ChainResult> chains;
  std::vector<TuneRecord> records;  // every evaluation, chains in grid order
};

struct LambdaSearch {
  double lambda = 0.0;
  double loop = std::numeric_limits<double>::infinity();
  VectorXd coefficients;
};

/// True when (loop, lambda) beats the incumbent; ties go to the larger lambda.
inline bool better_loop(double loop, double lambda, double best_loop, double best_lambda) {
  if (loop < best_loop) return true;
  return loop == best_loop && lambda > best_lambda;
}

/*
 * Golden-section search for the LOOP-minimizing lambda at fixed ranks, on log
 * lambda over [lo, hi], until the bracket is narrower than a factor 1 + tol.
 * Returns the best point evaluated.
 */
inline LambdaSearch search_lambda(const TuneProblem& p, std::span<const Index> ranks, double lo,
                                  double hi, double tol, std::vector<TuneRecord>* records = nullptr,
                                  double v0 = 0.0, int alternation = 0) {
  if (!(lo > 0 && hi > lo)) throw Error("tune: lambda bracket must satisfy 0 < lo < hi");
  const double ratio = (std::sqrt(5.0) - 1.0) / 2.0;
  LambdaSearch best;
  VectorXd warm;
  auto eval = [&](double log_lambda) {
    const double lambda = std::exp(log_lambda);
    const auto sf = fit_smoothed(p.counts, p.covariates, p.basis, p.laplacian, ranks, lambda, warm);
    warm = sf.fit.coefficients;
    const double loop = sf.fit.loop;
    if (records)
      records->push_back({v0, lambda, loop, sf.fit.loop_infinite,
                          std::vector<Index>(ranks.begin(), ranks.end()), alternation, false});
    if (better_loop(loop, lambda, best.loop, best.lambda)) {
      best.lambda = lambda;
      best.loop = loop;
      best.coefficients = sf.fit.coefficients;
    }
    return loop;
  };
  double a = std::log(lo), b = std::log(hi);
  double c = b - ratio * (b - a), d = a + ratio * (b - a);
  double fc = eval(c), fd = eval(d);
  const double width = std::log1p(tol);
  while (b - a > width) {
    // On ties keep the upper part: larger lambda wins.
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - ratio * (b - a);
      fc = eval(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + ratio * (b - a);
      fd = eval(d);
    }
  }
  if (best.lambda == 0.0) best.lambda = std::exp(0.5 * (a + b));
  return best;
}

/*
 * One V0 chain: alternate rank selection at fixed lambda and lambda search at
 * fixed ranks until the ranks repeat.  If the cap is reached (typically a
 * two-cycle), the visited pair with the smallest LOOP is kept.
 */
inline ChainResult tune_chain(const TuneProblem& p, const PredictorBlocks& blocks, double v0,
                              const TuneOptions& opt) {
  if (!(v0 > 0 && v0 < 1)) throw Error("tune: V0 candidates must lie in (0, 1)");
  ChainResult chain;
  chain.v0 = v0;
  SpikeSlabOptions ss = opt.spike_slab;
  ss.v0 = v0;
  ss.lambda = opt.initial_lambda;
  RankSelection sel = select_ranks(p.counts, blocks, p.prior, ss);
  int chosen = 0;
  for (int alt = 1; alt <= opt.max_alternations; ++alt) {
    chain.alternations = alt;
    const auto search = search_lambda(p, sel.ranks, opt.lambda_lo, opt.lambda_hi, opt.lambda_tol,
                                      &chain.records, v0, alt);
    ss.lambda = search.lambda;
    RankSelection next = select_ranks(p.counts, blocks, p.prior, ss);
    const bool fixed = next.ranks == sel.ranks;
    if (fixed || chosen == 0 || better_loop(search.loop, search.lambda, chain.loop, chain.lambda)) {
      chosen = alt;
      chain.ranks = sel.ranks;
      chain.lambda = search.lambda;
      chain.loop = search.loop;
      // At a fixed point `next` is the selection made at the returned lambda.
      chain.selection = fixed ? std::move(next) : sel;
    }
    if (fixed) {
      chain.converged = true;
      break;
    }
    sel = std::move(next);
  }
  for (auto& r : chain.records) r.final_search = r.alternation == chosen;
  if (!chain.converged)
    warn("tune: V0 = " + std::to_string(v0) + " did not reach a (tau, lambda) fixed point in " +
         std::to_string(opt.max_alternations) + " alternations; keeping the visited pair with the " +
         "smallest LOOP");
  return chain;
}

/*
 * Chooses (V0, lambda, tau) by LOOP.  Each V0 candidate runs its own chain
 * (in parallel when threads allow); the chain ending at the smallest LOOP wins,
 * ties going to the larger lambda.
 */
inline TuneResult tune(const TuneProblem& p, const TuneOptions& opt = {}) {
  if (opt.v0_grid.empty()) throw Error("tune: V0 grid is empty");
  const auto blocks = predictor_blocks(p.covariates, p.basis, p.laplacian);
  TuneResult out;
  out.chains.resize(opt.v0_grid.size());
  parallel_for(opt.v0_grid.size(), thread_count(opt.threads), [&](std::size_t i) {
    out.chains[i] = tune_chain(p, blocks, opt.v0_grid[i], opt);
  });
  const ChainResult* best = nullptr;
  for (const auto& chain : out.chains) {
    out.records.insert(out.records.end(), chain.records.begin(), chain.records.end());
    if (!std::isfinite(chain.loop)) continue;
    if (!best || better_loop(chain.loop, chain.lambda, best->loop, best->lambda)) best = &chain;
  }
  if (!best)
    throw Error("tune: LOOP is infinite for every evaluated (V0, lambda); some vertex has leverage 1 "
                "at every penalty (check for isolated vertices or unpenalized indicator columns)");
  out.v0 = best->v0;
  out.lambda = best->lambda;
  out.loop = best->loop;
  out.ranks = best->ranks;
  out.selection = best->selection;
  return out;
}

}  // namespace netreg

#endif  // NETREG_TUNER_HPP
