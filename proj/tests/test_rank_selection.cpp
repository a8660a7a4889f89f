#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "netreg/rank_selection.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace netreg;
namespace nt = netreg::testing;
using namespace netreg::oracles;

namespace {

TEST(TauPrior, ZeroInclusionIsPointMassAtZero) {
  const auto prior = tau_prior(0.0, 0.7, 1.3, 6);
  EXPECT_DOUBLE_EQ(prior.probs[0], 1.0);
  EXPECT_DOUBLE_EQ(prior.probs.tail(6).sum(), 0.0);
}

TEST(TauPrior, FlatTailIsUniformAboveOne) {
  const auto prior = tau_prior(1.0, 1.0, 1.0, 3);
  EXPECT_DOUBLE_EQ(prior.probs[0], 0.0);
  EXPECT_DOUBLE_EQ(prior.probs[1], 0.0);
  EXPECT_NEAR(prior.probs[2], 0.5, 1e-15);
  EXPECT_NEAR(prior.probs[3], 0.5, 1e-15);
}

TEST(TauPrior, MatchesDirectSum) {
  const double a0 = 0.9, a1 = 0.8, rho = 1.1;
  const Index K = 10;
  const auto prior = tau_prior(a0, a1, rho, K);
  double norm = 0.0;
  for (Index k = 2; k <= K; ++k) norm += std::pow(rho, k - 1);
  double mean = a0 * (1 - a1);
  EXPECT_NEAR(prior.probs[0], 1 - a0, 1e-15);
  EXPECT_NEAR(prior.probs[1], a0 * (1 - a1), 1e-15);
  for (Index i = 2; i <= K; ++i) {
    const double p = a0 * a1 * std::pow(rho, i - 1) / norm;
    EXPECT_NEAR(prior.probs[i], p, 1e-14);
    mean += static_cast<double>(i) * p;
  }
  EXPECT_NEAR(prior.probs.sum(), 1.0, 1e-12);
  EXPECT_NEAR(prior.mean(), mean, 1e-12);
}

TEST(TauPrior, LargeRankDoesNotOverflow) {
  const auto prior = tau_prior(0.9, 0.9, 50.0, 250);
  EXPECT_TRUE(prior.probs.allFinite());
  EXPECT_NEAR(prior.probs.sum(), 1.0, 1e-12);
  EXPECT_GT(prior.probs[250], prior.probs[249]);
}

TEST(TauPrior, RejectsBadArguments) {
  EXPECT_THROW(tau_prior(1.2, 0.5, 1.0, 5), Error);
  EXPECT_THROW(tau_prior(0.5, 0.5, 0.0, 5), Error);
  EXPECT_THROW(tau_prior(0.5, 0.5, 1.0, 1), Error);
}

TEST(Elicitation, LinearSpectrumTargetsRatio) {
  // 0 followed by xi_i = i for i = 2, 3, ...; 2 / xi_t <= 0.05 first at xi_t = 40.
  std::vector<double> xi{0.0};
  for (int i = 2; i <= 80; ++i) xi.push_back(i);
  const auto e = elicit_tau_hyperparams(xi, 0.05, 0.9, 0.9, 60);
  EXPECT_EQ(e.target, 40);
  EXPECT_TRUE(e.attained);
  EXPECT_NEAR(e.expected, 40.0, 0.05);
}

TEST(Elicitation, TargetCappedAtBasisRankWithWarning) {
  std::vector<double> xi{0.0};
  for (int i = 2; i <= 80; ++i) xi.push_back(i);
  std::vector<std::string> warnings;
  ScopedWarningSink sink([&](std::string_view m) { warnings.emplace_back(m); });
  const auto e = elicit_tau_hyperparams(xi, 0.05, 0.9, 0.9, 30);
  EXPECT_EQ(e.target, 30);
  EXPECT_FALSE(warnings.empty());
}

TEST(Elicitation, FullRatioTargetsFirstNonzero) {
  const std::vector<double> xi{0.0, 0.5, 1.0, 4.0, 9.0};
  const auto e = elicit_tau_hyperparams(xi, 1.0, 0.95, 0.95, 4);
  EXPECT_EQ(e.target, 2);
  EXPECT_NEAR(e.expected, 2.0, 0.05);
}

TEST(Elicitation, RandomSpectrumHitsTarget) {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(0.01, 5.0);
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<double> xi{0.0};
    for (int i = 0; i < 40; ++i) xi.push_back(u(rng));
    std::sort(xi.begin(), xi.end());
    const auto e = elicit_tau_hyperparams(xi, 0.2, 0.95, 0.95, 40);
    if (!e.attained) continue;  // unreachable targets are clamped with a warning
    const double direct = tau_prior(0.95, 0.95, e.rho, 40).mean();
    EXPECT_NEAR(direct, static_cast<double>(e.target), 0.05);
  }
}

TEST(Elicitation, UnreachableTargetClampsRho) {
  const std::vector<double> xi{0.0, 1.0, 2.0, 3.0, 30.0};
  ScopedWarningSink quiet({});
  // a0 = 0.1 keeps E[tau] near zero for every rho.
  const auto e = elicit_tau_hyperparams(xi, 0.05, 0.1, 0.5, 4);
  EXPECT_FALSE(e.attained);
  EXPECT_NEAR(e.rho, 1e3, 1e-6);
}

TEST(Elicitation, NeedsThreeNonzeroEigenvalues) {
  const std::vector<double> xi{0.0, 1.0, 2.0};
  EXPECT_THROW(elicit_tau_hyperparams(xi, 0.5, 0.9, 0.9, 2), Error);
}

class PrecisionTest : public ::testing::Test {
 protected:
  void SetUp() override {
    std::mt19937_64 rng(41);
    const MatrixXd B = nt::random_matrix(5, 5, rng);
    gram = B * B.transpose();
  }
  MatrixXd gram;
  const double v0 = 0.3, lambda = 1.7;
};

TEST_F(PrecisionTest, AllSlab) {
  const Eigen::VectorXd nu = Eigen::VectorXd::Zero(5);
  const MatrixXd expect = lambda * regularized_gram(gram);
  EXPECT_LT((expected_prior_precision(nu, v0, lambda, gram) - expect).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((expected_prior_precision_exact(nu, v0, lambda, gram) - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST_F(PrecisionTest, AllSpike) {
  const Eigen::VectorXd nu = Eigen::VectorXd::Ones(5);
  const MatrixXd expect = lambda * regularized_gram(gram) / v0;
  EXPECT_LT((expected_prior_precision(nu, v0, lambda, gram) - expect).cwiseAbs().maxCoeff(), 1e-11);
  EXPECT_LT((expected_prior_precision_exact(nu, v0, lambda, gram) - expect).cwiseAbs().maxCoeff(), 1e-11);
}

TEST_F(PrecisionTest, BinaryNuMatchesConditionalPrecision) {
  for (Index l = 0; l <= 5; ++l) {
    Eigen::VectorXd nu(5);
    for (Index i = 0; i < 5; ++i) nu[i] = i < l ? 0.0 : 1.0;
    const MatrixXd oracle = conditional_precision(gram, l, v0, lambda);
    EXPECT_LT((expected_prior_precision(nu, v0, lambda, gram) - oracle).cwiseAbs().maxCoeff(), 1e-11);
    EXPECT_LT((expected_prior_precision_exact(nu, v0, lambda, gram) - oracle).cwiseAbs().maxCoeff(), 1e-11);
  }
}

TEST_F(PrecisionTest, ExactFormIsPosteriorAverage) {
  std::mt19937_64 rng(2);
  const auto post = random_posterior(5, rng);
  MatrixXd oracle = MatrixXd::Zero(5, 5);
  Eigen::VectorXd nu(5);
  double cum = 0.0;
  for (Index l = 0; l <= 5; ++l) {
    oracle += post[static_cast<std::size_t>(l)] * conditional_precision(gram, l, v0, lambda);
    if (l < 5) nu[l] = (cum += post[static_cast<std::size_t>(l)]);
  }
  EXPECT_LT((expected_prior_precision_exact(nu, v0, lambda, gram) - oracle).cwiseAbs().maxCoeff(), 1e-10);
  // The congruence form agrees on the diagonal only.
  const MatrixXd cong = expected_prior_precision(nu, v0, lambda, gram);
  EXPECT_LT((cong.diagonal() - oracle.diagonal()).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(EStep, MatchesDenseGaussianOracle) {
  std::mt19937_64 rng(51);
  const Index K = 6;
  const MatrixXd B = nt::random_matrix(K, K, rng);
  const MatrixXd gram = B * B.transpose() / 3.0;
  const auto prior = tau_prior(0.9, 0.8, 1.2, K);
  const double v0 = 0.2, lambda = 0.8;
  for (int rep = 0; rep < 4; ++rep) {
    const Eigen::VectorXd theta = rep == 0 ? Eigen::VectorXd::Zero(K) : nt::random_normal(K, rng, 0.6);
    const auto post = estep_tau_posterior(theta, prior, lambda, v0, gram);
    Eigen::VectorXd lj(K + 1);
    for (Index l = 0; l <= K; ++l)
      lj[l] = gaussian_log_density(theta, conditional_precision(gram, l, v0, lambda)) +
              std::log(prior.probs[l]);
    const double top = lj.maxCoeff();
    const double lm = top + std::log((lj.array() - top).exp().sum());
    EXPECT_LT((post.log_joint - lj).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_NEAR(post.log_marginal, lm, 1e-9);
    EXPECT_LT((post.probs - (lj.array() - lm).exp().matrix()).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_NEAR(post.probs.sum(), 1.0, 1e-12);
    for (Index i = 1; i < K; ++i) EXPECT_LE(post.nu[i - 1], post.nu[i]);
  }
}

TEST(EStep, TwoCoefficientBayesTable) {
  // Diagonal gram so every density factorizes into univariate normals.
  MatrixXd gram = MatrixXd::Zero(2, 2);
  gram(0, 0) = 1.0;
  gram(1, 1) = 4.0;
  const double v0 = 0.1, lambda = 1.0;
  const auto prior = tau_prior(0.8, 0.5, 1.0, 2);
  Eigen::Vector2d theta(0.9, 0.2);
  const auto post = estep_tau_posterior(theta, prior, lambda, v0, gram);

  const double eps = 1e-8 * 2.5;
  auto normal = [](double x, double prec) {
    return std::sqrt(prec / (2 * std::numbers::pi)) * std::exp(-0.5 * prec * x * x);
  };
  const double a = 1.0 + eps, b = 4.0 + eps;
  const double table[3] = {
      normal(theta[0], a / v0) * normal(theta[1], b / v0) * 0.2,
      normal(theta[0], a) * normal(theta[1], b / v0) * 0.4,
      normal(theta[0], a) * normal(theta[1], b) * 0.4,
  };
  const double total = table[0] + table[1] + table[2];
  for (int l = 0; l < 3; ++l) EXPECT_NEAR(post.probs[l], table[l] / total, 1e-12);
  EXPECT_NEAR(post.nu[0], table[0] / total, 1e-12);
  EXPECT_NEAR(post.nu[1], (table[0] + table[1]) / total, 1e-12);
}

TEST(EStep, PointMassPriorGivesPointMassPosterior) {
  std::mt19937_64 rng(3);
  const MatrixXd gram = MatrixXd::Identity(4, 4);
  const auto post = estep_tau_posterior(nt::random_normal(4, rng), tau_prior(0.0, 0.5, 1.0, 4), 1.0,
                                        0.4, gram);
  EXPECT_DOUBLE_EQ(post.probs[0], 1.0);
  EXPECT_TRUE(post.nu.isOnes(0.0));
  const auto top = estep_tau_posterior(nt::random_normal(4, rng), tau_prior(1.0, 1.0, 1e-9, 4), 1.0,
                                       0.4, gram);
  EXPECT_NEAR(top.probs[2], 1.0, 1e-6);
}

TEST(Centroid, PaperGainValue) {
  for (double kappa : {0.5, 1.0, 4.0, 7.25}) EXPECT_DOUBLE_EQ(centroid_gain(3, 5, 7, kappa), 2.0 + 3.0 * kappa);
}

TEST(Centroid, PointMassAtZero) {
  const std::vector<double> post{1.0, 0.0, 0.0};
  EXPECT_EQ(sequential_centroid(post, 1.0), 0);
}

TEST(Centroid, UniformPosterior) {
  const std::vector<double> post(8, 1.0 / 8.0);
  EXPECT_EQ(sequential_centroid(post, 1.0), brute_force_centroid(post, 1.0));
  EXPECT_EQ(sequential_centroid(post, 1.0), 3);
}

TEST(Centroid, AgreesWithBruteForceArgmax) {
  std::mt19937_64 rng(61);
  std::uniform_int_distribution<Index> size(2, 20);
  int checked = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    const auto post = random_posterior(size(rng), rng);
    for (double kappa : {0.5, 1.0, 4.0}) {
      ASSERT_EQ(sequential_centroid(post, kappa), brute_force_centroid(post, kappa))
          << "rep " << rep << " kappa " << kappa;
      ++checked;
    }
  }
  EXPECT_EQ(checked, 3000);
}

TEST(Centroid, GainRecurrence) {
  std::mt19937_64 rng(62);
  for (int rep = 0; rep < 50; ++rep) {
    const auto post = random_posterior(9, rng);
    const double kappa = 0.3 + rep * 0.1;
    double cum = 0.0;
    for (Index j = 0; j < 9; ++j) {
      cum += post[static_cast<std::size_t>(j)];
      const double step = expected_centroid_gain(j + 1, post, kappa) - expected_centroid_gain(j, post, kappa);
      EXPECT_NEAR(step, kappa - (kappa + 1.0) * cum, 1e-12);
    }
  }
}

TEST(Centroid, NonDecreasingInKappa) {
  std::mt19937_64 rng(63);
  for (int rep = 0; rep < 200; ++rep) {
    const auto post = random_posterior(12, rng);
    Index previous = 0;
    for (double kappa = 0.05; kappa < 50; kappa *= 1.3) {
      const Index t = sequential_centroid(post, kappa);
      EXPECT_GE(t, previous);
      previous = t;
    }
  }
}

/// Small graph problem with a known intercept surface on the first `true_rank` eigenvectors.
struct Toy {
  SpectralBasis basis;
  LaplacianOps ops;
  MatrixXd X;
  Eigen::VectorXd y;
};

Toy make_toy(Index n, Index K, Index p, std::uint64_t seed, const Eigen::VectorXd& intercept_theta,
             double covariate_effect) {
  std::mt19937_64 rng(seed);
  Toy toy;
  const auto g = nt::weighted(nt::random_graph(n, n / 2, rng));
  toy.ops = build_laplacian(g);
  toy.basis = eigenbasis(toy.ops, K);
  toy.X = nt::random_matrix(n, p, rng);
  Eigen::VectorXd eta = toy.basis.eigenvectors.leftCols(intercept_theta.size()) * intercept_theta;
  if (p > 0) eta += covariate_effect * toy.X.col(0);
  toy.y = nt::poisson_draws(eta.array().exp().matrix(), rng);
  return toy;
}

TEST(PredictorEm, MarginalLogPosteriorNonDecreasing) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    std::mt19937_64 rng(seed * 7);
    const Index n = 40, K = 8;
    Eigen::VectorXd th = nt::random_normal(4, rng, 1.0);
    th[0] = 10.0;
    const Toy toy = make_toy(n, K, 1, seed, th, 0.3);
    const auto pb = predictor_blocks(toy.X, toy.basis, toy.ops.laplacian);
    const auto prior = tau_prior(0.9, 0.9, 1.0, K);
    SpikeSlabOptions opt;
    opt.lambda = 0.5;
    opt.v0 = 0.2;
    opt.em_tol = 1e-10;
    for (std::size_t j = 0; j < pb.blocks.size(); ++j) {
      const Eigen::VectorXd offset = Eigen::VectorXd::Zero(n);
      const auto em = run_predictor_em(toy.y, pb.blocks[j], pb.grams[j], offset, prior, opt);
      ASSERT_GE(em.log_posterior_trace.size(), 2u);
      for (std::size_t t = 1; t < em.log_posterior_trace.size(); ++t)
        EXPECT_GE(em.log_posterior_trace[t], em.log_posterior_trace[t - 1] - 1e-6)
            << "seed " << seed << " predictor " << j << " iteration " << t;
      const double direct = predictor_log_posterior(toy.y, pb.blocks[j], offset, em.theta, prior,
                                                    pb.grams[j], opt);
      EXPECT_NEAR(direct, em.log_posterior_trace.back(), 1e-8);
    }
  }
}

TEST(SelectRanks, NoisePredictorGetsZeroRank) {
  int zero = 0;
  const int reps = 10;
  for (int rep = 0; rep < reps; ++rep) {
    std::mt19937_64 rng(1000 + rep);
    const Index n = 80, K = 15;
    Eigen::VectorXd th(3);
    th << 12.0, 1.0, -0.8;
    Toy toy = make_toy(n, K, 2, 1000 + rep, th, 0.5);
    const auto prior = tau_prior(0.5, 0.5, 0.7, K);
    SpikeSlabOptions opt;
    opt.lambda = 1.0;
    opt.v0 = 0.1;
    const auto sel = select_ranks(toy.y, toy.X, toy.basis, toy.ops.laplacian, prior, opt);
    if (sel.ranks[2] == 0) ++zero;
  }
  EXPECT_GE(zero, 8) << zero << "/" << reps;
}

TEST(SelectRanks, RecoversGeneratingRank) {
  int close = 0;
  const int reps = 10;
  for (int rep = 0; rep < reps; ++rep) {
    const Index n = 120, K = 15;
    Eigen::VectorXd th(5);
    th << 18.0, 4.0, -4.0, 3.5, -3.5;
    const Toy toy = make_toy(n, K, 0, 2000 + rep, th, 0.0);
    const auto prior = tau_prior(0.95, 0.95, 1.0, K);
    SpikeSlabOptions opt;
    opt.lambda = 1.0;
    opt.v0 = 0.1;
    const auto sel = select_ranks(toy.y, toy.X, toy.basis, toy.ops.laplacian, prior, opt);
    if (std::abs(sel.ranks[0] - 5) <= 2) ++close;
  }
  EXPECT_GE(close, 7) << close << "/" << reps;
}

TEST(SelectRanks, TwoRankToyMatchesExhaustiveMap) {
  int agree = 0;
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(3000 + seed);
    const Index n = 15, K = 2;
    const auto g = nt::weighted(nt::random_graph(n, 5, rng));
    const auto ops = build_laplacian(g);
    const auto basis = eigenbasis(ops, K);
    const MatrixXd X = nt::random_matrix(n, 1, rng);
    // Each signal is either absent or strong, so the answer is not a coin flip.
    const double wave = seed % 2 == 0 ? 4.0 : 0.0;
    const double slope = seed % 4 < 2 ? 0.6 : 0.0;
    const Eigen::VectorXd eta =
        Eigen::VectorXd::Constant(n, 2.5) + wave * basis.eigenvectors.col(1) + slope * X.col(0);
    const Eigen::VectorXd y = nt::poisson_draws(eta.array().exp().matrix(), rng);
    const auto pb = predictor_blocks(X, basis, ops.laplacian);
    const auto prior = tau_prior(0.8, 0.5, 1.0, K);
    SpikeSlabOptions opt;
    opt.lambda = 1.0;
    opt.v0 = 0.1;
    opt.kappa = 1.0;
    const auto sel = select_ranks(y, pb, prior, opt);
    const auto oracle = exhaustive_map_ranks(y, pb, prior, opt);
    if (sel.ranks == oracle) ++agree;
  }
  EXPECT_GE(agree, 9) << agree << "/10";
}

TEST(SelectRanks, ConvergesAndKeepsTraceLengths) {
  Eigen::VectorXd th(2);
  th << 8.0, 1.0;
  const Toy toy = make_toy(30, 5, 1, 5, th, 0.4);
  const auto prior = tau_prior(0.9, 0.9, 1.0, 5);
  const auto sel = select_ranks(toy.y, toy.X, toy.basis, toy.ops.laplacian, prior, SpikeSlabOptions{});
  EXPECT_TRUE(sel.converged);
  EXPECT_GE(sel.cycles, 2);
  ASSERT_EQ(sel.ranks.size(), 2u);
  for (const auto& post : sel.posteriors) EXPECT_NEAR(post.sum(), 1.0, 1e-12);
}

TEST(SelectRanks, RejectsMismatchedPrior) {
  const Toy toy = make_toy(20, 4, 0, 9, Eigen::VectorXd::Constant(1, 4.0), 0.0);
  EXPECT_THROW(select_ranks(toy.y, toy.X, toy.basis, toy.ops.laplacian, tau_prior(0.9, 0.9, 1.0, 3),
                            SpikeSlabOptions{}),
               Error);
}

}  // namespace
