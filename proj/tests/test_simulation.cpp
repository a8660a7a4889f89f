#include <cmath>
#include <limits>
#include <memory>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "netreg/simulation.hpp"
#include "test_support.hpp"

using namespace netreg;
namespace nt = netreg::testing;

namespace {

const WeightedGraph& base_graph() {
  static const WeightedGraph g = street_grid(30, 30, 5);
  return g;
}

bool is_connected(const WeightedGraph& g) {
  Index count = 0;
  connected_components(g, &count);
  return count == 1;
}

TEST(NegativeBinomial, MomentsAtMeanTwo) {
  Rng rng(2024);
  const int draws = 100000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < draws; ++i) {
    const double y = negative_binomial(2.0, 1.0, rng);
    sum += y;
    sq += y * y;
  }
  const double mean = sum / draws;
  const double var = (sq - draws * mean * mean) / (draws - 1);
  EXPECT_NEAR(mean, 2.0, 0.03 * 2.0);
  EXPECT_NEAR(var, 6.0, 0.03 * 6.0);
}

TEST(NegativeBinomial, SizeParameterControlsOverdispersion) {
  Rng rng(7);
  const int draws = 100000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < draws; ++i) {
    const double y = negative_binomial(3.0, 4.0, rng);
    sum += y;
    sq += y * y;
  }
  const double mean = sum / draws;
  const double var = (sq - draws * mean * mean) / (draws - 1);
  EXPECT_NEAR(mean, 3.0, 0.03 * 3.0);
  EXPECT_NEAR(var, 3.0 + 9.0 / 4.0, 0.03 * 5.25);
}

TEST(NegativeBinomial, ZeroMeanAndBadArguments) {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(negative_binomial(0.0, 1.0, rng), 0.0);
  EXPECT_THROW(negative_binomial(-1.0, 1.0, rng), Error);
  EXPECT_THROW(negative_binomial(1.0, 0.0, rng), Error);
}

class PriorDraws : public ::testing::Test {
 protected:
  void SetUp() override {
    std::mt19937_64 rng(11);
    const MatrixXd B = nt::random_matrix(6, 5, rng);
    gram = B * B.transpose();  // rank 5: one null direction
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(gram);
    null_direction = eig.eigenvectors().col(0);
    pseudo_inverse = MatrixXd::Zero(6, 6);
    for (Index i = 1; i < 6; ++i)
      pseudo_inverse += eig.eigenvectors().col(i) * eig.eigenvectors().col(i).transpose() /
                        eig.eigenvalues()[i];
  }

  MatrixXd sample_covariance(double lambda, int draws, Rng& rng) const {
    MatrixXd cov = MatrixXd::Zero(6, 6);
    for (int d = 0; d < draws; ++d) {
      const VectorXd t = sample_prior_theta(gram, lambda, rng);
      cov += t * t.transpose();
    }
    return cov / draws;
  }

  MatrixXd gram, pseudo_inverse;
  VectorXd null_direction;
};

TEST_F(PriorDraws, CovarianceMatchesScaledPseudoInverse) {
  Rng rng(4);
  const double lambda = 2.5;
  const MatrixXd cov = sample_covariance(lambda, 10000, rng);
  const MatrixXd expected = pseudo_inverse / lambda;
  for (Index i = 0; i < 6; ++i)
    for (Index j = 0; j < 6; ++j) {
      const double scale = std::sqrt(expected(i, i) * expected(j, j));
      EXPECT_NEAR(cov(i, j), expected(i, j), 0.05 * scale) << i << "," << j;
    }
}

TEST_F(PriorDraws, NullDirectionComponentIsZero) {
  Rng rng(4);
  for (int d = 0; d < 200; ++d) {
    const VectorXd t = sample_prior_theta(gram, 1.0, rng);
    EXPECT_LE(std::abs(null_direction.dot(t)), 1e-12 * std::max(1.0, t.norm()));
  }
}

TEST_F(PriorDraws, ScaleShrinksWithLambda) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(gram);
  const VectorXd top = eig.eigenvectors().col(5);
  const double xi = eig.eigenvalues()[5];
  for (double lambda : {1.0, 100.0, 1e6}) {
    Rng rng(5);
    double sq = 0.0;
    const int draws = 20000;
    for (int d = 0; d < draws; ++d) {
      const double c = top.dot(sample_prior_theta(gram, lambda, rng));
      sq += c * c;
    }
    EXPECT_NEAR(sq / draws * lambda * xi, 1.0, 0.05) << "lambda " << lambda;
  }
}

TEST_F(PriorDraws, DesignOverloadIsSeeded) {
  const auto g = nt::weighted(nt::grid_graph(4, 5));
  const auto ops = build_laplacian(g);
  const auto basis = eigenbasis(ops, 5);
  const std::vector<Index> ranks{5};
  const auto design = build_design(MatrixXd(20, 0), basis, ranks);
  const VectorXd a = sample_prior_theta(design.matrix(), ops.laplacian, 0.5, 99);
  const VectorXd b = sample_prior_theta(design.matrix(), ops.laplacian, 0.5, 99);
  EXPECT_EQ(a, b);
  EXPECT_NEAR(a[0], 0.0, 1e-12);  // constant eigenvector is unpenalized
  EXPECT_THROW(sample_prior_theta(gram, 0.0, *std::make_unique<Rng>(1)), Error);
}

TEST(StreetGrid, ShapeLabelsAndDeterminism) {
  const auto a = street_grid(6, 7, 3);
  const auto b = street_grid(6, 7, 3);
  EXPECT_EQ(a.num_vertices(), 42);
  EXPECT_EQ(a.label(0), "r0c0");
  EXPECT_EQ(a.label(41), "r5c6");
  EXPECT_LE(a.num_edges(), 6 * 6 + 5 * 7);
  ASSERT_EQ(a.num_edges(), b.num_edges());
  for (std::size_t e = 0; e < a.edges().size(); ++e) {
    EXPECT_EQ(a.edges()[e].distance, b.edges()[e].distance);
    EXPECT_GT(a.edges()[e].distance, 0.0);
  }
  EXPECT_EQ(street_grid(6, 7, 3, 0.0, 0.0).num_edges(), 6 * 6 + 5 * 7);
  EXPECT_THROW(street_grid(0, 3, 1), Error);
}

TEST(GenerateScenario, StructureMatchesConfig) {
  ScenarioConfig cfg;
  const auto s = generate_scenario(base_graph(), cfg, 17);
  const Index n = cfg.subgraph_size;
  ASSERT_EQ(s.num_vertices(), n);
  EXPECT_TRUE(is_connected(s.graph));
  EXPECT_EQ(s.covariates.rows(), n);
  EXPECT_EQ(s.covariates.cols(), cfg.num_covariates);
  EXPECT_EQ(s.theta.size(), (cfg.num_covariates + 1) * cfg.tau);
  EXPECT_NEAR(s.graph.weights().maxCoeff(), 1.0, 0.0);
  ASSERT_EQ(static_cast<Index>(s.hot_zones.size()), cfg.num_zones);

  std::set<Index> all_hot;
  for (const auto& zone : s.hot_zones) {
    EXPECT_EQ(static_cast<Index>(zone.size()), cfg.zone_size);
    for (Index v : zone) {
      EXPECT_GE(v, 0);
      EXPECT_LT(v, n);
      all_hot.insert(v);
    }
    EXPECT_TRUE(is_connected(induced_subgraph(s.graph, zone).graph));
  }
  EXPECT_EQ(static_cast<Index>(all_hot.size()), cfg.num_zones * cfg.zone_size);
  for (Index v = 0; v < n; ++v) {
    EXPECT_EQ(s.background[static_cast<std::size_t>(v)], all_hot.count(v) ? 0 : 1);
    EXPECT_GE(s.counts[v], 0.0);
    EXPECT_EQ(s.counts[v], std::floor(s.counts[v]));
  }
}

TEST(GenerateScenario, MeansFollowTheTwoStates) {
  ScenarioConfig cfg;
  const auto s = generate_scenario(base_graph(), cfg, 23);
  const auto ops = build_laplacian(s.graph);
  const auto basis = eigenbasis(ops, cfg.tau);
  const std::vector<Index> ranks(static_cast<std::size_t>(cfg.num_covariates + 1), cfg.tau);
  const VectorXd eta = build_design(s.covariates, basis, ranks).matrix() * s.theta;
  for (Index v = 0; v < s.num_vertices(); ++v) {
    if (s.background[static_cast<std::size_t>(v)])
      EXPECT_EQ(s.mean[v], std::exp(-2.5));
    else
      EXPECT_NEAR(s.mean[v], std::exp(eta[v]), 1e-9 * s.mean[v]);
  }
}

TEST(GenerateScenario, InfiniteNegativeZetaSilencesBackground) {
  ScenarioConfig cfg;
  cfg.zeta = -std::numeric_limits<double>::infinity();
  const auto s = generate_scenario(base_graph(), cfg, 29);
  for (Index v = 0; v < s.num_vertices(); ++v) {
    if (s.background[static_cast<std::size_t>(v)]) {
      EXPECT_EQ(s.counts[v], 0.0);
    }
  }
}

TEST(GenerateScenario, FixedSeedIsReproducible) {
  ScenarioConfig cfg;
  const auto a = generate_scenario(base_graph(), cfg, 31);
  const auto b = generate_scenario(base_graph(), cfg, 31);
  const auto c = generate_scenario(base_graph(), cfg, 32);
  EXPECT_EQ(a.counts, b.counts);
  EXPECT_EQ(scenario_json(a).dump(), scenario_json(b).dump());
  EXPECT_NE(scenario_json(a).dump(), scenario_json(c).dump());
}

TEST(GenerateScenario, CrowdedZonesOverlapWithWarning) {
  ScenarioConfig cfg;
  cfg.subgraph_size = 30;
  cfg.zone_size = 12;
  cfg.tau = 5;
  std::vector<std::string> warnings;
  ScopedWarningSink sink([&](std::string_view m) { warnings.emplace_back(m); });
  const auto s = generate_scenario(base_graph(), cfg, 3);
  EXPECT_EQ(s.hot_zones.size(), 3u);
  bool warned = false;
  for (const auto& w : warnings) warned |= w.find("overlaps") != std::string::npos;
  EXPECT_TRUE(warned);
}

TEST(GenerateScenario, RejectsImpossibleRequests) {
  ScenarioConfig cfg;
  cfg.subgraph_size = 5000;
  EXPECT_THROW(generate_scenario(base_graph(), cfg, 1), Error);
  cfg.subgraph_size = 50;
  cfg.tau = 51;
  EXPECT_THROW(generate_scenario(base_graph(), cfg, 1), Error);
}

TEST(ScenarioFile, RoundTripPreservesEverything) {
  const auto s = generate_scenario(base_graph(), ScenarioConfig{}, 41);
  const auto path = std::filesystem::temp_directory_path() / "netreg_scenario_roundtrip.json";
  save_scenario(path, s);
  const auto t = load_scenario(path);
  std::filesystem::remove(path);
  EXPECT_EQ(scenario_json(s).dump(), scenario_json(t).dump());
  EXPECT_EQ(t.graph.weights(), s.graph.weights());
  EXPECT_EQ(t.theta, s.theta);
  EXPECT_EQ(t.covariates, s.covariates);
  EXPECT_THROW(load_scenario("/nonexistent/netreg.json"), Error);
}

TEST(RelativeError, ExactPredictionAndScaleFree) {
  const VectorXd y = (VectorXd(5) << 0, 3, 1, 7, 2).finished();
  EXPECT_EQ(relative_error(y, y), 0.0);
  const VectorXd mu = (VectorXd(5) << 0.5, 2, 2, 6, 2.5).finished();
  const double e = relative_error(y, mu);
  EXPECT_NEAR(e, (0.5 + 1 + 1 + 1 + 0.5) / 13.0, 1e-15);
  EXPECT_NEAR(relative_error(2.0 * y, 2.0 * mu), e, 1e-15);
  const std::vector<Index> some{1, 3};
  EXPECT_NEAR(relative_error(y, mu, some), 2.0 / 10.0, 1e-15);
  const std::vector<Index> empty_sum{0};
  EXPECT_TRUE(std::isnan(relative_error(y, mu, empty_sum)));
}

TEST(RunComparison, CovariateFreeMod2IsTheMeanCount) {
  ScenarioConfig cfg;
  cfg.num_covariates = 0;
  const auto s = generate_scenario(base_graph(), cfg, 43);
  ScopedWarningSink quiet({});
  const auto report = run_comparison(s, ComparisonOptions{}, 0);
  const auto& mod2 = report.model("Mod2");
  ASSERT_TRUE(mod2.ok) << mod2.error;
  for (Index v = 0; v < s.num_vertices(); ++v) EXPECT_NEAR(mod2.mean[v], s.counts.mean(), 1e-8);
}

TEST(RunComparison, ReportShapeAndModelOrdering) {
  const auto s = generate_scenario(base_graph(), ScenarioConfig{}, 47);
  ScopedWarningSink quiet({});
  const auto report = run_comparison(s, ComparisonOptions{}, 3);
  EXPECT_EQ(report.replicate, 3);
  ASSERT_EQ(report.models.size(), 4u);
  const std::vector<std::string> names{"Mod1", "Mod2", "Mod3", "Mod4"};
  for (std::size_t m = 0; m < 4; ++m) {
    const auto& model = report.models[m];
    EXPECT_EQ(model.model, names[m]);
    ASSERT_TRUE(model.ok) << model.error;
    ASSERT_EQ(model.strata.size(), 4u);
    EXPECT_EQ(model.strata[0].stratum, "HZ1");
    EXPECT_EQ(model.strata[3].stratum, "BG");
    for (const auto& st : model.strata) EXPECT_GE(st.relative_error, 0.0);
  }
  EXPECT_GE(report.intercept_rank, 1);
  EXPECT_EQ(report.background_posterior.size(), s.num_vertices());
  const double mod4 = report.model("Mod4").strata.back().relative_error;
  for (const auto& name : {"Mod1", "Mod2", "Mod3"})
    EXPECT_LT(mod4, report.model(name).strata.back().relative_error) << name;
}

TEST(HotzoneInitialization, TopQuartileIsMostlyPlantedHot) {
  ScopedWarningSink quiet({});
  ComparisonOptions opt;
  int good = 0;
  for (std::uint64_t seed = 50; seed < 55; ++seed) {
    const auto s = generate_scenario(base_graph(), ScenarioConfig{}, seed);
    const auto ops = build_laplacian(s.graph);
    const auto basis = eigenbasis(ops, opt.basis_rank);
    const auto prior = tau_prior(0.9, 0.9, 1.0, opt.basis_rank);
    const auto tuned = tune({s.counts, s.covariates, basis, ops.laplacian, prior}, opt.tune);
    const auto sf = fit_smoothed(s.counts, s.covariates, basis, ops.laplacian, tuned.ranks,
                                 tuned.lambda);
    HotzoneInputs in{s.counts, sf.design.matrix(), sf.design.matrix(), sf.gram, sf.gram,
                     tuned.lambda, tuned.lambda};
    const auto init = initialize_hotzone(in, sf.fit.fitted, 0.75);
    Index planted = 0;
    for (Index v : init.hot) planted += s.background[static_cast<std::size_t>(v)] == 0;
    if (static_cast<double>(planted) >= 0.6 * static_cast<double>(init.hot.size())) ++good;
  }
  EXPECT_EQ(good, 5);
}

TEST(RunStudy, ReplicatesAreIndependentOfThreadCount) {
  ScenarioConfig cfg;
  cfg.subgraph_size = 80;
  cfg.zone_size = 15;
  ComparisonOptions opt;
  opt.basis_rank = 12;
  opt.tune.v0_grid = {0.2, 0.6};
  ScopedWarningSink quiet({});
  const auto serial = run_study(base_graph(), cfg, opt, 3, 9, 1);
  const auto threaded = run_study(base_graph(), cfg, opt, 3, 9, 3);
  ASSERT_EQ(serial.size(), 3u);
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_EQ(serial[r].scenario.counts, threaded[r].scenario.counts);
    for (std::size_t m = 0; m < 4; ++m)
      EXPECT_EQ(serial[r].report.models[m].mean, threaded[r].report.models[m].mean);
  }
  EXPECT_NE(serial[0].scenario.seed, serial[1].scenario.seed);
}

}  // namespace
