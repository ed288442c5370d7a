#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numbers>
#include <random>

#include "rtool/lme.hpp"
#include "oracles.hpp"
#include "sim.hpp"

using namespace rtool;
using namespace rtool::lme;

namespace {

// Dense Z for the blocks of a model, built straight from the data's level keys.
Eigen::MatrixXd dense_z(const LmeData& d, const FittedModel& m, Eigen::VectorXd& lambda) {
  Eigen::Index q = 0;
  for (const auto& b : m.blocks) q += static_cast<Eigen::Index>(b.levels.size());
  Eigen::MatrixXd Z = Eigen::MatrixXd::Zero(d.n_obs(), q);
  lambda.resize(q);
  Eigen::Index off = 0;
  for (const auto& b : m.blocks) {
    const auto& keys = d.factors.at(b.factor);
    for (Eigen::Index i = 0; i < d.n_obs(); ++i) {
      auto l = std::lower_bound(b.levels.begin(), b.levels.end(), keys[static_cast<std::size_t>(i)]) - b.levels.begin();
      Z(i, off + l) = b.column == kIntercept ? 1.0 : d.predictors.values(i, d.predictors.index_of(b.column));
    }
    lambda.segment(off, static_cast<Eigen::Index>(b.levels.size())).setConstant(b.theta);
    off += static_cast<Eigen::Index>(b.levels.size());
  }
  return Z;
}

// Marginal Gaussian log-likelihood maximized over beta and sigma^2 at fixed theta, formed densely.
double dense_profiled_loglik(const LmeData& d, const FittedModel& m) {
  Eigen::VectorXd lambda;
  Eigen::MatrixXd Z = dense_z(d, m, lambda);
  const auto n = d.n_obs();
  Eigen::MatrixXd X(n, static_cast<Eigen::Index>(m.fixed_names.size()));
  X.col(0).setOnes();
  for (std::size_t j = 1; j < m.fixed_names.size(); ++j)
    X.col(static_cast<Eigen::Index>(j)) = d.predictors.values.col(d.predictors.index_of(m.fixed_names[j]));
  Eigen::MatrixXd ZL = Z * lambda.asDiagonal();
  Eigen::MatrixXd V = Eigen::MatrixXd::Identity(n, n) + ZL * ZL.transpose();
  Eigen::LLT<Eigen::MatrixXd> llt(V);
  Eigen::MatrixXd ViX = llt.solve(X);
  Eigen::VectorXd Viy = llt.solve(d.response);
  Eigen::VectorXd beta = (X.transpose() * ViX).ldlt().solve(X.transpose() * Viy);
  Eigen::VectorXd r = d.response - X * beta;
  const double sigma2 = r.dot(llt.solve(r)) / static_cast<double>(n);
  double logdet = 0;
  for (Eigen::Index i = 0; i < n; ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
  return -0.5 * (static_cast<double>(n) * std::log(2.0 * std::numbers::pi * sigma2) + logdet +
                 static_cast<double>(n));
}

ModelSpec intercept_model(std::vector<std::string> fixed = {}) {
  ModelSpec s;
  s.fixed = std::move(fixed);
  s.random.push_back({GroupingFactor::subject, true, {}});
  return s;
}

}  // namespace

TEST(Standardize, PopulationSdConvention) {
  PredictorMatrix m;
  m.names = {"a"};
  m.values = Eigen::MatrixXd(3, 1);
  m.values << 1, 2, 3;
  auto s = standardize(m);
  // sd of [1,2,3] with divisor n is sqrt(2/3)
  const double sd = std::sqrt(2.0 / 3.0);
  EXPECT_NEAR(s.values(0, 0), -1.0 / sd, 1e-12);
  EXPECT_NEAR(s.values(1, 0), 0.0, 1e-12);
  EXPECT_NEAR(s.values(2, 0), 1.0 / sd, 1e-12);
  EXPECT_DOUBLE_EQ(s.means(0), 2.0);
  EXPECT_NEAR(s.sds(0), sd, 1e-15);
}

TEST(Standardize, ColumnWithUnitPopulationSd) {
  // [1,3] has mean 2 and population sd 1, so standardizing gives [-1, 1]
  PredictorMatrix m;
  m.names = {"a"};
  m.values = Eigen::MatrixXd(2, 1);
  m.values << 1, 3;
  auto s = standardize(m);
  EXPECT_NEAR(s.values(0, 0), -1.0, 1e-15);
  EXPECT_NEAR(s.values(1, 0), 1.0, 1e-15);
  EXPECT_DOUBLE_EQ(s.sds(0), 1.0);
}

TEST(Standardize, IdempotentAndComposes) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd(5, 2);
  PredictorMatrix m;
  m.names = {"a", "b"};
  m.values = Eigen::MatrixXd(40, 2);
  for (Eigen::Index i = 0; i < 40; ++i) m.values.row(i) << nd(rng), 3 * nd(rng);
  auto once = standardize(m);
  auto twice = standardize(once);
  EXPECT_LT((once.values - twice.values).cwiseAbs().maxCoeff(), 1e-10);
  for (Eigen::Index j = 0; j < 2; ++j) {
    EXPECT_NEAR(once.values.col(j).mean(), 0.0, 1e-10);
    EXPECT_NEAR(std::sqrt(once.values.col(j).squaredNorm() / 40.0), 1.0, 1e-10);
    EXPECT_NEAR(twice.means(j), once.means(j), 1e-10);
    EXPECT_NEAR(twice.sds(j), once.sds(j), 1e-10);
  }
  auto applied = apply_standardization(twice, m);
  EXPECT_LT((applied.values - once.values).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Standardize, ConstantColumnNamed) {
  PredictorMatrix m;
  m.names = {"ok", "flat"};
  m.values = Eigen::MatrixXd(3, 2);
  m.values << 1, 5, 2, 5, 3, 5;
  try {
    standardize(m);
    FAIL() << "expected an error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("flat"), std::string::npos);
  }
}

TEST(Fit, NoRandomTermsIsOls) {
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    auto d = sim::regression(seed, 200, 3);
    ModelSpec s;
    s.fixed = d.predictors.names;
    auto m = fit(d, s);
    Eigen::MatrixXd X(d.n_obs(), 4);
    X.col(0).setOnes();
    X.rightCols(3) = d.predictors.values;
    auto beta = oracles::ols(X, d.response);
    for (std::size_t j = 0; j < beta.size(); ++j)
      EXPECT_NEAR(m.beta(static_cast<Eigen::Index>(j)), static_cast<double>(beta[j]),
                  1e-8 * std::fabs(static_cast<double>(beta[j])));
    long double rss = 0;
    for (Eigen::Index i = 0; i < d.n_obs(); ++i) {
      long double r = d.response(i);
      for (Eigen::Index j = 0; j < 4; ++j) r -= beta[static_cast<std::size_t>(j)] * X(i, j);
      rss += r * r;
    }
    const double n = static_cast<double>(d.n_obs());
    const double ll = -0.5 * n * (1.0 + std::log(2.0 * std::numbers::pi * static_cast<double>(rss) / n));
    EXPECT_NEAR(m.loglik_nats, ll, 1e-6);
    EXPECT_TRUE(m.converged);
  }
}

TEST(Fit, BalancedOneWayMatchesClosedForm) {
  auto d = sim::one_way(2024, 50, 20, 1.0, 1.0);
  auto m = fit(d, intercept_model());
  auto o = sim::balanced_ml(d, 50, 20);
  ASSERT_GT(o.sigma_a2, 0.0);
  EXPECT_NEAR(m.sigma2, o.sigma2, 1e-4);
  EXPECT_NEAR(m.sigma2 * m.blocks[0].theta * m.blocks[0].theta, o.sigma_a2, 1e-4);
  EXPECT_NEAR(m.beta(0), o.mean, 1e-6);
}

TEST(Fit, DuplicatedColumnIsRankDeficient) {
  auto d = sim::regression(5, 50, 2);
  d.predictors.names.push_back("copy");
  d.predictors.values.conservativeResize(Eigen::NoChange, 3);
  d.predictors.values.col(2) = d.predictors.values.col(0);
  ModelSpec s;
  s.fixed = {"x0", "x1", "copy"};
  try {
    fit(d, s);
    FAIL() << "expected rank deficiency";
  } catch (const RankDeficientError& e) {
    ASSERT_EQ(e.columns().size(), 1u);
    EXPECT_TRUE(e.columns()[0] == "copy" || e.columns()[0] == "x0");
  }
}

TEST(Fit, RandomSlopeMustBeFixed) {
  auto d = sim::grouped(1, 10, 8);
  ModelSpec s;
  s.fixed = {"x0"};
  s.random.push_back({GroupingFactor::subject, true, {"x1"}});
  EXPECT_THROW(fit(d, s), ValidationError);
}

TEST(Fit, EvaluationBudgetReportsNonConvergence) {
  auto d = sim::grouped(2, 12, 10);
  FitOptions o;
  o.max_evaluations = 5;
  auto m = fit(d, intercept_model({"x0"}), o);
  EXPECT_FALSE(m.converged);
  EXPECT_TRUE(std::isfinite(m.loglik_nats));
}

TEST(Fit, AcceptedStepsNeverIncreaseDeviance) {
  auto d = sim::grouped(4, 15, 12);
  ModelSpec s;
  s.fixed = {"x0", "x1"};
  s.random.push_back({GroupingFactor::subject, true, {"x0", "x1"}});
  s.random.push_back({GroupingFactor::word_type, true, {}});
  auto m = fit(d, s);
  ASSERT_GE(m.deviance_trace.size(), 2u);
  for (std::size_t i = 1; i < m.deviance_trace.size(); ++i)
    EXPECT_LE(m.deviance_trace[i], m.deviance_trace[i - 1]);
  EXPECT_NEAR(m.deviance_trace.back(), m.deviance, 1e-9);
  for (const auto& b : m.blocks) EXPECT_GE(b.theta, 0.0);
  EXPECT_GT(m.sigma2, 0.0);
}

TEST(Fit, ProfiledDevianceMatchesDenseMarginalLikelihood) {
  for (std::uint64_t seed : {7u, 8u}) {
    auto d = sim::grouped(seed, 6, 7);
    ModelSpec s;
    s.fixed = {"x0", "x1"};
    s.random.push_back({GroupingFactor::subject, true, {"x0"}});
    s.random.push_back({GroupingFactor::word_type, true, {}});
    auto m = fit(d, s);
    EXPECT_NEAR(m.loglik_nats, dense_profiled_loglik(d, m), 1e-8);
    // also away from the optimum
    for (auto& b : m.blocks) b.theta = 0.3 + 0.2 * static_cast<double>(&b - m.blocks.data());
    LmeProblem prob(d, s);
    auto sol = prob.solve(m.theta());
    EXPECT_NEAR(-0.5 * sol.deviance, dense_profiled_loglik(d, m), 1e-8);
  }
}

TEST(Fit, LoglikInvariantToColumnRescaling) {
  auto d = sim::grouped(21, 20, 10);
  ModelSpec s;
  s.fixed = {"x0", "x1"};
  s.random.push_back({GroupingFactor::subject, true, {"x0"}});
  auto base = fit(d, s);
  for (double c : {0.1, 7.0}) {
    auto scaled = d;
    scaled.predictors.values.col(0) *= c;
    auto m = fit(scaled, s);
    EXPECT_NEAR(m.loglik_nats, base.loglik_nats, 1e-6) << "scale " << c;
    EXPECT_NEAR(m.coefficient("x0") * c, base.coefficient("x0"), 1e-4);
  }
}

TEST(DeltaLL, IdentityInformativeAndNoise) {
  auto d = sim::grouped(31, 20, 15);
  auto base = fit(d, intercept_model({"x0"}));
  EXPECT_EQ(delta_ll(base, base), 0.0);
  auto informative = fit(d, intercept_model({"x0", "x1"}));
  EXPECT_GT(delta_ll(informative, base), 0.0);
  auto noisy = d;
  std::mt19937_64 rng(99);
  std::normal_distribution<double> nd;
  noisy.predictors.names.push_back("noise");
  noisy.predictors.values.conservativeResize(Eigen::NoChange, 3);
  for (Eigen::Index i = 0; i < d.n_obs(); ++i) noisy.predictors.values(i, 2) = nd(rng);
  auto b2 = fit(noisy, intercept_model({"x0"}));
  auto n2 = fit(noisy, intercept_model({"x0", "noise"}));
  EXPECT_GE(delta_ll(n2, b2), -1e-6);
}

TEST(DeltaLL, MismatchedObservationsRejected) {
  auto a = fit(sim::grouped(1, 10, 10), intercept_model({"x0"}));
  auto b = fit(sim::grouped(2, 10, 10), intercept_model({"x0"}));
  EXPECT_THROW(delta_ll(a, b), ValidationError);
}

TEST(Predict, ZeroVarianceConditionalEqualsMarginal) {
  auto d = sim::grouped(41, 10, 10);
  auto m = fit(d, intercept_model({"x0"}));
  for (auto& b : m.blocks) {
    b.theta = 0;
    std::fill(b.modes.begin(), b.modes.end(), 0.0);
  }
  auto c = predict(m, d, PredictionMode::conditional);
  auto mg = predict(m, d, PredictionMode::marginal);
  EXPECT_LT((c - mg).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Predict, ConditionalModeIsClosedFormShrinkage) {
  auto d = sim::one_way(55, 12, 6, 0.8, 1.0);
  auto m = fit(d, intercept_model());
  const double theta = m.blocks[0].theta;
  ASSERT_GT(theta, 0);
  std::map<std::int64_t, std::pair<double, int>> acc;
  for (Eigen::Index i = 0; i < d.n_obs(); ++i) {
    auto& a = acc[d.factors.at(GroupingFactor::subject)[static_cast<std::size_t>(i)]];
    a.first += d.response(i);
    a.second += 1;
  }
  const double grand = m.beta(0);
  for (const auto& [key, a] : acc) {
    const double mean = a.first / a.second;
    const double shrink = a.second * theta * theta / (1.0 + a.second * theta * theta);
    const double mode = m.blocks[0].mode_of(key);
    EXPECT_NEAR(mode, shrink * (mean - grand), 1e-10);
    // shrunken prediction lies strictly between the grand mean and the group mean
    const double pred = grand + mode;
    EXPECT_LT(std::fabs(pred - mean), std::fabs(grand - mean));
    EXPECT_LE(std::fabs(mode), std::fabs(mean - grand));
  }
}

TEST(Predict, UnseenLevelGetsZeroRandomEffect) {
  auto d = sim::one_way(56, 8, 5, 1.0, 1.0);
  auto m = fit(d, intercept_model());
  LmeData fresh = d;
  fresh.factors[GroupingFactor::subject].assign(static_cast<std::size_t>(d.n_obs()), 123456);
  auto c = predict(m, fresh, PredictionMode::conditional);
  EXPECT_LT((c.array() - m.beta(0)).abs().maxCoeff(), 1e-15);
}

TEST(Predict, MissingColumnIsAnError) {
  auto d = sim::grouped(57, 6, 6);
  auto m = fit(d, intercept_model({"x0"}));
  LmeData other = d;
  other.predictors.names = {"zz", "x1"};
  EXPECT_THROW(predict(m, other, PredictionMode::marginal), ValidationError);
}

TEST(ResidualStats, HandExamples) {
  auto a = residual_stats(Eigen::VectorXd{{1.0, -1.0}});
  EXPECT_DOUBLE_EQ(a.mse, 1.0);
  EXPECT_DOUBLE_EQ(a.sse_under, 1.0);
  EXPECT_DOUBLE_EQ(a.sse_over, 1.0);
  auto z = residual_stats(Eigen::VectorXd::Zero(4));
  EXPECT_EQ(z.mse, 0.0);
  EXPECT_EQ(z.sse_under, 0.0);
  EXPECT_EQ(z.sse_over, 0.0);
  auto b = residual_stats(Eigen::VectorXd{{2.0, -1.0, 0.0}});
  EXPECT_NEAR(b.mse, 5.0 / 3.0, 1e-15);
  EXPECT_DOUBLE_EQ(b.sse_under, 4.0);
  EXPECT_DOUBLE_EQ(b.sse_over, 1.0);
}

TEST(ResidualStats, UnderPlusOverEqualsTotal) {
  auto d = sim::one_way(77, 30, 4, 0.5, 1.0);
  auto m = fit(d, intercept_model());
  auto stats = residual_stats(m, d);
  EXPECT_EQ(stats.residuals.size(), d.n_obs());
  EXPECT_NEAR(stats.sse_under + stats.sse_over, stats.mse * static_cast<double>(d.n_obs()), 1e-9);
}

TEST(FittedModel, JsonRoundTrip) {
  auto d = sim::grouped(88, 8, 6);
  auto m = fit(d, intercept_model({"x0"}));
  auto back = FittedModel::from_json(m.to_json());
  EXPECT_EQ(back.to_json().dump(), m.to_json().dump());
  auto p1 = predict(m, d, PredictionMode::conditional);
  auto p2 = predict(back, d, PredictionMode::conditional);
  EXPECT_LT((p1 - p2).cwiseAbs().maxCoeff(), 1e-12);
}
