#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "helpers.hpp"
#include "oracles.hpp"

using namespace mvperm;
using namespace testing_helpers;

namespace {

const auto kUn = CovStructure::unstructured();

/// Marginal statistic computed from scratch: constrained fit by Nelder-Mead,
/// then the Schur complement of the explicit information.
double oracle_t3(const Dataset& d, double m, Index k) {
  const Index p = d.p();
  const Index q = p - 1 + p + p * (p - 1) / 2;
  auto unpack_mu = [&](const Vector& x) {
    Vector mu(p);
    for (Index j = 0, a = 0; j < p; ++j) mu(j) = j == k ? m : x(a++);
    return mu;
  };
  auto f = [&](const Vector& x) {
    const Vector free = x.tail(q - (p - 1));
    if ((free.head(p).array() < -12.0).any() || (free.tail(free.size() - p).array().abs() > 8.0).any())
      return 1e100;
    return -oracle::loglik(d, unpack_mu(x), oracle::sigma_from_free(free, p));
  };
  Vector best;
  double fb = 1e300;
  for (double t0 : {-2.5, -0.8})
    for (double k0 : {-0.4, 0.4}) {
      Vector x = Vector::Zero(q);
      for (Index j = 0, a = 0; j < p; ++j)
        if (j != k) {
          double s = 0.0;
          for (const auto& st : d.studies()) s += st.y()(j) / static_cast<double>(d.size());
          x(a++) = s;
        }
      x.segment(p - 1, p).setConstant(t0);
      x.tail(p * (p - 1) / 2).setConstant(k0);
      for (int r = 0; r < 6; ++r) x = oracle::nelder_mead(f, x, r == 0 ? 0.5 : 0.05);
      if (f(x) < fb) {
        fb = f(x);
        best = x;
      }
    }
  const Vector mu = unpack_mu(best);
  const Matrix sigma = oracle::sigma_from_free(best.tail(q - (p - 1)), p);
  const auto [u, info] = oracle::score_information(d, mu, sigma);
  std::vector<Index> rest;
  for (Index j = 0; j < p; ++j)
    if (j != k) rest.push_back(j);
  Matrix icc(p - 1, p - 1);
  Vector ikc(p - 1);
  for (Index a = 0; a < p - 1; ++a) {
    ikc(a) = info(k, rest[static_cast<std::size_t>(a)]);
    for (Index b = 0; b < p - 1; ++b) icc(a, b) = info(rest[static_cast<std::size_t>(a)], rest[static_cast<std::size_t>(b)]);
  }
  const double j = info(k, k) - ikc.dot(icc.fullPivLu().solve(ikc));
  return u(k) * u(k) / j;
}

}  // namespace

TEST(SignAssignments, ExhaustiveRowsFollowBits) {
  const auto s = generate_signs(PermutationPlan::exhaustive(), 4);
  ASSERT_EQ(s.size(), 16u);
  EXPECT_TRUE(s.is_identity(0));
  const auto r = s.row(0b1010);
  EXPECT_EQ(r[0], 1);
  EXPECT_EQ(r[1], -1);
  EXPECT_EQ(r[2], 1);
  EXPECT_EQ(r[3], -1);
}

TEST(SignAssignments, RandomIsSeededAndBalanced) {
  const auto a = generate_signs(PermutationPlan::random(1000, 7), 70);
  const auto b = generate_signs(PermutationPlan::random(1000, 7), 70);
  const auto c = generate_signs(PermutationPlan::random(1000, 8), 70);
  std::size_t neg = 0;
  bool differs = false;
  for (std::size_t r = 0; r < a.size(); ++r) {
    for (std::size_t i = 0; i < 70; ++i) {
      EXPECT_EQ(a.row(r)[i], b.row(r)[i]);
      differs = differs || a.row(r)[i] != c.row(r)[i];
      neg += a.row(r)[i] < 0 ? 1 : 0;
    }
  }
  EXPECT_TRUE(differs);
  EXPECT_NEAR(static_cast<double>(neg) / 70000.0, 0.5, 0.01);
}

TEST(SignAssignments, PlanValidation) {
  EXPECT_THROW(PermutationPlan::random(99, 1).size(5), std::invalid_argument);
  EXPECT_EQ(PermutationPlan::random(100, 1).size(5), 100u);
  EXPECT_THROW(PermutationPlan::exhaustive(1024).size(11), std::invalid_argument);
  EXPECT_EQ(PermutationPlan::exhaustive().size(20), std::size_t{1} << 20);
}

TEST(NullDistribution, ExhaustiveCountsAndThreshold) {
  const NullDistribution d({1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20},
                           PermutationPlan::Mode::Exhaustive, 0, true);
  EXPECT_EQ(d.reference_size(), 20u);
  EXPECT_EQ(d.count_at_least(19.0), 2u);
  EXPECT_DOUBLE_EQ(d.p_value(19.0), 0.1);
  // alpha = 0.05 of 20 is exactly 1: count must exceed it.
  EXPECT_EQ(d.acceptance_count(0.05), 2u);
  EXPECT_TRUE(d.accepts(19.0, 0.05));
  EXPECT_FALSE(d.accepts(19.5, 0.05));
  EXPECT_DOUBLE_EQ(d.threshold(0.05, 0.0), 19.0);
}

TEST(NullDistribution, RandomAddsObserved) {
  std::vector<double> s(199);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = static_cast<double>(i);
  const NullDistribution d(s, PermutationPlan::Mode::Random, 3, false);
  EXPECT_EQ(d.reference_size(), 200u);
  EXPECT_EQ(d.count_at_least(1000.0), 1u);
  EXPECT_DOUBLE_EQ(d.p_value(1000.0), 1.0 / 200.0);
  EXPECT_DOUBLE_EQ(d.p_value(189.5), 10.0 / 200.0);
}

TEST(NullDistribution, ThresholdAgreesWithAcceptance) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> z;
  for (auto mode : {PermutationPlan::Mode::Exhaustive, PermutationPlan::Mode::Random}) {
    for (int rep = 0; rep < 200; ++rep) {
      std::vector<double> s(100 + rep);
      for (auto& x : s) x = std::round(4.0 * z(rng) * z(rng)) / 4.0;  // plenty of ties
      const NullDistribution d(s, mode, 0, false);
      for (double alpha : {0.01, 0.05, 0.1, 0.2}) {
        const double obs = std::round(4.0 * z(rng) * z(rng)) / 4.0;
        EXPECT_EQ(d.accepts(obs, alpha), obs <= d.threshold(alpha, obs));
        EXPECT_EQ(d.accepts(obs, alpha), d.p_value(obs) > alpha * (1.0 + 1e-12));
      }
    }
  }
}

TEST(JointTest, T2MatchesBruteForceEnumeration) {
  const auto d = toy5();
  const Vector mu = vec({0.7, -0.9});
  const auto r = joint_permutation_test(d, mu, PermutationPlan::exhaustive(), JointStatistic::T2, kUn);
  const auto e = oracle::enumerate(5, [&](const std::vector<int>& v) {
    const auto f = oracle::flipped(d, mu, v);
    return oracle::score_statistic(f, mu, oracle::moment_sigma(f, mu));
  });
  ASSERT_EQ(r.distribution.statistics().size(), 32u);
  for (std::size_t b = 0; b < 32; ++b) {
    EXPECT_NEAR(r.distribution.statistics()[b], e.stats[b], 1e-9 * std::max(1.0, e.stats[b]));
  }
  ASSERT_GT(e.min_gap, 1e-6);
  EXPECT_NEAR(r.statistic_obs, e.observed, 1e-9);
  EXPECT_EQ(r.count_at_least, e.count);
  EXPECT_DOUBLE_EQ(r.p_value, static_cast<double>(e.count) / 32.0);
  EXPECT_EQ(r.refits, 0u);
}

TEST(JointTest, T1MatchesBruteForceEnumeration) {
  const auto d = toy5();
  const Vector mu = vec({0.8, -0.7});
  const auto r = joint_permutation_test(d, mu, PermutationPlan::exhaustive(), JointStatistic::T1, kUn);
  const auto e = oracle::enumerate(5, [&](const std::vector<int>& v) {
    const auto f = oracle::flipped(d, mu, v);
    return oracle::score_statistic(f, mu, oracle::cml_sigma(f, mu));
  }, 1e-4);
  for (std::size_t b = 0; b < 32; ++b) {
    EXPECT_NEAR(r.distribution.statistics()[b], e.stats[b], 1e-4 * std::max(1.0, e.stats[b])) << b;
  }
  ASSERT_GT(e.min_gap, 1e-3);
  EXPECT_EQ(r.count_at_least, e.count);
  EXPECT_EQ(r.refits, 32u);
}

TEST(JointTest, ComplementaryAssignmentsTie) {
  const auto d = toy5();
  const Vector mu = vec({0.8, -0.7});
  for (auto stat : {JointStatistic::T1, JointStatistic::T2}) {
    const auto r = joint_permutation_test(d, mu, PermutationPlan::exhaustive(), stat, kUn);
    const auto& s = r.distribution.statistics();
    for (std::size_t b = 0; b < 32; ++b) EXPECT_DOUBLE_EQ(s[b], s[31 - b]);
    EXPECT_GE(r.count_at_least, 2u);
  }
}

TEST(JointTest, T1VanishesAtMle) {
  const auto d = toy5();
  const auto ml = fit_ml(d, kUn);
  const auto t = statistic_T1(d, ml.mu_hat, kUn);
  EXPECT_LT(t.value, 1e-8);
  const auto r = joint_permutation_test(d, ml.mu_hat, PermutationPlan::exhaustive(), JointStatistic::T1, kUn);
  EXPECT_DOUBLE_EQ(r.p_value, 1.0);
}

TEST(JointTest, UnivariateT1IsSquaredWeightedScore) {
  const std::vector<double> y{0.2, 0.9, -0.4, 0.5, 1.4, 0.1};
  const std::vector<double> v{0.05, 0.08, 0.04, 0.1, 0.06, 0.09};
  const auto d = univariate(y, v);
  for (double m : {-0.3, 0.1, 0.9}) {
    const double t2 = oracle::grid_argmax([&](double t) { return oracle::univariate_objective(y, v, t, false, &m); }, 4.0);
    double u = 0.0, info = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      u += (y[i] - m) / (v[i] + t2);
      info += 1.0 / (v[i] + t2);
    }
    EXPECT_NEAR(statistic_T1(d, vec({m}), kUn).value, u * u / info, 1e-5 * std::max(1.0, u * u / info));
  }
}

TEST(JointTest, T2ArithmeticWithThreeStudies) {
  // Identity within-study covariances; the second outcome's raw moment is
  // negative, so its row and column are zeroed.
  const auto d = bivariate({{1.0, 0.5}, {-0.5, 1.0}, {1.5, -1.0}}, {{1.0, 1.0}});
  const Vector mu = vec({0, 0});
  // Raw moment: mean of r r' minus I.
  Matrix m = Matrix::Zero(2, 2);
  for (const auto& st : d.studies()) m += st.y() * st.y().transpose() / 3.0;
  m -= Matrix::Identity(2, 2);
  ASSERT_NEAR(m(1, 1), 2.25 / 3.0 - 1.0, 1e-15);
  Matrix sig = Matrix::Zero(2, 2);
  sig(0, 0) = 3.5 / 3.0 - 1.0;
  const Matrix w = (sig + Matrix::Identity(2, 2)).inverse();
  Vector rsum = Vector::Zero(2);
  for (const auto& st : d.studies()) rsum += st.y();
  const Vector u = w * rsum;
  const double expected = u.dot((3.0 * w).inverse() * u);
  EXPECT_NEAR(statistic_T2(d, mu), expected, 1e-12);
}

TEST(JointTest, T2WithZeroHeterogeneityUsesWithinCovariance) {
  const auto d = bivariate({{0.1, 0.05}, {-0.05, 0.1}, {0.08, -0.02}, {0.02, 0.03}}, {{0.5, 0.4}}, 0.25);
  const Vector mu = vec({0, 0});
  ASSERT_TRUE(moment_sigma(d, mu).sigma.isZero(0.0));
  Vector u = Vector::Zero(2);
  Matrix info = Matrix::Zero(2, 2);
  for (const auto& st : d.studies()) {
    const Matrix w = st.S().inverse();
    u += w * st.y();
    info += w;
  }
  EXPECT_NEAR(statistic_T2(d, mu), u.dot(info.inverse() * u), 1e-12);
}

TEST(JointTest, T2RefusesIncompleteData) {
  std::mt19937_64 rng(3);
  Dataset d = random_dataset(rng, 8, 2, true);
  while (d.complete()) d = random_dataset(rng, 8, 2, true);
  EXPECT_THROW(joint_permutation_test(d, vec({0, 0}), PermutationPlan::random(200, 1), JointStatistic::T2, kUn),
               IncompleteDataError);
  EXPECT_NO_THROW(joint_permutation_test(d, vec({0, 0}), PermutationPlan::random(200, 1), JointStatistic::T1, kUn));
}

TEST(JointTest, OrbitInvariance) {
  const auto d = toy5();
  const Vector mu = vec({0.9, -0.6});
  const std::vector<int> v{1, -1, -1, 1, -1};
  for (auto stat : {JointStatistic::T1, JointStatistic::T2}) {
    const auto a = joint_permutation_test(d, mu, PermutationPlan::exhaustive(), stat, kUn);
    const auto b = joint_permutation_test(oracle::flipped(d, mu, v), mu, PermutationPlan::exhaustive(), stat, kUn);
    const auto sa = a.distribution.sorted(), sb = b.distribution.sorted();
    for (std::size_t i = 0; i < sa.size(); ++i) EXPECT_NEAR(sa[i], sb[i], 1e-6 * std::max(1.0, sa[i]));
  }
}

TEST(JointTest, ThreadCountDoesNotChangeResult) {
  const auto& sc = find_scenario("dta-accept");
  const auto d = generate(sc, 11);
  const Vector mu = sc.mu;
  TestOptions one, four;
  four.threads = 4;
  for (auto stat : {JointStatistic::T1, JointStatistic::T2}) {
    const auto a = joint_permutation_test(d, mu, PermutationPlan::random(300, 5), stat, kUn, one);
    const auto b = joint_permutation_test(d, mu, PermutationPlan::random(300, 5), stat, kUn, four);
    EXPECT_EQ(a.distribution.statistics(), b.distribution.statistics());
    EXPECT_EQ(a.p_value, b.p_value);
  }
}

TEST(JointTest, RandomPlanApproximatesExhaustive) {
  std::mt19937_64 rng(21);
  const auto d = random_dataset(rng, 11, 2, false);
  const Vector mu = vec({0.3, -0.2});
  const auto ex = joint_permutation_test(d, mu, PermutationPlan::exhaustive(), JointStatistic::T2, kUn);
  const auto rd = joint_permutation_test(d, mu, PermutationPlan::random(4000, 9), JointStatistic::T2, kUn);
  const double p = ex.p_value;
  EXPECT_LT(std::abs(rd.p_value - p), 4.0 * std::sqrt(p * (1 - p) / 4000.0) + 1.0 / 4000.0);
  EXPECT_GE(rd.p_value, 1.0 / 4001.0);
}

TEST(JointTest, DetectsShiftedNull) {
  const auto d = toy5();
  const auto r = joint_permutation_test(d, vec({-1.0, 1.0}), PermutationPlan::exhaustive(), JointStatistic::T1, kUn);
  EXPECT_DOUBLE_EQ(r.p_value, 2.0 / 32.0);
}

TEST(MarginalTest, T3MatchesOracle) {
  const auto d = toy5();
  for (double m : {0.4, 0.9, 1.3}) {
    const auto t = statistic_T3(d, m, 0, kUn);
    const double o = oracle_t3(d, m, 0);
    EXPECT_NEAR(t.value, o, 1e-4 * std::max(1.0, o)) << m;
    EXPECT_NEAR(t.signed_value * t.signed_value, t.value, 1e-12 * std::max(1.0, t.value));
  }
}

TEST(MarginalTest, T3VanishesAtMleComponent) {
  const auto d = toy5();
  const auto ml = fit_ml(d, kUn);
  EXPECT_LT(statistic_T3(d, ml.mu_hat(1), 1, kUn).value, 1e-8);
}

TEST(MarginalTest, UnivariateMarginalEqualsJoint) {
  const auto d = univariate({0.2, 0.9, -0.4, 0.5, 1.4, 0.1, 0.7}, {0.05, 0.08, 0.04, 0.1, 0.06, 0.09, 0.05});
  for (double m : {0.0, 0.4, 0.9}) {
    const auto j = joint_permutation_test(d, vec({m}), PermutationPlan::exhaustive(), JointStatistic::T1, kUn);
    const auto k = marginal_permutation_test(d, m, 0, PermutationPlan::exhaustive(), kUn);
    EXPECT_NEAR(j.statistic_obs, k.statistic_obs, 1e-10 * std::max(1.0, j.statistic_obs));
    EXPECT_EQ(j.count_at_least, k.count_at_least);
    EXPECT_DOUBLE_EQ(j.p_value, k.p_value);
    EXPECT_NEAR(statistic_T3(d, m, 0, kUn).value, j.statistic_obs, 1e-8 * std::max(1.0, j.statistic_obs));
  }
}

TEST(MarginalTest, CentreUsesConstrainedNuisanceMean) {
  const auto d = toy5();
  const auto r = marginal_permutation_test(d, 0.9, 0, PermutationPlan::exhaustive(), kUn);
  const auto t = statistic_T3(d, 0.9, 0, kUn);
  EXPECT_DOUBLE_EQ(r.center(0), 0.9);
  EXPECT_NEAR(r.center(1), t.mu_c_tilde(0), 1e-5);
  EXPECT_NEAR(r.statistic_obs, t.value, 1e-6 * std::max(1.0, t.value));
  EXPECT_EQ(r.signed_statistics.size(), 32u);
  EXPECT_GT(r.signed_p_value, 0.0);
  EXPECT_LE(r.signed_p_value, 1.0);
}

TEST(MarginalTest, ThreadCountDoesNotChangeResult) {
  const auto d = generate(find_scenario("biv-01"), 4);
  TestOptions four;
  four.threads = 4;
  const auto a = marginal_permutation_test(d, 0.1, 1, PermutationPlan::random(200, 2), kUn);
  const auto b = marginal_permutation_test(d, 0.1, 1, PermutationPlan::random(200, 2), kUn, four);
  EXPECT_EQ(a.distribution.statistics(), b.distribution.statistics());
  EXPECT_EQ(a.signed_statistics, b.signed_statistics);
}

TEST(MarginalTest, RejectsBadComponent) {
  EXPECT_THROW(marginal_permutation_test(toy5(), 0.0, 2, PermutationPlan::exhaustive(), kUn), std::out_of_range);
}

TEST(SignAssignments, ThreeStudiesGiveEightDistinctRows) {
  const auto s = generate_signs(PermutationPlan::exhaustive(), 3);
  std::set<std::vector<std::int8_t>> rows;
  for (std::size_t b = 0; b < s.size(); ++b) rows.insert({s.row(b).begin(), s.row(b).end()});
  EXPECT_EQ(rows.size(), 8u);
}

TEST(SignAssignments, RandomEntriesCentred) {
  for (std::size_t n : {5u, 8u, 40u}) {
    const auto s = generate_signs(PermutationPlan::random(2400, 20240101), n);
    double sum = 0.0;
    for (std::size_t b = 0; b < s.size(); ++b)
      for (auto v : s.row(b)) sum += v;
    EXPECT_LT(std::abs(sum / (2400.0 * static_cast<double>(n))), 0.06);
  }
}

TEST(JointTest, IdentityAssignmentReproducesObserved) {
  const auto d = toy5();
  const Vector mu = vec({0.4, -0.9});
  for (auto stat : {JointStatistic::T1, JointStatistic::T2}) {
    const auto r = joint_permutation_test(d, mu, PermutationPlan::exhaustive(), stat, kUn);
    EXPECT_EQ(r.distribution.statistics()[0], r.statistic_obs);
    EXPECT_TRUE(r.distribution.includes_identity());
  }
  const auto m = marginal_permutation_test(d, 0.4, 0, PermutationPlan::exhaustive(), kUn);
  EXPECT_EQ(m.distribution.statistics()[0], m.statistic_obs);
  EXPECT_EQ(m.signed_statistics[0], m.signed_obs);
}

TEST(JointTest, StatisticsAreNonnegative) {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> z;
  for (int rep = 0; rep < 20; ++rep) {
    const auto d = random_dataset(rng, 7, 2, false);
    const Vector mu = vec({z(rng), z(rng)});
    EXPECT_GE(statistic_T1(d, mu, kUn).value, 0.0);
    EXPECT_GE(statistic_T2(d, mu), 0.0);
    EXPECT_GE(statistic_T3(d, mu(0), 0, kUn).value, 0.0);
  }
}

TEST(MarginalTest, DiagonalInformationReducesToFirstComponent) {
  // Uncorrelated within and between studies: W_i diagonal.
  const auto d = bivariate({{0.4, -0.3}, {1.1, 0.2}, {0.7, 0.05}, {0.2, -0.6}, {0.9, 0.4}},
                           {{0.3, 0.2}, {0.25, 0.4}, {0.2, 0.2}});
  const auto cs0 = CovStructure::compound_symmetry(0.0);
  const auto a = statistic_T3(d, 0.3, 0, cs0);
  const auto b = statistic_T3(d, 0.9, 0, cs0);
  double u = 0.0, info = 0.0;
  for (const auto& st : d.studies()) {
    const double w = 1.0 / (st.S()(0, 0) + a.eta_tilde.tau(0) * a.eta_tilde.tau(0));
    u += w * (st.y()(0) - 0.3);
    info += w;
  }
  EXPECT_NEAR(a.value, u * u / info, 1e-10 * std::max(1.0, a.value));
  EXPECT_NEAR(a.J, info, 1e-10 * info);
  // The nuisance mean only moves through tau_2, which the constraint on mu_1 leaves alone.
  EXPECT_NEAR(a.mu_c_tilde(0), b.mu_c_tilde(0), 1e-6);
}
