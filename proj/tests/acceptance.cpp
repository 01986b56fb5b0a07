// Acceptance run: one PASS/FAIL line per criterion. Exit status is nonzero if
// any criterion fails.
#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <thread>

#include "helpers.hpp"
#include "oracles.hpp"

using namespace mvperm;
using namespace testing_helpers;

namespace {

constexpr std::uint64_t kSeed = 20240101;
const auto kUn = CovStructure::unstructured();

unsigned worker_count() { return std::max(1u, std::thread::hardware_concurrency()); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string coverage_text(const CoverageReport& r) {
  return fmt("%s %zu/%zu = %.4f (se %.4f, failed %zu, refused %zu)", to_string(r.method).c_str(), r.covered,
             r.evaluated, r.coverage, r.se, r.failures, r.refused);
}

CoverageOptions coverage_options() {
  CoverageOptions o;
  o.threads = worker_count();
  return o;
}

// 1. Exhaustive T1/T2 counts equal a brute-force enumeration on N = 5.
Outcome exhaustive_oracle() {
  const auto d = toy5();
  const Vector mu = vec({0.8, -0.7});
  Outcome out{true, ""};
  for (auto stat : {JointStatistic::T1, JointStatistic::T2}) {
    const auto r = joint_permutation_test(d, mu, PermutationPlan::exhaustive(), stat, kUn);
    const auto e = oracle::enumerate(5, [&](const std::vector<int>& v) {
      const auto f = oracle::flipped(d, mu, v);
      const Matrix s = stat == JointStatistic::T1 ? oracle::cml_sigma(f, mu) : oracle::moment_sigma(f, mu);
      return oracle::score_statistic(f, mu, s);
    }, 1e-4);
    const bool same = r.count_at_least == e.count && e.min_gap > 1e-3 &&
                      r.p_value == static_cast<double>(e.count) / 32.0;
    out.pass = out.pass && same;
    out.detail += fmt("%s count %zu vs oracle %zu (p %.5f); ", to_string(stat).c_str(), r.count_at_least, e.count,
                      r.p_value);
  }
  return out;
}

CoverageReport t1_exhaustive, t2_exhaustive;

// 2. Joint coverage with exhaustive enumeration.
Outcome joint_exactness() {
  const auto& sc = find_scenario("dta-accept");
  const auto plan = PermutationPlan::exhaustive();
  t1_exhaustive = coverage_experiment(sc, Method::PermT1, 500, plan, kSeed, coverage_options());
  t2_exhaustive = coverage_experiment(sc, Method::PermT2, 500, plan, kSeed, coverage_options());
  auto ok = [](const CoverageReport& r) { return r.coverage >= 0.92 && r.coverage <= 0.98; };
  return {ok(t1_exhaustive) && ok(t2_exhaustive), coverage_text(t1_exhaustive) + "; " + coverage_text(t2_exhaustive)};
}

// 3. Marginal coverage with B = 500 draws.
Outcome marginal_validity() {
  const auto& sc = find_scenario("dta-accept");
  const auto r = coverage_experiment(sc, Method::PermT3, 500, PermutationPlan::random(500, kSeed), kSeed,
                                     coverage_options());
  return {r.coverage >= 0.92 && r.coverage <= 0.98, coverage_text(r)};
}

// 4. ML Wald undercovers where the permutation test does not.
Outcome comparator_undercoverage() {
  const auto& sc = find_scenario("dta-accept");
  const auto w = coverage_experiment(sc, Method::MlWald, 500, PermutationPlan::exhaustive(), kSeed,
                                     coverage_options());
  return {w.coverage < t1_exhaustive.coverage && w.coverage < 0.93,
          coverage_text(w) + " vs " + coverage_text(t1_exhaustive)};
}

// 5. Monte Carlo standard error at p = 0.05, B = 2400.
Outcome monte_carlo_error() {
  const double se = coverage_se(0.05, 2400);
  return {std::abs(se - 0.00445) <= 1e-4, fmt("se = %.6f", se)};
}

// 6. Score against central differences of the log-likelihood.
Outcome gradient_check() {
  std::mt19937_64 rng(kSeed);
  std::uniform_real_distribution<double> tau(0.05, 1.0), kap(-0.45, 0.45), shift(-1.0, 1.0);
  double worst = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    const Index p = 2 + rep % 2;
    const auto d = random_dataset(rng, 6 + rep % 5, p, rep % 3 == 0);
    HetParams eta{Vector(p), Matrix::Identity(p, p)};
    for (Index j = 0; j < p; ++j) eta.tau(j) = tau(rng);
    for (Index j = 0; j < p; ++j)
      for (Index k = j + 1; k < p; ++k) eta.kappa(j, k) = eta.kappa(k, j) = kap(rng);
    Vector mu(p);
    for (Index j = 0; j < p; ++j) mu(j) = shift(rng);
    const Vector u = score_U(d, mu, eta, kUn);
    Vector fd(p);
    const double h = 1e-5;
    for (Index j = 0; j < p; ++j) {
      Vector a = mu, b = mu;
      a(j) += h;
      b(j) -= h;
      fd(j) = (log_likelihood(d, a, eta, kUn) - log_likelihood(d, b, eta, kUn)) / (2 * h);
    }
    worst = std::max(worst, (u - fd).cwiseAbs().maxCoeff() / u.cwiseAbs().maxCoeff());
  }
  return {worst < 1e-6, fmt("max relative error %.3g", worst)};
}

// 7. Moment estimator is sign-invariant and T2 reuses it.
Outcome sign_invariance() {
  const auto& sc = find_scenario("dta-accept");
  const auto d = generate(sc, kSeed);
  const Vector mu = sc.mu;
  const auto base = moment_sigma(d, mu);
  std::mt19937_64 rng(kSeed);
  double worst = 0.0;
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<int> v(d.size());
    for (auto& s : v) s = rng() & 1 ? -1 : 1;
    worst = std::max(worst, (moment_sigma(oracle::flipped(d, mu, v), mu).sigma - base.sigma).cwiseAbs().maxCoeff());
  }
  const auto t = joint_permutation_test(d, mu, PermutationPlan::exhaustive(), JointStatistic::T2, kUn);
  const bool reused = t.refits == 0 && t.sigma == base.sigma;
  return {worst <= 1e-14 && reused, fmt("max deviation %.3g, refits %zu, same matrix %d", worst, t.refits, reused)};
}

// 8. Worked truncation case.
Outcome truncation_example() {
  const auto d = bivariate({{1, 0}, {-1, 0}}, {{std::sqrt(0.5), std::sqrt(0.5)}});
  const auto m = moment_sigma(d, vec({0, 0}));
  Matrix want = Matrix::Zero(2, 2);
  want(0, 0) = 0.5;
  const double err = (m.sigma - want).cwiseAbs().maxCoeff();
  return {m.truncated && err < 1e-15, fmt("sigma = [[%g, %g], [%g, %g]], truncated %d", m.sigma(0, 0), m.sigma(0, 1),
                                          m.sigma(1, 0), m.sigma(1, 1), m.truncated)};
}

// 9. Interval membership agrees with pointwise marginal tests.
Outcome interval_duality() {
  const auto d = generate(find_scenario("dta-accept"), derive_seed(kSeed, 0));
  const auto plan = PermutationPlan::random(500, kSeed);
  const auto iv = confidence_interval(d, 0, 0.05, plan, kUn);
  // Probe grid set by the ML fit, so it is not aligned with the bounds.
  const auto ml = fit_ml(d, kUn);
  const double se = wald_inference(ml).se(0);
  int agree = 0;
  for (int i = 0; i < 50; ++i) {
    const double m = ml.mu_hat(0) - 3.5 * se + 7.0 * se * i / 49.0;
    const bool acc = marginal_permutation_test(d, m, 0, plan, kUn).accepts(0.05);
    agree += acc == iv.contains(m) ? 1 : 0;
  }
  return {agree == 50, fmt("%d/50 agree; interval (%.4f, %.4f), estimate %.4f", agree, iv.lower, iv.upper,
                           iv.estimate)};
}

// 10. Incomplete trivariate data: T1 covers, T2 refuses.
Outcome missing_data_path() {
  const auto& sc = find_scenario("trimiss-02");
  const auto plan = PermutationPlan::random(500, kSeed);
  const auto t1 = coverage_experiment(sc, Method::PermT1, 300, plan, kSeed, coverage_options());
  bool refused = false;
  try {
    joint_permutation_test(generate(sc, kSeed), sc.mu, plan, JointStatistic::T2, kUn);
  } catch (const IncompleteDataError&) {
    refused = true;
  }
  return {t1.coverage >= 0.91 && t1.coverage <= 0.99 && refused,
          coverage_text(t1) + fmt("; T2 refused %d", refused)};
}

}  // namespace

int main() {
  const std::vector<std::function<Outcome()>> criteria{
      exhaustive_oracle,  joint_exactness,    marginal_validity, comparator_undercoverage, monte_carlo_error,
      gradient_check,     sign_invariance,    truncation_example, interval_duality,        missing_data_path};
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i]();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %zu: %s  %s  [%.1f s]\n", i + 1, o.pass ? "PASS" : "FAIL", o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
