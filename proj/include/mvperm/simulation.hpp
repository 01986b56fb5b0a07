#pragma once

// Data generators and coverage experiments.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

#include "mvperm/csv.hpp"
#include "mvperm/errors.hpp"
#include "mvperm/estimators.hpp"
#include "mvperm/inference.hpp"
#include "mvperm/model.hpp"
#include "mvperm/parallel.hpp"
#include "mvperm/permutation.hpp"

namespace mvperm {

inline double logit(double x) { return std::log(x / (1.0 - x)); }
inline double expit(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Seed for replicate `index` of an experiment seeded with `seed`.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  return splitmix64(splitmix64(seed) ^ (index + 1) * 0xD1B54A32D192ED03ull);
}

struct Scenario {
  enum class Kind { Diagnostic, Gaussian };

  std::string name;
  Kind kind = Kind::Gaussian;
  std::size_t studies = 8;
  /// Grand mean on the working (logit / measure) scale.
  MeanVector mu;
  Vector tau;
  /// Common between-study correlation for every pair.
  double kappa = 0.0;
  /// Common within-study correlation (Gaussian kind).
  double rho = 0.0;
  /// Per-outcome probability of being unreported; empty for none.
  Vector missing_rates;
  /// Binomial group sizes are uniform integers in [n_min, n_max].
  int n_min = 30;
  int n_max = 150;

  Index p() const { return mu.size(); }

  Matrix sigma() const {
    const Index q = p();
    Matrix s(q, q);
    for (Index j = 0; j < q; ++j)
      for (Index k = 0; k < q; ++k) s(j, k) = (j == k ? 1.0 : kappa) * tau(j) * tau(k);
    return s;
  }
};

inline std::string to_string(Scenario::Kind k) {
  return k == Scenario::Kind::Diagnostic ? "diagnostic" : "gaussian";
}

// Named presets. Diagnostic rows give the mean as probabilities (sensitivity,
// FPR); they are converted to logits on load. tau holds SDs and tau2
// variances; exactly one of them is filled.
inline constexpr std::string_view kBuiltinManifest =
R"csv(name,kind,studies,mean,tau,tau2,kappa,rho,missing,n_min,n_max
dta-01,diagnostic,8,0.708;0.236,0.298;0.455,,0.169,0,,30,150
dta-02,diagnostic,12,0.708;0.236,0.298;0.455,,0.169,0,,30,150
dta-03,diagnostic,16,0.708;0.236,0.298;0.455,,0.169,0,,30,150
dta-04,diagnostic,8,0.708;0.236,0.298;0.455,,0.676,0,,30,150
dta-05,diagnostic,12,0.708;0.236,0.298;0.455,,0.676,0,,30,150
dta-06,diagnostic,16,0.708;0.236,0.298;0.455,,0.676,0,,30,150
dta-07,diagnostic,8,0.708;0.236,0.477;0.683,,0.169,0,,30,150
dta-08,diagnostic,12,0.708;0.236,0.477;0.683,,0.169,0,,30,150
dta-09,diagnostic,16,0.708;0.236,0.477;0.683,,0.169,0,,30,150
dta-10,diagnostic,8,0.708;0.236,0.477;0.683,,0.676,0,,30,150
dta-11,diagnostic,12,0.708;0.236,0.477;0.683,,0.676,0,,30,150
dta-12,diagnostic,16,0.708;0.236,0.477;0.683,,0.676,0,,30,150
dta-13,diagnostic,8,0.664;0.253,0.558;0.687,,0.890,0,,30,150
dta-14,diagnostic,12,0.664;0.253,0.558;0.687,,0.890,0,,30,150
dta-15,diagnostic,16,0.664;0.253,0.558;0.687,,0.890,0,,30,150
dta-16,diagnostic,8,0.664;0.253,0.558;0.687,,0.950,0,,30,150
dta-17,diagnostic,12,0.664;0.253,0.558;0.687,,0.950,0,,30,150
dta-18,diagnostic,16,0.664;0.253,0.558;0.687,,0.950,0,,30,150
dta-19,diagnostic,8,0.664;0.253,0.837;1.031,,0.890,0,,30,150
dta-20,diagnostic,12,0.664;0.253,0.837;1.031,,0.890,0,,30,150
dta-21,diagnostic,16,0.664;0.253,0.837;1.031,,0.890,0,,30,150
dta-22,diagnostic,8,0.664;0.253,0.837;1.031,,0.950,0,,30,150
dta-23,diagnostic,12,0.664;0.253,0.837;1.031,,0.950,0,,30,150
dta-24,diagnostic,16,0.664;0.253,0.837;1.031,,0.950,0,,30,150
dta-accept,diagnostic,8,0.664;0.236,0.558;0.687,,0.676,0,,30,150
biv-01,gaussian,8,0;0,,0.024;0.024,0.70,0,,,
biv-02,gaussian,12,0;0,,0.024;0.024,0.70,0,,,
biv-03,gaussian,16,0;0,,0.024;0.024,0.70,0,,,
biv-04,gaussian,8,0;0,,0.168;0.168,0.70,0,,,
biv-05,gaussian,12,0;0,,0.168;0.168,0.70,0,,,
biv-06,gaussian,16,0;0,,0.168;0.168,0.70,0,,,
biv-07,gaussian,8,0;0,,0.024;0.024,0.95,0,,,
biv-08,gaussian,12,0;0,,0.024;0.024,0.95,0,,,
biv-09,gaussian,16,0;0,,0.024;0.024,0.95,0,,,
biv-10,gaussian,8,0;0,,0.168;0.168,0.95,0,,,
biv-11,gaussian,12,0;0,,0.168;0.168,0.95,0,,,
biv-12,gaussian,16,0;0,,0.168;0.168,0.95,0,,,
biv-13,gaussian,8,0;0,,0.024;0.024,0.70,0.70,,,
biv-14,gaussian,12,0;0,,0.024;0.024,0.70,0.70,,,
biv-15,gaussian,16,0;0,,0.024;0.024,0.70,0.70,,,
biv-16,gaussian,8,0;0,,0.168;0.168,0.70,0.70,,,
biv-17,gaussian,12,0;0,,0.168;0.168,0.70,0.70,,,
biv-18,gaussian,16,0;0,,0.168;0.168,0.70,0.70,,,
biv-19,gaussian,8,0;0,,0.024;0.024,0.95,0.95,,,
biv-20,gaussian,12,0;0,,0.024;0.024,0.95,0.95,,,
biv-21,gaussian,16,0;0,,0.024;0.024,0.95,0.95,,,
biv-22,gaussian,8,0;0,,0.168;0.168,0.95,0.95,,,
biv-23,gaussian,12,0;0,,0.168;0.168,0.95,0.95,,,
biv-24,gaussian,16,0;0,,0.168;0.168,0.95,0.95,,,
tri-01,gaussian,8,0;0;0,,0.024;0.024;0.024,0.70,0,,,
tri-02,gaussian,12,0;0;0,,0.024;0.024;0.024,0.70,0,,,
tri-03,gaussian,16,0;0;0,,0.024;0.024;0.024,0.70,0,,,
tri-04,gaussian,8,0;0;0,,0.168;0.168;0.168,0.70,0,,,
tri-05,gaussian,12,0;0;0,,0.168;0.168;0.168,0.70,0,,,
tri-06,gaussian,16,0;0;0,,0.168;0.168;0.168,0.70,0,,,
tri-07,gaussian,8,0;0;0,,0.024;0.024;0.024,0.95,0,,,
tri-08,gaussian,12,0;0;0,,0.024;0.024;0.024,0.95,0,,,
tri-09,gaussian,16,0;0;0,,0.024;0.024;0.024,0.95,0,,,
tri-10,gaussian,8,0;0;0,,0.168;0.168;0.168,0.95,0,,,
tri-11,gaussian,12,0;0;0,,0.168;0.168;0.168,0.95,0,,,
tri-12,gaussian,16,0;0;0,,0.168;0.168;0.168,0.95,0,,,
tri-13,gaussian,8,0;0;0,,0.024;0.024;0.024,0.70,0.70,,,
tri-14,gaussian,12,0;0;0,,0.024;0.024;0.024,0.70,0.70,,,
tri-15,gaussian,16,0;0;0,,0.024;0.024;0.024,0.70,0.70,,,
tri-16,gaussian,8,0;0;0,,0.168;0.168;0.168,0.70,0.70,,,
tri-17,gaussian,12,0;0;0,,0.168;0.168;0.168,0.70,0.70,,,
tri-18,gaussian,16,0;0;0,,0.168;0.168;0.168,0.70,0.70,,,
tri-19,gaussian,8,0;0;0,,0.024;0.024;0.024,0.95,0.95,,,
tri-20,gaussian,12,0;0;0,,0.024;0.024;0.024,0.95,0.95,,,
tri-21,gaussian,16,0;0;0,,0.024;0.024;0.024,0.95,0.95,,,
tri-22,gaussian,8,0;0;0,,0.168;0.168;0.168,0.95,0.95,,,
tri-23,gaussian,12,0;0;0,,0.168;0.168;0.168,0.95,0.95,,,
tri-24,gaussian,16,0;0;0,,0.168;0.168;0.168,0.95,0.95,,,
trimiss-01,gaussian,8,0;0;0,,0.024;0.024;0.024,0.70,0,0.25;0.25;0.5,,
trimiss-02,gaussian,12,0;0;0,,0.024;0.024;0.024,0.70,0,0.25;0.25;0.5,,
trimiss-03,gaussian,16,0;0;0,,0.024;0.024;0.024,0.70,0,0.25;0.25;0.5,,
trimiss-04,gaussian,8,0;0;0,,0.168;0.168;0.168,0.70,0,0.25;0.25;0.5,,
trimiss-05,gaussian,12,0;0;0,,0.168;0.168;0.168,0.70,0,0.25;0.25;0.5,,
trimiss-06,gaussian,16,0;0;0,,0.168;0.168;0.168,0.70,0,0.25;0.25;0.5,,
trimiss-07,gaussian,8,0;0;0,,0.024;0.024;0.024,0.95,0,0.25;0.25;0.5,,
trimiss-08,gaussian,12,0;0;0,,0.024;0.024;0.024,0.95,0,0.25;0.25;0.5,,
trimiss-09,gaussian,16,0;0;0,,0.024;0.024;0.024,0.95,0,0.25;0.25;0.5,,
trimiss-10,gaussian,8,0;0;0,,0.168;0.168;0.168,0.95,0,0.25;0.25;0.5,,
trimiss-11,gaussian,12,0;0;0,,0.168;0.168;0.168,0.95,0,0.25;0.25;0.5,,
trimiss-12,gaussian,16,0;0;0,,0.168;0.168;0.168,0.95,0,0.25;0.25;0.5,,
trimiss-13,gaussian,8,0;0;0,,0.024;0.024;0.024,0.70,0.70,0.25;0.25;0.5,,
trimiss-14,gaussian,12,0;0;0,,0.024;0.024;0.024,0.70,0.70,0.25;0.25;0.5,,
trimiss-15,gaussian,16,0;0;0,,0.024;0.024;0.024,0.70,0.70,0.25;0.25;0.5,,
trimiss-16,gaussian,8,0;0;0,,0.168;0.168;0.168,0.70,0.70,0.25;0.25;0.5,,
trimiss-17,gaussian,12,0;0;0,,0.168;0.168;0.168,0.70,0.70,0.25;0.25;0.5,,
trimiss-18,gaussian,16,0;0;0,,0.168;0.168;0.168,0.70,0.70,0.25;0.25;0.5,,
trimiss-19,gaussian,8,0;0;0,,0.024;0.024;0.024,0.95,0.95,0.25;0.25;0.5,,
trimiss-20,gaussian,12,0;0;0,,0.024;0.024;0.024,0.95,0.95,0.25;0.25;0.5,,
trimiss-21,gaussian,16,0;0;0,,0.024;0.024;0.024,0.95,0.95,0.25;0.25;0.5,,
trimiss-22,gaussian,8,0;0;0,,0.168;0.168;0.168,0.95,0.95,0.25;0.25;0.5,,
trimiss-23,gaussian,12,0;0;0,,0.168;0.168;0.168,0.95,0.95,0.25;0.25;0.5,,
trimiss-24,gaussian,16,0;0;0,,0.168;0.168;0.168,0.95,0.95,0.25;0.25;0.5,,
)csv";

namespace detail {

inline Vector parse_list(const std::string& s, std::size_t line, std::string_view col) {
  const auto parts = csv::split(s, ';');
  Vector v(static_cast<Index>(parts.size()));
  for (std::size_t i = 0; i < parts.size(); ++i) v(static_cast<Index>(i)) = csv::to_double(parts[i], line, col);
  return v;
}

}  // namespace detail

inline std::vector<Scenario> parse_scenarios(const csv::Table& t) {
  for (const char* c : {"name", "kind", "studies", "mean", "tau", "tau2", "kappa", "rho", "missing", "n_min", "n_max"}) {
    if (!t.has(c)) throw DataError(std::string("scenario manifest lacks column '") + c + "'");
  }
  auto col = [&](const char* c) { return *t.column(c); };
  std::vector<Scenario> out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const std::size_t line = t.lines[r];
    Scenario s;
    s.name = row[col("name")];
    const auto& kind = row[col("kind")];
    if (kind == "diagnostic") {
      s.kind = Scenario::Kind::Diagnostic;
    } else if (kind == "gaussian") {
      s.kind = Scenario::Kind::Gaussian;
    } else {
      throw DataError("line " + std::to_string(line) + ": unknown scenario kind '" + kind + "'");
    }
    s.studies = static_cast<std::size_t>(csv::to_integer(row[col("studies")], line, "studies"));
    s.mu = detail::parse_list(row[col("mean")], line, "mean");
    if (s.kind == Scenario::Kind::Diagnostic) {
      for (Index j = 0; j < s.mu.size(); ++j) {
        if (!(s.mu(j) > 0.0 && s.mu(j) < 1.0)) {
          throw DataError("line " + std::to_string(line) + ": diagnostic means must be probabilities");
        }
        s.mu(j) = logit(s.mu(j));
      }
    }
    const auto& tau = row[col("tau")];
    const auto& tau2 = row[col("tau2")];
    if (tau.empty() == tau2.empty()) {
      throw DataError("line " + std::to_string(line) + ": give exactly one of tau, tau2");
    }
    s.tau = tau.empty() ? Vector(detail::parse_list(tau2, line, "tau2").cwiseSqrt())
                        : detail::parse_list(tau, line, "tau");
    s.kappa = csv::to_double(row[col("kappa")], line, "kappa");
    s.rho = row[col("rho")].empty() ? 0.0 : csv::to_double(row[col("rho")], line, "rho");
    if (!row[col("missing")].empty()) s.missing_rates = detail::parse_list(row[col("missing")], line, "missing");
    if (!row[col("n_min")].empty()) s.n_min = static_cast<int>(csv::to_integer(row[col("n_min")], line, "n_min"));
    if (!row[col("n_max")].empty()) s.n_max = static_cast<int>(csv::to_integer(row[col("n_max")], line, "n_max"));

    const Index p = s.mu.size();
    if (s.tau.size() != p || (s.missing_rates.size() != 0 && s.missing_rates.size() != p)) {
      throw DataError("line " + std::to_string(line) + ": list lengths disagree");
    }
    if (s.studies < 2 || (s.tau.array() < 0.0).any() || std::abs(s.kappa) > 1.0 ||
        std::abs(s.rho) > 1.0 || s.n_min < 1 || s.n_max < s.n_min ||
        (s.missing_rates.size() > 0 &&
         ((s.missing_rates.array() < 0.0).any() || (s.missing_rates.array() >= 1.0).any()))) {
      throw DataError("line " + std::to_string(line) + ": scenario parameter out of range");
    }
    if (s.kind == Scenario::Kind::Diagnostic && p != 2) {
      throw DataError("line " + std::to_string(line) + ": diagnostic scenarios are bivariate");
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline const std::vector<Scenario>& builtin_scenarios() {
  static const std::vector<Scenario> all = parse_scenarios(csv::parse(kBuiltinManifest));
  return all;
}

inline const Scenario& find_scenario(std::string_view name, const std::vector<Scenario>& list = builtin_scenarios()) {
  for (const auto& s : list)
    if (s.name == name) return s;
  throw std::invalid_argument("unknown scenario '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

namespace detail {

/// mu + A z with A A' = cov; cov may be singular.
inline Vector draw_mvn(const Vector& mean, const Matrix& cov, std::mt19937_64& rng) {
  std::normal_distribution<double> z;
  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  const Vector root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  Vector e(mean.size());
  for (Index j = 0; j < e.size(); ++j) e(j) = z(rng);
  return mean + es.eigenvectors() * root.cwiseProduct(e);
}

/// Logit of X/n and its variance {X(n-X)/n}^-1, with X + 0.5 and n + 1 when
/// X is 0 or n.
inline std::pair<double, double> logit_estimate(double x, double n, bool* corrected = nullptr) {
  const bool fix = x <= 0.0 || x >= n;
  if (corrected) *corrected = fix;
  if (fix) {
    x += 0.5;
    n += 1.0;
  }
  return {std::log(x / (n - x)), n / (x * (n - x))};
}

}  // namespace detail

/// 0.25 * chi^2_1 truncated to [0.009, 0.60], by rejection.
inline double draw_within_variance(std::mt19937_64& rng) {
  std::chi_squared_distribution<double> chi(1.0);
  while (true) {
    const double v = 0.25 * chi(rng);
    if (v >= 0.009 && v <= 0.60) return v;
  }
}

/// Binomial diagnostic studies: theta_i ~ MVN(mu, Sigma), p = expit(theta),
/// X_1 ~ Bin(n_1, sensitivity), X_2 ~ Bin(n_2, FPR), zero within-study
/// correlation.
inline Dataset gen_diagnostic(const Scenario& sc, std::uint64_t seed) {
  if (sc.kind != Scenario::Kind::Diagnostic) throw std::invalid_argument("scenario is not diagnostic");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> size(sc.n_min, sc.n_max);
  const Matrix sigma = sc.sigma();
  std::vector<StudyRecord> studies;
  for (std::size_t i = 0; i < sc.studies; ++i) {
    const Vector theta = detail::draw_mvn(sc.mu, sigma, rng);
    Vector y(2);
    Matrix s = Matrix::Zero(2, 2);
    for (Index j = 0; j < 2; ++j) {
      const int n = size(rng);
      std::binomial_distribution<int> bin(n, expit(theta(j)));
      const auto [est, var] = detail::logit_estimate(bin(rng), n);
      y(j) = est;
      s(j, j) = var;
    }
    studies.emplace_back("s" + std::to_string(i + 1), y, std::vector<bool>(2, true), s);
  }
  return Dataset(std::move(studies), {"sens", "fpr"});
}

/// Gaussian studies: s_ij^2 from the truncated scaled chi-square, common
/// within-study correlation rho, Y_i ~ MVN(theta_i, S_i).
inline Dataset gen_gaussian(const Scenario& sc, std::uint64_t seed) {
  if (sc.kind != Scenario::Kind::Gaussian) throw std::invalid_argument("scenario is not Gaussian");
  std::mt19937_64 rng(seed);
  const Index p = sc.p();
  const Matrix sigma = sc.sigma();
  std::vector<StudyRecord> studies;
  for (std::size_t i = 0; i < sc.studies; ++i) {
    Vector sd(p);
    for (Index j = 0; j < p; ++j) sd(j) = std::sqrt(draw_within_variance(rng));
    Matrix s(p, p);
    for (Index j = 0; j < p; ++j)
      for (Index k = 0; k < p; ++k) s(j, k) = (j == k ? 1.0 : sc.rho) * sd(j) * sd(k);
    const Vector theta = detail::draw_mvn(sc.mu, sigma, rng);
    const Vector y = detail::draw_mvn(theta, s, rng);
    studies.emplace_back("s" + std::to_string(i + 1), y, std::vector<bool>(static_cast<std::size_t>(p), true), s);
  }
  return Dataset(std::move(studies));
}

/// Masks outcome j of each study with probability rates(j). A study left with
/// nothing observed is redrawn; the whole mask is redrawn if some outcome
/// ends up unobserved everywhere.
inline Dataset apply_missingness(const Dataset& data, const Vector& rates, std::uint64_t seed) {
  const Index p = data.p();
  if (rates.size() != p) throw std::invalid_argument("one missingness rate per outcome is required");
  if ((rates.array() < 0.0).any() || (rates.array() >= 1.0).any()) {
    throw std::invalid_argument("missingness rates must lie in [0, 1)");
  }
  if ((rates.array() == 0.0).all()) return data;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int attempt = 0; attempt < 10000; ++attempt) {
    std::vector<std::vector<bool>> masks;
    std::vector<bool> seen(static_cast<std::size_t>(p), false);
    for (std::size_t i = 0; i < data.size(); ++i) {
      std::vector<bool> m(static_cast<std::size_t>(p));
      bool any = false;
      do {
        any = false;
        for (Index j = 0; j < p; ++j) {
          m[static_cast<std::size_t>(j)] = !(u(rng) < rates(j));
          any = any || m[static_cast<std::size_t>(j)];
        }
      } while (!any);
      for (Index j = 0; j < p; ++j) seen[static_cast<std::size_t>(j)] = seen[static_cast<std::size_t>(j)] || m[static_cast<std::size_t>(j)];
      masks.push_back(std::move(m));
    }
    if (std::find(seen.begin(), seen.end(), false) != seen.end()) continue;
    std::vector<StudyRecord> studies;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto& s = data.study(i);
      studies.emplace_back(s.id(), s.y(), masks[i], s.S());
    }
    return Dataset(std::move(studies), data.labels());
  }
  throw std::runtime_error("could not draw a valid missingness pattern");
}

/// One replicate dataset: generator plus missingness, all from `seed`.
inline Dataset generate(const Scenario& sc, std::uint64_t seed) {
  Dataset d = sc.kind == Scenario::Kind::Diagnostic ? gen_diagnostic(sc, seed) : gen_gaussian(sc, seed);
  if (sc.missing_rates.size() > 0) d = apply_missingness(d, sc.missing_rates, splitmix64(seed));
  return d;
}

// ---------------------------------------------------------------------------
// Coverage
// ---------------------------------------------------------------------------

enum class Method { MlWald, RemlWald, PermT1, PermT2, PermT3 };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::MlWald:
      return "ml-wald";
    case Method::RemlWald:
      return "reml-wald";
    case Method::PermT1:
      return "perm-t1";
    case Method::PermT2:
      return "perm-t2";
    case Method::PermT3:
      return "perm-t3";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  for (Method m : {Method::MlWald, Method::RemlWald, Method::PermT1, Method::PermT2, Method::PermT3})
    if (to_string(m) == s) return m;
  throw std::invalid_argument("unknown method '" + std::string(s) + "'");
}

struct CoverageOptions {
  double alpha = 0.05;
  CovStructure structure = CovStructure::unstructured();
  TestOptions test;
  /// Tested outcome for perm-t3 and for marginal Wald intervals.
  Index component = 0;
  /// Wald methods: test the single component instead of the whole vector.
  bool marginal_wald = false;
  unsigned threads = 1;
};

struct CoverageReport {
  std::string scenario;
  Method method = Method::PermT1;
  std::size_t replications = 0;
  /// Replicates that produced a test result.
  std::size_t evaluated = 0;
  std::size_t covered = 0;
  /// Replicates excluded because a fit or test failed.
  std::size_t failures = 0;
  /// Refused outright (e.g. the moment estimator on incomplete data).
  std::size_t refused = 0;
  double coverage = 0.0;
  double se = 0.0;
  /// p-value per replicate at the true parameter (NaN when excluded).
  std::vector<double> p_values;
};

/// sqrt(c (1 - c) / n).
inline double coverage_se(double c, std::size_t n) {
  return n == 0 ? 0.0 : std::sqrt(c * (1.0 - c) / static_cast<double>(n));
}

namespace detail {

enum class Outcome { Covered, NotCovered, Failed, Refused };

struct ReplicateResult {
  Outcome outcome = Outcome::Failed;
  double p_value = std::numeric_limits<double>::quiet_NaN();
};

inline ReplicateResult run_replicate(const Scenario& sc, Method method, const PermutationPlan& plan,
                                     const CoverageOptions& opts, std::uint64_t seed) {
  ReplicateResult r;
  const Dataset data = generate(sc, seed);
  try {
    switch (method) {
      case Method::MlWald:
      case Method::RemlWald: {
        const auto fit = method == Method::MlWald ? fit_ml(data, opts.structure, opts.test.fit)
                                                  : fit_reml(data, opts.structure, opts.test.fit);
        const auto w = wald_inference(fit, opts.alpha);
        bool ok = false;
        if (opts.marginal_wald) {
          const Index k = opts.component;
          const double z = (w.estimate(k) - sc.mu(k)) / w.se(k);
          r.p_value = 2.0 * (1.0 - boost::math::cdf(boost::math::normal_distribution<double>(), std::abs(z)));
          ok = w.marginal_accepts(k, sc.mu(k));
        } else {
          const double t = w.statistic(sc.mu);
          r.p_value = boost::math::cdf(boost::math::complement(
              boost::math::chi_squared_distribution<double>(static_cast<double>(sc.p())), t));
          ok = w.joint_accepts(sc.mu);
        }
        r.outcome = ok ? Outcome::Covered : Outcome::NotCovered;
        break;
      }
      case Method::PermT1:
      case Method::PermT2: {
        const auto t = joint_permutation_test(
            data, sc.mu, plan, method == Method::PermT1 ? JointStatistic::T1 : JointStatistic::T2,
            opts.structure, opts.test);
        r.p_value = t.p_value;
        r.outcome = t.accepts(opts.alpha) ? Outcome::Covered : Outcome::NotCovered;
        break;
      }
      case Method::PermT3: {
        const auto t = marginal_permutation_test(data, sc.mu(opts.component), opts.component, plan,
                                                 opts.structure, opts.test);
        r.p_value = t.p_value;
        r.outcome = t.accepts(opts.alpha) ? Outcome::Covered : Outcome::NotCovered;
        break;
      }
    }
  } catch (const IncompleteDataError&) {
    r.outcome = Outcome::Refused;
  } catch (const Error&) {
    r.outcome = Outcome::Failed;
  }
  return r;
}

}  // namespace detail

/// Tests the true parameter on `reps` generated datasets. Replicate r uses
/// derive_seed(seed, r), so results do not depend on the thread count.
/// Failed fits are excluded from the coverage and counted.
inline CoverageReport coverage_experiment(const Scenario& sc, Method method, std::size_t reps,
                                          const PermutationPlan& plan, std::uint64_t seed,
                                          const CoverageOptions& opts = {}) {
  if (reps < 100) throw std::invalid_argument("coverage experiments need at least 100 replicates");
  std::vector<detail::ReplicateResult> res(reps);
  CoverageOptions inner = opts;
  inner.test.threads = 1;
  parallel_for(reps, opts.threads,
               [&](std::size_t r) { res[r] = detail::run_replicate(sc, method, plan, inner, derive_seed(seed, r)); });
  CoverageReport rep;
  rep.scenario = sc.name;
  rep.method = method;
  rep.replications = reps;
  for (const auto& r : res) {
    rep.p_values.push_back(r.p_value);
    switch (r.outcome) {
      case detail::Outcome::Covered:
        ++rep.covered;
        ++rep.evaluated;
        break;
      case detail::Outcome::NotCovered:
        ++rep.evaluated;
        break;
      case detail::Outcome::Failed:
        ++rep.failures;
        break;
      case detail::Outcome::Refused:
        ++rep.refused;
        break;
    }
  }
  rep.coverage = rep.evaluated ? static_cast<double>(rep.covered) / static_cast<double>(rep.evaluated) : 0.0;
  rep.se = coverage_se(rep.coverage, rep.evaluated);
  return rep;
}

}  // namespace mvperm
