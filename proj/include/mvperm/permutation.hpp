#pragma once

// Sign-flip permutation tests for the grand mean.
//
// Joint tests (T1, T2) flip each study's residual about mu_null; the null
// distribution is exact when all 2^N assignments are enumerated. The
// marginal test (T3) flips about a pseudo-null centre whose nuisance means
// are constrained estimates and refits them for every assignment (local
// Monte Carlo).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mvperm/errors.hpp"
#include "mvperm/estimators.hpp"
#include "mvperm/model.hpp"
#include "mvperm/parallel.hpp"
#include "mvperm/signs.hpp"

namespace mvperm {

enum class JointStatistic { T1, T2 };

inline std::string to_string(JointStatistic s) { return s == JointStatistic::T1 ? "t1" : "t2"; }

struct TestOptions {
  FitOptions fit;
  unsigned threads = 1;
  /// The test aborts when more than this fraction of per-assignment fits
  /// fail to converge.
  double max_failure_fraction = 0.2;
};

/// Permutation null distribution of a statistic that is large under the
/// alternative.
///
/// Exhaustive plans use the 2^N enumerated statistics as the reference set.
/// Random plans add the observed statistic to the B draws, so the p-value is
/// (1 + #{T_b >= T}) / (B + 1) and the quantile threshold agrees with it.
class NullDistribution {
 public:
  NullDistribution() = default;
  NullDistribution(std::vector<double> statistics, PermutationPlan::Mode mode, std::uint64_t seed,
                   bool includes_identity)
      : statistics_(std::move(statistics)),
        sorted_(statistics_),
        mode_(mode),
        seed_(seed),
        includes_identity_(includes_identity) {
    std::sort(sorted_.begin(), sorted_.end());
  }

  const std::vector<double>& statistics() const noexcept { return statistics_; }
  const std::vector<double>& sorted() const noexcept { return sorted_; }
  PermutationPlan::Mode mode() const noexcept { return mode_; }
  std::uint64_t seed() const noexcept { return seed_; }
  bool includes_identity() const noexcept { return includes_identity_; }
  bool augmented() const noexcept { return mode_ == PermutationPlan::Mode::Random; }

  /// Size of the reference set: 2^N, or B + 1 for random plans.
  std::size_t reference_size() const noexcept { return sorted_.size() + (augmented() ? 1 : 0); }

  /// #{reference values >= observed}; ties count.
  std::size_t count_at_least(double observed) const {
    const auto it = std::lower_bound(sorted_.begin(), sorted_.end(), observed);
    const auto n = static_cast<std::size_t>(sorted_.end() - it);
    return n + (augmented() ? 1 : 0);
  }

  double p_value(double observed) const {
    return static_cast<double>(count_at_least(observed)) / static_cast<double>(reference_size());
  }

  /// Smallest count of reference values >= T that still accepts at level
  /// alpha: accept <=> count > alpha * M.
  std::size_t acceptance_count(double alpha) const {
    const double am = alpha * static_cast<double>(reference_size());
    return static_cast<std::size_t>(std::floor(am * (1.0 + 1e-12))) + 1;
  }

  bool accepts(double observed, double alpha) const {
    return count_at_least(observed) >= acceptance_count(alpha);
  }

  /// Empirical (1 - alpha) quantile of the reference set: accept <=> T <= q.
  double threshold(double alpha, double observed) const {
    const std::size_t need = acceptance_count(alpha);
    const std::size_t m = reference_size();
    if (need > m) return -std::numeric_limits<double>::infinity();
    const std::size_t k = m - need;  // zero-based position in the reference set
    if (!augmented()) return sorted_[k];
    // Reference set = sorted_ with `observed` merged in.
    const auto pos = static_cast<std::size_t>(
        std::lower_bound(sorted_.begin(), sorted_.end(), observed) - sorted_.begin());
    if (k < pos) return sorted_[k];
    if (k == pos) return observed;
    return sorted_[k - 1];
  }

 private:
  std::vector<double> statistics_;
  std::vector<double> sorted_;
  PermutationPlan::Mode mode_ = PermutationPlan::Mode::Exhaustive;
  std::uint64_t seed_ = 0;
  bool includes_identity_ = false;
};

struct TestResult {
  double statistic_obs = 0.0;
  double p_value = 1.0;
  std::size_t count_at_least = 0;
  NullDistribution distribution;
  std::size_t failed_permutations = 0;
  /// Number of nuisance refits performed (zero for T2).
  std::size_t refits = 0;
  bool pseudoinverse_used = false;
  /// Nuisance estimate used for the observed statistic.
  HetParams eta;
  Matrix sigma;
  /// Centre of the sign flips (mu_null, or the marginal pseudo-null).
  MeanVector center;

  /// Marginal tests only: signed root U_k / sqrt(J) and its distribution.
  double signed_obs = 0.0;
  std::vector<double> signed_statistics;
  /// One-sided p-value #{S_b >= S_obs} / M (add-one for random plans).
  double signed_p_value = 1.0;

  bool accepts(double alpha) const { return distribution.accepts(statistic_obs, alpha); }
  double threshold(double alpha) const { return distribution.threshold(alpha, statistic_obs); }
};

class PermutationFailure : public NonConvergenceError {
 public:
  PermutationFailure(std::size_t failed, std::size_t total)
      : NonConvergenceError(std::to_string(failed) + " of " + std::to_string(total) +
                                " permutation fits failed to converge",
                            0) {}
};

namespace detail {

inline std::vector<Vector> flip(std::span<const Vector> res, std::span<const std::int8_t> signs) {
  std::vector<Vector> out;
  out.reserve(res.size());
  for (std::size_t i = 0; i < res.size(); ++i) out.push_back(signs[i] == 1 ? res[i] : Vector(-res[i]));
  return out;
}

/// U' I^-1 U for residual blocks under fixed weights.
inline double score_quadratic(const Dataset& data, std::span<const Vector> res, const WeightSet& ws,
                              bool* pseudo = nullptr) {
  const Vector u = score(data, res, ws);
  const auto inv = symmetric_inverse(information(data, ws));
  if (pseudo) *pseudo = inv.pseudo;
  return u.dot(inv.value * u);
}

struct Evaluated {
  double value = 0.0;
  double signed_value = 0.0;
  bool failed = false;
};

inline void check_failures(std::size_t failed, std::size_t total, double max_fraction) {
  if (static_cast<double>(failed) > max_fraction * static_cast<double>(total)) {
    throw PermutationFailure(failed, total);
  }
}

inline bool any_identity(const SignAssignments& signs) {
  for (std::size_t b = 0; b < signs.size(); ++b)
    if (signs.is_identity(b)) return true;
  return false;
}

inline std::vector<std::int8_t> identity_signs(std::size_t n) { return std::vector<std::int8_t>(n, 1); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

struct T1Value {
  double value = 0.0;
  HetParams eta_tilde;
  bool pseudoinverse_used = false;
};

/// T1 = U(mu_null, eta~)' I(eta~)^-1 U(mu_null, eta~) with eta~ the CML
/// estimate under mu = mu_null.
inline T1Value statistic_T1(const Dataset& data, const MeanVector& mu_null,
                            const CovStructure& structure, const FitOptions& opts = {}) {
  const auto cml = cml_eta_given_mu(data, mu_null, structure, opts);
  const auto res = detail::residuals(data, data.observed_outcomes(), mu_null);
  const auto ws = compute_weights(data, assemble_sigma(cml.eta_tilde, structure, data.p()).sigma);
  T1Value out;
  bool pseudo = false;
  out.value = detail::score_quadratic(data, res, ws, &pseudo);
  out.eta_tilde = cml.eta_tilde;
  out.pseudoinverse_used = pseudo || ws.pseudoinverse_used;
  return out;
}

/// T2: the score quadratic form with Sigma replaced by the truncated moment
/// estimator at mu_null. Requires complete data.
inline double statistic_T2(const Dataset& data, const MeanVector& mu_null) {
  const auto res = detail::residuals(data, data.observed_outcomes(), mu_null);
  const auto mom = detail::moment_from_residuals(data, res);
  return detail::score_quadratic(data, res, compute_weights(data, mom.sigma));
}

struct T3Value {
  double value = 0.0;
  /// U_k / sqrt(J).
  double signed_value = 0.0;
  MeanVector mu_tilde;
  Vector mu_c_tilde;
  HetParams eta_tilde;
  double J = 0.0;
};

namespace detail {

inline Evaluated marginal_from_residuals(const Dataset& data, std::span<const Vector> res,
                                         const Matrix& sigma, Index k) {
  const auto ws = compute_weights(data, sigma);
  const Vector u = score(data, res, ws);
  const double j = schur_complement(information(data, ws), k).value;
  Evaluated e;
  if (!(j >= 1e-12)) {
    e.failed = true;
    return e;
  }
  const double uk = u(k);
  e.value = uk * ((1.0 / j) * uk);
  e.signed_value = uk / std::sqrt(j);
  return e;
}

}  // namespace detail

/// T3 = U_k(m, mu~_c, eta~)^2 / J_k(eta~) under mu_k = m.
inline T3Value statistic_T3(const Dataset& data, double mu1_null, Index component,
                            const CovStructure& structure, const FitOptions& opts = {}) {
  const auto cml = cml_marginal(data, mu1_null, component, structure, opts);
  const auto res = detail::residuals(data, data.observed_outcomes(), cml.mu_tilde);
  const Matrix sigma = assemble_sigma(cml.eta_tilde, structure, data.p()).sigma;
  const auto ws = compute_weights(data, sigma);
  const Vector u = detail::score(data, res, ws);
  const double j = schur_complement(detail::information(data, ws), component).value;
  if (!(j >= 1e-12)) throw DegenerateInformationError("tested component carries no information");
  T3Value out;
  out.value = u(component) * ((1.0 / j) * u(component));
  out.signed_value = u(component) / std::sqrt(j);
  out.mu_tilde = cml.mu_tilde;
  out.mu_c_tilde = cml.mu_c_tilde;
  out.eta_tilde = cml.eta_tilde;
  out.J = j;
  return out;
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

/// Joint sign-flip test of H0: mu = mu_null.
///
/// T1 refits eta~ on every permuted sample, warm-started from the observed
/// CML estimate. T2 evaluates the moment estimator once: it is invariant to
/// the signs, so no per-assignment refit is needed.
inline TestResult joint_permutation_test(const Dataset& data, const MeanVector& mu_null,
                                         const PermutationPlan& plan, JointStatistic stat,
                                         const CovStructure& structure,
                                         const TestOptions& opts = {}) {
  if (mu_null.size() != data.p()) throw std::invalid_argument("mu_null has wrong dimension");
  const std::size_t n = data.size();
  const auto signs = generate_signs(plan, n);
  const auto res = detail::residuals(data, data.observed_outcomes(), mu_null);

  TestResult out;
  out.center = mu_null;
  std::vector<detail::Evaluated> evals(signs.size());
  std::optional<WeightSet> fixed_weights;
  std::optional<detail::EtaStep> observed_fit;

  if (stat == JointStatistic::T2) {
    const auto mom = detail::moment_from_residuals(data, res);
    out.sigma = mom.sigma;
    out.eta = HetParams::from_sigma(mom.sigma);
    fixed_weights = compute_weights(data, mom.sigma);
  } else {
    const auto init = detail::initial_eta(data, res, structure);
    observed_fit = detail::cml_eta(data, res, structure, init, opts.fit);
    if (!observed_fit->converged) {
      CmlResult last;
      last.eta_tilde = observed_fit->eta;
      last.mu_tilde = mu_null;
      last.iterations = observed_fit->iterations;
      throw CmlNonConvergence(std::move(last));
    }
    out.eta = observed_fit->eta;
    out.sigma = assemble_sigma(out.eta, structure, data.p()).sigma;
  }

  auto evaluate = [&](std::span<const std::int8_t> v) {
    const auto flipped = detail::flip(res, v);
    detail::Evaluated e;
    if (fixed_weights) {
      e.value = detail::score_quadratic(data, flipped, *fixed_weights);
      return e;
    }
    const auto step = detail::cml_eta(data, flipped, structure, observed_fit->eta, opts.fit);
    const auto ws = compute_weights(data, assemble_sigma(step.eta, structure, data.p()).sigma);
    e.value = detail::score_quadratic(data, flipped, ws);
    e.failed = !step.converged;
    return e;
  };

  const auto id = detail::identity_signs(n);
  const auto observed = evaluate(id);
  out.statistic_obs = observed.value;
  parallel_for(signs.size(), opts.threads, [&](std::size_t b) { evals[b] = evaluate(signs.row(b)); });

  std::vector<double> stats(signs.size());
  for (std::size_t b = 0; b < signs.size(); ++b) {
    stats[b] = evals[b].value;
    out.failed_permutations += evals[b].failed ? 1 : 0;
  }
  detail::check_failures(out.failed_permutations, signs.size(), opts.max_failure_fraction);
  out.refits = fixed_weights ? 0 : signs.size();
  out.distribution =
      NullDistribution(std::move(stats), plan.mode, plan.seed, detail::any_identity(signs));
  out.count_at_least = out.distribution.count_at_least(out.statistic_obs);
  out.p_value = out.distribution.p_value(out.statistic_obs);
  bool pseudo = false;
  if (fixed_weights) {
    detail::score_quadratic(data, res, *fixed_weights, &pseudo);
    pseudo = pseudo || fixed_weights->pseudoinverse_used;
  } else {
    pseudo = observed_fit->pseudoinverse_used;
  }
  out.pseudoinverse_used = pseudo;
  return out;
}

/// Marginal test of H0: mu_component = mu1_null by local Monte Carlo.
inline TestResult marginal_permutation_test(const Dataset& data, double mu1_null, Index component,
                                            const PermutationPlan& plan,
                                            const CovStructure& structure,
                                            const TestOptions& opts = {}) {
  const Index p = data.p();
  if (component < 0 || component >= p) throw std::out_of_range("component index out of range");
  const std::size_t n = data.size();
  const auto signs = generate_signs(plan, n);
  const auto& ys = data.observed_outcomes();

  // Pseudo-null centre (mu1_null, mu~_c) and the observed nuisance fit.
  MeanVector center;
  HetParams eta_obs;
  if (p == 1) {
    center = MeanVector::Constant(1, mu1_null);
    const auto devs = detail::residuals(data, ys, center);
    const auto step =
        detail::cml_eta(data, devs, structure, detail::initial_eta(data, devs, structure), opts.fit);
    if (!step.converged) {
      CmlResult last;
      last.eta_tilde = step.eta;
      last.mu_tilde = center;
      throw CmlNonConvergence(std::move(last));
    }
    eta_obs = step.eta;
  } else {
    center = detail::fixed_effect_mean(data);
    center(component) = mu1_null;
    const auto devs = detail::residuals(data, ys, center);
    const auto st = detail::marginal_cml(data, devs, component, structure,
                                         detail::initial_eta(data, devs, structure), opts.fit);
    if (!st.converged) {
      CmlResult last;
      last.eta_tilde = st.eta;
      last.mu_tilde = center + st.delta;
      last.iterations = st.iterations;
      throw CmlNonConvergence(std::move(last));
    }
    center += st.delta;
    center(component) = mu1_null;
    eta_obs = st.eta;
  }
  const auto devs = detail::residuals(data, ys, center);

  auto evaluate = [&](std::span<const std::int8_t> v) {
    const auto flipped = detail::flip(devs, v);
    if (p == 1) {
      const auto step = detail::cml_eta(data, flipped, structure, eta_obs, opts.fit);
      auto e = detail::marginal_from_residuals(
          data, flipped, assemble_sigma(step.eta, structure, p).sigma, component);
      e.failed = e.failed || !step.converged;
      return e;
    }
    const auto st = detail::marginal_cml(data, flipped, component, structure, eta_obs, opts.fit);
    std::vector<Vector> res = flipped;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& idx = data.study(i).observed_indices();
      for (std::size_t a = 0; a < idx.size(); ++a) res[i](static_cast<Index>(a)) -= st.delta(idx[a]);
    }
    auto e = detail::marginal_from_residuals(data, res, assemble_sigma(st.eta, structure, p).sigma,
                                             component);
    e.failed = e.failed || !st.converged;
    return e;
  };

  const auto observed = evaluate(detail::identity_signs(n));
  if (observed.failed) {
    throw DegenerateInformationError("observed marginal statistic could not be evaluated");
  }
  std::vector<detail::Evaluated> evals(signs.size());
  parallel_for(signs.size(), opts.threads, [&](std::size_t b) { evals[b] = evaluate(signs.row(b)); });

  TestResult out;
  out.center = center;
  out.eta = eta_obs;
  out.sigma = assemble_sigma(eta_obs, structure, p).sigma;
  out.statistic_obs = observed.value;
  out.signed_obs = observed.signed_value;
  std::vector<double> stats(signs.size());
  out.signed_statistics.resize(signs.size());
  for (std::size_t b = 0; b < signs.size(); ++b) {
    stats[b] = evals[b].value;
    out.signed_statistics[b] = evals[b].signed_value;
    out.failed_permutations += evals[b].failed ? 1 : 0;
  }
  detail::check_failures(out.failed_permutations, signs.size(), opts.max_failure_fraction);
  out.refits = signs.size();
  out.distribution =
      NullDistribution(std::move(stats), plan.mode, plan.seed, detail::any_identity(signs));
  out.count_at_least = out.distribution.count_at_least(out.statistic_obs);
  out.p_value = out.distribution.p_value(out.statistic_obs);

  std::size_t ge = 0;
  for (double s : out.signed_statistics) ge += s >= out.signed_obs ? 1 : 0;
  const bool augmented = plan.mode == PermutationPlan::Mode::Random;
  out.signed_p_value = static_cast<double>(ge + (augmented ? 1 : 0)) /
                       static_cast<double>(signs.size() + (augmented ? 1 : 0));
  out.pseudoinverse_used = compute_weights(data, out.sigma).pseudoinverse_used;
  return out;
}

}  // namespace mvperm
