#pragma once

// Test inversion: confidence regions over a lattice, confidence intervals by
// scan + bisection, median-unbiased estimates, and Wald comparators.

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>

#include "mvperm/errors.hpp"
#include "mvperm/estimators.hpp"
#include "mvperm/model.hpp"
#include "mvperm/permutation.hpp"

namespace mvperm {

/// Working scale of an outcome. Results are back-transformed only for
/// reporting.
enum class Scale { Identity, Logit, Log };

inline double back_transform(double x, Scale s) {
  switch (s) {
    case Scale::Logit:
      return 1.0 / (1.0 + std::exp(-x));
    case Scale::Log:
      return std::exp(x);
    case Scale::Identity:
      break;
  }
  return x;
}

inline Scale parse_scale(const std::string& s) {
  if (s == "identity") return Scale::Identity;
  if (s == "logit") return Scale::Logit;
  if (s == "log") return Scale::Log;
  throw std::invalid_argument("unknown scale '" + s + "'");
}

inline std::string to_string(Scale s) {
  switch (s) {
    case Scale::Logit:
      return "logit";
    case Scale::Log:
      return "log";
    case Scale::Identity:
      break;
  }
  return "identity";
}

inline double normal_quantile(double q) {
  return boost::math::quantile(boost::math::normal_distribution<double>(), q);
}

inline double chi_squared_quantile(double q, double df) {
  return boost::math::quantile(boost::math::chi_squared_distribution<double>(df), q);
}

// ---------------------------------------------------------------------------
// Wald
// ---------------------------------------------------------------------------

struct WaldInference {
  MeanVector estimate;
  Vector se;
  Vector lower;
  Vector upper;
  /// Inverse of the information at the fit.
  Matrix covariance;
  double alpha = 0.05;
  double z = 0.0;
  /// chi^2_p (1 - alpha) quantile for the joint region.
  double chi2_threshold = 0.0;

  /// (mu_hat - mu0)' I (mu_hat - mu0).
  double statistic(const MeanVector& mu0) const {
    const Vector d = estimate - mu0;
    return d.dot(information * d);
  }
  bool joint_accepts(const MeanVector& mu0) const { return statistic(mu0) <= chi2_threshold; }
  bool marginal_accepts(Index j, double m) const { return m >= lower(j) && m <= upper(j); }

  Matrix information;
};

inline WaldInference wald_inference(const FitResult& fit, double alpha = 0.05) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must lie in (0, 1)");
  const auto inv = symmetric_inverse(fit.information);
  if (inv.pseudo) throw SingularInformationError("information matrix is singular");
  WaldInference w;
  w.estimate = fit.mu_hat;
  w.information = fit.information;
  w.covariance = inv.value;
  w.alpha = alpha;
  w.z = normal_quantile(1.0 - alpha / 2.0);
  w.chi2_threshold = chi_squared_quantile(1.0 - alpha, static_cast<double>(fit.mu_hat.size()));
  w.se = inv.value.diagonal().cwiseMax(0.0).cwiseSqrt();
  w.lower = w.estimate - w.z * w.se;
  w.upper = w.estimate + w.z * w.se;
  return w;
}

// ---------------------------------------------------------------------------
// Regions
// ---------------------------------------------------------------------------

struct RegionPoint {
  MeanVector mu_null;
  double statistic = 0.0;
  double threshold = 0.0;
  double p_value = 0.0;
  bool accepted = false;
  /// The test could not be run at this point; `error` says why.
  bool failed = false;
  std::string error;
};

struct RegionGrid {
  /// Outcome index of each lattice axis, in lattice order (first axis varies
  /// slowest).
  IndexList axes;
  std::vector<std::vector<double>> axis_values;
  std::vector<RegionPoint> points;
  double alpha = 0.05;
  JointStatistic statistic = JointStatistic::T1;

  std::size_t accepted_count() const {
    return static_cast<std::size_t>(
        std::count_if(points.begin(), points.end(), [](const RegionPoint& p) { return p.accepted; }));
  }
};

struct Bounds {
  double lower = 0.0;
  double upper = 0.0;
};

/// ML Wald 99.9% box around mu_hat, half-widths inflated by 1.5.
inline std::vector<Bounds> default_region_bounds(const Dataset& data, const CovStructure& structure,
                                                 const FitOptions& opts = {}) {
  FitResult fit;
  try {
    fit = fit_ml(data, structure, opts);
  } catch (const FitNonConvergence& e) {
    fit = e.last_iterate();
  }
  const auto inv = symmetric_inverse(fit.information);
  const double r = std::sqrt(chi_squared_quantile(0.999, static_cast<double>(data.p())));
  std::vector<Bounds> out(static_cast<std::size_t>(data.p()));
  for (Index j = 0; j < data.p(); ++j) {
    const double half = 1.5 * r * std::sqrt(std::max(inv.value(j, j), 0.0));
    out[static_cast<std::size_t>(j)] = {fit.mu_hat(j) - half, fit.mu_hat(j) + half};
  }
  return out;
}

inline std::vector<double> linspace(double a, double b, std::size_t n) {
  std::vector<double> v(n);
  if (n == 1) {
    v[0] = a;
    return v;
  }
  for (std::size_t i = 0; i < n; ++i) {
    // Endpoints hit exactly.
    v[i] = i + 1 == n ? b : a + (b - a) * static_cast<double>(i) / static_cast<double>(n - 1);
  }
  return v;
}

/// Runs the joint test at every lattice point. `axes` must list every
/// outcome exactly once, since the joint test fixes the whole mean vector.
/// Failed points are recorded, not fatal. No smoothing or gap filling.
inline RegionGrid confidence_region(const Dataset& data, const IndexList& axes, double alpha,
                                    const std::vector<Bounds>& bounds, std::size_t resolution,
                                    JointStatistic stat, const PermutationPlan& plan,
                                    const CovStructure& structure, const TestOptions& opts = {}) {
  const Index p = data.p();
  if (static_cast<Index>(axes.size()) != p ||
      std::set<Index>(axes.begin(), axes.end()).size() != axes.size() ||
      *std::min_element(axes.begin(), axes.end()) < 0 ||
      *std::max_element(axes.begin(), axes.end()) >= p) {
    throw std::invalid_argument("region axes must list every outcome exactly once");
  }
  if (bounds.size() != axes.size()) throw std::invalid_argument("need one bound pair per axis");
  if (resolution < 20) throw std::invalid_argument("region resolution must be at least 20");
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must lie in (0, 1)");

  RegionGrid g;
  g.axes = axes;
  g.alpha = alpha;
  g.statistic = stat;
  std::size_t total = 1;
  for (const auto& b : bounds) {
    if (!std::isfinite(b.lower) || !std::isfinite(b.upper) || !(b.lower < b.upper)) {
      throw std::invalid_argument("region bounds must be finite with lower < upper");
    }
    g.axis_values.push_back(linspace(b.lower, b.upper, resolution));
    total *= resolution;
  }

  g.points.resize(total);
  std::vector<std::size_t> digit(axes.size(), 0);
  for (std::size_t n = 0; n < total; ++n) {
    RegionPoint& pt = g.points[n];
    pt.mu_null = MeanVector::Zero(p);
    for (std::size_t a = 0; a < axes.size(); ++a) pt.mu_null(axes[a]) = g.axis_values[a][digit[a]];
    try {
      const auto t = joint_permutation_test(data, pt.mu_null, plan, stat, structure, opts);
      pt.statistic = t.statistic_obs;
      pt.threshold = t.threshold(alpha);
      pt.p_value = t.p_value;
      pt.accepted = t.accepts(alpha);
    } catch (const Error& e) {
      pt.failed = true;
      pt.error = e.what();
    }
    for (std::size_t a = axes.size(); a-- > 0;) {
      if (++digit[a] < resolution) break;
      digit[a] = 0;
    }
  }
  return g;
}

/// H0: mu = 0.
inline TestResult overall_null_test(const Dataset& data, const PermutationPlan& plan,
                                    const CovStructure& structure, JointStatistic stat,
                                    const TestOptions& opts = {}) {
  return joint_permutation_test(data, MeanVector::Zero(data.p()), plan, stat, structure, opts);
}

// ---------------------------------------------------------------------------
// Intervals
// ---------------------------------------------------------------------------

struct ScanProbe {
  double m = 0.0;
  double statistic = 0.0;
  double threshold = 0.0;
  double p_value = 0.0;
  bool accepted = false;
};

struct BoundDiagnostics {
  /// A rejected point was reached within the scan range.
  bool crossing_found = false;
  /// No accepted point was seen beyond the first rejection.
  bool monotone_crossing = true;
  std::vector<ScanProbe> trace;
};

struct IntervalOptions {
  double step_fraction = 0.25;  ///< scan step in units of the Wald SE
  int max_steps = 64;
  int extra_steps = 3;          ///< probes past the first rejection
  double tolerance = 1e-4;      ///< bisection bracket width
  double mue_tolerance = 1e-5;
  double mue_span = 4.0;        ///< MUE search range in Wald SEs
};

struct MedianUnbiased {
  double estimate = 0.0;
  /// No p = 0.5 crossing within the search range; estimate is the ML value.
  bool fallback = false;
  double wald_estimate = 0.0;
  double wald_se = 0.0;
};

struct Interval {
  Index component = 0;
  double alpha = 0.05;
  double estimate = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  Scale scale = Scale::Identity;
  bool estimate_fallback = false;
  double wald_se = 0.0;
  BoundDiagnostics lower_side;
  BoundDiagnostics upper_side;

  bool contains(double m) const { return m >= lower && m <= upper; }
  double estimate_reported() const { return back_transform(estimate, scale); }
  double lower_reported() const { return back_transform(lower, scale); }
  double upper_reported() const { return back_transform(upper, scale); }
};

namespace detail {

struct WaldAnchor {
  double estimate = 0.0;
  double se = 0.0;
};

inline WaldAnchor wald_anchor(const Dataset& data, Index k, const CovStructure& structure,
                              const FitOptions& opts) {
  FitResult fit;
  try {
    fit = fit_ml(data, structure, opts);
  } catch (const FitNonConvergence& e) {
    fit = e.last_iterate();
  }
  const auto inv = symmetric_inverse(fit.information);
  WaldAnchor a{fit.mu_hat(k), std::sqrt(std::max(inv.value(k, k), 0.0))};
  if (!(a.se > 0.0) || !std::isfinite(a.se)) a.se = 1.0;
  return a;
}

inline ScanProbe probe(const Dataset& data, double m, Index k, double alpha,
                       const PermutationPlan& plan, const CovStructure& structure,
                       const TestOptions& opts) {
  ScanProbe s;
  s.m = m;
  try {
    const auto t = marginal_permutation_test(data, m, k, plan, structure, opts);
    s.statistic = t.statistic_obs;
    s.threshold = t.threshold(alpha);
    s.p_value = t.p_value;
    s.accepted = t.accepts(alpha);
  } catch (const NonConvergenceError&) {
    s.accepted = false;
  } catch (const DegenerateInformationError&) {
    s.accepted = false;
  }
  return s;
}

inline MedianUnbiased median_unbiased(const Dataset& data, Index k, const PermutationPlan& plan,
                                      const CovStructure& structure, const TestOptions& opts,
                                      const IntervalOptions& io, const WaldAnchor& anchor) {
  MedianUnbiased out;
  out.wald_estimate = anchor.estimate;
  out.wald_se = anchor.se;
  // One-sided signed p-value; nondecreasing in m.
  auto at_least_half = [&](double m) {
    try {
      return marginal_permutation_test(data, m, k, plan, structure, opts).signed_p_value >= 0.5;
    } catch (const Error&) {
      return false;
    }
  };
  double lo = anchor.estimate - io.mue_span * anchor.se;
  double hi = anchor.estimate + io.mue_span * anchor.se;
  if (at_least_half(lo) || !at_least_half(hi)) {
    out.estimate = anchor.estimate;
    out.fallback = true;
    return out;
  }
  while (hi - lo > io.mue_tolerance) {
    const double mid = 0.5 * (lo + hi);
    (at_least_half(mid) ? hi : lo) = mid;
  }
  out.estimate = 0.5 * (lo + hi);
  return out;
}

/// Scans from `start` in direction `dir` until the first rejection, then
/// bisects. Returns the innermost accepted end of the final bracket.
inline double scan_side(const Dataset& data, double start, double step, int dir, Index k,
                        double alpha, const PermutationPlan& plan, const CovStructure& structure,
                        const TestOptions& opts, const IntervalOptions& io,
                        BoundDiagnostics& diag) {
  double accepted = start;
  double rejected = start;
  int first_reject = -1;
  for (int s = 1; s <= io.max_steps; ++s) {
    const double m = start + dir * s * step;
    const auto pr = probe(data, m, k, alpha, plan, structure, opts);
    diag.trace.push_back(pr);
    if (!pr.accepted) {
      first_reject = s;
      rejected = m;
      break;
    }
    accepted = m;
  }
  if (first_reject < 0) {
    diag.crossing_found = false;
    return accepted;
  }
  diag.crossing_found = true;
  for (int s = first_reject + 1; s <= first_reject + io.extra_steps; ++s) {
    const auto pr = probe(data, start + dir * s * step, k, alpha, plan, structure, opts);
    diag.trace.push_back(pr);
    if (pr.accepted) diag.monotone_crossing = false;
  }
  while (std::abs(rejected - accepted) > io.tolerance) {
    const double mid = 0.5 * (accepted + rejected);
    const auto pr = probe(data, mid, k, alpha, plan, structure, opts);
    diag.trace.push_back(pr);
    (pr.accepted ? accepted : rejected) = mid;
  }
  return accepted;
}

}  // namespace detail

/// Point where the one-sided permutation p-value of the signed marginal
/// score U_k / sqrt(J) crosses 0.5, located by bisection within Wald +-4 SE.
inline MedianUnbiased median_unbiased_estimate(const Dataset& data, Index component,
                                               const PermutationPlan& plan,
                                               const CovStructure& structure,
                                               const TestOptions& opts = {},
                                               const IntervalOptions& io = {}) {
  const auto anchor = detail::wald_anchor(data, component, structure, opts.fit);
  return detail::median_unbiased(data, component, plan, structure, opts, io, anchor);
}

/// {m : marginal test at m accepts at level alpha}, found by scanning out from
/// the median-unbiased estimate and bisecting each crossing. The same plan
/// (and seed) is used at every m.
inline Interval confidence_interval(const Dataset& data, Index component, double alpha,
                                    const PermutationPlan& plan, const CovStructure& structure,
                                    const TestOptions& opts = {}, const IntervalOptions& io = {},
                                    Scale scale = Scale::Identity) {
  if (component < 0 || component >= data.p()) throw std::out_of_range("component index out of range");
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must lie in (0, 1)");
  const auto anchor = detail::wald_anchor(data, component, structure, opts.fit);
  const auto mue = detail::median_unbiased(data, component, plan, structure, opts, io, anchor);

  Interval iv;
  iv.component = component;
  iv.alpha = alpha;
  iv.scale = scale;
  iv.estimate = mue.estimate;
  iv.estimate_fallback = mue.fallback;
  iv.wald_se = anchor.se;

  const auto centre = detail::probe(data, mue.estimate, component, alpha, plan, structure, opts);
  if (!centre.accepted) {
    // Empty at this level: report the degenerate interval with the probe.
    iv.lower = iv.upper = mue.estimate;
    iv.lower_side.trace.push_back(centre);
    iv.upper_side.trace.push_back(centre);
    iv.lower_side.crossing_found = iv.upper_side.crossing_found = true;
    return iv;
  }
  const double step = io.step_fraction * anchor.se;
  iv.lower = detail::scan_side(data, mue.estimate, step, -1, component, alpha, plan, structure,
                               opts, io, iv.lower_side);
  iv.upper = detail::scan_side(data, mue.estimate, step, +1, component, alpha, plan, structure,
                               opts, io, iv.upper_side);
  return iv;
}

}  // namespace mvperm
