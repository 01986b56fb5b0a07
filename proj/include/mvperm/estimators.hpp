#pragma once

// ML, REML and constrained ML fitting by alternating mean and
// heterogeneity updates, plus the sign-invariant moment estimator of Sigma.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mvperm/errors.hpp"
#include "mvperm/linalg.hpp"
#include "mvperm/model.hpp"
#include "mvperm/optimize.hpp"

namespace mvperm {

struct FitOptions {
  /// Convergence tolerance on the max-abs change of (mu, tau, kappa).
  double tol = 1e-8;
  int max_outer = 500;
  int max_inner = 200;
};

struct FitResult {
  MeanVector mu_hat;
  HetParams eta_hat;
  Matrix sigma_hat;
  /// I(eta_hat) = sum_i W_i.
  Matrix information;
  /// l(mu_hat, eta_hat).
  double loglik = 0.0;
  /// Maximized objective: l for ML, the restricted likelihood for REML.
  double objective = 0.0;
  bool converged = false;
  int iterations = 0;
  bool pseudoinverse_used = false;
  /// l after every outer iteration.
  std::vector<double> loglik_trace;
};

struct CmlResult {
  HetParams eta_tilde;
  /// Nuisance means (all components except the tested one); empty for the
  /// joint null.
  Vector mu_c_tilde;
  /// Full mean vector at the constrained optimum.
  MeanVector mu_tilde;
  double loglik = 0.0;
  bool converged = false;
  int iterations = 0;
  bool pseudoinverse_used = false;
};

class FitNonConvergence : public NonConvergenceError {
 public:
  explicit FitNonConvergence(FitResult last)
      : NonConvergenceError("fit did not converge", last.iterations), last_(std::move(last)) {}
  const FitResult& last_iterate() const noexcept { return last_; }

 private:
  FitResult last_;
};

class CmlNonConvergence : public NonConvergenceError {
 public:
  explicit CmlNonConvergence(CmlResult last)
      : NonConvergenceError("constrained fit did not converge", last.iterations),
        last_(std::move(last)) {}
  const CmlResult& last_iterate() const noexcept { return last_; }

 private:
  CmlResult last_;
};

// ---------------------------------------------------------------------------
// Moment estimator
// ---------------------------------------------------------------------------

struct MomentEstimate {
  Matrix sigma;  ///< truncated, PSD
  Matrix raw;    ///< before truncation
  bool truncated = false;
};

namespace detail {

inline MomentEstimate moment_from_residuals(const Dataset& data, std::span<const Vector> res) {
  if (!data.complete()) throw IncompleteDataError();
  const Index p = data.p();
  Matrix acc = Matrix::Zero(p, p);
  for (std::size_t i = 0; i < data.size(); ++i) {
    acc.noalias() += res[i] * res[i].transpose();
    acc -= data.study(i).S();
  }
  MomentEstimate out;
  out.raw = acc / static_cast<double>(data.size());
  Matrix m = out.raw;
  for (Index j = 0; j < p; ++j) {
    if (m(j, j) <= 0.0) {
      m.row(j).setZero();
      m.col(j).setZero();
      out.truncated = true;
    }
  }
  auto [clipped, was_clipped] = clip_psd(m);
  out.sigma = std::move(clipped);
  out.truncated = out.truncated || was_clipped;
  return out;
}

}  // namespace detail

/// Sigma_mom(mu) = (1/N) {sum (y_i - mu)(y_i - mu)' - sum S_i}. Rows and
/// columns with a non-positive diagonal are zeroed, then negative
/// eigenvalues are clipped. Requires complete data.
inline MomentEstimate moment_sigma(const Dataset& data, const MeanVector& mu) {
  if (!data.complete()) throw IncompleteDataError();
  const auto res = detail::residuals(data, data.observed_outcomes(), mu);
  return detail::moment_from_residuals(data, res);
}

// ---------------------------------------------------------------------------
// Heterogeneity step
// ---------------------------------------------------------------------------

namespace detail {

/// l(mu, Sigma) for fixed residual blocks; writes dl/dSigma when requested.
inline double profile_objective(const Dataset& data, std::span<const Vector> res,
                                const Matrix& sigma, Matrix* dsigma, bool* pseudo) {
  const auto ws = compute_weights(data, sigma);
  if (pseudo) *pseudo = ws.pseudoinverse_used;
  if (dsigma) *dsigma = loglik_sigma_gradient(data, res, ws);
  return loglik(data, res, ws);
}

/// l(mu_hat(Sigma), Sigma) - 1/2 log|sum W_i| with mu profiled out by GLS.
inline double restricted_objective(const Dataset& data, std::span<const Vector> ys,
                                   const Matrix& sigma, Matrix* dsigma, bool* pseudo) {
  const auto ws = compute_weights(data, sigma);
  const Matrix info = information(data, ws);
  const auto info_inv = symmetric_inverse(info);
  Vector rhs = Vector::Zero(data.p());
  for (std::size_t i = 0; i < data.size(); ++i) {
    scatter_add(rhs, Vector(ws.per_study[i].W * ys[i]), data.study(i).observed_indices());
  }
  const MeanVector mu = info_inv.value * rhs;
  const auto res = residuals(data, ys, mu);
  if (pseudo) *pseudo = ws.pseudoinverse_used || info_inv.pseudo;
  if (dsigma) {
    Matrix g = loglik_sigma_gradient(data, res, ws);
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto& idx = data.study(i).observed_indices();
      const Matrix& w = ws.per_study[i].W;
      const Matrix block = 0.5 * w * gather(info_inv.value, idx) * w;
      scatter_add(g, block, idx);
    }
    *dsigma = std::move(g);
  }
  return loglik(data, res, ws) - 0.5 * info_inv.log_det;
}

struct EtaStep {
  HetParams eta;
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
  bool pseudoinverse_used = false;
};

/// Maximizes `objective(sigma, dsigma*, pseudo*)` over the free
/// heterogeneity parameters of `structure`, starting from `init`.
template <class SigmaObjective>
EtaStep maximize_eta(SigmaObjective&& objective, const CovStructure& structure, Index p,
                     const HetParams& init, int max_iterations) {
  bool last_pseudo = false;
  auto value_at = [&](const Vector& xi, Vector& grad, bool want_grad) {
    const HetParams eta = structure.from_free(xi, p);
    const auto assembled = assemble_sigma(eta, structure, p);
    if (!assembled.clipped) {
      Matrix dsigma;
      const double v = objective(assembled.sigma, want_grad ? &dsigma : nullptr, &last_pseudo);
      if (want_grad) grad = structure.free_gradient(xi, eta, dsigma);
      return v;
    }
    // Clipped Sigma: the analytic chain rule no longer applies.
    const double v = objective(assembled.sigma, nullptr, &last_pseudo);
    if (want_grad) {
      grad.resize(xi.size());
      Vector probe = xi;
      Vector unused;
      for (Index a = 0; a < xi.size(); ++a) {
        const double h = 1e-6 * std::max(1.0, std::abs(xi(a)));
        probe(a) = xi(a) + h;
        bool ignored = false;
        const double up = objective(
            assemble_sigma(structure.from_free(probe, p), structure, p).sigma, nullptr, &ignored);
        probe(a) = xi(a) - h;
        const double down = objective(
            assemble_sigma(structure.from_free(probe, p), structure, p).sigma, nullptr, &ignored);
        probe(a) = xi(a);
        grad(a) = (up - down) / (2.0 * h);
      }
    }
    return v;
  };
  auto f = [&](const Vector& xi, Vector& grad) { return value_at(xi, grad, true); };

  BfgsOptions bo;
  bo.max_iterations = max_iterations;
  const auto r = maximize_bfgs(f, structure.to_free(init, p), bo);
  EtaStep out;
  out.eta = structure.from_free(r.x, p);
  out.value = r.value;
  out.iterations = r.iterations;
  out.converged = r.converged;
  // Flag from the returned point.
  Vector unused;
  value_at(r.x, unused, false);
  out.pseudoinverse_used = last_pseudo;
  return out;
}

inline double max_abs_change(const HetParams& a, const HetParams& b) {
  double d = (a.tau - b.tau).cwiseAbs().maxCoeff();
  if (a.kappa.size() == b.kappa.size() && a.kappa.size() > 0) {
    d = std::max(d, (a.kappa - b.kappa).cwiseAbs().maxCoeff());
  }
  return d;
}

/// Warm start from the moment estimator's diagonal when data are complete.
inline HetParams initial_eta(const Dataset& data, std::span<const Vector> res,
                             const CovStructure& structure) {
  const Index p = data.p();
  Vector tau = Vector::Constant(p, 0.1);
  if (data.complete()) {
    const auto mom = moment_from_residuals(data, res);
    for (Index j = 0; j < p; ++j) tau(j) = std::sqrt(std::max(mom.raw(j, j), 1e-4));
  }
  return structure.canonical(HetParams::independent(tau), p);
}

/// CML of eta for fixed residual blocks (mean held at its null value).
inline EtaStep cml_eta(const Dataset& data, std::span<const Vector> res,
                       const CovStructure& structure, const HetParams& init,
                       const FitOptions& opts) {
  auto obj = [&](const Matrix& sigma, Matrix* g, bool* pseudo) {
    return profile_objective(data, res, sigma, g, pseudo);
  };
  return maximize_eta(obj, structure, data.p(), init, opts.max_inner);
}

inline FitResult fit(const Dataset& data, const CovStructure& structure, const FitOptions& opts,
                     bool restricted) {
  if (data.size() < 2) throw DataError("fitting requires at least two studies");
  const Index p = data.p();
  const auto& ys = data.observed_outcomes();

  FitResult fr;
  auto [mu, pseudo0] = gls_mean(data, ys, compute_weights(data, Matrix::Zero(p, p)));
  HetParams eta = initial_eta(data, residuals(data, ys, mu), structure);

  for (fr.iterations = 1; fr.iterations <= opts.max_outer; ++fr.iterations) {
    const auto ws = compute_weights(data, assemble_sigma(eta, structure, p).sigma);
    auto [mu_new, pseudo_mu] = gls_mean(data, ys, ws);
    EtaStep step;
    if (restricted) {
      auto obj = [&](const Matrix& sigma, Matrix* g, bool* pseudo) {
        return restricted_objective(data, ys, sigma, g, pseudo);
      };
      step = maximize_eta(obj, structure, p, eta, opts.max_inner);
    } else {
      step = cml_eta(data, residuals(data, ys, mu_new), structure, eta, opts);
    }
    const double change =
        std::max((mu_new - mu).cwiseAbs().maxCoeff(), max_abs_change(step.eta, eta));
    mu = std::move(mu_new);
    eta = std::move(step.eta);
    fr.objective = step.value;
    fr.loglik_trace.push_back(log_likelihood(data, mu, eta, structure));
    if (change < opts.tol) {
      fr.converged = true;
      break;
    }
  }
  fr.iterations = std::min(fr.iterations, opts.max_outer);

  const auto assembled = assemble_sigma(eta, structure, p);
  const auto ws = compute_weights(data, assembled.sigma);
  if (restricted) {
    auto [mu_final, pseudo_final] = gls_mean(data, ys, ws);
    mu = std::move(mu_final);
  }
  fr.mu_hat = mu;
  fr.eta_hat = structure.canonical(eta, p);
  fr.sigma_hat = assembled.sigma;
  fr.information = information(data, ws);
  fr.loglik = loglik(data, residuals(data, ys, mu), ws);
  fr.pseudoinverse_used = ws.pseudoinverse_used || symmetric_inverse(fr.information).pseudo;
  return fr;
}

/// Constrained fit under mu_k = center(k): the mean is center + delta with
/// delta_k = 0 and the data are center_obs + devs. Alternates the nuisance
/// mean update with the heterogeneity step.
struct MarginalCmlState {
  Vector delta;  ///< offset of the nuisance means from `center`
  HetParams eta;
  double loglik = 0.0;
  int iterations = 0;
  bool converged = false;
  bool pseudoinverse_used = false;
};

inline MarginalCmlState marginal_cml(const Dataset& data, std::span<const Vector> devs, Index k,
                                     const CovStructure& structure, const HetParams& init,
                                     const FitOptions& opts) {
  const Index p = data.p();
  IndexList rest;
  for (Index j = 0; j < p; ++j)
    if (j != k) rest.push_back(j);

  MarginalCmlState st;
  st.delta = Vector::Zero(p);
  st.eta = structure.canonical(init, p);
  std::vector<Vector> res(devs.begin(), devs.end());
  auto update_residuals = [&](const Vector& delta) {
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto& idx = data.study(i).observed_indices();
      for (std::size_t a = 0; a < idx.size(); ++a) {
        res[i](static_cast<Index>(a)) = devs[i](static_cast<Index>(a)) - delta(idx[a]);
      }
    }
  };

  for (st.iterations = 1; st.iterations <= opts.max_outer; ++st.iterations) {
    Vector delta_new = Vector::Zero(p);
    if (!rest.empty()) {
      const auto ws = compute_weights(data, assemble_sigma(st.eta, structure, p).sigma);
      const Vector u = score(data, devs, ws);
      const Matrix info = information(data, ws);
      const auto inv = symmetric_inverse(gather(info, rest));
      const Vector dc = inv.value * gather(u, rest);
      for (std::size_t a = 0; a < rest.size(); ++a) delta_new(rest[a]) = dc(static_cast<Index>(a));
      st.pseudoinverse_used = st.pseudoinverse_used || inv.pseudo;
    }
    update_residuals(delta_new);
    EtaStep step = cml_eta(data, res, structure, st.eta, opts);
    const double change =
        std::max((delta_new - st.delta).cwiseAbs().maxCoeff(), max_abs_change(step.eta, st.eta));
    st.delta = std::move(delta_new);
    st.eta = std::move(step.eta);
    st.loglik = step.value;
    st.pseudoinverse_used = st.pseudoinverse_used || step.pseudoinverse_used;
    if (change < opts.tol) {
      st.converged = true;
      break;
    }
    if (rest.empty()) {
      st.converged = step.converged;
      break;
    }
  }
  st.iterations = std::min(st.iterations, opts.max_outer);
  return st;
}

/// Fixed-effect (Sigma = 0) GLS mean; used as a neutral expansion point.
inline MeanVector fixed_effect_mean(const Dataset& data) {
  return gls_mean(data, data.observed_outcomes(),
                  compute_weights(data, Matrix::Zero(data.p(), data.p())))
      .first;
}

}  // namespace detail

/// Maximum likelihood fit. Throws FitNonConvergence carrying the last iterate.
inline FitResult fit_ml(const Dataset& data, const CovStructure& structure,
                        const FitOptions& opts = {}) {
  FitResult r = detail::fit(data, structure, opts, false);
  if (!r.converged) throw FitNonConvergence(std::move(r));
  return r;
}

/// REML fit: the heterogeneity step maximizes
/// l(mu_hat(eta), eta) - 1/2 log|sum_i W_i(eta)|.
inline FitResult fit_reml(const Dataset& data, const CovStructure& structure,
                          const FitOptions& opts = {}) {
  FitResult r = detail::fit(data, structure, opts, true);
  if (!r.converged) throw FitNonConvergence(std::move(r));
  return r;
}

/// argmax_eta l(mu_null, eta). `warm_start` replaces the moment-based start.
inline CmlResult cml_eta_given_mu(const Dataset& data, const MeanVector& mu_null,
                                  const CovStructure& structure, const FitOptions& opts = {},
                                  const HetParams* warm_start = nullptr) {
  if (mu_null.size() != data.p()) throw std::invalid_argument("mu_null has wrong dimension");
  const auto res = detail::residuals(data, data.observed_outcomes(), mu_null);
  const HetParams init = warm_start ? structure.canonical(*warm_start, data.p())
                                    : detail::initial_eta(data, res, structure);
  const auto step = detail::cml_eta(data, res, structure, init, opts);
  CmlResult out;
  out.eta_tilde = step.eta;
  out.mu_tilde = mu_null;
  out.loglik = step.value;
  out.converged = step.converged;
  out.iterations = step.iterations;
  out.pseudoinverse_used = step.pseudoinverse_used;
  if (!out.converged) throw CmlNonConvergence(std::move(out));
  return out;
}

/// CML of (mu_c, eta) under mu_component = mu1_null.
inline CmlResult cml_marginal(const Dataset& data, double mu1_null, Index component,
                              const CovStructure& structure, const FitOptions& opts = {}) {
  const Index p = data.p();
  if (component < 0 || component >= p) throw std::out_of_range("component index out of range");
  if (p == 1) return cml_eta_given_mu(data, MeanVector::Constant(1, mu1_null), structure, opts);

  MeanVector center = detail::fixed_effect_mean(data);
  center(component) = mu1_null;
  const auto devs = detail::residuals(data, data.observed_outcomes(), center);
  const auto init = detail::initial_eta(data, devs, structure);
  const auto st = detail::marginal_cml(data, devs, component, structure, init, opts);

  CmlResult out;
  out.eta_tilde = st.eta;
  out.mu_tilde = center + st.delta;
  out.mu_c_tilde.resize(p - 1);
  for (Index j = 0, a = 0; j < p; ++j)
    if (j != component) out.mu_c_tilde(a++) = out.mu_tilde(j);
  out.loglik = st.loglik;
  out.converged = st.converged;
  out.iterations = st.iterations;
  out.pseudoinverse_used = st.pseudoinverse_used;
  if (!out.converged) throw CmlNonConvergence(std::move(out));
  return out;
}

}  // namespace mvperm
