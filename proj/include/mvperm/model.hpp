#pragma once

// Multivariate random-effects meta-analysis model:
//
//   Y_i ~ MVN(theta_i, S_i),   theta_i ~ MVN(mu, Sigma)
//
// Studies may report any non-empty subset of the p outcomes. Every
// per-study quantity is evaluated on the observed block and scattered back
// into p-dimensional coordinates; unobserved components contribute zero.

#include <cmath>
#include <algorithm>
#include <stdexcept>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mvperm/errors.hpp"
#include "mvperm/linalg.hpp"

namespace mvperm {

using MeanVector = Vector;

inline constexpr double kLog2Pi = 1.8378770664093454836;  // log(2 pi)

/// One study's outcome estimates, observation mask and known within-study
/// covariance. Immutable; construction validates the observed block.
class StudyRecord {
 public:
  StudyRecord(std::string id, Vector y, std::vector<bool> observed, Matrix s)
      : id_(std::move(id)), y_(std::move(y)), observed_(std::move(observed)), s_(std::move(s)) {
    const Index p = y_.size();
    if (p < 1) throw DataError("study '" + id_ + "': empty outcome vector");
    if (static_cast<Index>(observed_.size()) != p || s_.rows() != p || s_.cols() != p) {
      throw DataError("study '" + id_ + "': dimension mismatch between y, mask and S");
    }
    for (Index j = 0; j < p; ++j) {
      if (observed_[static_cast<std::size_t>(j)]) index_.push_back(j);
    }
    if (index_.empty()) throw DataError("study '" + id_ + "': no observed outcomes");
    y_obs_ = gather(y_, index_);
    s_obs_ = gather(s_, index_);
    if (!y_obs_.allFinite() || !s_obs_.allFinite()) {
      throw DataError("study '" + id_ + "': non-finite observed values");
    }
    const double scale = std::max(1.0, s_obs_.cwiseAbs().maxCoeff());
    if ((s_obs_ - s_obs_.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
      throw DataError("study '" + id_ + "': within-study covariance is not symmetric");
    }
    if ((s_obs_.diagonal().array() <= 0.0).any()) {
      throw DataError("study '" + id_ + "': within-study variances must be positive");
    }
    if (!is_psd(s_obs_)) {
      throw DataError("study '" + id_ + "': within-study covariance is not positive semidefinite");
    }
  }

  const std::string& id() const noexcept { return id_; }
  const Vector& y() const noexcept { return y_; }
  const std::vector<bool>& observed() const noexcept { return observed_; }
  const Matrix& S() const noexcept { return s_; }
  Index dimension() const noexcept { return y_.size(); }
  Index observed_count() const noexcept { return static_cast<Index>(index_.size()); }
  bool fully_observed() const noexcept { return observed_count() == dimension(); }
  const IndexList& observed_indices() const noexcept { return index_; }
  const Vector& y_obs() const noexcept { return y_obs_; }
  const Matrix& S_obs() const noexcept { return s_obs_; }

 private:
  std::string id_;
  Vector y_;
  std::vector<bool> observed_;
  Matrix s_;
  IndexList index_;
  Vector y_obs_;
  Matrix s_obs_;
};

/// A collection of studies sharing the outcome dimension p.
///
/// Every outcome must be observed in at least one study. The estimators
/// require at least two studies; the container itself accepts one so the
/// likelihood can be evaluated on single-study toys.
class Dataset {
 public:
  Dataset(std::vector<StudyRecord> studies, std::vector<std::string> labels = {})
      : studies_(std::move(studies)), labels_(std::move(labels)) {
    if (studies_.empty()) throw DataError("dataset has no studies");
    const Index p = studies_.front().dimension();
    for (const auto& s : studies_) {
      if (s.dimension() != p) throw DataError("study '" + s.id() + "': outcome dimension differs");
    }
    if (labels_.empty()) {
      for (Index j = 0; j < p; ++j) labels_.push_back("y" + std::to_string(j + 1));
    }
    if (static_cast<Index>(labels_.size()) != p) throw DataError("outcome label count differs from p");
    for (Index j = 0; j < p; ++j) {
      bool seen = false;
      for (const auto& s : studies_) seen = seen || s.observed()[static_cast<std::size_t>(j)];
      if (!seen) throw DataError("outcome '" + labels_[static_cast<std::size_t>(j)] + "' is never observed");
    }
    outcomes_.reserve(studies_.size());
    for (const auto& s : studies_) outcomes_.push_back(s.y_obs());
  }

  std::size_t size() const noexcept { return studies_.size(); }
  Index p() const noexcept { return studies_.front().dimension(); }
  const std::vector<StudyRecord>& studies() const noexcept { return studies_; }
  const StudyRecord& study(std::size_t i) const { return studies_.at(i); }
  const std::vector<std::string>& labels() const noexcept { return labels_; }
  /// Observed outcome blocks, one per study.
  const std::vector<Vector>& observed_outcomes() const noexcept { return outcomes_; }

  bool complete() const noexcept {
    for (const auto& s : studies_)
      if (!s.fully_observed()) return false;
    return true;
  }

 private:
  std::vector<StudyRecord> studies_;
  std::vector<std::string> labels_;
  std::vector<Vector> outcomes_;
};

// ---------------------------------------------------------------------------
// Between-study covariance
// ---------------------------------------------------------------------------

/// Between-study standard deviations and correlations. `kappa` is a full
/// p x p correlation matrix with unit diagonal.
struct HetParams {
  Vector tau;
  Matrix kappa;

  static HetParams independent(const Vector& tau) {
    return {tau, Matrix::Identity(tau.size(), tau.size())};
  }

  static HetParams from_sigma(const Matrix& sigma) {
    const Index p = sigma.rows();
    HetParams out{Vector(p), Matrix::Identity(p, p)};
    for (Index j = 0; j < p; ++j) out.tau(j) = std::sqrt(std::max(0.0, sigma(j, j)));
    for (Index j = 0; j < p; ++j) {
      for (Index k = j + 1; k < p; ++k) {
        const double d = out.tau(j) * out.tau(k);
        const double r = d > 0.0 ? std::clamp(sigma(j, k) / d, -1.0, 1.0) : 0.0;
        out.kappa(j, k) = out.kappa(k, j) = r;
      }
    }
    return out;
  }
};

inline constexpr double kTauMin = 1e-8;
inline constexpr double kTauMax = 1e3;

/// Covariance structure for Sigma together with the unconstrained
/// parameterization used by the optimizers: tau_j = exp(xi_j) clipped to
/// [kTauMin, kTauMax], kappa_jk = tanh(zeta_jk).
class CovStructure {
 public:
  enum class Kind { Unstructured, CompoundSymmetry, EqualTauCompoundSymmetry };

  static CovStructure unstructured() { return CovStructure(Kind::Unstructured, 0.0); }
  /// Common correlation kappa0, separate tau per outcome.
  static CovStructure compound_symmetry(double kappa0) {
    return CovStructure(Kind::CompoundSymmetry, kappa0);
  }
  /// Common correlation kappa0 and one common tau.
  static CovStructure equal_tau_compound_symmetry(double kappa0) {
    return CovStructure(Kind::EqualTauCompoundSymmetry, kappa0);
  }

  /// Parses "unstructured", "cs:<kappa0>" or "cs1:<kappa0>".
  static CovStructure parse(std::string_view text) {
    if (text == "unstructured" || text == "un") return unstructured();
    auto colon = text.find(':');
    if (colon != std::string_view::npos) {
      const auto head = text.substr(0, colon);
      const double k = std::stod(std::string(text.substr(colon + 1)));
      if (head == "cs") return compound_symmetry(k);
      if (head == "cs1") return equal_tau_compound_symmetry(k);
    }
    throw std::invalid_argument("unknown covariance structure '" + std::string(text) + "'");
  }

  Kind kind() const noexcept { return kind_; }
  double kappa0() const noexcept { return kappa0_; }

  std::string to_string() const {
    std::ostringstream os;
    switch (kind_) {
      case Kind::Unstructured: return "unstructured";
      case Kind::CompoundSymmetry: os << "cs:" << kappa0_; break;
      case Kind::EqualTauCompoundSymmetry: os << "cs1:" << kappa0_; break;
    }
    return os.str();
  }

  Index free_parameter_count(Index p) const noexcept {
    switch (kind_) {
      case Kind::Unstructured: return p + p * (p - 1) / 2;
      case Kind::CompoundSymmetry: return p;
      case Kind::EqualTauCompoundSymmetry: return 1;
    }
    return 0;
  }

  /// Correlation matrix implied by the structure (kappa taken from `eta`
  /// when unstructured).
  Matrix correlation(const HetParams& eta, Index p) const {
    if (kind_ == Kind::Unstructured) {
      if (eta.kappa.rows() != p || eta.kappa.cols() != p) {
        throw std::invalid_argument("kappa dimension does not match p");
      }
      return eta.kappa;
    }
    Matrix k = Matrix::Constant(p, p, kappa0_);
    k.diagonal().setOnes();
    return k;
  }

  /// Normalizes eta to this structure (fills kappa, equalizes tau).
  HetParams canonical(const HetParams& eta, Index p) const {
    HetParams out;
    if (eta.tau.size() == p) {
      out.tau = eta.tau;
    } else if (eta.tau.size() == 1 && kind_ == Kind::EqualTauCompoundSymmetry) {
      out.tau = Vector::Constant(p, eta.tau(0));
    } else {
      throw std::invalid_argument("tau dimension does not match p");
    }
    if (kind_ == Kind::EqualTauCompoundSymmetry) out.tau.setConstant(out.tau.mean());
    out.kappa = correlation(eta, p);
    return out;
  }

  Vector to_free(const HetParams& eta, Index p) const {
    const HetParams h = canonical(eta, p);
    Vector xi(free_parameter_count(p));
    auto log_tau = [](double t) { return std::log(std::clamp(t, kTauMin, kTauMax)); };
    if (kind_ == Kind::EqualTauCompoundSymmetry) {
      xi(0) = log_tau(h.tau(0));
      return xi;
    }
    for (Index j = 0; j < p; ++j) xi(j) = log_tau(h.tau(j));
    if (kind_ == Kind::Unstructured) {
      Index a = p;
      for (Index j = 0; j < p; ++j)
        for (Index k = j + 1; k < p; ++k)
          xi(a++) = std::atanh(std::clamp(h.kappa(j, k), -1.0 + 1e-12, 1.0 - 1e-12));
    }
    return xi;
  }

  HetParams from_free(const Vector& xi, Index p) const {
    const double lo = std::log(kTauMin);
    const double hi = std::log(kTauMax);
    HetParams h{Vector(p), Matrix::Identity(p, p)};
    if (kind_ == Kind::EqualTauCompoundSymmetry) {
      h.tau.setConstant(std::exp(std::clamp(xi(0), lo, hi)));
    } else {
      for (Index j = 0; j < p; ++j) h.tau(j) = std::exp(std::clamp(xi(j), lo, hi));
    }
    if (kind_ == Kind::Unstructured) {
      Index a = p;
      for (Index j = 0; j < p; ++j)
        for (Index k = j + 1; k < p; ++k) h.kappa(j, k) = h.kappa(k, j) = std::tanh(xi(a++));
    } else {
      h.kappa = correlation(h, p);
    }
    return h;
  }

  /// Chain rule: maps dF/dSigma (symmetric, entries treated as independent)
  /// to dF/dxi.
  Vector free_gradient(const Vector& xi, const HetParams& eta, const Matrix& dsigma) const {
    const Index p = eta.tau.size();
    const double lo = std::log(kTauMin);
    const double hi = std::log(kTauMax);
    Vector dtau(p);
    for (Index j = 0; j < p; ++j) {
      double acc = 0.0;
      for (Index k = 0; k < p; ++k) acc += dsigma(j, k) * eta.kappa(j, k) * eta.tau(k);
      dtau(j) = 2.0 * acc;
    }
    Vector g(xi.size());
    auto inside = [&](double x) { return x > lo && x < hi; };
    if (kind_ == Kind::EqualTauCompoundSymmetry) {
      g(0) = inside(xi(0)) ? dtau.sum() * eta.tau(0) : 0.0;
      return g;
    }
    for (Index j = 0; j < p; ++j) g(j) = inside(xi(j)) ? dtau(j) * eta.tau(j) : 0.0;
    if (kind_ == Kind::Unstructured) {
      Index a = p;
      for (Index j = 0; j < p; ++j) {
        for (Index k = j + 1; k < p; ++k, ++a) {
          const double dk = 2.0 * dsigma(j, k) * eta.tau(j) * eta.tau(k);
          const double kap = eta.kappa(j, k);
          g(a) = dk * (1.0 - kap * kap);
        }
      }
    }
    return g;
  }

 private:
  CovStructure(Kind kind, double kappa0) : kind_(kind), kappa0_(kappa0) {
    if (kind != Kind::Unstructured && !(kappa0 > -1.0 && kappa0 < 1.0)) {
      throw std::invalid_argument("compound symmetry correlation must lie in (-1, 1)");
    }
  }

  Kind kind_;
  double kappa0_;
};

struct AssembledSigma {
  Matrix sigma;
  /// Set when negative eigenvalues were clipped to zero.
  bool clipped = false;
};

/// Sigma[j,k] = kappa_jk tau_j tau_k, eigenvalue-clipped at zero when the
/// correlations do not form a PSD matrix.
inline AssembledSigma assemble_sigma(const HetParams& eta, const CovStructure& structure, Index p) {
  const HetParams h = structure.canonical(eta, p);
  Matrix sigma = h.tau.asDiagonal() * h.kappa * h.tau.asDiagonal();
  sigma = 0.5 * (sigma + sigma.transpose()).eval();
  auto [clipped, was_clipped] = clip_psd(sigma);
  return {std::move(clipped), was_clipped};
}

inline Matrix sigma_from_eta(const HetParams& eta, const CovStructure& structure) {
  return assemble_sigma(eta, structure, eta.tau.size()).sigma;
}

// ---------------------------------------------------------------------------
// Per-study reduction and marginal weights
// ---------------------------------------------------------------------------

struct ObservedBlocks {
  Vector y;
  Vector mu;
  Matrix S;
  Matrix sigma;
};

inline ObservedBlocks reduce_to_observed(const StudyRecord& study, const MeanVector& mu,
                                         const Matrix& sigma) {
  const auto& idx = study.observed_indices();
  return {study.y_obs(), gather(mu, idx), study.S_obs(), gather(sigma, idx)};
}

struct MarginalWeight {
  Matrix W;        ///< (Sigma_obs + S_obs)^-1 or its pseudoinverse
  double log_det;  ///< log |Sigma_obs + S_obs|
  bool pseudoinverse_used = false;
};

inline MarginalWeight marginal_weight(const StudyRecord& study, const Matrix& sigma) {
  const auto& idx = study.observed_indices();
  Matrix a = study.S_obs();
  for (Index x = 0; x < a.rows(); ++x)
    for (Index y = 0; y < a.cols(); ++y) a(x, y) += sigma(idx[x], idx[y]);
  auto inv = symmetric_inverse(a);
  return {std::move(inv.value), inv.log_det, inv.pseudo};
}

inline MarginalWeight marginal_weight(const StudyRecord& study, const HetParams& eta,
                                      const CovStructure& structure) {
  return marginal_weight(study, assemble_sigma(eta, structure, study.dimension()).sigma);
}

/// Marginal weights of every study for one Sigma.
struct WeightSet {
  std::vector<MarginalWeight> per_study;
  bool pseudoinverse_used = false;
};

inline WeightSet compute_weights(const Dataset& data, const Matrix& sigma) {
  WeightSet ws;
  ws.per_study.reserve(data.size());
  for (const auto& s : data.studies()) {
    ws.per_study.push_back(marginal_weight(s, sigma));
    ws.pseudoinverse_used = ws.pseudoinverse_used || ws.per_study.back().pseudoinverse_used;
  }
  return ws;
}

// ---------------------------------------------------------------------------
// Likelihood, score and information on residual blocks
// ---------------------------------------------------------------------------

namespace detail {

/// Residual blocks y_i,obs - mu_obs.
inline std::vector<Vector> residuals(const Dataset& data, std::span<const Vector> ys,
                                     const MeanVector& mu) {
  std::vector<Vector> r;
  r.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& idx = data.study(i).observed_indices();
    Vector ri = ys[i];
    for (std::size_t a = 0; a < idx.size(); ++a) ri(static_cast<Index>(a)) -= mu(idx[a]);
    r.push_back(std::move(ri));
  }
  return r;
}

inline double loglik(const Dataset& data, std::span<const Vector> res, const WeightSet& ws) {
  double ll = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& w = ws.per_study[i];
    const double q = res[i].dot(w.W * res[i]);
    ll -= 0.5 * (w.log_det + q + static_cast<double>(res[i].size()) * kLog2Pi);
  }
  return ll;
}

inline Vector score(const Dataset& data, std::span<const Vector> res, const WeightSet& ws) {
  Vector u = Vector::Zero(data.p());
  for (std::size_t i = 0; i < data.size(); ++i) {
    scatter_add(u, Vector(ws.per_study[i].W * res[i]), data.study(i).observed_indices());
  }
  return u;
}

inline Matrix information(const Dataset& data, const WeightSet& ws) {
  Matrix info = Matrix::Zero(data.p(), data.p());
  for (std::size_t i = 0; i < data.size(); ++i) {
    scatter_add(info, ws.per_study[i].W, data.study(i).observed_indices());
  }
  return info;
}

/// dl/dSigma = 1/2 sum_i P_i (W r r' W - W) P_i'.
inline Matrix loglik_sigma_gradient(const Dataset& data, std::span<const Vector> res,
                                    const WeightSet& ws) {
  Matrix g = Matrix::Zero(data.p(), data.p());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Matrix& w = ws.per_study[i].W;
    const Vector wr = w * res[i];
    Matrix block = 0.5 * (wr * wr.transpose() - w);
    scatter_add(g, block, data.study(i).observed_indices());
  }
  return g;
}

/// Generalized least squares mean given weights: (sum W_i)^-1 sum W_i y_i.
inline std::pair<MeanVector, bool> gls_mean(const Dataset& data, std::span<const Vector> ys,
                                            const WeightSet& ws) {
  Vector rhs = Vector::Zero(data.p());
  for (std::size_t i = 0; i < data.size(); ++i) {
    scatter_add(rhs, Vector(ws.per_study[i].W * ys[i]), data.study(i).observed_indices());
  }
  const auto inv = symmetric_inverse(information(data, ws));
  return {inv.value * rhs, inv.pseudo};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Public model functions
// ---------------------------------------------------------------------------

inline double log_likelihood(const Dataset& data, const MeanVector& mu, const Matrix& sigma) {
  const auto ws = compute_weights(data, sigma);
  const auto res = detail::residuals(data, data.observed_outcomes(), mu);
  return detail::loglik(data, res, ws);
}

inline double log_likelihood(const Dataset& data, const MeanVector& mu, const HetParams& eta,
                             const CovStructure& structure) {
  return log_likelihood(data, mu, assemble_sigma(eta, structure, data.p()).sigma);
}

/// U(mu, eta) = sum_i W_i (y_i - mu); equals dl/dmu.
inline Vector score_U(const Dataset& data, const MeanVector& mu, const Matrix& sigma) {
  const auto ws = compute_weights(data, sigma);
  const auto res = detail::residuals(data, data.observed_outcomes(), mu);
  return detail::score(data, res, ws);
}

inline Vector score_U(const Dataset& data, const MeanVector& mu, const HetParams& eta,
                      const CovStructure& structure) {
  return score_U(data, mu, assemble_sigma(eta, structure, data.p()).sigma);
}

/// I(eta) = sum_i W_i; does not depend on mu.
inline Matrix information_I(const Dataset& data, const Matrix& sigma) {
  return detail::information(data, compute_weights(data, sigma));
}

inline Matrix information_I(const Dataset& data, const HetParams& eta,
                            const CovStructure& structure) {
  return information_I(data, assemble_sigma(eta, structure, data.p()).sigma);
}

struct SchurComplement {
  double value;
  bool pseudoinverse_used = false;
};

/// J = I_kk - I_kc I_cc^-1 I_ck for the component `k` against the rest.
inline SchurComplement schur_complement(const Matrix& info, Index k) {
  const Index p = info.rows();
  if (k < 0 || k >= p) throw std::out_of_range("component index out of range");
  if (p == 1) return {info(0, 0), false};
  IndexList rest;
  for (Index j = 0; j < p; ++j)
    if (j != k) rest.push_back(j);
  const Matrix icc = gather(info, rest);
  Vector ick(p - 1);
  for (Index a = 0; a < p - 1; ++a) ick(a) = info(rest[static_cast<std::size_t>(a)], k);
  const auto inv = symmetric_inverse(icc);
  const double value = info(k, k) - ick.dot(inv.value * ick);
  return {std::max(0.0, value), inv.pseudo};
}

inline double schur_J_mu1(const Matrix& info) { return schur_complement(info, 0).value; }

}  // namespace mvperm
