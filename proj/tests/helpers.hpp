#pragma once

#include <random>
#include <string>
#include <vector>

#include "mvperm/mvperm.hpp"

namespace testing_helpers {

using namespace mvperm;

inline Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

inline Matrix mat2(double a, double b, double c, double d) {
  Matrix m(2, 2);
  m << a, b, c, d;
  return m;
}

inline StudyRecord full_study(const std::string& id, const Vector& y, const Matrix& s) {
  return StudyRecord(id, y, std::vector<bool>(static_cast<std::size_t>(y.size()), true), s);
}

/// Bivariate toy: N studies with within-study SDs (sa, sb) and correlation r.
inline Dataset bivariate(const std::vector<std::pair<double, double>>& ys,
                         const std::vector<std::pair<double, double>>& sds, double r = 0.0) {
  std::vector<StudyRecord> st;
  for (std::size_t i = 0; i < ys.size(); ++i) {
    const auto [a, b] = sds[i % sds.size()];
    st.push_back(full_study("s" + std::to_string(i + 1), vec({ys[i].first, ys[i].second}),
                            mat2(a * a, r * a * b, r * a * b, b * b)));
  }
  return Dataset(std::move(st));
}

/// Fixed N=5 bivariate dataset used by exhaustive-enumeration checks.
inline Dataset toy5() {
  return bivariate({{0.62, -1.05}, {1.31, -0.48}, {0.18, -1.62}, {0.95, -0.71}, {1.74, -0.12}},
                   {{0.30, 0.25}, {0.22, 0.35}, {0.40, 0.28}, {0.26, 0.31}, {0.35, 0.22}}, 0.3);
}

inline Dataset univariate(const std::vector<double>& y, const std::vector<double>& v) {
  std::vector<StudyRecord> st;
  for (std::size_t i = 0; i < y.size(); ++i) {
    st.push_back(full_study("u" + std::to_string(i + 1), vec({y[i]}), Matrix::Constant(1, 1, v[i])));
  }
  return Dataset(std::move(st));
}

/// Random complete or partially observed dataset for property checks.
inline Dataset random_dataset(std::mt19937_64& rng, std::size_t n, Index p, bool allow_missing) {
  std::normal_distribution<double> z;
  std::uniform_real_distribution<double> u(0.05, 0.6);
  std::uniform_real_distribution<double> c(-0.6, 0.6);
  std::bernoulli_distribution miss(allow_missing ? 0.25 : 0.0);
  while (true) {
    std::vector<StudyRecord> st;
    for (std::size_t i = 0; i < n; ++i) {
      Vector y(p), sd(p);
      for (Index j = 0; j < p; ++j) {
        y(j) = z(rng);
        sd(j) = u(rng);
      }
      Matrix r = Matrix::Identity(p, p);
      const double rho = c(rng);
      for (Index j = 0; j < p; ++j)
        for (Index k = 0; k < p; ++k)
          if (j != k) r(j, k) = rho / static_cast<double>(p - 1);
      std::vector<bool> obs(static_cast<std::size_t>(p));
      bool any = false;
      for (Index j = 0; j < p; ++j) {
        obs[static_cast<std::size_t>(j)] = !miss(rng);
        any = any || obs[static_cast<std::size_t>(j)];
      }
      if (!any) obs[0] = true;
      st.emplace_back("r" + std::to_string(i), y, obs, Matrix(sd.asDiagonal() * r * sd.asDiagonal()));
    }
    try {
      return Dataset(std::move(st));
    } catch (const DataError&) {
      // some outcome never observed; draw again
    }
  }
}

}  // namespace testing_helpers
