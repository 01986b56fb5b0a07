#pragma once

// CSV ingestion (effect-size tables, diagnostic 2x2 counts, arm-level NMA
// data) and CSV writers for datasets, region grids and coverage reports.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mvperm/csv.hpp"
#include "mvperm/errors.hpp"
#include "mvperm/inference.hpp"
#include "mvperm/model.hpp"
#include "mvperm/simulation.hpp"

namespace mvperm {

struct Ingested {
  Dataset data;
  std::vector<std::string> warnings;
  /// Ids of studies that received a continuity correction.
  std::vector<std::string> corrected;
};

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace detail {

inline std::size_t id_column(const csv::Table& t) {
  for (const char* c : {"id", "study"})
    if (auto col = t.column(c)) return *col;
  throw DataError("missing 'id' (or 'study') column");
}

inline std::size_t require(const csv::Table& t, const std::string& name) {
  if (auto c = t.column(name)) return *c;
  throw DataError("missing column '" + name + "'");
}

inline std::string at_line(std::size_t line) { return "line " + std::to_string(line) + ": "; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Wide effect-size table
// ---------------------------------------------------------------------------

/// Columns: id, then y_<L> and se_<L> (or var_<L>) per outcome L, optional
/// rho_<L1>_<L2>. A blank y marks the outcome as unreported for that study.
/// Absent rho columns mean zero within-study correlation and add a warning.
inline Ingested ingest_wide(const csv::Table& t) {
  const std::size_t idc = detail::id_column(t);
  std::vector<std::string> labels;
  for (const auto& h : t.header)
    if (h.size() > 2 && h.rfind("y_", 0) == 0) labels.push_back(h.substr(2));
  if (labels.empty()) throw DataError("no outcome columns (y_<label>) found");
  const std::size_t p = labels.size();

  std::vector<std::size_t> ycol(p), scol(p);
  std::vector<bool> is_var(p);
  for (std::size_t j = 0; j < p; ++j) {
    ycol[j] = *t.column("y_" + labels[j]);
    const auto se = t.column("se_" + labels[j]);
    const auto var = t.column("var_" + labels[j]);
    if (se.has_value() == var.has_value()) {
      throw DataError("outcome '" + labels[j] + "' needs exactly one of se_" + labels[j] + ", var_" + labels[j]);
    }
    scol[j] = se ? *se : *var;
    is_var[j] = var.has_value();
  }
  std::vector<std::string> warnings, corrected;
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> rcol;
  for (std::size_t j = 0; j < p; ++j) {
    for (std::size_t k = j + 1; k < p; ++k) {
      auto c = t.column("rho_" + labels[j] + "_" + labels[k]);
      if (!c) c = t.column("rho_" + labels[k] + "_" + labels[j]);
      if (c) {
        rcol[{j, k}] = *c;
      } else {
        warnings.push_back("no rho column for (" + labels[j] + ", " + labels[k] +
                               "): within-study correlation set to 0");
      }
    }
  }

  std::vector<StudyRecord> studies;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const std::size_t line = t.lines[r];
    Vector y = Vector::Zero(static_cast<Index>(p));
    Vector var = Vector::Ones(static_cast<Index>(p));
    std::vector<bool> obs(p, false);
    for (std::size_t j = 0; j < p; ++j) {
      if (row[ycol[j]].empty()) continue;
      obs[j] = true;
      y(static_cast<Index>(j)) = csv::to_double(row[ycol[j]], line, t.header[ycol[j]]);
      const double v = csv::to_double(row[scol[j]], line, t.header[scol[j]]);
      if (!(v > 0.0)) throw DataError(detail::at_line(line) + t.header[scol[j]] + " must be positive");
      var(static_cast<Index>(j)) = is_var[j] ? v : v * v;
    }
    const Vector sd = var.cwiseSqrt();
    Matrix s = var.asDiagonal();
    for (const auto& [jk, c] : rcol) {
      const auto [j, k] = jk;
      if (!obs[j] || !obs[k] || row[c].empty()) continue;
      const double rho = csv::to_double(row[c], line, t.header[c]);
      if (std::abs(rho) > 1.0) throw DataError(detail::at_line(line) + t.header[c] + " must lie in [-1, 1]");
      const auto J = static_cast<Index>(j), K = static_cast<Index>(k);
      s(J, K) = s(K, J) = rho * sd(J) * sd(K);
    }
    try {
      studies.emplace_back(row[idc], y, obs, s);
    } catch (const DataError& e) {
      throw DataError(detail::at_line(line) + "study '" + row[idc] + "': " + e.what());
    }
  }
  if (studies.size() < 2) throw DataError("at least two studies are required");
  return Ingested{Dataset(std::move(studies), labels), std::move(warnings), std::move(corrected)};
}

inline Ingested ingest_wide(const std::string& path) { return ingest_wide(csv::read_file(path)); }

/// Wide table with var_ and rho_ columns at full precision; unreported
/// outcomes are blank. Re-ingesting reproduces the dataset.
inline void write_wide(std::ostream& os, const Dataset& data) {
  const Index p = data.p();
  const auto& lab = data.labels();
  os << "id";
  for (Index j = 0; j < p; ++j) os << ",y_" << lab[j] << ",var_" << lab[j];
  for (Index j = 0; j < p; ++j)
    for (Index k = j + 1; k < p; ++k) os << ",rho_" << lab[j] << "_" << lab[k];
  os << "\n";
  for (const auto& st : data.studies()) {
    const auto& o = st.observed();
    os << csv::escape(st.id());
    for (Index j = 0; j < p; ++j) {
      if (o[static_cast<std::size_t>(j)]) {
        os << "," << format_double(st.y()(j)) << "," << format_double(st.S()(j, j));
      } else {
        os << ",,";
      }
    }
    for (Index j = 0; j < p; ++j) {
      for (Index k = j + 1; k < p; ++k) {
        os << ",";
        if (o[static_cast<std::size_t>(j)] && o[static_cast<std::size_t>(k)]) {
          os << format_double(st.S()(j, k) / std::sqrt(st.S()(j, j) * st.S()(k, k)));
        }
      }
    }
    os << "\n";
  }
}

// ---------------------------------------------------------------------------
// Diagnostic 2x2 counts
// ---------------------------------------------------------------------------

/// Columns id, TP, FN, TN, FP. Outcomes are logit sensitivity and logit FPR
/// with variances {X(n-X)/n}^-1 and zero within-study correlation. When
/// X = 0 or X = n the outcome uses X + 0.5 and n + 1 (if `correction`);
/// without correction such studies are rejected.
inline Ingested ingest_diagnostic(const csv::Table& t, bool correction = true) {
  const std::size_t idc = detail::id_column(t);
  const std::size_t tp = detail::require(t, "TP"), fn = detail::require(t, "FN"),
                    tn = detail::require(t, "TN"), fp = detail::require(t, "FP");
  std::vector<std::string> warnings, corrected;
  std::vector<StudyRecord> studies;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const std::size_t line = t.lines[r];
    auto count = [&](std::size_t c) {
      const long long v = csv::to_integer(row[c], line, t.header[c]);
      if (v < 0) throw DataError(detail::at_line(line) + t.header[c] + " must be nonnegative");
      return static_cast<double>(v);
    };
    const double a = count(tp), b = count(fn), c = count(tn), d = count(fp);
    if (a + b < 1.0) throw DataError(detail::at_line(line) + "TP + FN is zero");
    if (c + d < 1.0) throw DataError(detail::at_line(line) + "TN + FP is zero");
    bool fix1 = false, fix2 = false;
    const auto [y1, v1] = detail::logit_estimate(a, a + b, &fix1);
    const auto [y2, v2] = detail::logit_estimate(d, c + d, &fix2);
    if ((fix1 || fix2) && !correction) {
      throw DataError(detail::at_line(line) + "zero or full cell and continuity correction disabled");
    }
    if (fix1 || fix2) corrected.push_back(row[idc]);
    Vector y(2);
    y << y1, y2;
    Matrix s = Matrix::Zero(2, 2);
    s(0, 0) = v1;
    s(1, 1) = v2;
    studies.emplace_back(row[idc], y, std::vector<bool>{true, true}, s);
  }
  if (studies.size() < 2) throw DataError("at least two studies are required");
  if (!corrected.empty()) {
    warnings.push_back(std::to_string(corrected.size()) + " studies received a continuity correction");
  }
  return Ingested{Dataset(std::move(studies), {"sens", "fpr"}), std::move(warnings), std::move(corrected)};
}

inline Ingested ingest_diagnostic(const std::string& path, bool correction = true) {
  return ingest_diagnostic(csv::read_file(path), correction);
}

// ---------------------------------------------------------------------------
// Arm-level network meta-analysis
// ---------------------------------------------------------------------------

/// Relative size of the pseudo reference arm added to studies that lack the
/// reference treatment.
inline constexpr double kAugmentWeight = 1e-3;

/// Columns study, treatment, events, total. Outcomes are log odds ratios of
/// every other treatment against `reference`, in order of first appearance.
/// Log ORs sharing an arm covary by that arm's 1/events + 1/non-events.
/// A study without the reference arm gets a pseudo reference arm carrying
/// kAugmentWeight of the study's average arm, so its contrasts among present
/// treatments keep their precision while the reference contrast carries
/// almost none. Any zero or full cell adds 0.5 to every cell of the study.
inline Ingested ingest_nma(const csv::Table& t, const std::string& reference) {
  const std::size_t sc = detail::require(t, "study"), tc = detail::require(t, "treatment"),
                    ec = detail::require(t, "events"), nc = detail::require(t, "total");
  struct Arm {
    std::string treatment;
    double events, total;
  };
  std::vector<std::string> order;  // study ids
  std::map<std::string, std::vector<Arm>> arms;
  std::vector<std::string> treatments;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const std::size_t line = t.lines[r];
    const long long e = csv::to_integer(row[ec], line, "events");
    const long long n = csv::to_integer(row[nc], line, "total");
    if (e < 0 || n < e || n < 1) throw DataError(detail::at_line(line) + "need total >= events >= 0, total >= 1");
    const auto& id = row[sc];
    const auto& tr = row[tc];
    if (id.empty() || tr.empty()) throw DataError(detail::at_line(line) + "blank study or treatment");
    if (!arms.count(id)) order.push_back(id);
    for (const auto& a : arms[id])
      if (a.treatment == tr) throw DataError(detail::at_line(line) + "duplicate arm '" + tr + "' in study '" + id + "'");
    arms[id].push_back({tr, static_cast<double>(e), static_cast<double>(n)});
    if (std::find(treatments.begin(), treatments.end(), tr) == treatments.end()) treatments.push_back(tr);
  }
  if (std::find(treatments.begin(), treatments.end(), reference) == treatments.end()) {
    throw DataError("reference treatment '" + reference + "' does not appear in any study");
  }
  std::vector<std::string> labels;
  for (const auto& tr : treatments)
    if (tr != reference) labels.push_back(tr);
  if (labels.empty()) throw DataError("the network has no treatment besides the reference");
  const auto p = static_cast<Index>(labels.size());

  // Connectivity via union-find over treatments.
  std::map<std::string, std::string> parent;
  for (const auto& tr : treatments) parent[tr] = tr;
  auto find = [&](std::string x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (const auto& id : order) {
    const auto& a = arms[id];
    if (a.size() < 2) throw DataError("study '" + id + "' has a single arm");
    for (std::size_t i = 1; i < a.size(); ++i) parent[find(a[i].treatment)] = find(a[0].treatment);
  }
  for (const auto& tr : treatments)
    if (find(tr) != find(reference)) throw DataError("treatment network is disconnected ('" + tr + "')");

  std::vector<std::string> warnings, corrected;
  std::vector<StudyRecord> studies;
  std::size_t augmented = 0;
  for (const auto& id : order) {
    auto a = arms[id];
    const bool zero = std::any_of(a.begin(), a.end(), [](const Arm& x) { return x.events == 0.0 || x.events == x.total; });
    if (zero) {
      for (auto& x : a) {
        x.events += 0.5;
        x.total += 1.0;
      }
      corrected.push_back(id);
    }
    auto ref = std::find_if(a.begin(), a.end(), [&](const Arm& x) { return x.treatment == reference; });
    Arm base;
    if (ref != a.end()) {
      base = *ref;
    } else {
      double le = 0.0, ln = 0.0;
      for (const auto& x : a) {
        le += x.events;
        ln += x.total;
      }
      le /= static_cast<double>(a.size());
      ln /= static_cast<double>(a.size());
      base = {reference, kAugmentWeight * le, kAugmentWeight * ln};
      ++augmented;
    }
    const double base_logit = std::log(base.events / (base.total - base.events));
    const double base_var = 1.0 / base.events + 1.0 / (base.total - base.events);
    Vector y = Vector::Zero(p);
    std::vector<bool> obs(static_cast<std::size_t>(p), false);
    Matrix s = Matrix::Identity(p, p);
    for (const auto& x : a) {
      if (x.treatment == reference) continue;
      const auto j = static_cast<Index>(std::find(labels.begin(), labels.end(), x.treatment) - labels.begin());
      obs[static_cast<std::size_t>(j)] = true;
      y(j) = std::log(x.events / (x.total - x.events)) - base_logit;
      s(j, j) = 1.0 / x.events + 1.0 / (x.total - x.events) + base_var;
    }
    for (Index j = 0; j < p; ++j)
      for (Index k = 0; k < p; ++k)
        if (j != k && obs[static_cast<std::size_t>(j)] && obs[static_cast<std::size_t>(k)]) s(j, k) = base_var;
    studies.emplace_back(id, y, obs, s);
  }
  if (studies.size() < 2) throw DataError("at least two studies are required");
  if (augmented) {
    warnings.push_back(std::to_string(augmented) + " studies lack the reference arm and were augmented");
  }
  if (!corrected.empty()) {
    warnings.push_back(std::to_string(corrected.size()) + " studies received a 0.5 zero-cell correction");
  }
  return Ingested{Dataset(std::move(studies), labels), std::move(warnings), std::move(corrected)};
}

inline Ingested ingest_nma(const std::string& path, const std::string& reference) {
  return ingest_nma(csv::read_file(path), reference);
}

// ---------------------------------------------------------------------------
// Result writers
// ---------------------------------------------------------------------------

/// Columns: one per axis (named by outcome label), statistic, threshold,
/// accepted, p_value, failed.
inline void write_region_csv(std::ostream& os, const RegionGrid& g, const std::vector<std::string>& labels) {
  for (auto a : g.axes) os << csv::escape(labels[static_cast<std::size_t>(a)]) << ",";
  os << "statistic,threshold,accepted,p_value,failed\n";
  for (const auto& pt : g.points) {
    for (auto a : g.axes) os << format_double(pt.mu_null(a)) << ",";
    if (pt.failed) {
      os << ",,0,,1\n";
      continue;
    }
    os << format_double(pt.statistic) << "," << format_double(pt.threshold) << ","
       << (pt.accepted ? 1 : 0) << "," << format_double(pt.p_value) << ",0\n";
  }
}

inline void write_coverage_header(std::ostream& os) {
  os << "scenario,method,replications,evaluated,covered,failures,refused,coverage,se\n";
}

inline void write_coverage_row(std::ostream& os, const CoverageReport& r) {
  os << csv::escape(r.scenario) << "," << to_string(r.method) << "," << r.replications << ","
     << r.evaluated << "," << r.covered << "," << r.failures << "," << r.refused << ","
     << format_double(r.coverage) << "," << format_double(r.se) << "\n";
}

inline std::vector<Scenario> read_scenarios(const std::string& path) {
  return parse_scenarios(csv::read_file(path));
}

}  // namespace mvperm
