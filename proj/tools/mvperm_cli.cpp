// mvperm: command-line front end.
//
// Exit codes: 0 success, 1 usage, 2 data error, 3 non-convergence,
// 4 internal error.

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "mvperm/mvperm.hpp"

using json = nlohmann::ordered_json;
using namespace mvperm;

namespace {

constexpr const char* kSchemaVersion = "1";

struct Globals {
  double alpha = 0.05;
  std::uint64_t seed = 20240101;
  std::string format = "json";
  unsigned threads = 1;
};

struct DataArgs {
  std::string path;
  std::string kind = "wide";
  std::string reference;
  bool no_correction = false;
  std::string structure = "unstructured";
};

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void add_data_options(CLI::App* cmd, DataArgs& d) {
  cmd->add_option("--data", d.path, "Input CSV")->required()->check(CLI::ExistingFile);
  cmd->add_option("--input", d.kind, "Input schema")
      ->check(CLI::IsMember({"wide", "diagnostic", "nma"}))
      ->capture_default_str();
  cmd->add_option("--reference", d.reference, "Reference treatment (nma input)");
  cmd->add_flag("--no-correction", d.no_correction, "Reject zero cells instead of correcting them");
  cmd->add_option("--structure", d.structure, "unstructured | cs:<kappa> | cs1:<kappa>")
      ->capture_default_str();
}

Ingested load(const DataArgs& d) {
  if (d.kind == "diagnostic") return ingest_diagnostic(d.path, !d.no_correction);
  if (d.kind == "nma") {
    if (d.reference.empty()) throw UsageError("--reference is required for nma input");
    return ingest_nma(d.path, d.reference);
  }
  return ingest_wide(d.path);
}

CovStructure structure_of(const DataArgs& d) {
  try {
    return CovStructure::parse(d.structure);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

Scale default_scale(const DataArgs& d) {
  if (d.kind == "diagnostic") return Scale::Logit;
  if (d.kind == "nma") return Scale::Log;
  return Scale::Identity;
}

PermutationPlan plan_of(const std::string& perm, std::uint64_t seed) {
  if (perm == "exhaustive") return PermutationPlan::exhaustive();
  try {
    std::size_t pos = 0;
    const auto b = std::stoull(perm, &pos);
    if (pos != perm.size()) throw std::invalid_argument(perm);
    return PermutationPlan::random(b, seed);
  } catch (const std::logic_error&) {
    throw UsageError("--perm must be 'exhaustive' or a number of draws");
  }
}

double parse_number(const std::string& s, const char* what) {
  try {
    return csv::to_double(s, 0, what);
  } catch (const DataError&) {
    throw UsageError(std::string("--") + what + ": '" + s + "' is not a number");
  }
}

std::vector<double> parse_numbers(const std::string& s, const char* what) {
  std::vector<double> v;
  for (const auto& part : csv::split(s, ',')) v.push_back(parse_number(part, what));
  return v;
}

Index resolve_component(const Dataset& data, const std::string& c) {
  const auto& lab = data.labels();
  for (std::size_t j = 0; j < lab.size(); ++j)
    if (lab[j] == c) return static_cast<Index>(j);
  try {
    std::size_t pos = 0;
    const long v = std::stol(c, &pos);
    if (pos == c.size() && v >= 1 && v <= data.p()) return static_cast<Index>(v - 1);
  } catch (const std::logic_error&) {
  }
  throw UsageError("unknown component '" + c + "' (use a label or a 1-based index)");
}

json vec(const Vector& v) {
  json a = json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

json mat(const Matrix& m) {
  json a = json::array();
  for (Index i = 0; i < m.rows(); ++i) a.push_back(vec(m.row(i).transpose()));
  return a;
}

json eta_json(const HetParams& h) {
  json j;
  j["tau"] = vec(h.tau);
  if (h.kappa.size() > 0) j["kappa"] = mat(h.kappa);
  return j;
}

json envelope(const std::string& command, const Globals& g) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["command"] = command;
  j["alpha"] = g.alpha;
  j["seed"] = g.seed;
  return j;
}

json data_summary(const Ingested& in) {
  json j;
  j["studies"] = in.data.size();
  j["outcomes"] = in.data.labels();
  j["complete"] = in.data.complete();
  j["warnings"] = in.warnings;
  return j;
}

void emit(const json& j) { std::cout << j.dump(2) << "\n"; }

void emit_kv_csv(const std::vector<std::pair<std::string, std::string>>& kv) {
  for (std::size_t i = 0; i < kv.size(); ++i) std::cout << (i ? "," : "") << csv::escape(kv[i].first);
  std::cout << "\n";
  for (std::size_t i = 0; i < kv.size(); ++i) std::cout << (i ? "," : "") << csv::escape(kv[i].second);
  std::cout << "\n";
}

void warn(const Ingested& in) {
  for (const auto& w : in.warnings) std::cerr << "warning: " << w << "\n";
}

json test_json(const TestResult& t, double alpha) {
  json j;
  j["statistic"] = t.statistic_obs;
  j["p_value"] = t.p_value;
  j["count_at_least"] = t.count_at_least;
  j["reference_size"] = t.distribution.reference_size();
  j["threshold"] = t.threshold(alpha);
  j["accepted"] = t.accepts(alpha);
  j["mode"] = t.distribution.mode() == PermutationPlan::Mode::Exhaustive ? "exhaustive" : "random";
  j["failed_permutations"] = t.failed_permutations;
  j["refits"] = t.refits;
  j["pseudoinverse_used"] = t.pseudoinverse_used;
  j["center"] = vec(t.center);
  j["eta"] = eta_json(t.eta);
  return j;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Permutation inference for multivariate random-effects meta-analysis"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--alpha", g.alpha, "Significance level")->check(CLI::Range(1e-9, 1.0 - 1e-9))->capture_default_str();
  app.add_option("--seed", g.seed, "Seed for random sign draws and simulations")->capture_default_str();
  app.add_option("--format", g.format, "Output format")->check(CLI::IsMember({"json", "csv"}))->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber)->capture_default_str();

  DataArgs d;
  std::string method = "ml", perm = "2400", stat = "t1", mu_null, component = "1", axes, bounds, scale;
  std::string scenario, manifest, methods = "perm-t1";
  double mu1_null = 0.0;
  std::size_t resolution = 40, reps = 500;

  auto* fit = app.add_subcommand("fit", "ML or REML fit with Wald intervals");
  add_data_options(fit, d);
  fit->add_option("--method", method)->check(CLI::IsMember({"ml", "reml"}))->capture_default_str();

  auto* tj = app.add_subcommand("test-joint", "Joint sign-flip test of mu = mu_null");
  add_data_options(tj, d);
  tj->add_option("--mu-null", mu_null, "Comma-separated null mean (default 0)");
  tj->add_option("--stat", stat)->check(CLI::IsMember({"t1", "t2"}))->capture_default_str();
  tj->add_option("--perm", perm, "'exhaustive' or number of random draws")->capture_default_str();

  auto* tm = app.add_subcommand("test-marginal", "Marginal test of one mean component");
  add_data_options(tm, d);
  tm->add_option("--component", component, "Outcome label or 1-based index")->capture_default_str();
  tm->add_option("--mu1-null", mu1_null)->required();
  tm->add_option("--perm", perm)->capture_default_str();

  auto* ci = app.add_subcommand("ci", "Confidence interval and median-unbiased estimate");
  add_data_options(ci, d);
  ci->add_option("--component", component)->capture_default_str();
  ci->add_option("--perm", perm)->capture_default_str();
  ci->add_option("--scale", scale, "Reporting scale: identity | logit | log (default by input)");

  auto* rg = app.add_subcommand("region", "Joint confidence region on a lattice");
  add_data_options(rg, d);
  rg->add_option("--axes", axes, "Comma-separated outcome labels, all outcomes (default: data order)");
  rg->add_option("--bounds", bounds, "lo:hi per axis, comma-separated (default: inflated Wald box)");
  rg->add_option("--resolution", resolution)->check(CLI::Range(20, 100000))->capture_default_str();
  rg->add_option("--stat", stat)->check(CLI::IsMember({"t1", "t2"}))->capture_default_str();
  rg->add_option("--perm", perm)->capture_default_str();

  auto* sim = app.add_subcommand("simulate", "Coverage experiment");
  sim->add_option("--scenario", scenario, "Scenario name")->required();
  sim->add_option("--manifest", manifest, "Scenario manifest CSV (default: built-in presets)");
  sim->add_option("--reps", reps)->check(CLI::Range(100, 100000000))->capture_default_str();
  sim->add_option("--method", methods, "Comma-separated: ml-wald, reml-wald, perm-t1, perm-t2, perm-t3")
      ->capture_default_str();
  sim->add_option("--perm", perm)->capture_default_str();
  sim->add_option("--component", component, "1-based outcome index for perm-t3")->capture_default_str();
  sim->add_option("--structure", d.structure)->capture_default_str();

  auto* ic = app.add_subcommand("ingest-check", "Validate an input file and summarize it");
  add_data_options(ic, d);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    TestOptions topts;
    topts.threads = g.threads;

    if (*ic) {
      const auto in = load(d);
      warn(in);
      std::size_t missing = 0;
      for (const auto& s : in.data.studies())
        missing += static_cast<std::size_t>(in.data.p() - static_cast<Index>(s.observed_indices().size()));
      if (g.format == "csv") {
        emit_kv_csv({{"studies", std::to_string(in.data.size())},
                     {"outcomes", std::to_string(in.data.p())},
                     {"missing_cells", std::to_string(missing)},
                     {"corrected", std::to_string(in.corrected.size())}});
      } else {
        json j = envelope("ingest-check", g);
        j["data"] = data_summary(in);
        j["missing_cells"] = missing;
        j["corrected"] = in.corrected;
        emit(j);
      }
      return 0;
    }

    if (*fit) {
      const auto in = load(d);
      warn(in);
      const auto cs = structure_of(d);
      const auto r = method == "ml" ? fit_ml(in.data, cs) : fit_reml(in.data, cs);
      const auto w = wald_inference(r, g.alpha);
      if (g.format == "csv") {
        std::cout << "outcome,estimate,se,lower,upper,tau\n";
        for (Index j = 0; j < in.data.p(); ++j) {
          std::cout << csv::escape(in.data.labels()[static_cast<std::size_t>(j)]) << ","
                    << format_double(r.mu_hat(j)) << "," << format_double(w.se(j)) << ","
                    << format_double(w.lower(j)) << "," << format_double(w.upper(j)) << ","
                    << format_double(r.eta_hat.tau(j)) << "\n";
        }
      } else {
        json j = envelope("fit", g);
        j["data"] = data_summary(in);
        j["method"] = method;
        j["structure"] = cs.to_string();
        j["mu_hat"] = vec(r.mu_hat);
        j["se"] = vec(w.se);
        j["wald_lower"] = vec(w.lower);
        j["wald_upper"] = vec(w.upper);
        j["eta"] = eta_json(r.eta_hat);
        j["sigma"] = mat(r.sigma_hat);
        j["loglik"] = r.loglik;
        j["objective"] = r.objective;
        j["iterations"] = r.iterations;
        j["converged"] = r.converged;
        j["pseudoinverse_used"] = r.pseudoinverse_used;
        emit(j);
      }
      return 0;
    }

    if (*tj) {
      const auto in = load(d);
      warn(in);
      const auto cs = structure_of(d);
      MeanVector mu0 = MeanVector::Zero(in.data.p());
      if (!mu_null.empty()) {
        const auto v = parse_numbers(mu_null, "mu-null");
        if (static_cast<Index>(v.size()) != in.data.p()) throw UsageError("--mu-null needs one value per outcome");
        for (std::size_t i = 0; i < v.size(); ++i) mu0(static_cast<Index>(i)) = v[i];
      }
      const auto t = joint_permutation_test(in.data, mu0, plan_of(perm, g.seed),
                                            stat == "t1" ? JointStatistic::T1 : JointStatistic::T2, cs, topts);
      if (g.format == "csv") {
        emit_kv_csv({{"statistic", format_double(t.statistic_obs)},
                     {"p_value", format_double(t.p_value)},
                     {"threshold", format_double(t.threshold(g.alpha))},
                     {"accepted", t.accepts(g.alpha) ? "1" : "0"}});
      } else {
        json j = envelope("test-joint", g);
        j["data"] = data_summary(in);
        j["stat"] = stat;
        j["mu_null"] = vec(mu0);
        j["result"] = test_json(t, g.alpha);
        j["p_value"] = t.p_value;
        emit(j);
      }
      return 0;
    }

    if (*tm) {
      const auto in = load(d);
      warn(in);
      const auto cs = structure_of(d);
      const Index k = resolve_component(in.data, component);
      const auto t = marginal_permutation_test(in.data, mu1_null, k, plan_of(perm, g.seed), cs, topts);
      if (g.format == "csv") {
        emit_kv_csv({{"component", in.data.labels()[static_cast<std::size_t>(k)]},
                     {"statistic", format_double(t.statistic_obs)},
                     {"p_value", format_double(t.p_value)},
                     {"threshold", format_double(t.threshold(g.alpha))},
                     {"accepted", t.accepts(g.alpha) ? "1" : "0"}});
      } else {
        json j = envelope("test-marginal", g);
        j["data"] = data_summary(in);
        j["component"] = in.data.labels()[static_cast<std::size_t>(k)];
        j["mu1_null"] = mu1_null;
        j["result"] = test_json(t, g.alpha);
        j["result"]["signed_statistic"] = t.signed_obs;
        j["result"]["signed_p_value"] = t.signed_p_value;
        j["p_value"] = t.p_value;
        emit(j);
      }
      return 0;
    }

    if (*ci) {
      const auto in = load(d);
      warn(in);
      const auto cs = structure_of(d);
      const Index k = resolve_component(in.data, component);
      Scale sc = default_scale(d);
      if (!scale.empty()) {
        try {
          sc = parse_scale(scale);
        } catch (const std::invalid_argument& e) {
          throw UsageError(e.what());
        }
      }
      const auto iv = confidence_interval(in.data, k, g.alpha, plan_of(perm, g.seed), cs, topts, {}, sc);
      auto side = [](const BoundDiagnostics& b) {
        json j;
        j["crossing_found"] = b.crossing_found;
        j["monotone_crossing"] = b.monotone_crossing;
        json tr = json::array();
        for (const auto& p : b.trace) tr.push_back({{"m", p.m}, {"p_value", p.p_value}, {"accepted", p.accepted}});
        j["scan_trace"] = tr;
        return j;
      };
      if (g.format == "csv") {
        emit_kv_csv({{"component", in.data.labels()[static_cast<std::size_t>(k)]},
                     {"estimate", format_double(iv.estimate)},
                     {"lower", format_double(iv.lower)},
                     {"upper", format_double(iv.upper)},
                     {"scale", to_string(sc)},
                     {"estimate_reported", format_double(iv.estimate_reported())},
                     {"lower_reported", format_double(iv.lower_reported())},
                     {"upper_reported", format_double(iv.upper_reported())}});
      } else {
        json j = envelope("ci", g);
        j["data"] = data_summary(in);
        j["component"] = in.data.labels()[static_cast<std::size_t>(k)];
        j["estimate"] = iv.estimate;
        j["lower"] = iv.lower;
        j["upper"] = iv.upper;
        j["estimate_fallback"] = iv.estimate_fallback;
        j["reported"] = {{"scale", to_string(sc)},
                         {"estimate", iv.estimate_reported()},
                         {"lower", iv.lower_reported()},
                         {"upper", iv.upper_reported()}};
        j["wald_se"] = iv.wald_se;
        j["lower_side"] = side(iv.lower_side);
        j["upper_side"] = side(iv.upper_side);
        emit(j);
      }
      return 0;
    }

    if (*rg) {
      const auto in = load(d);
      warn(in);
      const auto cs = structure_of(d);
      IndexList ax;
      if (axes.empty()) {
        for (Index j = 0; j < in.data.p(); ++j) ax.push_back(j);
      } else {
        for (const auto& a : csv::split(axes, ',')) ax.push_back(resolve_component(in.data, a));
      }
      std::vector<Bounds> bd;
      if (bounds.empty()) {
        const auto all = default_region_bounds(in.data, cs);
        for (auto a : ax) bd.push_back(all[static_cast<std::size_t>(a)]);
      } else {
        for (const auto& part : csv::split(bounds, ',')) {
          const auto lh = csv::split(part, ':');
          if (lh.size() != 2) throw UsageError("--bounds expects lo:hi pairs");
          bd.push_back({parse_number(lh[0], "bounds"), parse_number(lh[1], "bounds")});
        }
      }
      const auto grid = confidence_region(in.data, ax, g.alpha, bd, resolution, stat == "t1" ? JointStatistic::T1 : JointStatistic::T2,
                                          plan_of(perm, g.seed), cs, topts);
      if (g.format == "csv") {
        write_region_csv(std::cout, grid, in.data.labels());
      } else {
        json j = envelope("region", g);
        j["data"] = data_summary(in);
        j["stat"] = stat;
        json axj = json::array();
        for (auto a : ax) axj.push_back(in.data.labels()[static_cast<std::size_t>(a)]);
        j["axes"] = axj;
        j["resolution"] = resolution;
        j["accepted"] = grid.accepted_count();
        json pts = json::array();
        for (const auto& p : grid.points) {
          pts.push_back({{"mu_null", vec(p.mu_null)}, {"statistic", p.statistic}, {"threshold", p.threshold},
                         {"accepted", p.accepted}, {"p_value", p.p_value}, {"failed", p.failed}});
        }
        j["points"] = pts;
        emit(j);
      }
      return 0;
    }

    if (*sim) {
      const auto list = manifest.empty() ? builtin_scenarios() : read_scenarios(manifest);
      const Scenario* sc = nullptr;
      try {
        sc = &find_scenario(scenario, list);
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      CoverageOptions co;
      co.alpha = g.alpha;
      co.structure = structure_of(d);
      co.threads = g.threads;
      try {
        const long c = std::stol(component);
        if (c < 1 || c > sc->p()) throw std::out_of_range(component);
        co.component = static_cast<Index>(c - 1);
      } catch (const std::logic_error&) {
        throw UsageError("--component must be a 1-based outcome index");
      }
      std::vector<Method> ms;
      for (const auto& m : csv::split(methods, ',')) {
        try {
          ms.push_back(parse_method(m));
        } catch (const std::invalid_argument& e) {
          throw UsageError(e.what());
        }
      }
      const auto plan = plan_of(perm, g.seed);
      std::vector<CoverageReport> reports;
      for (auto m : ms) reports.push_back(coverage_experiment(*sc, m, reps, plan, g.seed, co));
      if (g.format == "csv") {
        write_coverage_header(std::cout);
        for (const auto& r : reports) write_coverage_row(std::cout, r);
      } else {
        json j = envelope("simulate", g);
        j["scenario"] = sc->name;
        json rs = json::array();
        for (const auto& r : reports) {
          rs.push_back({{"method", to_string(r.method)}, {"replications", r.replications},
                        {"evaluated", r.evaluated}, {"covered", r.covered}, {"failures", r.failures},
                        {"refused", r.refused}, {"coverage", r.coverage}, {"se", r.se}});
        }
        j["reports"] = rs;
        emit(j);
      }
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const NonConvergenceError& e) {
    std::cerr << "non-convergence: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 4;
  }
  return 4;
}
