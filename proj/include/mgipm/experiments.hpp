#pragma once

// Config-driven experiment runners and their CSV artifacts.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mgipm/diagnostics.hpp"
#include "mgipm/error.hpp"
#include "mgipm/grid.hpp"
#include "mgipm/ipm.hpp"
#include "mgipm/operators.hpp"

namespace mgipm {

enum class ExperimentKind { Parabolic1D, Elliptic2D, SpectralTable };

inline std::string to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::Parabolic1D: return "parabolic-1d";
    case ExperimentKind::Elliptic2D: return "elliptic-2d";
    default: return "spectral-table";
  }
}

struct ExperimentConfig {
  ExperimentKind experiment = ExperimentKind::Parabolic1D;
  int finest_n = 1024;
  int levels = 1;
  double beta = 1e-3;
  double lo = 0.0;
  double hi = 1.0;
  std::string bounds_file;  // optional per-node "lo,hi" lines on the finest level
  ParabolicConfig parabolic;
  EllipticConfig elliptic;
  IpmOptions ipm;
  std::string output_dir = "out";
  unsigned seed = 0;
  // spectral table
  std::vector<int> spectral_n = {80, 160, 320, 640};
  std::vector<double> spectral_beta = {1.0, 0.1, 0.01};
  std::string lambda_rule = "sin-pi";  // sin-pi: sin(pi x) + beta; sin: sin(x) + beta
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size() || !std::isfinite(d)) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a real number, got '" + v + "'");
  }
}

inline int parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long d = std::stol(v, &pos);
    if (pos != v.size() || d < std::numeric_limits<int>::min() || d > std::numeric_limits<int>::max())
      throw std::invalid_argument(v);
    return static_cast<int>(d);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + v + "'");
}

template <class T, class F>
std::vector<T> parse_list(const std::string& v, F&& one) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(one(trim(item)));
  return out;
}

}  // namespace detail

/// Sets one key. Unknown keys are errors.
inline void set_config_value(ExperimentConfig& c, const std::string& key, const std::string& v) {
  using namespace detail;
  if (key == "experiment") {
    if (v == "parabolic-1d") c.experiment = ExperimentKind::Parabolic1D;
    else if (v == "elliptic-2d") c.experiment = ExperimentKind::Elliptic2D;
    else if (v == "spectral-table") c.experiment = ExperimentKind::SpectralTable;
    else throw ConfigError("unknown experiment '" + v + "'");
  } else if (key == "finest_n") c.finest_n = parse_int(key, v);
  else if (key == "levels") c.levels = parse_int(key, v);
  else if (key == "beta") c.beta = parse_double(key, v);
  else if (key == "lo") c.lo = parse_double(key, v);
  else if (key == "hi") c.hi = parse_double(key, v);
  else if (key == "bounds_file") c.bounds_file = v;
  else if (key == "a") c.parabolic.a = parse_double(key, v);
  else if (key == "b") c.parabolic.b = parse_double(key, v);
  else if (key == "c") c.parabolic.c = parse_double(key, v);
  else if (key == "T") c.parabolic.T = parse_double(key, v);
  else if (key == "c1") c.parabolic.c1 = parse_double(key, v);
  else if (key == "inner_solver") {
    if (v == "auto") c.elliptic.inner_solver = EllipticConfig::InnerSolver::Auto;
    else if (v == "direct-factorization") c.elliptic.inner_solver = EllipticConfig::InnerSolver::DirectFactorization;
    else if (v == "cg") c.elliptic.inner_solver = EllipticConfig::InnerSolver::ConjugateGradient;
    else throw ConfigError("unknown inner_solver '" + v + "'");
  } else if (key == "inner_tol") c.elliptic.inner_tol = parse_double(key, v);
  else if (key == "direct_max_cells") c.elliptic.direct_max_cells = parse_int(key, v);
  else if (key == "mu_tol") c.ipm.mu_tol = parse_double(key, v);
  else if (key == "resid_tol") c.ipm.resid_tol = parse_double(key, v);
  else if (key == "max_outer") c.ipm.max_outer = parse_int(key, v);
  else if (key == "tau") c.ipm.tau = parse_double(key, v);
  else if (key == "sigma_min") c.ipm.sigma_min = parse_double(key, v);
  else if (key == "common_step_length") c.ipm.common_step_length = parse_bool(key, v);
  else if (key == "start_multiplier") c.ipm.start_multiplier = parse_double(key, v);
  else if (key == "cg_fallback") c.ipm.cg_fallback = parse_bool(key, v);
  else if (key == "cgs_variant") {
    if (v == "left") c.ipm.krylov.cgs_variant = CgsVariant::Left;
    else if (v == "right") c.ipm.krylov.cgs_variant = CgsVariant::Right;
    else throw ConfigError("unknown cgs_variant '" + v + "'");
  } else if (key == "krylov_tol") c.ipm.krylov.tol = parse_double(key, v);
  else if (key == "krylov_maxit") c.ipm.krylov.maxit = parse_int(key, v);
  else if (key == "coarsest_solver") {
    if (v == "auto") c.ipm.coarsest.solver = CoarsestSolver::Auto;
    else if (v == "dense-factorization") c.ipm.coarsest.solver = CoarsestSolver::DenseFactorization;
    else if (v == "cg") c.ipm.coarsest.solver = CoarsestSolver::ConjugateGradient;
    else throw ConfigError("unknown coarsest_solver '" + v + "'");
  } else if (key == "coarsest_tol") c.ipm.coarsest.tol = parse_double(key, v);
  else if (key == "coarsest_dense_max_dof") c.ipm.coarsest.dense_max_dof = parse_int(key, v);
  else if (key == "output_dir") c.output_dir = v;
  else if (key == "seed") c.seed = static_cast<unsigned>(parse_int(key, v));
  else if (key == "spectral_n") c.spectral_n = parse_list<int>(v, [&](const std::string& s) { return parse_int(key, s); });
  else if (key == "spectral_beta")
    c.spectral_beta = parse_list<double>(v, [&](const std::string& s) { return parse_double(key, s); });
  else if (key == "lambda_rule") {
    if (v != "sin-pi" && v != "sin") throw ConfigError("unknown lambda_rule '" + v + "'");
    c.lambda_rule = v;
  } else throw ConfigError("unknown config key '" + key + "'");
}

inline void validate_config(const ExperimentConfig& c) {
  detail::require(c.levels >= 1, "levels must be >= 1");
  detail::require(c.beta > 0.0, "beta must be positive");
  detail::require(c.lo < c.hi, "bounds need lo < hi");
  if (c.experiment == ExperimentKind::SpectralTable) {
    detail::require(!c.spectral_n.empty() && !c.spectral_beta.empty(), "spectral table needs n and beta lists");
    for (int n : c.spectral_n) detail::require(n >= 8 && n % 2 == 0 && n <= kMaxDenseSize, "spectral n must be even, 8..2048");
    for (double b : c.spectral_beta) detail::require(b > 0.0, "spectral beta must be positive");
    return;
  }
  const int n0 = c.finest_n >> (c.levels - 1);
  detail::require(c.levels <= 30 && n0 >= 4 && (n0 << (c.levels - 1)) == c.finest_n,
                  "finest_n must be the coarsest cell count (>= 4) times 2^(levels-1)");
  if (c.experiment == ExperimentKind::Elliptic2D)
    detail::require(is_power_of_two(c.finest_n), "2D finest_n must be a power of two");
}

/// Parses the key=value format: one pair per line, '#' starts a comment.
inline ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig c;
  std::set<std::string> seen;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError("config key '" + key + "' given twice");
    set_config_value(c, key, value);
  }
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// ---------------------------------------------------------------------------
// CSV

using CsvTable = std::vector<std::vector<std::string>>;

inline std::string format_real(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline const std::vector<std::string> kOuterHeader = {"iteration", "mu", "predictor_iters", "corrector_iters",
                                                      "fine_matvecs_cumulative", "lambda_w2inf"};
inline const std::vector<std::string> kSummaryHeader = {"experiment", "finest_n", "levels", "beta",
                                                        "outer_iterations", "total_fine_matvecs", "converged"};
inline const std::vector<std::string> kSpectralHeader = {"h", "beta", "d_h", "rate"};

inline void write_csv(const std::string& path, const std::vector<std::string>& header, const CsvTable& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  const auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
    out << '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
  if (!out) throw Error("write to '" + path + "' failed");
}

/// Returns header + rows.
inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read '" + path + "'");
  CsvTable t;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    t.push_back(cells);
  }
  return t;
}

inline CsvTable outer_rows(const std::vector<OuterIterationRecord>& recs) {
  CsvTable rows;
  for (const auto& r : recs)
    rows.push_back({std::to_string(r.iteration), format_real(r.mu), std::to_string(r.predictor_iters),
                    std::to_string(r.corrector_iters), std::to_string(r.fine_matvecs_cumulative),
                    format_real(r.lambda_w2inf)});
  return rows;
}

inline void emit_csv(const std::vector<OuterIterationRecord>& recs, const std::string& path) {
  write_csv(path, kOuterHeader, outer_rows(recs));
}

inline std::vector<OuterIterationRecord> read_outer_csv(const std::string& path) {
  const CsvTable t = read_csv(path);
  if (t.empty() || t[0] != kOuterHeader) throw Error("'" + path + "' is not a per-iteration CSV");
  std::vector<OuterIterationRecord> out;
  for (std::size_t i = 1; i < t.size(); ++i) {
    const auto& c = t[i];
    if (c.size() != kOuterHeader.size()) throw Error("malformed row in '" + path + "'");
    OuterIterationRecord r;
    r.iteration = std::stoi(c[0]);
    r.mu = std::stod(c[1]);
    r.predictor_iters = std::stoi(c[2]);
    r.corrector_iters = std::stoi(c[3]);
    r.fine_matvecs_cumulative = std::stol(c[4]);
    r.lambda_w2inf = std::stod(c[5]);
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Targets

/// C^2 bump of the given height, center and radius.
inline double bump(double x, double center, double radius, double height) {
  const double s = (x - center) / radius;
  return std::abs(s) < 1.0 ? height * std::pow(1.0 - s * s, 3) : 0.0;
}

/// Height 1 around 0.3 and height 1/2 around 0.65.
inline double two_bump(double x) { return bump(x, 0.3, 0.12, 1.0) + bump(x, 0.65, 0.08, 0.5); }

inline double elliptic_target(double x, double y) {
  return 1.5 * std::sin(2 * M_PI * x) * std::sin(2 * M_PI * y);
}

struct RunArtifacts {
  std::string outer_csv, summary_csv, solution_csv;
  std::vector<std::string> extra;
  IpmResult result;
  bool converged = false;
  std::vector<SpectralReport> spectral;
};

namespace detail {

inline std::shared_ptr<const GridHierarchy> hierarchy_for(const ExperimentConfig& c, GridKind kind) {
  return std::make_shared<const GridHierarchy>(build_hierarchy(kind, c.finest_n >> (c.levels - 1), c.levels));
}

inline void load_bounds(const ExperimentConfig& c, ControlProblem& prob) {
  const int n = prob.n();
  prob.lo = Vector::Constant(n, c.lo);
  prob.hi = Vector::Constant(n, c.hi);
  if (c.bounds_file.empty()) return;
  const CsvTable t = read_csv(c.bounds_file);
  detail::require(static_cast<int>(t.size()) == n, "bounds file must have one 'lo,hi' line per finest node");
  for (int i = 0; i < n; ++i) {
    detail::require(t[i].size() == 2, "bounds file lines must read 'lo,hi'");
    prob.lo[i] = parse_double("bounds_file", t[i][0]);
    prob.hi[i] = parse_double("bounds_file", t[i][1]);
  }
  detail::require(((prob.hi - prob.lo).array() > 0.0).all(), "bounds file needs lo < hi at every node");
}

inline RunArtifacts write_run(const ExperimentConfig& c, const ControlProblem& prob, IpmResult res) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(c.output_dir, ec);
  if (ec) throw Error("cannot create output directory '" + c.output_dir + "': " + ec.message());
  RunArtifacts art;
  art.outer_csv = (fs::path(c.output_dir) / "outer_iterations.csv").string();
  art.summary_csv = (fs::path(c.output_dir) / "summary.csv").string();
  art.solution_csv = (fs::path(c.output_dir) / "solution.csv").string();
  emit_csv(res.records, art.outer_csv);
  write_csv(art.summary_csv, kSummaryHeader,
            {{to_string(c.experiment), std::to_string(c.finest_n), std::to_string(c.levels), format_real(c.beta),
              std::to_string(res.records.size()), std::to_string(res.total_fine_matvecs),
              res.converged ? "true" : "false"}});
  const GridLevel& lv = prob.fine_level();
  CsvTable rows;
  for (int k = 0; k < lv.n_dof; ++k) {
    const auto p = lv.node(k);
    rows.push_back({format_real(p[0]), format_real(p[1]), format_real(res.state.u[k]), format_real(res.state.v1[k]),
                    format_real(res.state.v2[k])});
  }
  write_csv(art.solution_csv, {"x", "y", "u", "v1", "v2"}, rows);
  art.converged = res.converged;
  art.result = std::move(res);
  return art;
}

}  // namespace detail

/// Builds the 1D problem: f = K u0 for the two-bump target.
inline ControlProblem make_parabolic_problem(const ExperimentConfig& c) {
  ControlProblem prob;
  prob.hierarchy = detail::hierarchy_for(c, GridKind::PeriodicInterval);
  for (const GridLevel& lv : prob.hierarchy->levels())
    prob.operators.push_back(std::make_shared<const ParabolicOperator>(lv, c.parabolic));
  prob.beta = c.beta;
  const Vector u0 = interpolate(prob.fine_level(), [](double x) { return two_bump(x); });
  prob.f = prob.fine_operator().apply(u0);
  detail::load_bounds(c, prob);
  return prob;
}

/// Builds the 2D problem: f solves the discrete Poisson problem with u0 as source.
inline ControlProblem make_elliptic_problem(const ExperimentConfig& c) {
  ControlProblem prob;
  prob.hierarchy = detail::hierarchy_for(c, GridKind::DirichletSquare);
  for (const GridLevel& lv : prob.hierarchy->levels())
    prob.operators.push_back(std::make_shared<const EllipticOperator>(lv, c.elliptic));
  prob.beta = c.beta;
  const Vector u0 = interpolate(prob.fine_level(), [](double x, double y) { return elliptic_target(x, y); });
  prob.f = prob.fine_operator().apply(u0);
  detail::load_bounds(c, prob);
  return prob;
}

inline RunArtifacts run_parabolic(const ExperimentConfig& c) {
  detail::require(c.experiment == ExperimentKind::Parabolic1D, "run_parabolic needs experiment = parabolic-1d");
  validate_config(c);
  ExperimentConfig cc = c;
  cc.ipm.levels = c.levels;
  const ControlProblem prob = make_parabolic_problem(cc);
  return detail::write_run(cc, prob, solve(prob, cc.ipm));
}

inline RunArtifacts run_elliptic(const ExperimentConfig& c) {
  detail::require(c.experiment == ExperimentKind::Elliptic2D, "run_elliptic needs experiment = elliptic-2d");
  validate_config(c);
  ExperimentConfig cc = c;
  cc.ipm.levels = c.levels;
  const ControlProblem prob = make_elliptic_problem(cc);
  return detail::write_run(cc, prob, solve(prob, cc.ipm));
}

inline LambdaRule lambda_rule_from(const std::string& name) {
  if (name == "sin") return [](double x, double b) { return std::sin(x) + b; };
  return [](double x, double b) { return std::sin(M_PI * x) + b; };
}

/// Spectral-distance table. Writes spectral.csv (one row per cell) and
/// spectral_table.csv (one row per h, a d_h and rate column pair per beta).
inline RunArtifacts run_spectral_table(const ExperimentConfig& c, int workers = 1) {
  validate_config(c);
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(c.output_dir, ec);
  if (ec) throw Error("cannot create output directory '" + c.output_dir + "': " + ec.message());
  const ParabolicConfig pc = c.parabolic;
  const LevelOperatorBuilder build = [pc](const GridLevel& lv) -> std::unique_ptr<ForwardOperator> {
    return std::make_unique<ParabolicOperator>(lv, pc);
  };
  RunArtifacts art;
  art.spectral = spectral_distance_table(build, lambda_rule_from(c.lambda_rule), c.spectral_n, c.spectral_beta,
                                         GridKind::PeriodicInterval, workers);
  const auto rate_str = [](double r) { return std::isnan(r) ? std::string() : format_real(r); };
  CsvTable rows;
  for (const auto& r : art.spectral)
    rows.push_back({format_real(r.h), format_real(r.beta), format_real(r.d_h), rate_str(r.rate_vs_previous)});
  art.outer_csv = (fs::path(c.output_dir) / "spectral.csv").string();
  write_csv(art.outer_csv, kSpectralHeader, rows);

  std::vector<std::string> header = {"h"};
  for (double b : c.spectral_beta) {
    char label[32];
    std::snprintf(label, sizeof label, "%g", b);
    header.push_back(std::string("d_h_beta_") + label);
    header.push_back(std::string("rate_beta_") + label);
  }
  CsvTable wide;
  const std::size_t nn = c.spectral_n.size();
  for (std::size_t i = 0; i < nn; ++i) {
    std::vector<std::string> row = {format_real(1.0 / c.spectral_n[i])};
    for (std::size_t j = 0; j < c.spectral_beta.size(); ++j) {
      const SpectralReport& r = art.spectral[j * nn + i];
      row.push_back(format_real(r.d_h));
      row.push_back(rate_str(r.rate_vs_previous));
    }
    wide.push_back(row);
  }
  art.summary_csv = (fs::path(c.output_dir) / "spectral_table.csv").string();
  write_csv(art.summary_csv, header, wide);
  art.converged = true;
  return art;
}

inline RunArtifacts run_experiment(const ExperimentConfig& c, int workers = 1) {
  switch (c.experiment) {
    case ExperimentKind::Parabolic1D: return run_parabolic(c);
    case ExperimentKind::Elliptic2D: return run_elliptic(c);
    default: return run_spectral_table(c, workers);
  }
}

}  // namespace mgipm
