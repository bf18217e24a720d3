#pragma once

// Mehrotra predictor-corrector interior point method for
//
//   min 1/2 |K u - f|_h^2 + beta/2 |u|_h^2   subject to lo <= u <= hi,
//
// with each Newton system reduced to (I + H) du' = r' and solved by CG
// (one level) or multigrid-preconditioned CGS.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mgipm/error.hpp"
#include "mgipm/grid.hpp"
#include "mgipm/krylov.hpp"
#include "mgipm/operators.hpp"
#include "mgipm/precond.hpp"

namespace mgipm {

struct ControlProblem {
  std::shared_ptr<const GridHierarchy> hierarchy;
  std::vector<std::shared_ptr<const ForwardOperator>> operators;  // one per level, coarsest first
  Vector f;
  Vector lo, hi;
  double beta = 1.0;

  const GridLevel& fine_level() const { return hierarchy->level(hierarchy->finest()); }
  const ForwardOperator& fine_operator() const { return *operators.back(); }
  int n() const { return fine_level().n_dof; }

  void validate() const {
    detail::require(hierarchy != nullptr, "control problem has no hierarchy");
    detail::require(static_cast<int>(operators.size()) == hierarchy->size(), "need one operator per level");
    for (int i = 0; i < hierarchy->size(); ++i)
      detail::require(operators[i] && operators[i]->n_dof() == hierarchy->level(i).n_dof,
                      "operator does not match its level");
    detail::require(f.size() == n() && lo.size() == n() && hi.size() == n(), "data and bounds must live on the finest level");
    detail::require(beta > 0.0, "beta must be positive");
    detail::require(((hi - lo).array() > 0.0).all(), "bounds need lo < hi at every node");
  }
};

struct IpmState {
  Vector u, v1, v2;
  double mu = 0.0;
  int iteration = 0;
};

struct IpmOptions {
  double mu_tol = 1e-10;     // relative to the initial mu
  double resid_tol = 1e-8;   // relative dual residual
  int max_outer = 40;
  double tau = 0.99995;
  double sigma_min = 1e-8;
  double sigma_max = 1.0;
  bool common_step_length = false;
  bool cg_fallback = true;  // redo a failed preconditioned solve with plain CG
  double start_multiplier = 0.0;  // 0: scale-aware default, > 0: this value for v1 and v2
  int levels = 1;            // 1: plain CG, 2: two-grid, >= 3: W-cycle
  KrylovOptions krylov;
  CoarsestOptions coarsest;
};

struct OuterIterationRecord {
  int iteration = 0;
  double mu = 0.0;
  int predictor_iters = 0;
  int corrector_iters = 0;
  long fine_matvecs_cumulative = 0;
  double lambda_w2inf = 0.0;
  int fallback_solves = 0;  // preconditioned solves redone with plain CG
};

struct IpmResult {
  IpmState state;
  std::vector<OuterIterationRecord> records;
  bool converged = false;
  double mu0 = 0.0;
  double final_relative_residual = 0.0;
  long total_fine_matvecs = 0;
  int preconditioner_builds = 0;
  std::string message;
};

// ---------------------------------------------------------------------------

/// beta W u + K^T W K u. Two fine mat-vecs.
inline Vector hessian_apply(const ControlProblem& prob, const Vector& u) {
  const Vector& w = prob.fine_level().weights;
  const ForwardOperator& k = prob.fine_operator();
  return prob.beta * w.cwiseProduct(u) + k.apply_transpose(w.cwiseProduct(k.apply(u)));
}

inline void require_strictly_feasible(const ControlProblem& prob, const IpmState& s) {
  const bool ok = s.u.size() == prob.n() && s.v1.size() == prob.n() && s.v2.size() == prob.n() &&
                  ((s.u - prob.lo).array() > 0.0).all() && ((prob.hi - s.u).array() > 0.0).all() &&
                  (s.v1.array() > 0.0).all() && (s.v2.array() > 0.0).all();
  if (!ok) throw FeasibilityError("interior point iterate is not strictly feasible");
}

inline double compute_mu(const IpmState& s, const Vector& lo, const Vector& hi) {
  const double n = static_cast<double>(s.u.size());
  return ((s.u - lo).dot(s.v1) + (hi - s.u).dot(s.v2)) / (2.0 * n);
}

struct KktResiduals {
  Vector r_u, r_v1, r_v2;
  double norm_u = 0.0, norm_v1 = 0.0, norm_v2 = 0.0;
};

/// Residuals of the KKT system with complementarity measured against 0:
/// r_u = K^T W f - A u - v2 + v1, r_v1 = -v1 (u - lo), r_v2 = -v2 (hi - u).
/// `ktwf` may carry a precomputed K^T W f.
/// `Feasibility::Closed` admits points on the boundary of the box and zero
/// multipliers, so exact optima can be checked.
enum class Feasibility { Strict, Closed };

inline KktResiduals kkt_residuals(const ControlProblem& prob, const IpmState& s,
                                  const std::optional<Vector>& ktwf = std::nullopt,
                                  Feasibility mode = Feasibility::Strict) {
  if (mode == Feasibility::Strict) {
    require_strictly_feasible(prob, s);
  } else {
    const bool ok = s.u.size() == prob.n() && s.v1.size() == prob.n() && s.v2.size() == prob.n() &&
                    ((s.u - prob.lo).array() >= 0.0).all() && ((prob.hi - s.u).array() >= 0.0).all() &&
                    (s.v1.array() >= 0.0).all() && (s.v2.array() >= 0.0).all();
    if (!ok) throw FeasibilityError("point lies outside the closed feasible set");
  }
  KktResiduals r;
  const Vector kf = ktwf ? *ktwf : prob.fine_operator().apply_transpose(prob.fine_level().weights.cwiseProduct(prob.f));
  r.r_u = kf - hessian_apply(prob, s.u) - s.v2 + s.v1;
  r.r_v1 = -s.v1.cwiseProduct(s.u - prob.lo);
  r.r_v2 = -s.v2.cwiseProduct(prob.hi - s.u);
  r.norm_u = r.r_u.norm();
  r.norm_v1 = r.r_v1.norm();
  r.norm_v2 = r.r_v2.norm();
  return r;
}

struct ReducedSystem {
  Vector m, lambda, p, rhs_scaled;
  Vector r;  // unscaled reduced rhs
};

/// m, lambda = m/w + beta, p = sqrt(lambda) and r' = D_{1/p} W^{-1} r.
inline ReducedSystem reduce_to_scaled(const ControlProblem& prob, const IpmState& s, const Vector& r_u,
                                      const Vector& r_v1, const Vector& r_v2) {
  require_strictly_feasible(prob, s);
  const Vector gl = s.u - prob.lo;
  const Vector gh = prob.hi - s.u;
  const Vector& w = prob.fine_level().weights;
  ReducedSystem red;
  red.m = s.v1.cwiseQuotient(gl) + s.v2.cwiseQuotient(gh);
  red.r = r_u + r_v1.cwiseQuotient(gl) - r_v2.cwiseQuotient(gh);
  red.lambda = (red.m.cwiseQuotient(w)).array() + prob.beta;
  red.p = red.lambda.cwiseSqrt();
  red.rhs_scaled = red.r.cwiseQuotient(w).cwiseQuotient(red.p);
  return red;
}

struct NewtonStep {
  Vector du, dv1, dv2;
};

/// dv1 = (r_v1 - v1 du)/(u - lo), dv2 = (r_v2 + v2 du)/(hi - u).
inline NewtonStep recover_full_step(const ControlProblem& prob, const IpmState& s, const Vector& du,
                                    const Vector& r_v1, const Vector& r_v2) {
  NewtonStep st;
  st.du = du;
  st.dv1 = (r_v1 - s.v1.cwiseProduct(du)).cwiseQuotient(s.u - prob.lo);
  st.dv2 = (r_v2 + s.v2.cwiseProduct(du)).cwiseQuotient(prob.hi - s.u);
  return st;
}

/// Largest alpha (possibly infinite) keeping x + alpha dx > 0 nodewise.
inline double max_step_to_boundary(const Vector& x, const Vector& dx) {
  double a = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < x.size(); ++i)
    if (dx[i] < 0.0) a = std::min(a, -x[i] / dx[i]);
  return a;
}

struct StepLengths {
  double primal = 1.0;
  double dual = 1.0;
};

/// Fraction-to-boundary rule: alpha = min(1, tau * distance to the boundary).
/// A full step is taken only when it keeps a (1 - tau) share of every gap, so
/// gaps never round to zero when the boundary lies just beyond alpha = 1.
inline StepLengths step_lengths(const ControlProblem& prob, const IpmState& s, const NewtonStep& d, double tau) {
  detail::require(tau > 0.0 && tau < 1.0, "step fraction tau must lie in (0, 1)");
  const double ap = std::min(max_step_to_boundary(s.u - prob.lo, d.du), max_step_to_boundary(prob.hi - s.u, -d.du));
  const double ad = std::min(max_step_to_boundary(s.v1, d.dv1), max_step_to_boundary(s.v2, d.dv2));
  const auto rule = [tau](double a) { return std::min(1.0, tau * a); };
  return {rule(ap), rule(ad)};
}

// ---------------------------------------------------------------------------

namespace detail {

inline Vector lambda_roughness_field(const Vector& lambda) { return lambda.cwiseSqrt().cwiseInverse(); }

}  // namespace detail

/// Natural size of the multipliers: max(|K^T W f|_inf, beta max(w) max(hi - lo)).
inline double multiplier_scale(const ControlProblem& prob, const Vector& ktwf) {
  const double reg = prob.beta * prob.fine_level().weights.maxCoeff() * (prob.hi - prob.lo).maxCoeff();
  return std::max(ktwf.lpNorm<Eigen::Infinity>(), reg);
}

/// Starting point: midpoint of the box, constant multipliers v0.
inline IpmState initial_state(const ControlProblem& prob, double v0 = 1.0) {
  detail::require(v0 > 0.0, "starting multiplier must be positive");
  IpmState s;
  s.u = 0.5 * (prob.lo + prob.hi);
  s.v1 = Vector::Constant(prob.n(), v0);
  s.v2 = Vector::Constant(prob.n(), v0);
  s.mu = compute_mu(s, prob.lo, prob.hi);
  return s;
}

inline IpmResult solve(const ControlProblem& prob, const IpmOptions& opt = {}) {
  prob.validate();
  detail::require(opt.tau > 0.0 && opt.tau < 1.0, "step fraction tau must lie in (0, 1)");
  detail::require(opt.levels >= 1 && opt.levels <= prob.hierarchy->size(), "levels exceeds the hierarchy depth");
  detail::require(opt.max_outer >= 1, "max_outer must be positive");

  const GridHierarchy& g = *prob.hierarchy;
  const GridLevel& fine = prob.fine_level();
  const ForwardOperator& kfine = prob.fine_operator();
  const long counter0 = kfine.matvec_count();
  const auto fine_matvecs = [&] { return kfine.matvec_count() - counter0; };

  std::vector<const ForwardOperator*> ops;
  for (const auto& op : prob.operators) ops.push_back(op.get());
  CoarseOperatorCache coarse_cache;

  IpmResult res;
  const Vector ktwf = kfine.apply_transpose(fine.weights.cwiseProduct(prob.f));
  const double vscale = multiplier_scale(prob, ktwf);
  IpmState s = initial_state(prob, opt.start_multiplier > 0.0 ? opt.start_multiplier : vscale);
  res.mu0 = s.mu;
  double resid_scale = 0.0;

  for (int it = 0;; ++it) {
    require_strictly_feasible(prob, s);
    const KktResiduals kkt = kkt_residuals(prob, s, ktwf);
    if (it == 0)
      resid_scale = std::max({kkt.norm_u, ktwf.norm(),
                              prob.beta * fine.weights.cwiseProduct(prob.hi - prob.lo).norm(),
                              std::numeric_limits<double>::min()});
    res.final_relative_residual = kkt.norm_u / resid_scale;
    if (s.mu <= opt.mu_tol * res.mu0 && res.final_relative_residual <= opt.resid_tol) {
      res.converged = true;
      res.message = "converged";
      break;
    }
    if (it == opt.max_outer) {
      res.message = "maximum number of outer iterations reached";
      break;
    }

    // Predictor: mu = 0.
    ReducedSystem red = reduce_to_scaled(prob, s, kkt.r_u, kkt.r_v1, kkt.r_v2);
    const ScaledSystem sys = make_scaled_system(g, g.finest(), kfine, red.lambda, prob.beta);
    std::optional<MgPreconditioner> mg;
    if (opt.levels >= 2) {
      mg = build_preconditioner(g, ops, red.lambda, prob.beta, opt.levels == 2 ? MgMode::TwoGrid : MgMode::WCycle,
                                opt.levels, opt.coarsest, &coarse_cache);
      ++res.preconditioner_builds;
    }
    int fallbacks = 0;
    const auto inner_solve = [&](const Vector& rhs, int& iters) -> Vector {
      KrylovResult kr;
      std::string failure;
      if (mg) {
        const LinearOperator gop{sys.n_dof(), [&sys](const Vector& v) { return g_apply(sys, v); }};
        try {
          kr = cgs(gop, preconditioner_handle(*mg), rhs, opt.krylov);
          if (!kr.report.converged) failure = "cgs stopped at relative residual " + std::to_string(kr.report.final_relative_residual);
        } catch (const SolverError& e) {
          failure = e.what();
        }
        if (!failure.empty() && !opt.cg_fallback)
          throw SolverError(failure + " at outer iteration " + std::to_string(it + 1));
        if (!failure.empty()) {
          // the wasted mat-vecs stay in the fine counter
          const int spent = kr.report.iterations;
          // CG on the SPD form decreases the energy error monotonically, so the
          // growth guard meant for CGS is not applied here
          KrylovOptions fallback = opt.krylov;
          fallback.divergence_factor = std::numeric_limits<double>::infinity();
          kr = solve_symmetrized_cg(sys, rhs, fallback);
          kr.report.iterations += spent;
          ++fallbacks;
        }
      } else {
        kr = solve_symmetrized_cg(sys, rhs, opt.krylov);
      }
      iters = kr.report.iterations;
      if (!kr.report.converged)
        throw SolverError("inner Krylov solve at outer iteration " + std::to_string(it + 1) +
                          " stopped at relative residual " + std::to_string(kr.report.final_relative_residual) +
                          " after " + std::to_string(kr.report.iterations) + " iterations");
      return kr.x.cwiseQuotient(red.p);
    };

    OuterIterationRecord rec;
    rec.iteration = it + 1;
    rec.lambda_w2inf = discrete_w2inf(fine, detail::lambda_roughness_field(red.lambda));

    const Vector du_aff = inner_solve(red.rhs_scaled, rec.predictor_iters);
    const NewtonStep aff = recover_full_step(prob, s, du_aff, kkt.r_v1, kkt.r_v2);
    StepLengths a_aff = step_lengths(prob, s, aff, opt.tau);
    if (opt.common_step_length) a_aff.primal = a_aff.dual = std::min(a_aff.primal, a_aff.dual);
    const double mu_aff =
        ((s.u - prob.lo + a_aff.primal * aff.du).dot(s.v1 + a_aff.dual * aff.dv1) +
         (prob.hi - s.u - a_aff.primal * aff.du).dot(s.v2 + a_aff.dual * aff.dv2)) /
        (2.0 * prob.n());
    const double sigma = std::clamp(std::pow(mu_aff / s.mu, 3), opt.sigma_min, opt.sigma_max);

    // Corrector: same matrix, centering and second-order terms in the rhs.
    const Vector r_v1 = (kkt.r_v1.array() + sigma * s.mu - (aff.du.array() * aff.dv1.array())).matrix();
    const Vector r_v2 = (kkt.r_v2.array() + sigma * s.mu + (aff.du.array() * aff.dv2.array())).matrix();
    const ReducedSystem red_c = reduce_to_scaled(prob, s, kkt.r_u, r_v1, r_v2);
    const Vector du = inner_solve(red_c.rhs_scaled, rec.corrector_iters);
    const NewtonStep step = recover_full_step(prob, s, du, r_v1, r_v2);
    StepLengths a = step_lengths(prob, s, step, opt.tau);
    if (opt.common_step_length) a.primal = a.dual = std::min(a.primal, a.dual);

    s.u += a.primal * step.du;
    s.v1 += a.dual * step.dv1;
    s.v2 += a.dual * step.dv2;
    s.mu = compute_mu(s, prob.lo, prob.hi);
    s.iteration = it + 1;
    require_strictly_feasible(prob, s);

    rec.mu = s.mu;
    rec.fine_matvecs_cumulative = fine_matvecs();
    rec.fallback_solves = fallbacks;
    res.records.push_back(rec);
  }
  res.state = s;
  res.total_fine_matvecs = fine_matvecs();
  return res;
}

}  // namespace mgipm
