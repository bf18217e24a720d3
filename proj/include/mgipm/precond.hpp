#pragma once

// The scaled system G = I + D_{1/p} K^{*h} K D_{1/p} and its two-grid and
// W-cycle multigrid preconditioners.

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <vector>

#include "mgipm/error.hpp"
#include "mgipm/grid.hpp"
#include "mgipm/krylov.hpp"
#include "mgipm/operators.hpp"

namespace mgipm {

/// G_h on one level for a fixed lambda.
struct ScaledSystem {
  int level_index = 0;
  const GridLevel* level = nullptr;
  const ForwardOperator* op = nullptr;
  Vector lambda;
  Vector p;      // sqrt(lambda)
  Vector inv_p;  // 1 / p
  double beta = 0.0;

  int n_dof() const { return static_cast<int>(lambda.size()); }
};

inline ScaledSystem make_scaled_system(const GridHierarchy& g, int level_index, const ForwardOperator& op,
                                       const Vector& lambda, double beta) {
  const GridLevel& lv = g.level(level_index);
  detail::require(op.n_dof() == lv.n_dof && lambda.size() == lv.n_dof,
                  "scaled system: operator or lambda does not match the level");
  detail::require(beta > 0.0, "scaled system: beta must be positive");
  // m >= 0 at feasible iterates, so lambda >= beta up to rounding.
  if (!(lambda.minCoeff() >= beta * (1.0 - 1e-12)))
    throw FeasibilityError("lambda below beta: the interior point iterate is not feasible");
  ScaledSystem s;
  s.level_index = level_index;
  s.level = &lv;
  s.op = &op;
  s.lambda = lambda;
  s.p = lambda.cwiseSqrt();
  s.inv_p = s.p.cwiseInverse();
  s.beta = beta;
  return s;
}

/// u + D_{1/p} W^{-1} K^T W K D_{1/p} u. Two operator applications.
inline Vector g_apply(const ScaledSystem& s, const Vector& u) {
  detail::require(u.size() == s.n_dof(), "g_apply: length mismatch");
  const Vector& w = s.level->weights;
  const Vector ku = s.op->apply(s.inv_p.cwiseProduct(u));
  const Vector ktku = s.op->apply_transpose(w.cwiseProduct(ku));
  return u + s.inv_p.cwiseProduct(ktku.cwiseQuotient(w));
}

/// W^{1/2} G W^{-1/2}, the Euclidean-symmetric form of G.
inline LinearOperator symmetrized_handle(const ScaledSystem& s) {
  const Vector sw = s.level->weights.cwiseSqrt();
  return {s.n_dof(), [&s, sw](const Vector& v) -> Vector {
            return sw.cwiseProduct(g_apply(s, v.cwiseQuotient(sw)));
          }};
}

/// Solves G x = r with CG on the symmetrized form.
inline KrylovResult solve_symmetrized_cg(const ScaledSystem& s, const Vector& r, const KrylovOptions& opt) {
  const Vector sw = s.level->weights.cwiseSqrt();
  KrylovResult res = cg(symmetrized_handle(s), sw.cwiseProduct(r), opt);
  res.x = res.x.cwiseQuotient(sw);
  return res;
}

/// W^{-1/2} K^T W K W^{-1/2} per operator. It does not depend on lambda, so one
/// cache kept across interior point iterations saves a dense product per build.
class CoarseOperatorCache {
 public:
  const DenseMatrix& get(const ForwardOperator& op, const GridLevel& lv) {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = cache_.find(&op);
    if (it != cache_.end()) return *it->second;
    const DenseMatrix k = op.dense();
    const Vector sw = lv.weights.cwiseSqrt();
    // W^{1/2} K W^{-1/2}
    const DenseMatrix ks = sw.asDiagonal() * k * sw.cwiseInverse().asDiagonal();
    auto bs = std::make_shared<DenseMatrix>(ks.transpose() * ks);
    cache_[&op] = bs;
    return *bs;
  }

 private:
  std::mutex mutex_;
  std::map<const ForwardOperator*, std::shared_ptr<DenseMatrix>> cache_;
};

enum class MgMode { TwoGrid, WCycle };
enum class CoarsestSolver { Auto, DenseFactorization, ConjugateGradient };

struct CoarsestOptions {
  CoarsestSolver solver = CoarsestSolver::Auto;
  double tol = 1e-10;
  int maxit = 2000;
  int dense_max_dof = 2048;
};

/// Per-level scaled systems (coarsest first) plus the coarsest solver.
class MgPreconditioner {
 public:
  const GridHierarchy* hierarchy = nullptr;
  std::vector<ScaledSystem> systems;
  MgMode mode = MgMode::WCycle;
  CoarsestOptions coarsest;
  bool dense_coarsest = false;
  Eigen::LLT<DenseMatrix> coarse_llt;  // factor of I + D Bs D on the coarsest level
  long coarse_cg_iterations = 0;

  int n_levels() const { return static_cast<int>(systems.size()); }
  const ScaledSystem& finest() const { return systems.back(); }

  /// Exact (dense) or tolerance-controlled (CG) solve with the coarsest G.
  Vector coarsest_solve(const Vector& r) {
    const ScaledSystem& s = systems.front();
    if (dense_coarsest) {
      const Vector sw = s.level->weights.cwiseSqrt();
      return coarse_llt.solve(sw.cwiseProduct(r)).cwiseQuotient(sw);
    }
    KrylovOptions opt;
    opt.tol = coarsest.tol;
    opt.maxit = coarsest.maxit;
    KrylovResult res = solve_symmetrized_cg(s, r, opt);
    coarse_cg_iterations += res.report.iterations;
    if (!res.report.converged) throw SolverError("coarsest CG solve did not reach its tolerance");
    return res.x;
  }
};

/// Builds the hierarchy of scaled systems. The finest system lives on
/// `finest_level` and uses `n_levels` levels in total; lambda is coarsened by
/// discarding fine-only nodes.
inline MgPreconditioner build_preconditioner(const GridHierarchy& g,
                                             const std::vector<const ForwardOperator*>& ops,
                                             const Vector& lambda_finest, double beta, MgMode mode,
                                             int n_levels, const CoarsestOptions& copt = {},
                                             CoarseOperatorCache* cache = nullptr, int finest_level = -1) {
  if (finest_level < 0) finest_level = g.finest();
  detail::require(n_levels >= 2, "preconditioner needs at least 2 levels");
  detail::require(finest_level - n_levels + 1 >= 0, "not enough grid levels for the requested preconditioner");
  detail::require(static_cast<int>(ops.size()) == g.size(), "need one operator per hierarchy level");
  if (mode == MgMode::TwoGrid) detail::require(n_levels == 2, "two-grid mode uses exactly 2 levels");
  MgPreconditioner mg;
  mg.hierarchy = &g;
  mg.mode = mode;
  mg.coarsest = copt;
  const int coarsest = finest_level - n_levels + 1;
  std::vector<Vector> lams(n_levels);
  lams.back() = lambda_finest;
  for (int k = n_levels - 1; k > 0; --k) lams[k - 1] = g.coarsen_lambda(coarsest + k, lams[k]);
  for (int k = 0; k < n_levels; ++k) {
    detail::require(ops[coarsest + k] != nullptr, "missing operator on a preconditioner level");
    mg.systems.push_back(make_scaled_system(g, coarsest + k, *ops[coarsest + k], lams[k], beta));
  }
  const ScaledSystem& c = mg.systems.front();
  mg.dense_coarsest = copt.solver == CoarsestSolver::DenseFactorization ||
                      (copt.solver == CoarsestSolver::Auto && c.n_dof() <= copt.dense_max_dof);
  if (mg.dense_coarsest) {
    CoarseOperatorCache local;
    const DenseMatrix& bs = (cache ? *cache : local).get(*c.op, *c.level);
    DenseMatrix gs = c.inv_p.asDiagonal() * bs * c.inv_p.asDiagonal();
    gs.diagonal().array() += 1.0;
    mg.coarse_llt.compute(gs);
    if (mg.coarse_llt.info() != Eigen::Success) throw SolverError("coarsest dense factorization failed");
  }
  return mg;
}

namespace detail {

/// Level k of the W-cycle; k indexes mg.systems.
inline Vector mg_recurse(MgPreconditioner& mg, const Vector& r, int k) {
  if (k == 0) return mg.coarsest_solve(r);
  const GridHierarchy& g = *mg.hierarchy;
  const int li = mg.systems[k].level_index;
  const auto correction = [&](const Vector& rr) -> Vector {
    const Vector pr = g.l2_project(li, rr);
    return rr - g.prolong(li - 1, pr) + g.prolong(li - 1, mg_recurse(mg, pr, k - 1));
  };
  Vector u = correction(r);
  if (k < mg.n_levels() - 1) {
    // Newton map 2M - M G M applied procedurally
    const Vector r1 = r - g_apply(mg.systems[k], u);
    u += correction(r1);
  }
  return u;
}

}  // namespace detail

/// (I - J Pi) r + J G_{2h}^{-1} Pi r.
inline Vector two_grid_apply(MgPreconditioner& mg, const Vector& r) {
  detail::require(mg.n_levels() == 2, "two_grid_apply needs a 2-level preconditioner");
  detail::require(r.size() == mg.finest().n_dof(), "two_grid_apply: length mismatch");
  const GridHierarchy& g = *mg.hierarchy;
  const int li = mg.finest().level_index;
  const Vector pr = g.l2_project(li, r);
  return r - g.prolong(li - 1, pr) + g.prolong(li - 1, mg.coarsest_solve(pr));
}

/// Matrix-free W-cycle. No G application happens on the finest level.
inline Vector mg_apply(MgPreconditioner& mg, const Vector& r) {
  detail::require(mg.n_levels() >= 2, "mg_apply needs at least 2 levels");
  detail::require(r.size() == mg.finest().n_dof(), "mg_apply: length mismatch");
  return detail::mg_recurse(mg, r, mg.n_levels() - 1);
}

inline Vector precond_apply(MgPreconditioner& mg, const Vector& r) {
  return mg.mode == MgMode::TwoGrid ? two_grid_apply(mg, r) : mg_apply(mg, r);
}

inline LinearOperator preconditioner_handle(MgPreconditioner& mg) {
  return {mg.finest().n_dof(), [&mg](const Vector& r) { return precond_apply(mg, r); }};
}

/// Power-iteration estimate of rho(I - S G) with S the preconditioner. The
/// answer is the geometric mean growth over the second half of the iterations,
/// which is robust against complex dominant pairs.
inline double spectral_radius_estimate(MgPreconditioner& mg, int n_iters, unsigned seed = 7) {
  detail::require(n_iters >= 2, "spectral_radius_estimate needs at least 2 iterations");
  const ScaledSystem& s = mg.finest();
  const GridLevel& lv = *s.level;
  Vector u(s.n_dof());
  std::uint64_t state = seed * 0x9E3779B97F4A7C15ULL + 1;
  for (int i = 0; i < u.size(); ++i) {
    state = state * 6364136223846793005ULL + 1442695040888963407ULL;
    u[i] = static_cast<double>(state >> 11) / 9007199254740992.0 - 0.5;
  }
  u /= norm_h(lv, u);
  const int half = n_iters / 2;
  double log_growth = 0.0;
  for (int it = 0; it < n_iters; ++it) {
    const Vector e = u - precond_apply(mg, g_apply(s, u));
    const double n = norm_h(lv, e);
    if (n == 0.0 || !std::isfinite(n)) return n == 0.0 ? 0.0 : n;
    if (it >= n_iters - half) log_growth += std::log(n);
    u = e / n;
  }
  return std::exp(log_growth / half);
}

}  // namespace mgipm
