#pragma once

// Conjugate gradients and conjugate gradient squared on abstract linear maps.
// Both stop on the true (unpreconditioned) relative residual and confirm it with
// one explicit residual evaluation before reporting convergence.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>

#include "mgipm/error.hpp"

namespace mgipm {

using Vector = Eigen::VectorXd;

/// A square linear map given by a callable.
struct LinearOperator {
  int dim = 0;
  std::function<Vector(const Vector&)> apply;
};

inline LinearOperator identity_operator(int dim) {
  return {dim, [](const Vector& v) { return v; }};
}

/// Where CGS applies the preconditioner. Left iterates on the preconditioned
/// residual and carries the true residual alongside (three preconditioner
/// applications per iteration). Right preconditions the search directions and
/// iterates on the true residual itself (two applications).
enum class CgsVariant { Left, Right };

struct KrylovOptions {
  double tol = 1e-8;
  int maxit = 500;
  double divergence_factor = 1e4;  // relative to |b|
  CgsVariant cgs_variant = CgsVariant::Right;
};

struct KrylovReport {
  int iterations = 0;
  double final_relative_residual = 0.0;
  bool converged = false;
  long matvecs = 0;    // applications of the system operator
  long precond_applies = 0;
  int restarts = 0;
  double peak_relative_residual = 0.0;  // largest recurrence residual seen
};

struct KrylovResult {
  Vector x;
  KrylovReport report;
};

namespace detail {

inline void check_operator(const LinearOperator& op, const Vector& b, const char* who) {
  require(static_cast<bool>(op.apply), std::string(who) + ": operator has no apply");
  require(op.dim == b.size(), std::string(who) + ": rhs length does not match operator");
}

}  // namespace detail

/// CG for a Euclidean-SPD operator. Throws SolverError when p^T A p <= 0.
inline KrylovResult cg(const LinearOperator& op, const Vector& b, const KrylovOptions& opt = {}) {
  detail::check_operator(op, b, "cg");
  KrylovResult res;
  res.x = Vector::Zero(b.size());
  const double bnorm = b.norm();
  if (bnorm == 0.0) {
    res.report.converged = true;
    return res;
  }
  auto apply = [&](const Vector& v) {
    ++res.report.matvecs;
    return op.apply(v);
  };
  Vector r = b;
  Vector p = r;
  double rr = r.squaredNorm();
  Vector& x = res.x;
  KrylovReport& rep = res.report;
  while (rep.iterations < opt.maxit) {
    const Vector ap = apply(p);
    const double pap = p.dot(ap);
    if (!(pap > 0.0)) throw SolverError("cg breakdown: operator is not positive definite (p^T A p <= 0)");
    const double alpha = rr / pap;
    x.noalias() += alpha * p;
    r.noalias() -= alpha * ap;
    ++rep.iterations;
    const double rr_new = r.squaredNorm();
    if (std::sqrt(rr_new) > opt.divergence_factor * bnorm) throw SolverError("cg diverged");
    if (std::sqrt(rr_new) <= opt.tol * bnorm) {
      r = b - apply(x);
      rep.final_relative_residual = r.norm() / bnorm;
      if (rep.final_relative_residual <= opt.tol) {
        rep.converged = true;
        return res;
      }
      // recurrence drifted: continue from the explicit residual
      p = r;
      rr = r.squaredNorm();
      continue;
    }
    p = r + (rr_new / rr) * p;
    rr = rr_new;
  }
  rep.final_relative_residual = (b - apply(x)).norm() / bnorm;
  rep.converged = rep.final_relative_residual <= opt.tol;
  return res;
}

/// Preconditioned CGS (Sonneveld). The stopping test uses the true residual
/// b - A x, kept by recurrence from the operator products already computed,
/// and one explicit evaluation confirms it.
inline KrylovResult cgs(const LinearOperator& op, const LinearOperator& precond, const Vector& b,
                        const KrylovOptions& opt = {}) {
  detail::check_operator(op, b, "cgs");
  detail::check_operator(precond, b, "cgs preconditioner");
  KrylovResult res;
  res.x = Vector::Zero(b.size());
  const double bnorm = b.norm();
  if (bnorm == 0.0) {
    res.report.converged = true;
    return res;
  }
  KrylovReport& rep = res.report;
  Vector& x = res.x;
  const bool left = opt.cgs_variant == CgsVariant::Left;
  auto apply = [&](const Vector& v) {
    ++rep.matvecs;
    return op.apply(v);
  };
  auto prec = [&](const Vector& v) {
    ++rep.precond_applies;
    return precond.apply(v);
  };

  Vector r = b;
  Vector rh = left ? prec(r) : r;  // the residual the recurrences run on
  Vector shadow = rh;
  Vector u, p, q;
  double rho_prev = 1.0;
  bool first = true;

  const auto reset_from = [&](Vector explicit_r) {
    r = std::move(explicit_r);
    rh = left ? prec(r) : r;
    shadow = rh;
    first = true;
  };
  const auto restart = [&](const char* what) {
    if (rep.restarts >= 1) throw SolverError(std::string("cgs breakdown: ") + what);
    ++rep.restarts;
    reset_from(b - apply(x));
  };

  while (rep.iterations < opt.maxit) {
    const double rho = shadow.dot(rh);
    if (std::abs(rho) <= std::numeric_limits<double>::epsilon() * shadow.norm() * rh.norm()) {
      restart("rho vanished");
      continue;
    }
    if (first) {
      u = rh;
      p = u;
      first = false;
    } else {
      const double beta = rho / rho_prev;
      u = rh + beta * q;
      p = u + beta * (q + beta * p);
    }
    const Vector v = left ? prec(apply(p)) : apply(prec(p));
    const double sigma = shadow.dot(v);
    if (sigma == 0.0 || !std::isfinite(sigma)) {
      restart("shadow residual orthogonal to search direction");
      continue;
    }
    const double alpha = rho / sigma;
    q = u - alpha * v;
    if (left) {
      const Vector uq = u + q;
      x.noalias() += alpha * uq;
      const Vector w = apply(uq);
      r.noalias() -= alpha * w;
      rh.noalias() -= alpha * prec(w);
    } else {
      const Vector uq = prec(u + q);
      x.noalias() += alpha * uq;
      r.noalias() -= alpha * apply(uq);
      rh = r;
    }
    rho_prev = rho;
    ++rep.iterations;

    const double rnorm = r.norm();
    rep.peak_relative_residual = std::max(rep.peak_relative_residual, rnorm / bnorm);
    if (!std::isfinite(rnorm) || rnorm > opt.divergence_factor * bnorm) throw SolverError("cgs diverged");
    if (rnorm <= opt.tol * bnorm) {
      Vector explicit_r = b - apply(x);
      rep.final_relative_residual = explicit_r.norm() / bnorm;
      if (rep.final_relative_residual <= opt.tol) {
        rep.converged = true;
        return res;
      }
      // the recurrence drifted from the true residual: continue from the explicit one
      reset_from(std::move(explicit_r));
    }
  }
  rep.final_relative_residual = (b - apply(x)).norm() / bnorm;
  rep.converged = rep.final_relative_residual <= opt.tol;
  return res;
}

}  // namespace mgipm
