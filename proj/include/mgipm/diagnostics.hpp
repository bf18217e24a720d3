#pragma once

// Dense materialization and eigen-analysis of the scaled system and of the
// two-grid preconditioner: spectral distances, spectral radii and the
// spectral-radius bound in terms of the spectral distance.

#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <Eigen/LU>

#include <cmath>
#include <complex>
#include <functional>
#include <future>
#include <memory>
#include <vector>

#include "mgipm/error.hpp"
#include "mgipm/grid.hpp"
#include "mgipm/operators.hpp"
#include "mgipm/precond.hpp"

namespace mgipm {

using ComplexVector = Eigen::VectorXcd;

inline constexpr int kMaxDenseSize = 2048;

/// Column j is op(e_j).
inline DenseMatrix materialize(const std::function<Vector(const Vector&)>& op, int n) {
  detail::require(n >= 1 && n <= kMaxDenseSize, "materialize: size outside [1, 2048]");
  DenseMatrix out(n, n);
  Vector e = Vector::Zero(n);
  for (int j = 0; j < n; ++j) {
    e[j] = 1.0;
    out.col(j) = op(e);
    e[j] = 0.0;
  }
  return out;
}

/// Full spectrum of a real square matrix (Hessenberg reduction + shifted QR).
inline ComplexVector eigenvalues(const DenseMatrix& a) {
  detail::require(a.rows() == a.cols() && a.rows() <= kMaxDenseSize, "eigenvalues: need a square matrix, n <= 2048");
  if (a.rows() == 0) return {};
  Eigen::EigenSolver<DenseMatrix> es(a, /*computeEigenvectors=*/false);
  if (es.info() != Eigen::Success) throw SolverError("eigenvalue QR iteration did not converge");
  return es.eigenvalues();
}

/// Dense G_h = I + D_{1/p} W^{-1} K^T W K D_{1/p}, built from a dense K.
inline DenseMatrix dense_scaled_system(const DenseMatrix& k, const GridLevel& lv, const Vector& lambda) {
  const Vector inv_p = lambda.cwiseSqrt().cwiseInverse();
  const DenseMatrix kd = k * inv_p.asDiagonal();
  // (K D)^T = D K^T already carries the left scaling
  DenseMatrix g = lv.weights.cwiseInverse().asDiagonal() * (kd.transpose() * (lv.weights.asDiagonal() * kd));
  g.diagonal().array() += 1.0;
  return g;
}

/// Dense Pi_{2h} mapping level `fine` to fine-1.
inline DenseMatrix dense_l2_projection(const GridHierarchy& g, int fine) {
  const DenseMatrix jm = DenseMatrix(g.prolongation(fine));
  const DenseMatrix rm = std::ldexp(1.0, -g.dim()) * jm.transpose() * DenseMatrix(g.mass(fine));
  return DenseMatrix(g.mass(fine - 1)).llt().solve(rm);
}

/// Dense fine G, two-grid N = (I - J Pi) + J G_2h Pi and its inverse S, for
/// the finest level of `g` and a fixed fine lambda.
struct TwoGridDense {
  DenseMatrix g_fine;
  DenseMatrix n_twogrid;
  DenseMatrix b;  // N^{-1} G
};

inline TwoGridDense two_grid_dense(const GridHierarchy& g, const ForwardOperator& k_fine,
                                   const ForwardOperator& k_coarse, const Vector& lambda_fine) {
  const int f = g.finest();
  detail::require(f >= 1, "two_grid_dense needs at least 2 levels");
  const GridLevel& lf = g.level(f);
  const GridLevel& lc = g.level(f - 1);
  TwoGridDense out;
  out.g_fine = dense_scaled_system(k_fine.dense(), lf, lambda_fine);
  const DenseMatrix g_coarse = dense_scaled_system(k_coarse.dense(), lc, g.coarsen_lambda(f, lambda_fine));
  const DenseMatrix jm = DenseMatrix(g.prolongation(f));
  const DenseMatrix pi = dense_l2_projection(g, f);
  out.n_twogrid = DenseMatrix::Identity(lf.n_dof, lf.n_dof) - jm * pi + jm * g_coarse * pi;
  out.b = out.n_twogrid.partialPivLu().solve(out.g_fine);
  return out;
}

struct SpectralReport {
  double h = 0.0;
  double beta = 0.0;
  double d_h = 0.0;
  double rate_vs_previous = std::nan("");  // d_{2h} / d_h
  double max_imag_ratio = 0.0;
  double rho_two_grid = 0.0;  // rho(I - S G)
};

/// d_h, max |Im|/|alpha| and rho(I - S G) from the spectrum of N^{-1} G.
inline SpectralReport spectral_report_from(const DenseMatrix& b, double h, double beta) {
  const ComplexVector alpha = eigenvalues(b);
  SpectralReport rep;
  rep.h = h;
  rep.beta = beta;
  for (Eigen::Index i = 0; i < alpha.size(); ++i) {
    const std::complex<double> a = alpha[i];
    if (!(a.real() > 0.0)) throw SolverError("generalized spectrum has a non-positive real part");
    rep.d_h = std::max(rep.d_h, std::abs(std::log(a.real())));
    rep.max_imag_ratio = std::max(rep.max_imag_ratio, std::abs(a.imag()) / std::abs(a));
    rep.rho_two_grid = std::max(rep.rho_two_grid, std::abs(1.0 - a));
  }
  return rep;
}

/// Builds the forward operator for one level.
using LevelOperatorBuilder = std::function<std::unique_ptr<ForwardOperator>(const GridLevel&)>;
/// lambda(x, beta) for the fixed-lambda studies.
using LambdaRule = std::function<double(double, double)>;

inline double sine_lambda(double x, double beta) { return std::sin(x) + beta; }

/// One cell of the table: 2-level hierarchy with finest cell count n.
inline SpectralReport spectral_distance_cell(const LevelOperatorBuilder& build, const LambdaRule& rule,
                                             GridKind kind, int n_fine, double beta) {
  detail::require(n_fine % 2 == 0 && n_fine / 2 >= 4, "spectral cell needs an even n >= 8");
  const GridHierarchy g = build_hierarchy(kind, n_fine / 2, 2);
  const auto kf = build(g.level(1));
  const auto kc = build(g.level(0));
  const Vector lam = interpolate(g.level(1), [&](double x, double) { return rule(x, beta); });
  const TwoGridDense d = two_grid_dense(g, *kf, *kc, lam);
  return spectral_report_from(d.b, g.level(1).h, beta);
}

/// Table of spectral distances over n_list x beta_list, ordered by beta then n
/// (coarse to fine). Cells run on up to `workers` threads.
inline std::vector<SpectralReport> spectral_distance_table(const LevelOperatorBuilder& build, const LambdaRule& rule,
                                                           const std::vector<int>& n_list,
                                                           const std::vector<double>& beta_list,
                                                           GridKind kind = GridKind::PeriodicInterval,
                                                           int workers = 1) {
  struct Cell {
    int n;
    double beta;
  };
  std::vector<Cell> cells;
  for (double b : beta_list)
    for (int n : n_list) cells.push_back({n, b});
  std::vector<SpectralReport> out(cells.size());
  workers = std::max(1, workers);
  for (std::size_t start = 0; start < cells.size(); start += workers) {
    std::vector<std::future<SpectralReport>> batch;
    for (std::size_t i = start; i < std::min(cells.size(), start + workers); ++i)
      batch.push_back(std::async(workers > 1 ? std::launch::async : std::launch::deferred,
                                 [&, i] { return spectral_distance_cell(build, rule, kind, cells[i].n, cells[i].beta); }));
    for (std::size_t i = 0; i < batch.size(); ++i) out[start + i] = batch[i].get();
  }
  for (std::size_t i = 1; i < out.size(); ++i) {
    if (out[i].beta == out[i - 1].beta && out[i].d_h > 0.0) out[i].rate_vs_previous = out[i - 1].d_h / out[i].d_h;
  }
  return out;
}

struct RadiusBoundCheck {
  double lhs = 0.0;  // rho(I - S G)
  double rhs = 0.0;  // (e^d - 1)/d * d
  bool holds = false;
};

/// rho(I - S G) <= ((e^delta - 1)/delta) d_h with delta = d_h.
inline RadiusBoundCheck radius_bound_check(const SpectralReport& rep, double slack = 1e-6) {
  RadiusBoundCheck c;
  c.lhs = rep.rho_two_grid;
  const double d = rep.d_h;
  c.rhs = d == 0.0 ? 0.0 : std::expm1(d) / d * d;
  c.holds = c.lhs <= c.rhs * (1.0 + slack) + 1e-14;
  return c;
}

}  // namespace mgipm
