#pragma once

// Matrix-free forward operators K_h in the nodal basis.
//
//  * ParabolicOperator: time-T solution map of the periodic 1D
//    advection-reaction-diffusion problem, P1 Galerkin in space and
//    Crank-Nicolson in time.
//  * EllipticOperator: discrete inverse Laplacian on the three-line mesh of
//    the unit square (Delta y = u, y = 0 on the boundary).

#include <Eigen/Core>
#include <Eigen/IterativeLinearSolvers>
#include <Eigen/SparseCholesky>

#include <atomic>
#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "mgipm/error.hpp"
#include "mgipm/grid.hpp"

namespace mgipm {

using DenseMatrix = Eigen::MatrixXd;

/// Abstract K_h. Every call to apply or apply_transpose counts as one mat-vec.
class ForwardOperator {
 public:
  explicit ForwardOperator(int n_dof) : n_dof_(n_dof) {}
  virtual ~ForwardOperator() = default;
  ForwardOperator(const ForwardOperator&) = delete;
  ForwardOperator& operator=(const ForwardOperator&) = delete;

  int n_dof() const { return n_dof_; }

  Vector apply(const Vector& u) const {
    detail::require(u.size() == n_dof_, "forward operator: length mismatch");
    counter_.fetch_add(1, std::memory_order_relaxed);
    return apply_impl(u);
  }

  Vector apply_transpose(const Vector& u) const {
    detail::require(u.size() == n_dof_, "forward operator: length mismatch");
    counter_.fetch_add(1, std::memory_order_relaxed);
    return apply_transpose_impl(u);
  }

  long matvec_count() const { return counter_.load(std::memory_order_relaxed); }
  void reset_matvec_count() { counter_.store(0, std::memory_order_relaxed); }

  /// Dense nodal matrix of K_h. The default applies K to every unit vector.
  virtual DenseMatrix dense() const {
    DenseMatrix out(n_dof_, n_dof_);
    Vector e = Vector::Zero(n_dof_);
    for (int j = 0; j < n_dof_; ++j) {
      e[j] = 1.0;
      out.col(j) = apply(e);
      e[j] = 0.0;
    }
    return out;
  }

 protected:
  virtual Vector apply_impl(const Vector& u) const = 0;
  virtual Vector apply_transpose_impl(const Vector& u) const = 0;

 private:
  int n_dof_;
  mutable std::atomic<long> counter_{0};
};

/// K = 0. Useful for checking that every preconditioner collapses to the identity.
class ZeroOperator final : public ForwardOperator {
 public:
  explicit ZeroOperator(int n_dof) : ForwardOperator(n_dof) {}

 protected:
  Vector apply_impl(const Vector& u) const override { return Vector::Zero(u.size()); }
  Vector apply_transpose_impl(const Vector& u) const override { return Vector::Zero(u.size()); }
};

/// K given as an explicit matrix.
class MatrixOperator final : public ForwardOperator {
 public:
  explicit MatrixOperator(DenseMatrix k) : ForwardOperator(static_cast<int>(k.rows())), k_(std::move(k)) {
    detail::require(k_.rows() == k_.cols(), "matrix operator must be square");
  }
  DenseMatrix dense() const override { return k_; }

 protected:
  Vector apply_impl(const Vector& u) const override { return k_ * u; }
  Vector apply_transpose_impl(const Vector& u) const override { return k_.transpose() * u; }

 private:
  DenseMatrix k_;
};

/// Periodic tridiagonal system, factorized once (Thomas + Sherman-Morrison).
/// Row i reads lower[i] x[i-1] + diag[i] x[i] + upper[i] x[i+1], indices mod n.
class CyclicTridiagonal {
 public:
  CyclicTridiagonal(Vector lower, Vector diag, Vector upper)
      : lower_(std::move(lower)), diag_(std::move(diag)), upper_(std::move(upper)) {
    const Eigen::Index n = diag_.size();
    detail::require(n >= 3 && lower_.size() == n && upper_.size() == n,
                    "cyclic tridiagonal needs n >= 3 and matching bands");
    corner_bl_ = upper_[n - 1];  // A(n-1, 0)
    corner_tr_ = lower_[0];      // A(0, n-1)
    gamma_ = -diag_[0];
    Vector bb = diag_;
    bb[0] -= gamma_;
    bb[n - 1] -= corner_bl_ * corner_tr_ / gamma_;
    inv_denom_.resize(n);
    cprime_.resize(n);
    double prev = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double a = i > 0 ? lower_[i] : 0.0;
      const double denom = bb[i] - a * prev;
      if (denom == 0.0) throw SolverError("cyclic tridiagonal factorization hit a zero pivot");
      inv_denom_[i] = 1.0 / denom;
      cprime_[i] = i + 1 < n ? upper_[i] * inv_denom_[i] : 0.0;
      prev = cprime_[i];
    }
    Vector u = Vector::Zero(n);
    u[0] = gamma_;
    u[n - 1] = corner_bl_;
    z_ = u;
    solve_modified(z_);
    denom_ = 1.0 + z_[0] + corner_tr_ * z_[n - 1] / gamma_;
  }

  Eigen::Index size() const { return diag_.size(); }

  void solve_in_place(Vector& x) const {
    solve_modified(x);
    const Eigen::Index n = x.size();
    const double fact = (x[0] + corner_tr_ * x[n - 1] / gamma_) / denom_;
    x.noalias() -= fact * z_;
  }

  void multiply(const Vector& x, Vector& out) const {
    const Eigen::Index n = x.size();
    out[0] = lower_[0] * x[n - 1] + diag_[0] * x[0] + upper_[0] * x[1];
    for (Eigen::Index i = 1; i + 1 < n; ++i)
      out[i] = lower_[i] * x[i - 1] + diag_[i] * x[i] + upper_[i] * x[i + 1];
    out[n - 1] = lower_[n - 1] * x[n - 2] + diag_[n - 1] * x[n - 1] + upper_[n - 1] * x[0];
  }

  /// Bands of the transposed matrix.
  CyclicTridiagonal transposed() const {
    const Eigen::Index n = size();
    Vector lo(n), up(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      lo[i] = upper_[(i + n - 1) % n];
      up[i] = lower_[(i + 1) % n];
    }
    return CyclicTridiagonal(lo, diag_, up);
  }

 private:
  void solve_modified(Vector& x) const {
    const Eigen::Index n = x.size();
    x[0] *= inv_denom_[0];
    for (Eigen::Index i = 1; i < n; ++i) x[i] = (x[i] - lower_[i] * x[i - 1]) * inv_denom_[i];
    for (Eigen::Index i = n - 2; i >= 0; --i) x[i] -= cprime_[i] * x[i + 1];
  }

  Vector lower_, diag_, upper_;
  Vector inv_denom_, cprime_, z_;
  double corner_bl_ = 0.0, corner_tr_ = 0.0, gamma_ = 0.0, denom_ = 1.0;
};

struct ParabolicConfig {
  double a = 4e-3;  // diffusivity
  double b = 0.4;   // advection
  double c = 0.0;   // reaction
  double T = 0.8;   // end time
  double c1 = 1.0;  // time step ratio k ~ c1 h
};

/// K = E^{N_t}, E = (M + k/2 S)^{-1} (M - k/2 S).
class ParabolicOperator final : public ForwardOperator {
 public:
  ParabolicOperator(const GridLevel& level, const ParabolicConfig& cfg)
      : ForwardOperator(level.n_dof), cfg_(cfg) {
    detail::require(level.kind == GridKind::PeriodicInterval, "parabolic operator needs a periodic 1D level");
    detail::require(cfg.a > 0 && cfg.b >= 0 && cfg.c >= 0 && cfg.T > 0 && cfg.c1 > 0,
                    "parabolic config: need a > 0, b >= 0, c >= 0, T > 0, c1 > 0");
    detail::require(level.n_dof >= 3, "parabolic operator needs at least 3 nodes");
    const double h = level.h;
    steps_ = std::max(1, static_cast<int>(std::ceil(cfg.T / (cfg.c1 * h) - 1e-9)));
    k_ = cfg.T / steps_;
    const int n = level.n_dof;
    // Row stencils (column i-1, i, i+1).
    const double m_off = h / 6.0, m_diag = 2.0 * h / 3.0;
    const double s_lower = -cfg.a / h + 0.5 * cfg.b + cfg.c * h / 6.0;
    const double s_diag = 2.0 * cfg.a / h + cfg.c * 2.0 * h / 3.0;
    const double s_upper = -cfg.a / h - 0.5 * cfg.b + cfg.c * h / 6.0;
    const double hk = 0.5 * k_;
    const auto band = [n](double v) { return Vector::Constant(n, v); };
    implicit_ = std::make_unique<CyclicTridiagonal>(band(m_off + hk * s_lower), band(m_diag + hk * s_diag),
                                                    band(m_off + hk * s_upper));
    explicit_ = std::make_unique<CyclicTridiagonal>(band(m_off - hk * s_lower), band(m_diag - hk * s_diag),
                                                    band(m_off - hk * s_upper));
    implicit_t_ = std::make_unique<CyclicTridiagonal>(implicit_->transposed());
    explicit_t_ = std::make_unique<CyclicTridiagonal>(explicit_->transposed());
  }

  int steps() const { return steps_; }
  double time_step() const { return k_; }
  const ParabolicConfig& config() const { return cfg_; }

  /// K is circulant on the uniform periodic grid; one application gives every column.
  DenseMatrix dense() const override {
    const int n = n_dof();
    Vector e = Vector::Zero(n);
    e[0] = 1.0;
    const Vector col = apply(e);
    DenseMatrix out(n, n);
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) out(i, j) = col[(i - j + n) % n];
    return out;
  }

 protected:
  Vector apply_impl(const Vector& u) const override {
    Vector y = u, tmp(u.size());
    for (int s = 0; s < steps_; ++s) {
      explicit_->multiply(y, tmp);
      implicit_->solve_in_place(tmp);
      y.swap(tmp);
    }
    return y;
  }

  Vector apply_transpose_impl(const Vector& u) const override {
    // E^T = (M - k/2 S)^T (M + k/2 S)^{-T}
    Vector y = u, tmp(u.size());
    for (int s = 0; s < steps_; ++s) {
      implicit_t_->solve_in_place(y);
      explicit_t_->multiply(y, tmp);
      y.swap(tmp);
    }
    return y;
  }

 private:
  ParabolicConfig cfg_;
  int steps_ = 1;
  double k_ = 0.0;
  std::unique_ptr<CyclicTridiagonal> implicit_, explicit_, implicit_t_, explicit_t_;
};

struct EllipticConfig {
  enum class InnerSolver { Auto, DirectFactorization, ConjugateGradient };
  InnerSolver inner_solver = InnerSolver::Auto;
  double inner_tol = 1e-12;
  int direct_max_cells = 512;  // Auto uses the factorization up to this many cells per side
};

/// P1 stiffness matrix on the dofs of a level (Dirichlet nodes dropped).
inline SparseMatrix stiffness_matrix(const GridLevel& lv) {
  std::vector<Eigen::Triplet<double>> trip;
  for (const Element& e : lv.elements()) {
    if (e.n_nodes == 2) {
      const double v = 1.0 / e.measure;
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) trip.emplace_back(e.node[a], e.node[b], a == b ? v : -v);
      continue;
    }
    // gradients of barycentric coordinates: grad phi_a = rot(x_{a+2} - x_{a+1}) / (2 area)
    std::array<std::array<double, 2>, 3> grad{};
    for (int a = 0; a < 3; ++a) {
      const auto& p1 = e.xy[(a + 1) % 3];
      const auto& p2 = e.xy[(a + 2) % 3];
      grad[a] = {(p1[1] - p2[1]) / (2 * e.measure), (p2[0] - p1[0]) / (2 * e.measure)};
    }
    for (int a = 0; a < 3; ++a) {
      if (e.node[a] < 0) continue;
      for (int b = 0; b < 3; ++b) {
        if (e.node[b] < 0) continue;
        trip.emplace_back(e.node[a], e.node[b],
                          e.measure * (grad[a][0] * grad[b][0] + grad[a][1] * grad[b][1]));
      }
    }
  }
  SparseMatrix a(lv.n_dof, lv.n_dof);
  a.setFromTriplets(trip.begin(), trip.end());
  a.prune(1e-300);
  return a;
}

/// K u = y with A y = -M u, where A is the stiffness and M the consistent mass matrix.
class EllipticOperator final : public ForwardOperator {
 public:
  EllipticOperator(const GridLevel& level, const EllipticConfig& cfg = {})
      : ForwardOperator(level.n_dof), cfg_(cfg) {
    detail::require(level.kind == GridKind::DirichletSquare, "elliptic operator needs a 2D Dirichlet level");
    stiffness_ = stiffness_matrix(level);
    mass_ = rescaled_mass_matrix(level) * (level.h * level.h);
    use_direct_ = cfg.inner_solver == EllipticConfig::InnerSolver::DirectFactorization ||
                  (cfg.inner_solver == EllipticConfig::InnerSolver::Auto && level.n_cells <= cfg.direct_max_cells);
    if (use_direct_) {
      llt_ = std::make_shared<Eigen::SimplicialLLT<SparseMatrix>>(stiffness_);
      if (llt_->info() != Eigen::Success) throw SolverError("stiffness factorization failed");
    } else {
      detail::require(cfg.inner_tol <= 1e-12, "elliptic CG inner tolerance must be <= 1e-12");
    }
  }

  const SparseMatrix& stiffness() const { return stiffness_; }
  const SparseMatrix& mass() const { return mass_; }

 protected:
  Vector apply_impl(const Vector& u) const override { return -stiffness_solve(mass_ * u); }
  Vector apply_transpose_impl(const Vector& u) const override { return -(mass_ * stiffness_solve(u)); }

 private:
  Vector stiffness_solve(const Vector& b) const {
    if (use_direct_) return llt_->solve(b);
    Eigen::ConjugateGradient<SparseMatrix, Eigen::Lower | Eigen::Upper> cg(stiffness_);
    cg.setTolerance(cfg_.inner_tol);
    cg.setMaxIterations(20 * static_cast<int>(b.size()) + 100);
    Vector x = cg.solve(b);
    if (cg.info() != Eigen::Success) throw SolverError("elliptic inner CG did not converge");
    return x;
  }

  EllipticConfig cfg_;
  SparseMatrix stiffness_, mass_;
  bool use_direct_ = true;
  std::shared_ptr<Eigen::SimplicialLLT<SparseMatrix>> llt_;
};

/// The <.,.>_h adjoint of K: W^{-1} K^T W.
inline Vector adjoint_h_apply(const ForwardOperator& op, const GridLevel& level, const Vector& u) {
  return op.apply_transpose(level.weights.cwiseProduct(u)).cwiseQuotient(level.weights);
}

using OperatorBuilder = std::function<std::unique_ptr<ForwardOperator>(const GridLevel&)>;
using ScalarField = std::function<double(double, double)>;

/// L2 errors of K_h I_h u on the listed levels. Without `exact` the finest level
/// of the hierarchy serves as reference (results are prolonged to it); with
/// `exact` each level is compared to I_h(exact).
inline std::vector<double> convergence_probe(const GridHierarchy& g, const OperatorBuilder& build,
                                             const ScalarField& u, const std::vector<int>& levels,
                                             const ScalarField& exact = nullptr) {
  std::vector<double> errors;
  Vector reference;
  if (!exact) {
    const auto ref_op = build(g.level(g.finest()));
    reference = ref_op->apply(interpolate(g.level(g.finest()), u));
  }
  for (int i : levels) {
    detail::require(i >= 0 && i <= g.finest(), "convergence_probe: level out of range");
    const auto op = build(g.level(i));
    Vector ku = op->apply(interpolate(g.level(i), u));
    if (exact) {
      errors.push_back(l2_norm(g, i, ku - interpolate(g.level(i), exact)));
      continue;
    }
    for (int j = i; j < g.finest(); ++j) ku = g.prolong(j, ku);
    errors.push_back(l2_norm(g, g.finest(), ku - reference));
  }
  return errors;
}

}  // namespace mgipm
