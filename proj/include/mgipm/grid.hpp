#pragma once

// Nested uniform meshes on the unit interval (periodic) and the unit square
// (three-line triangulation, homogeneous Dirichlet), together with the lumped
// inner product, exact P1 mass matrices and the inter-grid transfers used by
// the multigrid preconditioners.

#include <Eigen/Core>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "mgipm/error.hpp"

namespace mgipm {

using Vector = Eigen::VectorXd;
using SparseMatrix = Eigen::SparseMatrix<double>;

enum class GridKind { PeriodicInterval, DirichletSquare };

inline std::string to_string(GridKind kind) {
  return kind == GridKind::PeriodicInterval ? "periodic-interval" : "dirichlet-square";
}

/// One P1 element. Nodes on the Dirichlet boundary carry index -1.
struct Element {
  int n_nodes = 0;
  std::array<int, 3> node{-1, -1, -1};
  double measure = 0.0;  // length in 1D, area in 2D
  std::array<std::array<double, 2>, 3> xy{};
};

/// A single uniform mesh. In 1D every node is a degree of freedom; in 2D only
/// the (n_cells-1)^2 interior nodes are.
struct GridLevel {
  GridKind kind = GridKind::PeriodicInterval;
  int n_cells = 0;
  double h = 0.0;
  int n_dof = 0;
  Vector weights;

  int dim() const { return kind == GridKind::PeriodicInterval ? 1 : 2; }

  /// Interior nodes per direction (2D only).
  int side() const { return n_cells - 1; }

  /// Dof index of interior node (i, j), 1 <= i, j <= n_cells - 1; -1 on the boundary.
  int index(int i, int j) const {
    if (i <= 0 || j <= 0 || i >= n_cells || j >= n_cells) return -1;
    return (j - 1) * side() + (i - 1);
  }

  /// Physical coordinates of dof k (y = 0 in 1D).
  std::array<double, 2> node(int k) const {
    if (kind == GridKind::PeriodicInterval) return {k * h, 0.0};
    return {(k % side() + 1) * h, (k / side() + 1) * h};
  }

  std::vector<Element> elements() const {
    std::vector<Element> out;
    if (kind == GridKind::PeriodicInterval) {
      out.reserve(n_cells);
      for (int i = 0; i < n_cells; ++i) {
        Element e;
        e.n_nodes = 2;
        e.node = {i, (i + 1) % n_cells, -1};
        e.measure = h;
        e.xy = {{{i * h, 0.0}, {(i + 1) * h, 0.0}, {0.0, 0.0}}};
        out.push_back(e);
      }
      return out;
    }
    // Each axis-parallel square is cut along its slope-one diagonal.
    out.reserve(2 * n_cells * n_cells);
    const double area = 0.5 * h * h;
    for (int J = 0; J < n_cells; ++J) {
      for (int I = 0; I < n_cells; ++I) {
        Element lower;
        lower.n_nodes = 3;
        lower.node = {index(I, J), index(I + 1, J), index(I + 1, J + 1)};
        lower.measure = area;
        lower.xy = {{{I * h, J * h}, {(I + 1) * h, J * h}, {(I + 1) * h, (J + 1) * h}}};
        Element upper;
        upper.n_nodes = 3;
        upper.node = {index(I, J), index(I + 1, J + 1), index(I, J + 1)};
        upper.measure = area;
        upper.xy = {{{I * h, J * h}, {(I + 1) * h, (J + 1) * h}, {I * h, (J + 1) * h}}};
        out.push_back(lower);
        out.push_back(upper);
      }
    }
    return out;
  }

  static GridLevel periodic_interval(int n_cells) {
    detail::require(n_cells >= 2, "periodic interval needs at least 2 cells");
    return make(GridKind::PeriodicInterval, n_cells);
  }

  static GridLevel dirichlet_square(int n_cells) {
    detail::require(n_cells >= 2, "square mesh needs at least 2 cells per side");
    return make(GridKind::DirichletSquare, n_cells);
  }

  /// Unchecked factory behind the two named constructors.
  static GridLevel make(GridKind kind, int n_cells) {
    GridLevel lv;
    lv.kind = kind;
    lv.n_cells = n_cells;
    lv.h = 1.0 / n_cells;
    lv.n_dof = kind == GridKind::PeriodicInterval ? n_cells : (n_cells - 1) * (n_cells - 1);
    // w(P) = (1/(d+1)) * sum of measures of elements containing P.
    lv.weights = Vector::Zero(lv.n_dof);
    for (const Element& e : lv.elements()) {
      for (int a = 0; a < e.n_nodes; ++a) {
        if (e.node[a] >= 0) lv.weights[e.node[a]] += e.measure / e.n_nodes;
      }
    }
    return lv;
  }
};

/// Function values at the dofs of one hierarchy level.
struct NodalField {
  int level_index = 0;
  Vector values;
};

/// Exact P1 mass matrix scaled by h^{-d}: (M_h)_{ij} = h^{-d} <phi_i, phi_j>.
inline SparseMatrix rescaled_mass_matrix(const GridLevel& lv) {
  std::vector<Eigen::Triplet<double>> trip;
  const double scale = std::pow(lv.h, -lv.dim());
  for (const Element& e : lv.elements()) {
    const int n = e.n_nodes;
    // Element mass: measure * (1 + delta_ab) / ((n)(n+1)).
    const double base = e.measure / (n * (n + 1)) * scale;
    for (int a = 0; a < n; ++a) {
      if (e.node[a] < 0) continue;
      for (int b = 0; b < n; ++b) {
        if (e.node[b] < 0) continue;
        trip.emplace_back(e.node[a], e.node[b], base * (a == b ? 2.0 : 1.0));
      }
    }
  }
  SparseMatrix m(lv.n_dof, lv.n_dof);
  m.setFromTriplets(trip.begin(), trip.end());
  return m;
}

/// Natural embedding V_{2h} -> V_h as a (fine x coarse) matrix.
inline SparseMatrix prolongation_matrix(const GridLevel& coarse, const GridLevel& fine) {
  detail::require(coarse.kind == fine.kind && fine.n_cells == 2 * coarse.n_cells,
                  "prolongation needs nested levels with halved h");
  std::vector<Eigen::Triplet<double>> trip;
  if (fine.kind == GridKind::PeriodicInterval) {
    const int nc = coarse.n_cells;
    for (int j = 0; j < nc; ++j) {
      trip.emplace_back(2 * j, j, 1.0);
      trip.emplace_back(2 * j + 1, j, 0.5);
      trip.emplace_back(2 * j + 1, (j + 1) % nc, 0.5);
    }
  } else {
    const auto add = [&](int row, int I, int J, double v) {
      const int col = coarse.index(I, J);
      if (col >= 0) trip.emplace_back(row, col, v);
    };
    for (int j = 1; j < fine.n_cells; ++j) {
      for (int i = 1; i < fine.n_cells; ++i) {
        const int row = fine.index(i, j);
        const bool iodd = i % 2 != 0;
        const bool jodd = j % 2 != 0;
        if (!iodd && !jodd) {
          add(row, i / 2, j / 2, 1.0);
        } else if (iodd && !jodd) {
          add(row, (i - 1) / 2, j / 2, 0.5);
          add(row, (i + 1) / 2, j / 2, 0.5);
        } else if (!iodd && jodd) {
          add(row, i / 2, (j - 1) / 2, 0.5);
          add(row, i / 2, (j + 1) / 2, 0.5);
        } else {
          // midpoint of the slope-one diagonal of a coarse square
          add(row, (i - 1) / 2, (j - 1) / 2, 0.5);
          add(row, (i + 1) / 2, (j + 1) / 2, 0.5);
        }
      }
    }
  }
  SparseMatrix p(fine.n_dof, coarse.n_dof);
  p.setFromTriplets(trip.begin(), trip.end());
  return p;
}

/// Nested levels ordered coarsest (index 0) to finest. Immutable after
/// construction; safe to share between threads.
class GridHierarchy {
 public:
  explicit GridHierarchy(std::vector<GridLevel> levels) : levels_(std::move(levels)) {
    detail::require(!levels_.empty(), "hierarchy needs at least one level");
    for (std::size_t i = 1; i < levels_.size(); ++i) {
      detail::require(levels_[i].kind == levels_[0].kind, "mixed grid kinds in hierarchy");
      detail::require(levels_[i].n_cells == 2 * levels_[i - 1].n_cells,
                      "each finer level must halve h");
    }
    for (std::size_t i = 0; i < levels_.size(); ++i) {
      mass_.push_back(rescaled_mass_matrix(levels_[i]));
      auto llt = std::make_shared<Eigen::SimplicialLLT<SparseMatrix>>(mass_.back());
      if (llt->info() != Eigen::Success) throw SolverError("mass matrix factorization failed");
      mass_factor_.push_back(std::move(llt));
      prolong_.push_back(i == 0 ? SparseMatrix() : prolongation_matrix(levels_[i - 1], levels_[i]));
    }
  }

  int size() const { return static_cast<int>(levels_.size()); }
  int finest() const { return size() - 1; }
  GridKind kind() const { return levels_[0].kind; }
  int dim() const { return levels_[0].dim(); }
  const GridLevel& level(int i) const { return levels_.at(i); }
  const std::vector<GridLevel>& levels() const { return levels_; }

  /// J_h mapping level fine-1 into level fine.
  const SparseMatrix& prolongation(int fine) const {
    require_fine(fine);
    return prolong_[fine];
  }
  const SparseMatrix& mass(int i) const { return mass_.at(i); }

  Vector prolong(int coarse, const Vector& u) const {
    detail::require(coarse >= 0 && coarse < finest(), "prolong: already at the finest level");
    check_size(coarse, u);
    return prolong_[coarse + 1] * u;
  }

  /// R_{2h} = 2^{-d} J^T; maps level fine to fine-1.
  Vector restrict_to_coarse(int fine, const Vector& u) const {
    require_fine(fine);
    check_size(fine, u);
    return std::ldexp(1.0, -dim()) * (prolong_[fine].transpose() * u);
  }

  Vector mass_apply(int i, const Vector& u) const {
    check_size(i, u);
    return mass_[i] * u;
  }

  Vector mass_solve(int i, const Vector& b) const {
    check_size(i, b);
    Vector x = mass_factor_[i]->solve(b);
    if (mass_factor_[i]->info() != Eigen::Success) throw SolverError("mass solve failed");
    return x;
  }

  /// Pi_{2h} = M_{2h}^{-1} R_{2h} M_h.
  Vector l2_project(int fine, const Vector& u) const {
    return mass_solve(fine - 1, restrict_to_coarse(fine, mass_apply(fine, u)));
  }

  /// (I - J Pi) u, the component in the L2-orthogonal complement of V_{2h}.
  Vector rough_project(int fine, const Vector& u) const {
    return u - prolong(fine - 1, l2_project(fine, u));
  }

  /// Keeps the values at fine nodes that coincide with coarse nodes.
  Vector coarsen_lambda(int fine, const Vector& lam) const {
    require_fine(fine);
    check_size(fine, lam);
    const GridLevel& c = levels_[fine - 1];
    Vector out(c.n_dof);
    if (kind() == GridKind::PeriodicInterval) {
      for (int j = 0; j < c.n_dof; ++j) out[j] = lam[2 * j];
    } else {
      const GridLevel& f = levels_[fine];
      for (int J = 1; J < c.n_cells; ++J)
        for (int I = 1; I < c.n_cells; ++I) out[c.index(I, J)] = lam[f.index(2 * I, 2 * J)];
    }
    return out;
  }

 private:
  void require_fine(int fine) const {
    detail::require(fine >= 1 && fine <= finest(), "operation needs a level with a coarser neighbour");
  }
  void check_size(int i, const Vector& u) const {
    detail::require(i >= 0 && i < size(), "level index out of range");
    detail::require(u.size() == levels_[i].n_dof, "field length does not match level");
  }

  std::vector<GridLevel> levels_;
  std::vector<SparseMatrix> mass_;
  std::vector<std::shared_ptr<Eigen::SimplicialLLT<SparseMatrix>>> mass_factor_;
  std::vector<SparseMatrix> prolong_;
};

inline bool is_power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

inline GridHierarchy build_hierarchy(GridKind kind, int n0_cells, int n_levels) {
  detail::require(n0_cells >= 4, "coarsest level needs at least 4 cells");
  detail::require(n_levels >= 1, "hierarchy needs at least one level");
  if (kind == GridKind::DirichletSquare)
    detail::require(is_power_of_two(n0_cells), "2D coarsest cell count must be a power of two");
  std::vector<GridLevel> levels;
  for (int i = 0; i < n_levels; ++i) {
    const int n = n0_cells << i;
    levels.push_back(kind == GridKind::PeriodicInterval ? GridLevel::periodic_interval(n)
                                                        : GridLevel::dirichlet_square(n));
  }
  return GridHierarchy(std::move(levels));
}

// ---------------------------------------------------------------------------
// Field-level operations

inline double inner_h(const GridLevel& lv, const Vector& u, const Vector& v) {
  detail::require(u.size() == lv.n_dof && v.size() == lv.n_dof, "inner_h: length mismatch");
  return (lv.weights.array() * u.array() * v.array()).sum();
}

inline double inner_h(const GridHierarchy& g, const NodalField& u, const NodalField& v) {
  detail::require(u.level_index == v.level_index, "inner_h: fields live on different levels");
  return inner_h(g.level(u.level_index), u.values, v.values);
}

inline double norm_h(const GridLevel& lv, const Vector& u) { return std::sqrt(inner_h(lv, u, u)); }

/// Exact L2 norm of the P1 function with nodal values u.
inline double l2_norm(const GridHierarchy& g, int i, const Vector& u) {
  const double hd = std::pow(g.level(i).h, g.dim());
  return std::sqrt(std::max(0.0, hd * u.dot(g.mass_apply(i, u))));
}

inline NodalField prolong(const GridHierarchy& g, const NodalField& u) {
  return {u.level_index + 1, g.prolong(u.level_index, u.values)};
}

inline NodalField restrict_field(const GridHierarchy& g, const NodalField& u) {
  return {u.level_index - 1, g.restrict_to_coarse(u.level_index, u.values)};
}

inline NodalField mass_apply(const GridHierarchy& g, const NodalField& u) {
  return {u.level_index, g.mass_apply(u.level_index, u.values)};
}

inline NodalField l2_project(const GridHierarchy& g, const NodalField& u) {
  return {u.level_index - 1, g.l2_project(u.level_index, u.values)};
}

inline NodalField rough_project(const GridHierarchy& g, const NodalField& u) {
  return {u.level_index, g.rough_project(u.level_index, u.values)};
}

inline NodalField coarsen_lambda(const GridHierarchy& g, const NodalField& lam) {
  return {lam.level_index - 1, g.coarsen_lambda(lam.level_index, lam.values)};
}

/// Nodal interpolant I_h f. f takes x (1D) or (x, y) (2D).
template <class F>
Vector interpolate(const GridLevel& lv, F&& f) {
  Vector out(lv.n_dof);
  for (int k = 0; k < lv.n_dof; ++k) {
    const auto p = lv.node(k);
    if constexpr (std::is_invocable_v<F, double, double>) {
      out[k] = f(p[0], p[1]);
    } else {
      out[k] = f(p[0]);
    }
  }
  return out;
}

/// Discrete surrogate of the W^2_inf / R seminorm: max over nodes of |first
/// difference| / h and |second difference| / h^2. Centered differences with
/// periodic wrap in 1D; in 2D per coordinate direction over interior nodes,
/// one-sided first differences on the ring next to the boundary.
inline double discrete_w2inf(const GridLevel& lv, const Vector& g) {
  detail::require(g.size() == lv.n_dof, "discrete_w2inf: length mismatch");
  const double h = lv.h;
  double best = 0.0;
  if (lv.kind == GridKind::PeriodicInterval) {
    const int n = lv.n_dof;
    for (int i = 0; i < n; ++i) {
      const double l = g[(i + n - 1) % n];
      const double r = g[(i + 1) % n];
      best = std::max({best, std::abs(r - l) / (2 * h), std::abs(r - 2 * g[i] + l) / (h * h)});
    }
    return best;
  }
  const int m = lv.side();
  const auto at = [&](int i, int j) { return g[lv.index(i, j)]; };
  for (int j = 1; j <= m; ++j) {
    for (int i = 1; i <= m; ++i) {
      const double c = at(i, j);
      for (int dir = 0; dir < 2; ++dir) {
        const int il = dir == 0 ? i - 1 : i, jl = dir == 0 ? j : j - 1;
        const int ir = dir == 0 ? i + 1 : i, jr = dir == 0 ? j : j + 1;
        const bool has_l = lv.index(il, jl) >= 0;
        const bool has_r = lv.index(ir, jr) >= 0;
        if (has_l && has_r) {
          const double l = at(il, jl), r = at(ir, jr);
          best = std::max({best, std::abs(r - l) / (2 * h), std::abs(r - 2 * c + l) / (h * h)});
        } else if (has_r) {
          best = std::max(best, std::abs(at(ir, jr) - c) / h);
        } else if (has_l) {
          best = std::max(best, std::abs(c - at(il, jl)) / h);
        }
      }
    }
  }
  return best;
}

}  // namespace mgipm
