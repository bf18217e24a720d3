#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace mgipm;
using testutil::random_vector;
using testutil::rel_diff;

namespace {

double transpose_defect(const ForwardOperator& k, unsigned seed) {
  const Vector u = random_vector(k.n_dof(), seed), v = random_vector(k.n_dof(), seed + 1000);
  const double lhs = k.apply(u).dot(v);
  const double rhs = u.dot(k.apply_transpose(v));
  return std::abs(lhs - rhs) / std::max(std::abs(lhs), 1e-300);
}

ParabolicConfig no_advection() {
  ParabolicConfig c;
  c.b = 0.0;
  return c;
}

}  // namespace

TEST(CyclicTridiagonal, SolveInvertsMultiply) {
  const int n = 9;
  const Vector lo = random_vector(n, 1, -1, 0), up = random_vector(n, 2, -1, 0);
  const Vector d = Vector::Constant(n, 4.0);
  const CyclicTridiagonal t(lo, d, up);
  const Vector x = random_vector(n, 3);
  Vector b(n);
  t.multiply(x, b);
  Vector y = b;
  t.solve_in_place(y);
  EXPECT_LT((y - x).norm(), 1e-13);
  Vector bt(n), bt2(n);
  t.transposed().multiply(x, bt);
  // dense check of the transpose
  DenseMatrix a = DenseMatrix::Zero(n, n);
  for (int j = 0; j < n; ++j) {
    Vector e = Vector::Zero(n), col(n);
    e[j] = 1;
    t.multiply(e, col);
    a.col(j) = col;
  }
  bt2 = a.transpose() * x;
  EXPECT_LT((bt - bt2).norm(), 1e-14);
}

TEST(Parabolic, PreservesConstantsWithoutReaction) {
  for (int n : {16, 50, 256}) {
    const GridLevel lv = GridLevel::make(GridKind::PeriodicInterval, n);
    const ParabolicOperator k(lv, ParabolicConfig{});
    const Vector c = Vector::Constant(n, 2.5);
    EXPECT_LT((k.apply(c) - c).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((k.apply_transpose(c) - c).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Parabolic, FourierModeDecay) {
  const GridLevel lv = GridLevel::make(GridKind::PeriodicInterval, 1024);
  const ParabolicConfig cfg = no_advection();
  const ParabolicOperator k(lv, cfg);
  const Vector u = interpolate(lv, [](double x) { return std::sin(2 * M_PI * x); });
  const double decay = std::exp(-4 * M_PI * M_PI * cfg.a * cfg.T);
  EXPECT_LT((k.apply(u) - decay * u).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(Parabolic, TransposePairing) {
  const GridLevel lv = GridLevel::make(GridKind::PeriodicInterval, 96);
  const ParabolicOperator k(lv, ParabolicConfig{});
  for (unsigned s = 0; s < 10; ++s) EXPECT_LT(transpose_defect(k, s), 1e-11);
}

TEST(Parabolic, DenseMatchesApply) {
  const GridLevel lv = GridLevel::make(GridKind::PeriodicInterval, 40);
  const ParabolicOperator k(lv, ParabolicConfig{});
  const DenseMatrix d = k.dense();
  const Vector u = random_vector(40, 4);
  EXPECT_LT(rel_diff(d * u, k.apply(u)), 1e-13);
  EXPECT_LT(rel_diff(d.transpose() * u, k.apply_transpose(u)), 1e-13);
}

TEST(Parabolic, Linearity) {
  const GridLevel lv = GridLevel::make(GridKind::PeriodicInterval, 64);
  const ParabolicOperator k(lv, ParabolicConfig{});
  const Vector u = random_vector(64, 5), v = random_vector(64, 6);
  EXPECT_LT(rel_diff(k.apply(2.0 * u - 3.0 * v), 2.0 * k.apply(u) - 3.0 * k.apply(v)), 1e-13);
}

TEST(Parabolic, RejectsWrongGrid) {
  EXPECT_THROW(ParabolicOperator(GridLevel::make(GridKind::DirichletSquare, 8), ParabolicConfig{}), Error);
  ParabolicConfig bad;
  bad.a = 0.0;
  EXPECT_THROW(ParabolicOperator(GridLevel::make(GridKind::PeriodicInterval, 8), bad), Error);
}

TEST(Elliptic, EigenfunctionIsScaled) {
  const GridLevel lv = GridLevel::make(GridKind::DirichletSquare, 64);
  const GridHierarchy g({lv});
  const EllipticOperator k(lv);
  const Vector u = interpolate(lv, [](double x, double y) { return std::sin(M_PI * x) * std::sin(M_PI * y); });
  const Vector expect = -u / (2 * M_PI * M_PI);
  EXPECT_LT(l2_norm(g, 0, k.apply(u) - expect) / l2_norm(g, 0, expect), 2e-3);
}

TEST(Elliptic, ZeroAndTranspose) {
  const GridLevel lv = GridLevel::make(GridKind::DirichletSquare, 16);
  const EllipticOperator k(lv);
  EXPECT_EQ(k.apply(Vector::Zero(lv.n_dof)).norm(), 0.0);
  for (unsigned s = 0; s < 5; ++s) EXPECT_LT(transpose_defect(k, s), 1e-11);
}

TEST(Elliptic, CgInnerSolverAgreesWithFactorization) {
  const GridLevel lv = GridLevel::make(GridKind::DirichletSquare, 16);
  EllipticConfig cg_cfg;
  cg_cfg.inner_solver = EllipticConfig::InnerSolver::ConjugateGradient;
  const EllipticOperator kd(lv), kc(lv, cg_cfg);
  const Vector u = random_vector(lv.n_dof, 7);
  EXPECT_LT(rel_diff(kd.apply(u), kc.apply(u)), 1e-10);
  EXPECT_LT(rel_diff(kd.apply_transpose(u), kc.apply_transpose(u)), 1e-10);
}

TEST(Elliptic, NegativeDefiniteInMassPairing) {
  const GridLevel lv = GridLevel::make(GridKind::DirichletSquare, 16);
  const EllipticOperator k(lv);
  for (unsigned s = 0; s < 10; ++s) {
    const Vector u = random_vector(lv.n_dof, 20 + s);
    EXPECT_LT(u.dot(k.mass() * k.apply(u)), 0.0);
  }
}

TEST(AdjointH, Identity) {
  for (GridKind kind : {GridKind::PeriodicInterval, GridKind::DirichletSquare}) {
    const GridLevel lv = GridLevel::make(kind, 16);
    std::unique_ptr<ForwardOperator> k;
    if (kind == GridKind::PeriodicInterval) k = std::make_unique<ParabolicOperator>(lv, ParabolicConfig{});
    else k = std::make_unique<EllipticOperator>(lv);
    for (unsigned s = 0; s < 5; ++s) {
      const Vector u = random_vector(lv.n_dof, s), v = random_vector(lv.n_dof, s + 50);
      const double lhs = inner_h(lv, k->apply(u), v), rhs = inner_h(lv, u, adjoint_h_apply(*k, lv, v));
      EXPECT_LT(std::abs(lhs - rhs) / std::abs(lhs), 1e-11);
    }
  }
}

TEST(AdjointH, UniformWeightsGivePlainTranspose) {
  const GridLevel lv = GridLevel::make(GridKind::PeriodicInterval, 32);
  const ParabolicOperator k(lv, ParabolicConfig{});
  const Vector u = random_vector(32, 9);
  EXPECT_LT(rel_diff(adjoint_h_apply(k, lv, u), k.apply_transpose(u)), 1e-14);
}

TEST(AdjointH, EllipticDenseFormula) {
  const GridLevel lv = GridLevel::make(GridKind::DirichletSquare, 8);
  const EllipticOperator k(lv);
  const DenseMatrix m = DenseMatrix(k.mass());
  const DenseMatrix ainv = DenseMatrix(k.stiffness()).inverse();
  const Vector& w = lv.weights;
  // K^{*h} = W^{-1} K^T W with K = -A^{-1} M
  const DenseMatrix expect = -(w.cwiseInverse().asDiagonal() * (m * ainv) * w.asDiagonal());
  const DenseMatrix got = materialize([&](const Vector& v) { return adjoint_h_apply(k, lv, v); }, lv.n_dof);
  EXPECT_LT((got - expect).norm() / expect.norm(), 1e-12);
}

TEST(ConvergenceProbe, ParabolicSelfConvergence) {
  const GridHierarchy g = build_hierarchy(GridKind::PeriodicInterval, 64, 6);  // 1/64 .. 1/2048
  const OperatorBuilder build = [](const GridLevel& lv) -> std::unique_ptr<ForwardOperator> {
    return std::make_unique<ParabolicOperator>(lv, ParabolicConfig{});
  };
  const auto err = convergence_probe(g, build, [](double x, double) { return two_bump(x); }, {0, 1, 2, 3});
  for (std::size_t i = 1; i < err.size(); ++i) {
    EXPECT_GE(err[i - 1] / err[i], 3.2) << i;
    EXPECT_LE(err[i - 1] / err[i], 4.8) << i;
  }
}

TEST(ConvergenceProbe, EllipticAgainstExactLimit) {
  const GridHierarchy g = build_hierarchy(GridKind::DirichletSquare, 8, 4);
  const OperatorBuilder build = [](const GridLevel& lv) -> std::unique_ptr<ForwardOperator> {
    return std::make_unique<EllipticOperator>(lv);
  };
  const ScalarField u = [](double x, double y) { return std::sin(M_PI * x) * std::sin(M_PI * y); };
  const ScalarField exact = [&](double x, double y) { return -u(x, y) / (2 * M_PI * M_PI); };
  const auto err = convergence_probe(g, build, u, {0, 1, 2, 3}, exact);
  for (std::size_t i = 1; i < err.size(); ++i) {
    EXPECT_GE(err[i - 1] / err[i], 3.2) << i;
    EXPECT_LE(err[i - 1] / err[i], 4.8) << i;
  }
}

TEST(ConvergenceProbe, SameLevelGivesZero) {
  const GridHierarchy g = build_hierarchy(GridKind::PeriodicInterval, 32, 1);
  const OperatorBuilder build = [](const GridLevel& lv) -> std::unique_ptr<ForwardOperator> {
    return std::make_unique<ParabolicOperator>(lv, ParabolicConfig{});
  };
  const auto err = convergence_probe(g, build, [](double x, double) { return two_bump(x); }, {0});
  EXPECT_EQ(err[0], 0.0);
}

TEST(MatvecCounter, CountsEveryApplication) {
  const GridLevel lv = GridLevel::make(GridKind::PeriodicInterval, 16);
  ParabolicOperator k(lv, ParabolicConfig{});
  const Vector u = random_vector(16, 1);
  EXPECT_EQ(k.matvec_count(), 0);
  k.apply(u);
  k.apply_transpose(u);
  k.apply(u);
  EXPECT_EQ(k.matvec_count(), 3);
  k.reset_matvec_count();
  EXPECT_EQ(k.matvec_count(), 0);
}

TEST(ZeroOperator, MapsToZero) {
  const ZeroOperator z(5);
  EXPECT_EQ(z.apply(Vector::Ones(5)).norm(), 0.0);
  EXPECT_EQ(z.apply_transpose(Vector::Ones(5)).norm(), 0.0);
  EXPECT_EQ(z.matvec_count(), 2);
}
