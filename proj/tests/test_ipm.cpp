#include <gtest/gtest.h>

#include <array>
#include <cmath>

#include "test_util.hpp"
#include "toy_oracle.hpp"

using namespace mgipm;
using testutil::random_vector;
using testutil::rel_diff;
using testutil::ToyOptimum;
using testutil::enumerate_active_sets;
using testutil::toy_problem;

namespace {

using testutil::dense_problem;

ControlProblem parabolic_problem(int n0, int levels, double beta = 1e-3) {
  ControlProblem p;
  p.hierarchy = std::make_shared<const GridHierarchy>(build_hierarchy(GridKind::PeriodicInterval, n0, levels));
  for (const GridLevel& lv : p.hierarchy->levels())
    p.operators.push_back(std::make_shared<const ParabolicOperator>(lv, ParabolicConfig{}));
  p.beta = beta;
  p.f = p.fine_operator().apply(interpolate(p.fine_level(), [](double x) { return two_bump(x); }));
  p.lo = Vector::Zero(p.n());
  p.hi = Vector::Ones(p.n());
  return p;
}

IpmState random_state(const ControlProblem& p, unsigned seed) {
  IpmState s;
  const Vector t = random_vector(p.n(), seed, 0.05, 0.95);
  s.u = p.lo + t.cwiseProduct(p.hi - p.lo);
  s.v1 = random_vector(p.n(), seed + 1, 0.1, 2.0);
  s.v2 = random_vector(p.n(), seed + 2, 0.1, 2.0);
  s.mu = compute_mu(s, p.lo, p.hi);
  return s;
}

}  // namespace

TEST(HessianApply, ZeroOperator) {
  const ControlProblem p = dense_problem(DenseMatrix::Zero(8, 8), Vector::Ones(8), 0, 1, 0.7);
  const Vector u = random_vector(8, 1);
  EXPECT_LT(rel_diff(hessian_apply(p, u), 0.7 * p.fine_level().weights.cwiseProduct(u)), 1e-15);
}

TEST(HessianApply, SymmetricAndMatchesDense) {
  const ControlProblem p = parabolic_problem(16, 1);
  const Vector u = random_vector(16, 2), v = random_vector(16, 3);
  const double a = hessian_apply(p, u).dot(v), b = u.dot(hessian_apply(p, v));
  EXPECT_LE(std::abs(a - b), 1e-11 * std::abs(a));
  const DenseMatrix k = p.fine_operator().dense();
  const Vector& w = p.fine_level().weights;
  const DenseMatrix dense = p.beta * DenseMatrix(w.asDiagonal()) + k.transpose() * w.asDiagonal() * k;
  const DenseMatrix got = materialize([&](const Vector& x) { return hessian_apply(p, x); }, 16);
  EXPECT_LT((got - dense).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(KktResiduals, VanishAtEnumeratedOptimum) {
  const ControlProblem p = toy_problem();
  const ToyOptimum o = enumerate_active_sets(p);
  // the toy is chosen so that both bounds are active somewhere
  EXPECT_GT(o.v1.maxCoeff() + o.v2.maxCoeff(), 0.0);
  const IpmState s{o.u, o.v1, o.v2, 0.0, 0};
  const KktResiduals r = kkt_residuals(p, s, std::nullopt, Feasibility::Closed);
  EXPECT_LE(r.norm_u, 1e-12);
  EXPECT_LE(r.norm_v1, 1e-12);
  EXPECT_LE(r.norm_v2, 1e-12);
}

TEST(KktResiduals, ZeroMultipliersRejected) {
  const ControlProblem p = toy_problem();
  IpmState s = initial_state(p);
  s.v1.setZero();
  s.v2.setZero();
  EXPECT_THROW(kkt_residuals(p, s), FeasibilityError);
}

TEST(KktResiduals, LinearInData) {
  ControlProblem p = parabolic_problem(16, 1);
  p.lo.setConstant(-5.0);
  p.hi.setConstant(5.0);
  IpmState s = initial_state(p);  // u = 0, v1 = v2, so r_u = K^T W f
  const Vector r1 = kkt_residuals(p, s).r_u;
  p.f *= 2.0;
  EXPECT_LT(rel_diff(kkt_residuals(p, s).r_u, 2.0 * r1), 1e-13);
}

TEST(ComputeMu, Examples) {
  for (int n : {1, 5, 64}) {
    const Vector lo = Vector::Zero(n), hi = Vector::Ones(n);
    IpmState s{Vector::Constant(n, 0.5), Vector::Ones(n), Vector::Ones(n), 0.0, 0};
    EXPECT_DOUBLE_EQ(compute_mu(s, lo, hi), 0.5);
    s.v1.setConstant(0.01);
    s.v2.setConstant(0.01);
    EXPECT_NEAR(compute_mu(s, lo, hi), 0.005, 1e-18);
  }
}

TEST(ComputeMu, MatchesIndependentSum) {
  const ControlProblem p = parabolic_problem(64, 1);
  const IpmState s = random_state(p, 4);
  long double acc = 0.0L;
  for (int i = 0; i < p.n(); ++i)
    acc += static_cast<long double>(s.u[i] - p.lo[i]) * s.v1[i] + static_cast<long double>(p.hi[i] - s.u[i]) * s.v2[i];
  const double oracle = static_cast<double>(acc / (2.0L * p.n()));
  EXPECT_LE(std::abs(compute_mu(s, p.lo, p.hi) - oracle), 1e-15 * oracle);
  EXPECT_LE(std::abs(s.mu - compute_mu(s, p.lo, p.hi)), 1e-14 * s.mu);
}

TEST(ReduceToScaled, UnitGapsGiveTwo) {
  const ControlProblem p = dense_problem(DenseMatrix::Identity(4, 4), Vector::Ones(4), -1.0, 1.0, 0.1);
  IpmState s{Vector::Zero(4), Vector::Ones(4), Vector::Ones(4), 0.0, 0};
  const ReducedSystem red = reduce_to_scaled(p, s, Vector::Zero(4), Vector::Zero(4), Vector::Zero(4));
  EXPECT_EQ(red.m, Vector::Constant(4, 2.0));
  const Vector& w = p.fine_level().weights;
  EXPECT_LT(rel_diff(red.lambda, (2.0 * w.cwiseInverse()).array() + 0.1), 1e-15);
}

TEST(ReduceToScaled, RejectsInfeasibleState) {
  const ControlProblem p = toy_problem();
  IpmState s = initial_state(p);
  s.u[1] = 1.0;
  EXPECT_THROW(reduce_to_scaled(p, s, Vector::Zero(3), Vector::Zero(3), Vector::Zero(3)), FeasibilityError);
}

TEST(ReduceToScaled, ZeroOperatorSolvesDiagonalSystem) {
  const int n = 12;
  const ControlProblem p = dense_problem(DenseMatrix::Zero(n, n), random_vector(n, 5), 0.0, 1.0, 0.3);
  const IpmState s = random_state(p, 6);
  const Vector r_u = random_vector(n, 7), r_v1 = random_vector(n, 8), r_v2 = random_vector(n, 9);
  const ReducedSystem red = reduce_to_scaled(p, s, r_u, r_v1, r_v2);
  const ScaledSystem sys = make_scaled_system(*p.hierarchy, 0, p.fine_operator(), red.lambda, p.beta);
  const KrylovResult kr = solve_symmetrized_cg(sys, red.rhs_scaled, {});
  const Vector du = kr.x.cwiseQuotient(red.p);
  const Vector expect = red.r.cwiseQuotient(red.m + p.beta * p.fine_level().weights);
  EXPECT_LT(rel_diff(du, expect), 1e-14);
}

TEST(ReduceToScaled, UnscaledResidualIsSmall) {
  const ControlProblem p = parabolic_problem(64, 1);
  const IpmState s = random_state(p, 10);
  const KktResiduals kkt = kkt_residuals(p, s);
  const ReducedSystem red = reduce_to_scaled(p, s, kkt.r_u, kkt.r_v1, kkt.r_v2);
  const ScaledSystem sys = make_scaled_system(*p.hierarchy, 0, p.fine_operator(), red.lambda, p.beta);
  KrylovOptions opt;
  opt.tol = 1e-10;
  const Vector du = solve_symmetrized_cg(sys, red.rhs_scaled, opt).x.cwiseQuotient(red.p);
  const Vector resid = hessian_apply(p, du) + red.m.cwiseProduct(du) - red.r;
  EXPECT_LE(resid.norm(), 1e-8 * red.r.norm());
}

TEST(RecoverFullStep, Examples) {
  const ControlProblem p = parabolic_problem(64, 1);
  const IpmState s = random_state(p, 11);
  const Vector r_v1 = random_vector(64, 12), r_v2 = random_vector(64, 13);
  const NewtonStep z = recover_full_step(p, s, Vector::Zero(64), r_v1, r_v2);
  EXPECT_LT(rel_diff(z.dv1, r_v1.cwiseQuotient(s.u - p.lo)), 1e-15);
  EXPECT_LT(rel_diff(z.dv2, r_v2.cwiseQuotient(p.hi - s.u)), 1e-15);
  const NewtonStep zero = recover_full_step(p, s, Vector::Zero(64), Vector::Zero(64), Vector::Zero(64));
  EXPECT_EQ(zero.dv1.norm() + zero.dv2.norm(), 0.0);
}

TEST(RecoverFullStep, SatisfiesAugmentedSystem) {
  const ControlProblem p = parabolic_problem(64, 1);
  const IpmState s = random_state(p, 14);
  const KktResiduals kkt = kkt_residuals(p, s);
  const Vector r_v1 = (kkt.r_v1.array() + 0.3 * s.mu).matrix(), r_v2 = (kkt.r_v2.array() + 0.3 * s.mu).matrix();
  const ReducedSystem red = reduce_to_scaled(p, s, kkt.r_u, r_v1, r_v2);
  const ScaledSystem sys = make_scaled_system(*p.hierarchy, 0, p.fine_operator(), red.lambda, p.beta);
  KrylovOptions opt;
  opt.tol = 1e-11;
  const Vector du = solve_symmetrized_cg(sys, red.rhs_scaled, opt).x.cwiseQuotient(red.p);
  const NewtonStep d = recover_full_step(p, s, du, r_v1, r_v2);
  const Vector b1 = hessian_apply(p, d.du) - d.dv1 + d.dv2 - kkt.r_u;
  const Vector b2 = s.v1.cwiseProduct(d.du) + (s.u - p.lo).cwiseProduct(d.dv1) - r_v1;
  const Vector b3 = -s.v2.cwiseProduct(d.du) + (p.hi - s.u).cwiseProduct(d.dv2) - r_v2;
  EXPECT_LE(b1.norm(), 1e-8 * kkt.r_u.norm());
  EXPECT_LE(b2.norm(), 1e-8 * r_v1.norm());
  EXPECT_LE(b3.norm(), 1e-8 * r_v2.norm());
}

TEST(StepLengths, Examples) {
  const ControlProblem p = dense_problem(DenseMatrix::Identity(4, 4), Vector::Ones(4), 0.0, 1.0, 1.0);
  const IpmState s = initial_state(p);
  const double tau = 0.99995;
  NewtonStep d{Vector::Zero(4), Vector::Zero(4), Vector::Zero(4)};
  StepLengths a = step_lengths(p, s, d, tau);
  EXPECT_EQ(a.primal, 1.0);
  EXPECT_EQ(a.dual, 1.0);
  d.du[2] = -1.0;
  a = step_lengths(p, s, d, tau);
  EXPECT_DOUBLE_EQ(a.primal, tau * 0.5);
  EXPECT_EQ(a.dual, 1.0);
  EXPECT_THROW(step_lengths(p, s, d, 1.0), Error);
}

TEST(StepLengths, MatchesBisection) {
  const ControlProblem p = parabolic_problem(32, 1);
  const double tau = 0.9;
  for (unsigned seed = 0; seed < 20; ++seed) {
    const IpmState s = random_state(p, 100 + seed);
    const double scale = 0.5 + seed;  // some steps bind, some do not
    const NewtonStep d{scale * random_vector(32, 200 + seed), scale * random_vector(32, 300 + seed),
                       scale * random_vector(32, 400 + seed)};
    const auto feasible_primal = [&](double t) {
      const Vector u = s.u + t * d.du;
      return ((u - p.lo).array() > 0).all() && ((p.hi - u).array() > 0).all();
    };
    const auto feasible_dual = [&](double t) {
      return ((s.v1 + t * d.dv1).array() > 0).all() && ((s.v2 + t * d.dv2).array() > 0).all();
    };
    const auto boundary = [](auto feasible) {
      double lo = 0.0, hi = 1e6;
      if (feasible(hi)) return hi;
      for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (feasible(mid) ? lo : hi) = mid;
      }
      return lo;
    };
    const auto expect = [tau](double b) { return std::min(1.0, tau * b); };
    const StepLengths a = step_lengths(p, s, d, tau);
    EXPECT_NEAR(a.primal, expect(boundary(feasible_primal)), 1e-12) << seed;
    EXPECT_NEAR(a.dual, expect(boundary(feasible_dual)), 1e-12) << seed;
  }
}

TEST(Solve, ZeroOperatorGivesZero) {
  const int n = 16;
  const ControlProblem p = dense_problem(DenseMatrix::Zero(n, n), random_vector(n, 15), -10.0, 10.0, 1.0);
  const IpmResult r = solve(p);
  ASSERT_TRUE(r.converged) << r.message;
  EXPECT_LE(r.records.size(), 25u);
  EXPECT_LE(r.state.mu, 1e-10 * r.mu0);
  EXPECT_LT(r.state.u.cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Solve, ToyMatchesActiveSetEnumeration) {
  const ControlProblem p = toy_problem();
  const ToyOptimum o = enumerate_active_sets(p);
  for (double v0 : {0.0, 1.0}) {
    IpmOptions opt;
    opt.start_multiplier = v0;
    const IpmResult r = solve(p, opt);
    ASSERT_TRUE(r.converged) << r.message;
    EXPECT_LT((r.state.u - o.u).cwiseAbs().maxCoeff(), 1e-7) << v0;
  }
}

TEST(Solve, ParabolicProblemProperties) {
  const ControlProblem p = parabolic_problem(512, 2);  // h = 2^-10, two levels
  IpmOptions opt;
  opt.levels = 2;
  const long before = p.fine_operator().matvec_count();
  const IpmResult r = solve(p, opt);
  ASSERT_TRUE(r.converged) << r.message;
  const Vector& u = r.state.u;
  EXPECT_GE(u.minCoeff(), 0.0);
  EXPECT_LE(u.maxCoeff(), 1.0);
  const double comp = std::max(r.state.v1.cwiseProduct(u - p.lo).maxCoeff(), r.state.v2.cwiseProduct(p.hi - u).maxCoeff());
  EXPECT_LE(comp, 1e-8);
  EXPECT_LE(r.state.mu, opt.mu_tol * r.mu0);
  // one preconditioner per outer iteration, shared by predictor and corrector
  EXPECT_EQ(r.preconditioner_builds, static_cast<int>(r.records.size()));
  long prev_mv = 0;
  double prev_mu = r.mu0;
  for (const auto& rec : r.records) {
    EXPECT_GE(rec.fine_matvecs_cumulative, prev_mv);
    EXPECT_LE(rec.mu, 2.0 * prev_mu);
    prev_mv = rec.fine_matvecs_cumulative;
    prev_mu = rec.mu;
  }
  EXPECT_EQ(r.total_fine_matvecs, p.fine_operator().matvec_count() - before);
}

TEST(Solve, SymmetrizedCgAndCgsAgree) {
  const ControlProblem p = parabolic_problem(64, 1);
  const IpmState s = random_state(p, 16);
  const KktResiduals kkt = kkt_residuals(p, s);
  const ReducedSystem red = reduce_to_scaled(p, s, kkt.r_u, kkt.r_v1, kkt.r_v2);
  const ScaledSystem sys = make_scaled_system(*p.hierarchy, 0, p.fine_operator(), red.lambda, p.beta);
  KrylovOptions opt;
  opt.tol = 1e-10;
  const Vector a = solve_symmetrized_cg(sys, red.rhs_scaled, opt).x;
  const LinearOperator gop{64, [&](const Vector& v) { return g_apply(sys, v); }};
  const Vector b = cgs(gop, identity_operator(64), red.rhs_scaled, opt).x;
  EXPECT_LT(rel_diff(a, b), 1e-7);
}

TEST(Solve, MaxOuterReportsNonConvergence) {
  const ControlProblem p = parabolic_problem(64, 1);
  IpmOptions opt;
  opt.max_outer = 2;
  const IpmResult r = solve(p, opt);
  EXPECT_FALSE(r.converged);
  EXPECT_EQ(r.records.size(), 2u);
}

TEST(Solve, RejectsMalformedProblem) {
  ControlProblem p = toy_problem();
  p.hi[0] = p.lo[0];
  EXPECT_THROW(solve(p), Error);
  ControlProblem q = toy_problem();
  IpmOptions opt;
  opt.levels = 2;
  EXPECT_THROW(solve(q, opt), Error);
}

TEST(Solve, FallbackKeepsRunAliveWhenPreconditionerFails) {
  // a divergence guard below one forces every preconditioned solve to fail
  const ControlProblem p = parabolic_problem(32, 2);
  IpmOptions opt;
  opt.levels = 2;
  opt.krylov.divergence_factor = 1e-12;
  const IpmResult r = solve(p, opt);
  EXPECT_TRUE(r.converged) << r.message;
  for (const auto& rec : r.records) EXPECT_EQ(rec.fallback_solves, 2);
  opt.cg_fallback = false;
  EXPECT_THROW(solve(p, opt), SolverError);
}
