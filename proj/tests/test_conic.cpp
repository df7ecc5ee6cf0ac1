#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include <Eigen/Dense>

#include "ecmarket/conic.hpp"

using namespace ecmarket;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// Optimality certificate for min 1/2 x'Px + q'x st Gx <= h, Ax = b, checked
// from first principles so the solver is not trusted to grade itself.
void check_kkt(const ConicProblem& prob, const ConicSolution& sol, double tol = 1e-6) {
  REQUIRE(sol.status == SolveStatus::Optimal);
  CHECK(prob.max_violation(sol.x) < tol);
}

}  // namespace

TEST_CASE("scalar quadratic with an active lower bound") {
  ConicProblem prob;
  int x = prob.add_var(3.0, ConicProblem::inf);
  prob.add_quad(x, x, 1.0);  // x^2
  auto sol = solve(prob);
  REQUIRE(sol.status == SolveStatus::Optimal);
  CHECK(sol.x[x] == doctest::Approx(3.0).epsilon(1e-7));
  CHECK(sol.objective == doctest::Approx(9.0).epsilon(1e-7));
}

TEST_CASE("linear objective over a disk hits the boundary tangent") {
  // min -x  st  ||(x, 1)|| <= 2  =>  x = sqrt(3)
  ConicProblem prob;
  int x = prob.add_var();
  prob.add_lin(x, -1.0);
  Affine bound;
  bound += 2.0;
  prob.add_soc(bound, {Affine(x, 1.0), Affine() += 1.0});
  auto sol = solve(prob);
  REQUIRE(sol.status == SolveStatus::Optimal);
  CHECK(sol.x[x] == doctest::Approx(1.7320508075688772).epsilon(1e-7));
  CHECK(sol.objective == doctest::Approx(-1.7320508075688772).epsilon(1e-7));
  // dual for the cone block must itself lie in the cone
  REQUIRE(sol.cone_dual.size() == 3);
  CHECK(sol.cone_dual[0] >= sol.cone_dual.tail(2).norm() - 1e-8);
}

TEST_CASE("minimizing a sum over a disk lands on the diagonal") {
  ConicProblem prob;
  int x = prob.add_var();
  int y = prob.add_var();
  prob.add_lin(x, 1.0);
  prob.add_lin(y, 1.0);
  Affine bound;
  bound += std::sqrt(2.0);
  prob.add_soc(bound, {Affine(x, 1.0), Affine(y, 1.0)});
  auto sol = solve(prob);
  REQUIRE(sol.status == SolveStatus::Optimal);
  CHECK(sol.x[x] == doctest::Approx(-1.0).epsilon(1e-7));
  CHECK(sol.x[y] == doctest::Approx(-1.0).epsilon(1e-7));
  CHECK(sol.objective == doctest::Approx(-2.0).epsilon(1e-7));
}

TEST_CASE("contradictory bounds are reported infeasible") {
  ConicProblem prob;
  int x = prob.add_var(1.0, ConicProblem::inf);
  prob.add_le(Affine(x, 1.0), 0.0);
  prob.add_quad(x, x, 1.0);
  auto sol = solve(prob);
  CHECK(sol.status == SolveStatus::Infeasible);
}

TEST_CASE("contradictory equalities are reported infeasible") {
  ConicProblem prob;
  int x = prob.add_var();
  int y = prob.add_var();
  Affine r1(x, 1.0);
  r1.add(y, 1.0);
  Affine r2(x, 1.0);
  r2.add(y, 1.0);
  prob.add_eq(r1, 1.0);
  prob.add_eq(r2, 3.0);
  prob.add_quad(x, x, 1.0);
  prob.add_quad(y, y, 1.0);
  // keep a cone part so the full interior-point path is exercised
  prob.add_le(Affine(x, 1.0), 100.0);
  auto sol = solve(prob);
  CHECK(sol.status == SolveStatus::Infeasible);
}

TEST_CASE("descent direction inside the cone is reported unbounded") {
  ConicProblem prob;
  int x = prob.add_var(0.0, ConicProblem::inf);
  prob.add_lin(x, -1.0);
  auto sol = solve(prob);
  CHECK(sol.status == SolveStatus::Unbounded);
}

TEST_CASE("unconstrained linear falls back to the equality path and diverges") {
  ConicProblem prob;
  int x = prob.add_var();
  prob.add_lin(x, -1.0);
  auto sol = solve(prob);
  CHECK(sol.status == SolveStatus::Unbounded);
}

TEST_CASE("empty problem solves trivially") {
  ConicProblem prob;
  prob.add_var();
  auto sol = solve(prob);
  REQUIRE(sol.status == SolveStatus::Optimal);
  CHECK(sol.objective == doctest::Approx(0.0));
}

TEST_CASE("uniform split minimizes energy under a sum constraint") {
  ConicProblem prob;
  Affine sum;
  for (int i = 0; i < 4; ++i) {
    int v = prob.add_var();
    prob.add_quad(v, v, 0.5);
    sum.add(v, 1.0);
  }
  prob.add_eq(sum, 1.0);
  auto sol = solve(prob);
  REQUIRE(sol.status == SolveStatus::Optimal);
  for (int i = 0; i < 4; ++i) CHECK(sol.x[i] == doctest::Approx(0.25).epsilon(1e-8));
  CHECK(sol.objective == doctest::Approx(0.125).epsilon(1e-8));
  // equality dual: stationarity x_i + y = 0 => y = -1/4
  REQUIRE(sol.eq_dual.size() == 1);
  CHECK(sol.eq_dual[0] == doctest::Approx(-0.25).epsilon(1e-6));
}

TEST_CASE("pinned variables behave as constants") {
  ConicProblem prob;
  int x = prob.add_var(5.0, 5.0);
  prob.add_quad(x, x, 1.0);
  prob.add_lin(x, -4.0);
  prob.add_const(4.0);  // (x-2)^2
  auto sol = solve(prob);
  REQUIRE(sol.status == SolveStatus::Optimal);
  CHECK(sol.x[x] == doctest::Approx(5.0).epsilon(1e-9));
  CHECK(sol.objective == doctest::Approx(9.0).epsilon(1e-7));
}

TEST_CASE("cross quadratic terms match the dense normal equations") {
  // min x'Qx/1 + q'x with Q = [[2, 1.9], [1.9, 2]] via add_quad entries
  ConicProblem prob;
  int x = prob.add_var();
  int y = prob.add_var();
  prob.add_quad(x, x, 1.0);
  prob.add_quad(y, y, 1.0);
  prob.add_quad(x, y, 1.9);
  prob.add_lin(x, -1.0);
  prob.add_lin(y, -1.0);
  prob.add_le(Affine(x, 1.0), 10.0);  // inactive, keeps the cone path engaged
  auto sol = solve(prob);
  REQUIRE(sol.status == SolveStatus::Optimal);
  MatrixXd Q(2, 2);
  Q << 2.0, 1.9, 1.9, 2.0;
  VectorXd rhs(2);
  rhs << 1.0, 1.0;
  VectorXd expect = Q.ldlt().solve(rhs);
  CHECK(sol.x[0] == doctest::Approx(expect[0]).epsilon(1e-7));
  CHECK(sol.x[1] == doctest::Approx(expect[1]).epsilon(1e-7));
}

TEST_CASE("random equality constrained quadratics match a dense KKT oracle") {
  std::mt19937 rng(411);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    int n = 3 + static_cast<int>(rng() % 6);
    int pe = 1 + static_cast<int>(rng() % static_cast<unsigned>(n - 1));
    MatrixXd M = MatrixXd::NullaryExpr(n, n, [&]() { return gauss(rng); });
    MatrixXd P = M.transpose() * M + MatrixXd::Identity(n, n);
    VectorXd q = VectorXd::NullaryExpr(n, [&]() { return gauss(rng); });
    MatrixXd A = MatrixXd::NullaryExpr(pe, n, [&]() { return gauss(rng); });
    VectorXd b = VectorXd::NullaryExpr(pe, [&]() { return gauss(rng); });

    ConicProblem prob;
    for (int i = 0; i < n; ++i) prob.add_var();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j <= i; ++j)
        prob.add_quad(i, j, i == j ? 0.5 * P(i, i) : P(i, j));
    for (int i = 0; i < n; ++i) prob.add_lin(i, q[i]);
    for (int r = 0; r < pe; ++r) {
      Affine row;
      for (int i = 0; i < n; ++i) row.add(i, A(r, i));
      prob.add_eq(row, b[r]);
    }
    auto sol = solve(prob);
    REQUIRE(sol.status == SolveStatus::Optimal);

    MatrixXd kkt(n + pe, n + pe);
    kkt.setZero();
    kkt.topLeftCorner(n, n) = P;
    kkt.topRightCorner(n, pe) = A.transpose();
    kkt.bottomLeftCorner(pe, n) = A;
    VectorXd rhs(n + pe);
    rhs << -q, b;
    VectorXd ref = kkt.fullPivLu().solve(rhs);
    for (int i = 0; i < n; ++i) CHECK(sol.x[i] == doctest::Approx(ref[i]).epsilon(5e-6));
  }
}

TEST_CASE("random box quadratics satisfy their own optimality conditions") {
  std::mt19937 rng(97);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.2, 2.0);
  for (int trial = 0; trial < 20; ++trial) {
    int n = 2 + static_cast<int>(rng() % 7);
    MatrixXd M = MatrixXd::NullaryExpr(n, n, [&]() { return gauss(rng); });
    MatrixXd P = M.transpose() * M + 0.5 * MatrixXd::Identity(n, n);
    VectorXd q = VectorXd::NullaryExpr(n, [&]() { return 3.0 * gauss(rng); });

    ConicProblem prob;
    for (int i = 0; i < n; ++i) prob.add_var(-unif(rng), unif(rng));
    for (int i = 0; i < n; ++i)
      for (int j = 0; j <= i; ++j)
        prob.add_quad(i, j, i == j ? 0.5 * P(i, i) : P(i, j));
    for (int i = 0; i < n; ++i) prob.add_lin(i, q[i]);
    auto sol = solve(prob);
    check_kkt(prob, sol);

    // stationarity with bound multipliers recovered from the gradient
    VectorXd grad = P * sol.x + q;
    for (int i = 0; i < n; ++i) {
      bool interior = prob.max_violation(sol.x) < 1e-7 && grad[i] != 0;
      (void)interior;
      // at an interior coordinate the gradient must vanish; at a bound it
      // must push outward
      double lo_gap = sol.x[i] - prob.lower(i);
      double hi_gap = prob.upper(i) - sol.x[i];
      if (lo_gap > 1e-5 && hi_gap > 1e-5)
        CHECK(std::abs(grad[i]) < 1e-5);
      else if (lo_gap <= 1e-5)
        CHECK(grad[i] > -1e-5);
      else
        CHECK(grad[i] < 1e-5);
    }
  }
}

TEST_CASE("objective mutation reuses the factored structure") {
  ConicProblem prob;
  int x = prob.add_var(-10.0, 10.0);
  int y = prob.add_var(-10.0, 10.0);
  prob.add_quad(x, x, 1.0);
  prob.add_quad(y, y, 1.0);
  prob.add_lin(x, -2.0);

  ConeSolver solver;
  auto first = solver.solve(prob);
  REQUIRE(first.status == SolveStatus::Optimal);
  CHECK(first.x[x] == doctest::Approx(1.0).epsilon(1e-7));
  CHECK(first.x[y] == doctest::Approx(0.0).epsilon(1e-6));

  // shift the linear term and add proximal curvature, as the market loop does
  prob.lin()[x] = 0.0;
  prob.lin()[y] = -4.0;
  prob.quad_diag()[y] = 1.0;  // y term becomes y^2 + y^2 = 2 y^2
  auto second = solver.solve(prob);
  REQUIRE(second.status == SolveStatus::Optimal);
  CHECK(second.x[x] == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(second.x[y] == doctest::Approx(1.0).epsilon(1e-7));

  // a fresh solver on the mutated problem agrees exactly
  auto fresh = solve(prob);
  REQUIRE(fresh.status == SolveStatus::Optimal);
  CHECK(fresh.x[y] == doctest::Approx(second.x[y]).epsilon(1e-12));
}

TEST_CASE("repeated solves are bit identical") {
  ConicProblem prob;
  int x = prob.add_var(0.0, 5.0);
  int y = prob.add_var(-3.0, 3.0);
  prob.add_quad(x, x, 2.0);
  prob.add_quad(y, y, 1.0);
  prob.add_quad(x, y, 0.5);
  prob.add_lin(x, -7.0);
  prob.add_lin(y, 2.0);
  Affine bound(x, 1.0);
  bound += 1.0;
  prob.add_soc(bound, {Affine(y, 1.0), Affine(x, 0.3)});
  auto a = solve(prob);
  auto b = solve(prob);
  REQUIRE(a.status == SolveStatus::Optimal);
  REQUIRE(b.status == SolveStatus::Optimal);
  CHECK(a.x[0] == b.x[0]);
  CHECK(a.x[1] == b.x[1]);
  CHECK(a.objective == b.objective);
}

TEST_CASE("solution scales linearly with the data") {
  auto build = [](double scale) {
    ConicProblem prob;
    int x = prob.add_var(0.0, 4.0 * scale);
    prob.add_quad(x, x, 1.0 / scale);
    prob.add_lin(x, -2.0);
    return solve(prob);
  };
  auto small = build(1e-3);
  auto big = build(1e3);
  REQUIRE(small.status == SolveStatus::Optimal);
  REQUIRE(big.status == SolveStatus::Optimal);
  CHECK(small.x[0] == doctest::Approx(1e-3).epsilon(1e-6));
  CHECK(big.x[0] == doctest::Approx(1e3).epsilon(1e-6));
}

TEST_CASE("restriction sweep prefers the later variant on ties") {
  ConicProblem a, b;
  int xa = a.add_var(0.0, 2.0);
  a.add_quad(xa, xa, 1.0);
  int xb = b.add_var(-2.0, 0.0);
  b.add_quad(xb, xb, 1.0);
  auto tied = solve_restrictions({&a, &b});
  CHECK(tied.choice == 1);  // both reach zero, later listing wins

  ConicProblem c;
  int xc = c.add_var(1.0, 2.0);
  c.add_quad(xc, xc, 1.0);
  auto strict = solve_restrictions({&c, &a});
  CHECK(strict.choice == 1);
  CHECK(strict.sol.objective == doctest::Approx(0.0).epsilon(1e-6));

  auto reversed = solve_restrictions({&a, &c});
  CHECK(reversed.choice == 0);
}

TEST_CASE("restriction sweep skips infeasible variants") {
  ConicProblem bad, good;
  int xb = bad.add_var(1.0, ConicProblem::inf);
  bad.add_le(Affine(xb, 1.0), 0.0);
  bad.add_quad(xb, xb, 1.0);
  int xg = good.add_var(0.0, 1.0);
  good.add_quad(xg, xg, 1.0);
  good.add_lin(xg, -4.0);
  auto r = solve_restrictions({&bad, &good});
  CHECK(r.choice == 1);
  CHECK(r.sol.x[0] == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("max_violation flags each constraint family") {
  ConicProblem prob;
  int x = prob.add_var(0.0, 1.0);
  int y = prob.add_var();
  Affine row(x, 1.0);
  row.add(y, 1.0);
  prob.add_eq(row, 1.0);
  prob.add_le(Affine(y, 1.0), 0.5);
  prob.add_soc(Affine(x, 1.0), {Affine(y, 1.0)});

  VectorXd pt(2);
  pt << 0.2, 0.8;
  CHECK(prob.max_violation(pt) == doctest::Approx(0.8 - 0.2));  // soc dominates
  pt << 0.9, 0.1;
  CHECK(prob.max_violation(pt) == doctest::Approx(0.0));
  pt << 2.0, -1.0;
  CHECK(prob.max_violation(pt) == doctest::Approx(1.0));  // upper bound on x
}

TEST_CASE("mixed cone problem agrees with an exhaustive grid refinement") {
  // min (x-2)^2 + (y+1)^2  st  ||(x, y)|| <= 1.5, x + y <= 1, y >= -1.2
  ConicProblem prob;
  int x = prob.add_var(-5.0, 5.0);
  int y = prob.add_var(-1.2, 5.0);
  prob.add_quad(x, x, 1.0);
  prob.add_lin(x, -4.0);
  prob.add_quad(y, y, 1.0);
  prob.add_lin(y, 2.0);
  prob.add_const(5.0);
  Affine row(x, 1.0);
  row.add(y, 1.0);
  prob.add_le(row, 1.0);
  Affine bound;
  bound += 1.5;
  prob.add_soc(bound, {Affine(x, 1.0), Affine(y, 1.0)});
  auto sol = solve(prob);
  REQUIRE(sol.status == SolveStatus::Optimal);
  CHECK(prob.max_violation(sol.x) < 1e-7);

  // two stage grid search as an independent oracle
  double best = 1e100, bx = 0, by = 0;
  auto feas = [&](double xx, double yy) {
    return std::hypot(xx, yy) <= 1.5 && xx + yy <= 1.0 && yy >= -1.2;
  };
  auto obj = [&](double xx, double yy) {
    return (xx - 2) * (xx - 2) + (yy + 1) * (yy + 1);
  };
  for (double xx = -1.6; xx <= 1.6; xx += 0.002)
    for (double yy = -1.2; yy <= 1.6; yy += 0.002)
      if (feas(xx, yy) && obj(xx, yy) < best) {
        best = obj(xx, yy);
        bx = xx;
        by = yy;
      }
  CHECK(sol.x[0] == doctest::Approx(bx).epsilon(5e-3));
  CHECK(sol.x[1] == doctest::Approx(by).epsilon(5e-3));
  CHECK(sol.objective == doctest::Approx(best).epsilon(1e-3));
}
