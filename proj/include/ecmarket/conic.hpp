#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <limits>
#include <memory>
#include <vector>

namespace ecmarket {

// Affine expression sum(coeff * x_var) + constant, the building block for all
// constraint rows.
struct Affine {
  struct Term {
    int var;
    double coeff;
  };
  std::vector<Term> terms;
  double constant = 0;

  Affine() = default;
  Affine(int var, double coeff) { terms.push_back({var, coeff}); }
  Affine& add(int var, double coeff) {
    terms.push_back({var, coeff});
    return *this;
  }
  Affine& operator+=(double c) {
    constant += c;
    return *this;
  }
};

enum class SolveStatus { Optimal, Infeasible, Unbounded, MaxIters, NumericalFailure };
const char* to_string(SolveStatus s);

struct SolverOptions {
  double feas_tol = 1e-8;
  double gap_abs = 1e-8;
  double gap_rel = 1e-9;
  int max_iters = 200;
  // Fallback acceptance: if the target tolerances are out of reach (step
  // collapse on a degenerate face, iteration cap), the best iterate still
  // counts as solved when its worst scaled KKT error is below this. Zero
  // disables the fallback.
  double accept_tol = 1e-6;
};

struct ConicSolution {
  SolveStatus status = SolveStatus::NumericalFailure;
  Eigen::VectorXd x;
  Eigen::VectorXd eq_dual;    // multipliers of equality rows, in insertion order
  Eigen::VectorXd cone_dual;  // multipliers of inequality/cone rows
  double objective = std::numeric_limits<double>::quiet_NaN();
  int iters = 0;
  bool ok() const { return status == SolveStatus::Optimal; }
};

// Convex quadratic objective over linear equalities, linear inequalities,
// variable bounds, and second-order cone constraints ||vec||_2 <= bound.
// Build once, then re-solve cheaply after mutating only the linear objective
// and/or the quadratic diagonal (lin() / quad_diag()); structural edits after a
// solve force a fresh symbolic analysis.
class ConicProblem {
 public:
  static constexpr double inf = std::numeric_limits<double>::infinity();

  int add_var(double lo = -inf, double hi = inf);
  int num_vars() const { return static_cast<int>(lo_.size()); }

  void add_quad(int i, int j, double coeff);  // adds coeff * x_i * x_j
  void add_lin(int i, double coeff) { lin_[i] += coeff; }
  void add_const(double c) { constant_ += c; }

  void add_eq(Affine row, double rhs);
  void add_le(Affine row, double rhs);                    // row <= rhs
  void add_soc(Affine bound, std::vector<Affine> vec);    // ||vec|| <= bound

  // Cheap per-solve mutation hooks (no structural change):
  Eigen::VectorXd& lin() { return lin_; }
  Eigen::VectorXd& quad_diag() { return quad_diag_; }  // adds v_i * x_i^2
  double& constant_term() { return constant_; }

  double eval_objective(const Eigen::VectorXd& x) const;
  double max_violation(const Eigen::VectorXd& x) const;  // feasibility check, all rows

  int num_eq_rows() const { return static_cast<int>(eq_rhs_.size()); }
  double lower(int i) const { return lo_[i]; }
  double upper(int i) const { return hi_[i]; }

 private:
  friend class ConeSolver;
  std::vector<double> lo_, hi_;
  std::vector<Eigen::Triplet<double>> quad_;
  Eigen::VectorXd lin_;
  Eigen::VectorXd quad_diag_;
  double constant_ = 0;
  std::vector<Affine> eq_rows_;
  std::vector<double> eq_rhs_;
  std::vector<Affine> le_rows_;
  std::vector<double> le_rhs_;
  struct Soc {
    Affine bound;
    std::vector<Affine> vec;
  };
  std::vector<Soc> socs_;
  long structure_version_ = 0;
};

// Primal-dual interior-point method for the cone program
//   min 1/2 x'Px + q'x   s.t.  Ax = b,  Gx + s = h,  s in R+^l x SOC...
// (Nesterov-Todd scaling, Mehrotra predictor-corrector, sparse quasi-definite
// KKT with static regularization and iterative refinement). A ConeSolver keeps
// the symbolic factorization and may be reused across solves of the same
// problem structure; it is not thread-safe, use one instance per thread.
class ConeSolver {
 public:
  explicit ConeSolver(SolverOptions opts = {});
  ~ConeSolver();
  ConeSolver(ConeSolver&&) noexcept;
  ConeSolver& operator=(ConeSolver&&) noexcept;

  ConicSolution solve(const ConicProblem& prob);

  SolverOptions options;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// One-shot convenience wrapper.
ConicSolution solve(const ConicProblem& prob, const SolverOptions& opts = {});

// Solves each restriction of a discrete choice (e.g. the two fixings of a
// seller-identity flag) and returns the best feasible one. Ties within tol go
// to the restriction listed last, so callers order the preferred branch last.
struct RestrictionResult {
  int choice = -1;
  ConicSolution sol;
};
RestrictionResult solve_restrictions(const std::vector<ConicProblem*>& variants,
                                     const SolverOptions& opts = {},
                                     double tie_tol = 1e-9);

}  // namespace ecmarket
