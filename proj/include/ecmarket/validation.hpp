#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "ecmarket/coordinator.hpp"
#include "ecmarket/market_model.hpp"

namespace ecmarket {

// One cleared market in report form. Welfare is the negated community cost,
// so bigger is better throughout the reporting layer; both the exact and the
// surrogate-relaxed readings of the final state are kept because their gap is
// the live measure of how tight the envelope ended up.
struct MarketOutcome {
  TradeState state;
  ClearingPrices prices;
  McCormickBounds envelope;
  double welfare = 0;
  double welfare_relaxed = 0;
  bool converged = false;
  int rounds = 0;
  int total_iters = 0;
  double allowances_to_manager = 0;  // kg sold out of the community
  double pv_to_manager = 0;          // kWh exported over the horizon
  CarbonLedger ledger;
};

MarketOutcome summarize_run(const RunResult& run, const ScenarioConfig& cfg);

// Reference solve with every coupling constraint imposed directly. The user
// Booleans go by enumeration: one cone solve per seller pattern, best kept,
// then the same bound-contraction rounds the market loop applies. Tractable
// for the community sizes this project targets; refuses absurd enumerations.
MarketOutcome solve_centralized(const ScenarioConfig& cfg,
                                const SolverOptions& opts = {});

// How far each participant could improve on its cleared decision if it took
// the cleared prices as given and re-optimized alone. A competitive
// equilibrium leaves no room: all deviations vanish up to solver tolerance.
struct EquilibriumReport {
  std::vector<double> deviation;  // relative objective gain per agent
  double worst = 0;
};

EquilibriumReport verify_equilibrium(const MarketOutcome& outcome,
                                     const ScenarioConfig& cfg,
                                     const SolverOptions& opts = {});

// Out-of-sample check of the chance constraints and the cost model. Draws
// error fields, replays the cleared schedule against each, and tallies how
// often any generator cap, consumption floor, or emission cap is breached.
// The cost tally carries its standard error so the closed-form expectation
// can be judged at a stated confidence.
struct AuditReport {
  Eigen::MatrixXd freq_cg;    // n_cg x horizon, P(deployed > cap)
  Eigen::MatrixXd freq_user;  // n_users x horizon, P(curtailed < floor)
  Eigen::VectorXd freq_res;   // n_res, P(reserve emissions > held allowance)
  double worst_freq = 0;
  double mean_cost = 0;
  double se_cost = 0;        // standard error of mean_cost
  double expected_cost = 0;  // closed-form expectation at the same state
  int samples = 0;
};

AuditReport monte_carlo_audit(const TradeState& state, const ScenarioConfig& cfg,
                              int n_samples, std::uint64_t seed);

// Exhaustive lower-bound certificate for miniature scenarios: walk a grid
// over the free decisions of the exact bilinear problem, derive the dependent
// quantities from the balance identities, and keep the best feasible cost.
// Only meant for instances small enough that the walk is exact bookkeeping.
struct GridCertificate {
  double welfare = 0;       // best feasible point found
  long evaluated = 0;       // grid points visited
  long feasible = 0;        // grid points passing all checks
};

GridCertificate brute_force_oracle(const ScenarioConfig& cfg, int points_per_axis);

// Tariff sweep: one cleared market per (energy price, allowance price) pair.
struct SweepRow {
  double r_e = 0;
  double r_c = 0;
  MarketOutcome outcome;
  bool ok = false;
};

std::vector<SweepRow> run_sweep(const ScenarioConfig& cfg,
                                const std::vector<double>& r_e_grid,
                                const std::vector<double>& r_c_grid,
                                const RunOptions& opts = {});

// Three market designs side by side: the full model, a variant with user
// flexibility switched off, and fixed-tariff allowances with the sharing
// pool disabled.
struct CaseRow {
  std::string name;
  MarketOutcome outcome;
  double allowances_held = 0;  // kg kept inside the community
};

std::vector<CaseRow> run_cases(const ScenarioConfig& cfg,
                               const RunOptions& opts = {});

}  // namespace ecmarket
