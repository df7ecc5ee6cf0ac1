#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "ecmarket/agents.hpp"
#include "ecmarket/market_model.hpp"
#include "ecmarket/scenario.hpp"
#include "ecmarket/uncertainty.hpp"

namespace ecmarket {

// Per-iteration consensus health. Primal entries are the squared mismatches
// of the matched variable copies (the carbon one is the squared community
// sum); dual entries are the squared drift of the consensus averages between
// consecutive iterations. Penalties are the weights used on that iteration.
struct ResidualSample {
  int round = 0;
  int iter = 0;
  double primal_energy = 0, primal_reserve = 0, primal_flex = 0, primal_carbon = 0;
  double dual_energy = 0, dual_reserve = 0, dual_flex = 0, dual_carbon = 0;
  double pen_energy = 0, pen_reserve = 0, pen_flex = 0, pen_carbon = 0;

  bool below(const AlgoConfig& algo) const;
};

// Summary of one relax-and-tighten round.
struct RoundInfo {
  int iters = 0;
  bool admm_converged = false;  // all eight residuals under tolerance
  double gap_cg = 0;            // worst relative envelope error, generators
  double gap_user = 0;          // and consumers
  double relaxed = 0;           // community cost with envelope surrogates
  double exact = 0;             // community cost with true revenue products
  double eps = 0;               // box half-width applied when tightening after
};

struct RunResult {
  TradeState state;          // final iterate
  Broadcast broadcast;       // final averages, prices, penalties
  McCormickBounds envelope;  // boxes in force during the final round
  std::vector<RoundInfo> rounds;
  std::vector<ResidualSample> history;  // all iterations, all rounds
  bool converged = false;  // envelope error within tolerance at exit
  int total_iters = 0;
  int agent_failures = 0;  // subproblem solves that kept a stale iterate
};

struct RunOptions {
  bool parallel = true;  // fan the agent solves out across OpenMP threads
  SolverOptions solver;  // per-subproblem settings
  std::function<void(const RoundInfo&)> on_round;  // optional progress hook
};

// One synchronous best-response sweep over every agent, the hot kernel of the
// market loop. Agents read their proximal anchors from `prev` and write into
// `out`; their slot sets are disjoint, so the parallel and serial paths give
// bit-identical results. Returns the number of agents whose solve failed
// (those slots of `out` are left as they were).
int response_sweep(const std::vector<std::unique_ptr<Agent>>& agents,
                   const TradeState& prev, const Broadcast& bc,
                   const SolverOptions& opts, bool parallel, TradeState& out);

// Runs the full market clearing: repeated consensus exchange between the
// agents under progressively tighter revenue envelopes, until the envelope
// error of every seller's revenue term is within tolerance. All algorithm
// knobs (penalties, tolerances, iteration budgets, warm starting, adaptive
// penalties) come from cfg.algo.
RunResult run_market(const ScenarioConfig& cfg, const RunOptions& opts = {});

// The market prices implied by the final consensus duals. A buyer pays the
// energy price times the quantity bought; reserve and flex prices pay the
// share holders; a positive carbon price pays allowance sellers.
struct ClearingPrices {
  std::vector<Eigen::MatrixXd> energy;   // users x sellers, per hour
  std::vector<Eigen::MatrixXd> reserve;  // cg x res, per hour
  std::vector<Eigen::MatrixXd> flex;     // users x res, per hour
  double carbon = 0;
};
ClearingPrices extract_prices(const Broadcast& bc);

}  // namespace ecmarket
