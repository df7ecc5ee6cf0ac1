#pragma once

#include <Eigen/Dense>
#include <memory>
#include <vector>

#include "ecmarket/conic.hpp"
#include "ecmarket/market_model.hpp"
#include "ecmarket/scenario.hpp"
#include "ecmarket/uncertainty.hpp"

namespace ecmarket {

// Everything the coordinator hands an agent for one best-response solve: the
// consensus averages of every matched variable pair, the running dual prices,
// and the current penalty weights. Convention: a matched pair of copies sums
// to zero at consensus, the stored average is therefore half the current
// mismatch, and a dual price enters BOTH owners' objectives with coefficient
// +1 on their own copy. Carbon shares are coupled through their community sum,
// so one scalar average and one scalar price cover all of them.
struct Broadcast {
  std::vector<Eigen::MatrixXd> trade_avg;    // users x sellers, per hour
  std::vector<Eigen::MatrixXd> reserve_avg;  // cg x res, per hour
  std::vector<Eigen::MatrixXd> flex_avg;     // users x res, per hour
  double carbon_avg = 0.0;

  std::vector<Eigen::MatrixXd> price_energy;   // dual of trade matching
  std::vector<Eigen::MatrixXd> price_reserve;  // dual of reserve-share matching
  std::vector<Eigen::MatrixXd> price_flex;     // dual of flex-share matching
  double price_carbon = 0.0;                   // dual of the carbon-sum rule

  double pen_energy = 1.0;
  double pen_reserve = 1.0;
  double pen_flex = 1.0;
  double pen_carbon = 1.0;

  static Broadcast zeros(const IndexLayout& L, const AlgoConfig& algo);
};

// One market participant's cached best-response machinery. rebuild() must be
// called whenever the envelope boxes change (they alter constraint
// coefficients, not just bounds, so the cached factorization pattern is
// rebuilt from scratch). respond() injects the broadcast prices and proximal
// terms into the cached objective, solves, and scatters the solution into
// `out`. Each agent touches only its own slots of the shared state, so
// distinct agents may respond concurrently into the same TradeState.
class Agent {
 public:
  virtual ~Agent() = default;
  virtual void rebuild(const McCormickBounds& env) = 0;
  // `prev` supplies the proximal anchors (the agent's own last iterate).
  // Returns false if no restriction solved to optimality; `out` is untouched.
  virtual bool respond(const TradeState& prev, const Broadcast& bc,
                       const SolverOptions& opts, TradeState& out) = 0;
};

// Flexible consumer. Holds both fixings of the allowance-role flag and keeps
// whichever solves cheaper, preferring the seller role on ties.
class UserAgent final : public Agent {
 public:
  UserAgent(const ScenarioConfig& cfg, const UncertaintyModel& um,
            const IndexLayout& layout, int u);
  void rebuild(const McCormickBounds& env) override;
  bool respond(const TradeState& prev, const Broadcast& bc,
               const SolverOptions& opts, TradeState& out) override;

 private:
  void inject(int variant, const TradeState& prev, const Broadcast& bc);

  const ScenarioConfig* cfg_;
  const UncertaintyModel* um_;
  const IndexLayout* layout_;
  int u_;
  ConicProblem prob_[2];  // variant 0: allowance buyer, 1: allowance seller
  std::unique_ptr<SlotMap> map_;  // identical numbering in both variants
  Eigen::VectorXd base_lin_[2];
  Eigen::VectorXd base_quad_diag_;
  ConeSolver solver_[2];
};

// Controllable generator: energy sales plus uncertainty-reserve shares.
class CgAgent final : public Agent {
 public:
  CgAgent(const ScenarioConfig& cfg, const UncertaintyModel& um,
          const IndexLayout& layout, int g);
  void rebuild(const McCormickBounds& env) override;
  bool respond(const TradeState& prev, const Broadcast& bc,
               const SolverOptions& opts, TradeState& out) override;

 private:
  const ScenarioConfig* cfg_;
  const UncertaintyModel* um_;
  const IndexLayout* layout_;
  int g_;
  ConicProblem prob_;
  std::unique_ptr<SlotMap> map_;
  Eigen::VectorXd base_lin_;
  Eigen::VectorXd base_quad_diag_;
  ConeSolver solver_;
};

// Renewable plant: energy sales, the mirror copies of every deviation share,
// and its own carbon cover.
class ResAgent final : public Agent {
 public:
  ResAgent(const ScenarioConfig& cfg, const UncertaintyModel& um,
           const IndexLayout& layout, int r);
  void rebuild(const McCormickBounds& env) override;
  bool respond(const TradeState& prev, const Broadcast& bc,
               const SolverOptions& opts, TradeState& out) override;

 private:
  const ScenarioConfig* cfg_;
  const UncertaintyModel* um_;
  const IndexLayout* layout_;
  int r_;
  ConicProblem prob_;
  std::unique_ptr<SlotMap> map_;
  Eigen::VectorXd base_lin_;
  Eigen::VectorXd base_quad_diag_;
  ConeSolver solver_;
};

// The full roster for a scenario, in a fixed deterministic order (users,
// then generators, then renewables).
std::vector<std::unique_ptr<Agent>> make_agents(const ScenarioConfig& cfg,
                                                const UncertaintyModel& um,
                                                const IndexLayout& layout);

}  // namespace ecmarket
