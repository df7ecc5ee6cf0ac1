#pragma once

#include <Eigen/Dense>
#include <vector>

#include "ecmarket/conic.hpp"
#include "ecmarket/scenario.hpp"
#include "ecmarket/uncertainty.hpp"

namespace ecmarket {

// Everything in this header speaks the IndexLayout vocabulary: a "slot" is a
// position in the flat market-state numbering, a "var" is a column of some
// ConicProblem. A SlotMap ties the two together so the same constraint and
// objective builders serve both the per-participant subproblems (each maps
// only the slots that participant owns) and the centralized reference problem
// (which maps every slot).
class SlotMap {
 public:
  SlotMap() = default;
  explicit SlotMap(int total_slots) : to_var_(total_slots, -1) {}

  int& at(int slot) { return to_var_.at(slot); }
  bool has(int slot) const { return to_var_.at(slot) >= 0; }
  int var(int slot) const;  // throws std::logic_error on an unmapped slot
  int total() const { return static_cast<int>(to_var_.size()); }

 private:
  std::vector<int> to_var_;
};

// Full market state in structured form. Per-hour trade and factor matrices
// follow the layout conventions (users x sellers, CG x RES, users x RES;
// sellers ordered CG first), hourly series are participant x horizon, and the
// carbon block orders traders users first. Both sides of every paired
// quantity are carried (seller and buyer trade copies, both factor copies);
// they agree only at consensus.
struct TradeState {
  std::vector<Eigen::MatrixXd> sell, buy;            // users x sellers, per hour
  std::vector<Eigen::MatrixXd> res_cg, res_res;      // cg x res, per hour
  std::vector<Eigen::MatrixXd> flex_user, flex_res;  // users x res, per hour
  Eigen::MatrixXd load;        // users x T
  Eigen::MatrixXd gen_cg;      // cg x T
  Eigen::MatrixXd gen_res;     // res x T
  Eigen::MatrixXd to_manager;  // res x T
  Eigen::MatrixXd dev_cg;      // cg x T, priced expected deviation
  Eigen::MatrixXd dev_user;    // users x T
  Eigen::MatrixXd bil_cg;      // cg x T, relaxed product gen*dev
  Eigen::MatrixXd bil_user;    // users x T
  Eigen::VectorXd carbon;      // n_traders, users first
  Eigen::VectorXd carbon_sold; // n_users
  std::vector<int> seller_flag;  // n_users, 1 = sells allowances
};

TradeState zero_state(const IndexLayout& L);
Eigen::VectorXd flatten(const TradeState& s, const IndexLayout& L);
TradeState unflatten(const Eigen::VectorXd& v, const IndexLayout& L);

// Copies every mapped slot of x into the corresponding state field. Unmapped
// slots are left untouched, so each agent can scatter its own block into a
// shared state.
void scatter(const Eigen::VectorXd& x, const SlotMap& map, const IndexLayout& L,
             TradeState& state);

// Hyper-rectangles for the bilinear relaxation, one box per participant and
// hour: setpoint range [p_lo, p_hi] and expected-deviation range [pi_lo,
// pi_hi] (deviations are nonpositive). The initial boxes come from physical
// limits and the worst single-renewable mean shortfall; each refinement round
// shrinks them around the last solution.
struct McCormickBounds {
  Eigen::MatrixXd cg_p_lo, cg_p_hi, cg_pi_lo, cg_pi_hi;          // cg x T
  Eigen::MatrixXd user_p_lo, user_p_hi, user_pi_lo, user_pi_hi;  // users x T
};

McCormickBounds initial_envelope(const ScenarioConfig& cfg, const UncertaintyModel& um);

// Shrinks env to a band of half-width eps (relative) around the anchor
// solution, clipped against the initial boxes. eps = 0 collapses each box to
// the anchor point.
void contract_envelope(McCormickBounds& env, const McCormickBounds& initial,
                       const TradeState& anchor, double eps);

// Margins of the four envelope planes at (p, pi, chi) for the given box; all
// four are >= 0 exactly when chi is inside the convex hull of the product
// surface over the box.
Eigen::Vector4d envelope_margins(double p, double pi, double chi, double p_lo,
                                 double p_hi, double pi_lo, double pi_hi);

// Read-only bundle handed to every model builder.
struct BuildContext {
  const ScenarioConfig& cfg;
  const UncertaintyModel& um;
  const IndexLayout& layout;
  const McCormickBounds& env;
};

// Variable blocks: create one participant's decision variables (with their
// boxes) and register them in the map. Users need their allowance-seller flag
// fixed up front (0 = holds and may buy shares, 1 = sells to the manager);
// the discrete choice is handled by solving both restrictions. bounded adds
// the implied trade-direction boxes (buys nonpositive, factor copies in
// [-1, 0], sales capped by capacity); the coupled problem does not need them,
// fixed-price best-response problems do, to stay bounded.
void add_user_block(ConicProblem& p, SlotMap& map, const BuildContext& ctx, int u,
                    int seller_flag_fixed, bool bounded = false);
void add_cg_block(ConicProblem& p, SlotMap& map, const BuildContext& ctx, int g,
                  bool bounded = false);
void add_res_block(ConicProblem& p, SlotMap& map, const BuildContext& ctx, int r,
                   bool bounded = false);

// Constraint builders, one call per participant. Chance restrictions enter as
// second-order cone cuts against the physical limits (capacity under deployed
// reserve, consumption floor under offered flexibility, allowance cover for
// the emissions a renewable's reserve calls cause); hours with no forecast
// error degrade to plain linear rows.
void add_user_model(ConicProblem& p, const SlotMap& map, const BuildContext& ctx, int u);
void add_cg_model(ConicProblem& p, const SlotMap& map, const BuildContext& ctx, int g);
void add_res_model(ConicProblem& p, const SlotMap& map, const BuildContext& ctx, int r);

// Objective contributions (expected generation cost, negated expected
// utility, manager buyback revenue, allowance sale revenue), written with the
// envelope variables in place of the setpoint * deviation products.
void add_user_cost(ConicProblem& p, const SlotMap& map, const BuildContext& ctx, int u);
void add_cg_cost(ConicProblem& p, const SlotMap& map, const BuildContext& ctx, int g);
void add_res_cost(ConicProblem& p, const SlotMap& map, const BuildContext& ctx, int r);

// Ties the paired copies together: seller and buyer trades sum to zero, the
// two factor copies sum to zero, allowance shares sum to zero.
void add_coupling(ConicProblem& p, const SlotMap& map, const BuildContext& ctx);

// The whole community as one cone program, coupling included, with every
// user's allowance-seller flag fixed per the given pattern.
struct CentralizedModel {
  ConicProblem prob;
  SlotMap map;
};
CentralizedModel build_centralized(const BuildContext& ctx,
                                   const std::vector<int>& seller_pattern);

// --- evaluators (pure functions of a state, used for audits and reports) ---

// Community cost with the exact expectation of the quadratic costs, computed
// from setpoints and factors alone; stored deviation/product fields are
// ignored.
double exact_cost(const TradeState& s, const ScenarioConfig& cfg, const UncertaintyModel& um);

// Cost as the relaxation sees it, using the stored deviation and product
// fields. Matches ConicProblem::eval_objective of the built model at the
// corresponding point.
double relaxed_cost(const TradeState& s, const ScenarioConfig& cfg, const UncertaintyModel& um);

// Worst relative mismatch between the stored products and the true setpoint *
// deviation products (denominator floored at 1e-6 so near-zero products are
// judged absolutely).
double bilinear_gap_cg(const TradeState& s);
double bilinear_gap_user(const TradeState& s);

// Coupling residuals: largest absolute entry of sell+buy across all hours, of
// the factor-copy sums, and of the allowance-share total.
double energy_imbalance(const TradeState& s);
double factor_imbalance(const TradeState& s);
double carbon_imbalance(const TradeState& s);

// Allowance accounting at a state: realized emission charge and cap per user,
// chance-constraint requirement and held share per renewable.
struct CarbonLedger {
  Eigen::VectorXd user_emission;  // charged for generator purchases
  Eigen::VectorXd user_cap;       // initial grant + share bought - share sold
  Eigen::VectorXd res_need;       // cover requirement for reserve-call emissions
  Eigen::VectorXd res_cap;        // share held
};
CarbonLedger carbon_ledger(const TradeState& s, const ScenarioConfig& cfg,
                           const UncertaintyModel& um);

// Out-of-sample evaluation against one drawn error field (horizon x n_res,
// entries <= 0): deployed generator outputs, curtailed consumptions, emission
// charges attributed to each renewable's reserve calls, and the realized
// community cost.
Eigen::MatrixXd realized_cg(const TradeState& s, const Eigen::MatrixXd& omega);
Eigen::MatrixXd realized_user(const TradeState& s, const Eigen::MatrixXd& omega);
Eigen::VectorXd realized_res_emission(const TradeState& s, const ScenarioConfig& cfg,
                                      const Eigen::MatrixXd& omega);
double realized_cost(const TradeState& s, const ScenarioConfig& cfg,
                     const Eigen::MatrixXd& omega);

}  // namespace ecmarket
