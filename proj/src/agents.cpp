#include "ecmarket/agents.hpp"

#include <utility>

namespace ecmarket {

namespace {

// Ties between the two allowance-role fixings go to the seller, same rule as
// solve_restrictions (preferred branch listed last).
constexpr double kRestrictionTie = 1e-9;

// Proximal pull toward the agent's previous iterate, recentred by the last
// consensus average:  (pen/2) * (x - x_prev + avg)^2. The constant piece is
// dropped; it shifts both restrictions of a discrete choice equally.
void add_pull(ConicProblem& p, int var, double pen, double price, double avg,
              double prev) {
  p.lin()[var] += price + pen * (avg - prev);
  p.quad_diag()[var] += 0.5 * pen;
}

}  // namespace

Broadcast Broadcast::zeros(const IndexLayout& L, const AlgoConfig& algo) {
  Broadcast b;
  b.trade_avg.assign(L.horizon, Eigen::MatrixXd::Zero(L.n_users, L.n_sellers()));
  b.reserve_avg.assign(L.horizon, Eigen::MatrixXd::Zero(L.n_cg, L.n_res));
  b.flex_avg.assign(L.horizon, Eigen::MatrixXd::Zero(L.n_users, L.n_res));
  b.price_energy = b.trade_avg;
  b.price_reserve = b.reserve_avg;
  b.price_flex = b.flex_avg;
  b.pen_energy = algo.pen_energy;
  b.pen_reserve = algo.pen_reserve;
  b.pen_flex = algo.pen_flex;
  b.pen_carbon = algo.pen_carbon;
  return b;
}

UserAgent::UserAgent(const ScenarioConfig& cfg, const UncertaintyModel& um,
                     const IndexLayout& layout, int u)
    : cfg_(&cfg), um_(&um), layout_(&layout), u_(u) {}

void UserAgent::rebuild(const McCormickBounds& env) {
  BuildContext ctx{*cfg_, *um_, *layout_, env};
  for (int id = 0; id < 2; ++id) {
    prob_[id] = ConicProblem();
    SlotMap m(layout_->total_slots());
    add_user_block(prob_[id], m, ctx, u_, id);
    add_user_model(prob_[id], m, ctx, u_);
    add_user_cost(prob_[id], m, ctx, u_);
    base_lin_[id] = prob_[id].lin();
    if (id == 0) map_ = std::make_unique<SlotMap>(std::move(m));
    // Fresh solver: the envelope planes changed coefficient values, which the
    // cheap objective-only refresh would not pick up.
    solver_[id] = ConeSolver();
  }
  base_quad_diag_ = Eigen::VectorXd::Zero(prob_[0].num_vars());
}

void UserAgent::inject(int variant, const TradeState& prev, const Broadcast& bc) {
  const IndexLayout& L = *layout_;
  ConicProblem& p = prob_[variant];
  p.lin() = base_lin_[variant];
  p.quad_diag() = base_quad_diag_;
  for (int t = 0; t < L.horizon; ++t) {
    for (int s = 0; s < L.n_sellers(); ++s)
      add_pull(p, map_->var(L.trade_buy(u_, s, t)), bc.pen_energy,
               bc.price_energy[t](u_, s), bc.trade_avg[t](u_, s),
               prev.buy[t](u_, s));
    for (int r = 0; r < L.n_res; ++r)
      add_pull(p, map_->var(L.flex_user(u_, r, t)), bc.pen_flex,
               bc.price_flex[t](u_, r), bc.flex_avg[t](u_, r),
               prev.flex_user[t](u_, r));
  }
  if (!cfg_->prices.carbon_buy)
    add_pull(p, map_->var(L.carbon_share(u_)), bc.pen_carbon, bc.price_carbon,
             bc.carbon_avg, prev.carbon[u_]);
}

bool UserAgent::respond(const TradeState& prev, const Broadcast& bc,
                        const SolverOptions& opts, TradeState& out) {
  ConicSolution sols[2];
  int best = -1;
  for (int v = 0; v < 2; ++v) {
    inject(v, prev, bc);
    solver_[v].options = opts;
    sols[v] = solver_[v].solve(prob_[v]);
    if (!sols[v].ok()) continue;
    if (best < 0 || sols[v].objective <= sols[best].objective + kRestrictionTie)
      best = v;
  }
  if (best < 0) return false;
  scatter(sols[best].x, *map_, *layout_, out);
  out.seller_flag[u_] = best;
  return true;
}

CgAgent::CgAgent(const ScenarioConfig& cfg, const UncertaintyModel& um,
                 const IndexLayout& layout, int g)
    : cfg_(&cfg), um_(&um), layout_(&layout), g_(g) {}

void CgAgent::rebuild(const McCormickBounds& env) {
  BuildContext ctx{*cfg_, *um_, *layout_, env};
  prob_ = ConicProblem();
  SlotMap m(layout_->total_slots());
  add_cg_block(prob_, m, ctx, g_);
  add_cg_model(prob_, m, ctx, g_);
  add_cg_cost(prob_, m, ctx, g_);
  base_lin_ = prob_.lin();
  base_quad_diag_ = Eigen::VectorXd::Zero(prob_.num_vars());
  map_ = std::make_unique<SlotMap>(std::move(m));
  solver_ = ConeSolver();
}

bool CgAgent::respond(const TradeState& prev, const Broadcast& bc,
                      const SolverOptions& opts, TradeState& out) {
  const IndexLayout& L = *layout_;
  prob_.lin() = base_lin_;
  prob_.quad_diag() = base_quad_diag_;
  for (int t = 0; t < L.horizon; ++t) {
    for (int u = 0; u < L.n_users; ++u)
      add_pull(prob_, map_->var(L.trade_sell(u, g_, t)), bc.pen_energy,
               bc.price_energy[t](u, g_), bc.trade_avg[t](u, g_),
               prev.sell[t](u, g_));
    for (int r = 0; r < L.n_res; ++r)
      add_pull(prob_, map_->var(L.reserve_cg(g_, r, t)), bc.pen_reserve,
               bc.price_reserve[t](g_, r), bc.reserve_avg[t](g_, r),
               prev.res_cg[t](g_, r));
  }
  solver_.options = opts;
  ConicSolution sol = solver_.solve(prob_);
  if (!sol.ok()) return false;
  scatter(sol.x, *map_, L, out);
  return true;
}

ResAgent::ResAgent(const ScenarioConfig& cfg, const UncertaintyModel& um,
                   const IndexLayout& layout, int r)
    : cfg_(&cfg), um_(&um), layout_(&layout), r_(r) {}

void ResAgent::rebuild(const McCormickBounds& env) {
  BuildContext ctx{*cfg_, *um_, *layout_, env};
  prob_ = ConicProblem();
  SlotMap m(layout_->total_slots());
  add_res_block(prob_, m, ctx, r_);
  add_res_model(prob_, m, ctx, r_);
  add_res_cost(prob_, m, ctx, r_);
  base_lin_ = prob_.lin();
  base_quad_diag_ = Eigen::VectorXd::Zero(prob_.num_vars());
  map_ = std::make_unique<SlotMap>(std::move(m));
  solver_ = ConeSolver();
}

bool ResAgent::respond(const TradeState& prev, const Broadcast& bc,
                       const SolverOptions& opts, TradeState& out) {
  const IndexLayout& L = *layout_;
  int col = L.n_cg + r_;        // seller column in the trade matrices
  int trader = L.n_users + r_;  // row in the carbon block
  prob_.lin() = base_lin_;
  prob_.quad_diag() = base_quad_diag_;
  for (int t = 0; t < L.horizon; ++t) {
    for (int u = 0; u < L.n_users; ++u)
      add_pull(prob_, map_->var(L.trade_sell(u, col, t)), bc.pen_energy,
               bc.price_energy[t](u, col), bc.trade_avg[t](u, col),
               prev.sell[t](u, col));
    for (int g = 0; g < L.n_cg; ++g)
      add_pull(prob_, map_->var(L.reserve_res(g, r_, t)), bc.pen_reserve,
               bc.price_reserve[t](g, r_), bc.reserve_avg[t](g, r_),
               prev.res_res[t](g, r_));
    for (int u = 0; u < L.n_users; ++u)
      add_pull(prob_, map_->var(L.flex_res(u, r_, t)), bc.pen_flex,
               bc.price_flex[t](u, r_), bc.flex_avg[t](u, r_),
               prev.flex_res[t](u, r_));
  }
  if (!cfg_->prices.carbon_buy)
    add_pull(prob_, map_->var(L.carbon_share(trader)), bc.pen_carbon,
             bc.price_carbon, bc.carbon_avg, prev.carbon[trader]);
  solver_.options = opts;
  ConicSolution sol = solver_.solve(prob_);
  if (!sol.ok()) return false;
  scatter(sol.x, *map_, L, out);
  return true;
}

std::vector<std::unique_ptr<Agent>> make_agents(const ScenarioConfig& cfg,
                                                const UncertaintyModel& um,
                                                const IndexLayout& layout) {
  std::vector<std::unique_ptr<Agent>> out;
  out.reserve(cfg.users.size() + cfg.cg.size() + cfg.res.size());
  for (int u = 0; u < layout.n_users; ++u)
    out.push_back(std::make_unique<UserAgent>(cfg, um, layout, u));
  for (int g = 0; g < layout.n_cg; ++g)
    out.push_back(std::make_unique<CgAgent>(cfg, um, layout, g));
  for (int r = 0; r < layout.n_res; ++r)
    out.push_back(std::make_unique<ResAgent>(cfg, um, layout, r));
  return out;
}

}  // namespace ecmarket
