#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

namespace ecmarket {

// Dispatchable generator: quadratic fuel cost c2*p^2 + c1*p + c0 [$/h], setpoint
// box per hour [kW], emission intensity sigma [kg/kWh], chance-constraint risk
// level epsilon for its capacity limit under deployed reserve.
struct CgParams {
  std::string name;
  double c0 = 0, c1 = 0, c2 = 0;
  Eigen::VectorXd p_min, p_max;  // length = horizon
  double sigma = 0;
  double epsilon = 0.05;
};

// Flexible consumer: quadratic utility d1*p + d2*p^2 (d2 < 0), consumption box
// per hour, initial carbon allowance psi0 [kg], risk level for its lower-bound
// chance constraint when it offers flexibility.
struct UserParams {
  std::string name;
  double d1 = 0, d2 = 0;
  Eigen::VectorXd p_min, p_max;
  double psi0 = 0;
  double epsilon = 0.05;
};

// Renewable producer: day-ahead forecast per hour [kW], forecast-error scale as
// a fraction of forecast, risk level for its allowance-cover chance constraint.
struct ResParams {
  std::string name;
  Eigen::VectorXd forecast;
  double sigma_rel = 0.10;
  double epsilon = 0.05;
};

struct MarketPrices {
  Eigen::VectorXd r_e;    // manager's buyback price for surplus renewables, per hour
  double r_c_sell = 0;    // manager's buy price for surplus carbon allowances

  // When set, the community sharing pool is suspended: every participant
  // covers its allowance needs by buying from the manager at this tariff
  // instead, and the zero-sum sharing balance disappears.
  std::optional<double> carbon_buy;
};

// Algorithm knobs. Penalties and duals are grouped by coupling variable:
// energy trades, reserve factors (CG<->RES), flexibility factors (user<->RES),
// carbon sharing. Residual tolerances apply to the squared-norm residuals.
struct AlgoConfig {
  double pen_energy = 1.0;
  double pen_reserve = 1.0;
  double pen_flex = 1.0;
  double pen_carbon = 1.0;

  double tol_primal_energy = 1e-4;
  double tol_primal_reserve = 1e-6;
  double tol_primal_flex = 1e-6;
  double tol_primal_carbon = 1e-4;
  double tol_dual_energy = 1e-4;
  double tol_dual_reserve = 1e-6;
  double tol_dual_flex = 1e-6;
  double tol_dual_carbon = 1e-4;

  double contract_eps0 = 0.5;   // initial bound-contraction half-width
  double contract_kappa = 0.2;  // per-round decrement of the half-width
  double bilinear_tol_cg = 1e-2;    // outer-loop stop: max relative envelope error
  double bilinear_tol_user = 1e-2;

  int max_admm_iters = 5000;
  int max_rounds = 10;
  bool warm_start = true;
  bool adaptive_penalty = true;

  std::optional<double> big_m;  // carbon big-M; default: sum of user allowances
};

struct ScenarioConfig {
  int horizon = 0;
  std::vector<CgParams> cg;
  std::vector<UserParams> users;
  std::vector<ResParams> res;
  MarketPrices prices;
  AlgoConfig algo;

  // Comparative-design switch: with this off, users cannot take on any
  // balancing duty and renewables leave their whole shortfall to reserves.
  bool user_flex = true;

  // Optional correlation hooks; empty = independent errors. res_correlation is
  // across renewables within an hour, time_correlation across hours for one
  // renewable. Both must be PSD with unit diagonal.
  Eigen::MatrixXd res_correlation;   // n_res x n_res or empty
  Eigen::MatrixXd time_correlation;  // horizon x horizon or empty

  int n_cg() const { return static_cast<int>(cg.size()); }
  int n_users() const { return static_cast<int>(users.size()); }
  int n_res() const { return static_cast<int>(res.size()); }
  int n_sellers() const { return n_cg() + n_res(); }
  int n_traders() const { return n_users() + n_res(); }  // carbon-sharing parties
  double big_m_value() const;
};

bool operator==(const CgParams&, const CgParams&);
bool operator==(const UserParams&, const UserParams&);
bool operator==(const ResParams&, const ResParams&);
bool operator==(const MarketPrices&, const MarketPrices&);
bool operator==(const AlgoConfig&, const AlgoConfig&);
bool operator==(const ScenarioConfig&, const ScenarioConfig&);

// Flat ordinal numbering of every market-state slot (all participant variables,
// all hours). Sellers are ordered CG first, then RES; column s in a trade
// matrix refers to that combined ordering. Deterministic for a given config.
class IndexLayout {
 public:
  IndexLayout() = default;
  IndexLayout(int n_users, int n_cg, int n_res, int horizon);

  int n_users = 0, n_cg = 0, n_res = 0, horizon = 0;
  int n_sellers() const { return n_cg + n_res; }

  // (t, row, col) slots for the per-hour matrices
  int trade_sell(int u, int s, int t) const { return off_sell_ + idx3(u, s, t, n_users, n_sellers()); }
  int trade_buy(int u, int s, int t) const { return off_buy_ + idx3(u, s, t, n_users, n_sellers()); }
  int reserve_cg(int g, int r, int t) const { return off_rescg_ + idx3(g, r, t, n_cg, n_res); }
  int reserve_res(int g, int r, int t) const { return off_resres_ + idx3(g, r, t, n_cg, n_res); }
  int flex_user(int u, int r, int t) const { return off_flexu_ + idx3(u, r, t, n_users, n_res); }
  int flex_res(int u, int r, int t) const { return off_flexr_ + idx3(u, r, t, n_users, n_res); }

  // per-participant hourly series
  int load(int u, int t) const { return off_load_ + u * horizon + t; }
  int gen_cg(int g, int t) const { return off_gencg_ + g * horizon + t; }
  int gen_res(int r, int t) const { return off_genres_ + r * horizon + t; }
  int res_to_manager(int r, int t) const { return off_tomgr_ + r * horizon + t; }
  int mean_dev_cg(int g, int t) const { return off_devcg_ + g * horizon + t; }
  int mean_dev_user(int u, int t) const { return off_devu_ + u * horizon + t; }
  int bilinear_cg(int g, int t) const { return off_bilcg_ + g * horizon + t; }
  int bilinear_user(int u, int t) const { return off_bilu_ + u * horizon + t; }

  // carbon block: traders ordered users first, then RES
  int carbon_share(int trader) const { return off_cshare_ + trader; }
  int carbon_sold(int u) const { return off_csold_ + u; }
  int seller_flag(int u) const { return off_flag_ + u; }

  int total_slots() const { return total_; }

 private:
  static int idx3(int r, int c, int t, int rows, int cols) { return (t * rows + r) * cols + c; }
  int off_sell_ = 0, off_buy_ = 0, off_rescg_ = 0, off_resres_ = 0, off_flexu_ = 0,
      off_flexr_ = 0, off_load_ = 0, off_gencg_ = 0, off_genres_ = 0, off_tomgr_ = 0,
      off_devcg_ = 0, off_devu_ = 0, off_bilcg_ = 0, off_bilu_ = 0, off_cshare_ = 0,
      off_csold_ = 0, off_flag_ = 0, total_ = 0;
};

IndexLayout derive_indices(const ScenarioConfig& cfg);

// Throws std::runtime_error naming the offending field (e.g. "cg[1].p_min[3]")
// on any violated invariant.
void validate(const ScenarioConfig& cfg);

// JSON scenario file IO. load_scenario validates; scalar entries for per-hour
// fields are broadcast to the full horizon.
ScenarioConfig load_scenario(const std::string& path);
void save_scenario(const ScenarioConfig& cfg, const std::string& path);
std::string scenario_to_json(const ScenarioConfig& cfg);
ScenarioConfig scenario_from_json(const std::string& text);

// The bundled community: 3 microturbines, 3 flexible users, 2 PV plants, 24 h,
// synthetic day profiles (PV zero outside 07:00-19:00 with a midday peak;
// double-peaked loads with p_min = 0.4 * p_max).
ScenarioConfig bundled_reference_case();

}  // namespace ecmarket
