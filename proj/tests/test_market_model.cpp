#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "ecmarket/market_model.hpp"

using namespace ecmarket;

namespace {

Eigen::VectorXd fill(int n, double v) { return Eigen::VectorXd::Constant(n, v); }

// One generator, one dummy user to receive its sales, one renewable whose
// forecast of 100 at 10% relative error gives round moment values.
ScenarioConfig cg_probe() {
  ScenarioConfig cfg;
  cfg.horizon = 1;
  CgParams g;
  g.name = "probe-gen";
  g.c1 = 0.045;
  g.c2 = 2.1e-4;
  g.p_min = fill(1, 0.0);
  g.p_max = fill(1, 260.0);
  g.sigma = 0.87;
  cfg.cg.push_back(g);
  UserParams u;
  u.name = "sink";
  u.p_min = fill(1, 0.0);
  u.p_max = fill(1, 400.0);
  cfg.users.push_back(u);
  ResParams r;
  r.name = "pv";
  r.forecast = fill(1, 100.0);
  r.sigma_rel = 0.10;
  cfg.res.push_back(r);
  cfg.prices.r_e = fill(1, 0.06);
  return cfg;
}

// Two-hour community, second hour dark, for end-to-end wiring checks.
ScenarioConfig tiny_community() {
  ScenarioConfig cfg;
  cfg.horizon = 2;
  CgParams g;
  g.name = "mt";
  g.c0 = 0.5;
  g.c1 = 0.045;
  g.c2 = 2.1e-4;
  g.p_min = fill(2, 0.0);
  g.p_max = fill(2, 6.0);
  g.sigma = 0.87;
  cfg.cg.push_back(g);
  UserParams u;
  u.name = "load";
  u.d1 = 0.08;
  u.d2 = -1.4e-4;
  u.p_min = fill(2, 2.0);
  u.p_max = fill(2, 8.0);
  u.psi0 = 30.0;
  cfg.users.push_back(u);
  ResParams r;
  r.name = "pv";
  r.forecast = Eigen::Vector2d(10.0, 0.0);
  r.sigma_rel = 0.10;
  cfg.res.push_back(r);
  cfg.prices.r_e = fill(2, 0.06);
  cfg.prices.r_c_sell = 0.003;
  return cfg;
}

}  // namespace

TEST_CASE("envelope planes contain the true product over random boxes") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (int trial = 0; trial < 10000; ++trial) {
    double p_lo = -100 + 200 * u01(rng), pi_lo = -100 + 200 * u01(rng);
    double p_hi = p_lo + 200 * u01(rng), pi_hi = pi_lo + 200 * u01(rng);
    double p = p_lo + (p_hi - p_lo) * u01(rng);
    double pi = pi_lo + (pi_hi - pi_lo) * u01(rng);
    Eigen::Vector4d m = envelope_margins(p, pi, p * pi, p_lo, p_hi, pi_lo, pi_hi);
    CHECK(m.minCoeff() >= -1e-8);
  }
}

TEST_CASE("envelope planes are tight at box corners") {
  double p_lo = 0, p_hi = 100, pi_lo = -5, pi_hi = 0;
  for (double p : {p_lo, p_hi})
    for (double pi : {pi_lo, pi_hi}) {
      Eigen::Vector4d m = envelope_margins(p, pi, p * pi, p_lo, p_hi, pi_lo, pi_hi);
      CHECK(m.minCoeff() >= -1e-12);
      CHECK(m.minCoeff() <= 1e-12);  // some plane touches at every corner
    }
  // spec'd interior example: chi at (50, -2) can range over [-200, 0] only
  Eigen::Vector4d lo_ok = envelope_margins(50, -2, -200, p_lo, p_hi, pi_lo, pi_hi);
  CHECK(lo_ok.minCoeff() >= -1e-12);
  Eigen::Vector4d hi_ok = envelope_margins(50, -2, 0, p_lo, p_hi, pi_lo, pi_hi);
  CHECK(hi_ok.minCoeff() >= -1e-12);
  CHECK(envelope_margins(50, -2, -200.001, p_lo, p_hi, pi_lo, pi_hi).minCoeff() < 0);
  CHECK(envelope_margins(50, -2, 0.001, p_lo, p_hi, pi_lo, pi_hi).minCoeff() < 0);
}

TEST_CASE("degenerate box pins the product variable") {
  double pv = 7.0, pi = -3.0;
  Eigen::Vector4d exact = envelope_margins(pv, pi, pv * pi, pv, pv, -4, 0);
  CHECK(exact.minCoeff() >= -1e-12);
  CHECK(envelope_margins(pv, pi, pv * pi + 1e-3, pv, pv, -4, 0).minCoeff() < 0);
  CHECK(envelope_margins(pv, pi, pv * pi - 1e-3, pv, pv, -4, 0).minCoeff() < 0);
}

TEST_CASE("initial envelope boxes from physical limits and shortfall means") {
  ScenarioConfig cfg = bundled_reference_case();
  UncertaintyModel um = build_uncertainty(cfg);
  McCormickBounds env = initial_envelope(cfg, um);
  CHECK(env.cg_p_lo(1, 5) == cfg.cg[1].p_min[5]);
  CHECK(env.cg_p_hi(2, 13) == cfg.cg[2].p_max[13]);
  CHECK(env.user_p_lo(0, 8) == cfg.users[0].p_min[8]);
  // deviation floor at the midday peak equals the worst single shortfall mean
  double worst = um.slice[13].mean.minCoeff();
  CHECK(worst < 0);
  CHECK(env.cg_pi_lo(0, 13) == worst);
  CHECK(env.user_pi_lo(2, 13) == worst);
  CHECK(env.cg_pi_hi.maxCoeff() == 0.0);
  // dark hours have no forecast error, so the deviation box collapses to zero
  CHECK(env.cg_pi_lo(0, 0) == 0.0);
  CHECK(env.user_pi_lo(0, 23) == 0.0);
}

TEST_CASE("bound contraction tightens around the anchor and respects initial boxes") {
  ScenarioConfig cfg = tiny_community();
  IndexLayout L = derive_indices(cfg);
  UncertaintyModel um = build_uncertainty(cfg);
  // widen the probe instance numbers onto a hand-made box set
  McCormickBounds ini;
  ini.cg_p_lo = Eigen::MatrixXd::Zero(1, 2);
  ini.cg_p_hi = Eigen::MatrixXd::Constant(1, 2, 260.0);
  ini.cg_pi_lo = Eigen::MatrixXd::Constant(1, 2, -5.0);
  ini.cg_pi_hi = Eigen::MatrixXd::Zero(1, 2);
  ini.user_p_lo = Eigen::MatrixXd::Zero(1, 2);
  ini.user_p_hi = Eigen::MatrixXd::Constant(1, 2, 260.0);
  ini.user_pi_lo = Eigen::MatrixXd::Constant(1, 2, -5.0);
  ini.user_pi_hi = Eigen::MatrixXd::Zero(1, 2);
  McCormickBounds env = ini;
  TradeState anchor = zero_state(L);
  anchor.gen_cg.setConstant(100.0);
  anchor.dev_cg.setConstant(-2.0);
  anchor.load.setConstant(100.0);
  anchor.dev_user.setConstant(-2.0);
  contract_envelope(env, ini, anchor, 0.2);
  CHECK(env.cg_p_lo(0, 0) == doctest::Approx(80.0));
  CHECK(env.cg_p_hi(0, 0) == doctest::Approx(120.0));
  CHECK(env.cg_pi_lo(0, 1) == doctest::Approx(-2.4));
  CHECK(env.cg_pi_hi(0, 1) == doctest::Approx(-1.6));
  CHECK(env.user_p_lo(0, 0) == doctest::Approx(80.0));
  CHECK(env.user_pi_hi(0, 0) == doctest::Approx(-1.6));

  // a second, tighter contraction clips against the initial box, never widens
  anchor.gen_cg.setConstant(1.0);
  contract_envelope(env, ini, anchor, 0.5);
  CHECK(env.cg_p_lo(0, 0) == doctest::Approx(0.5));
  CHECK(env.cg_p_hi(0, 0) == doctest::Approx(1.5));

  // zero width collapses to the anchor point
  contract_envelope(env, ini, anchor, 0.0);
  CHECK(env.cg_p_lo(0, 0) == doctest::Approx(1.0));
  CHECK(env.cg_p_hi(0, 0) == doctest::Approx(1.0));

  // an anchor outside the initial box cannot produce a crossed interval
  anchor.dev_cg.setConstant(-10.0);
  contract_envelope(env, ini, anchor, 0.1);
  CHECK(env.cg_pi_lo(0, 0) <= env.cg_pi_hi(0, 0));
}

TEST_CASE("generator capacity cut binds at the reserve-adjusted level") {
  ScenarioConfig cfg = cg_probe();
  IndexLayout L = derive_indices(cfg);
  UncertaintyModel um = build_uncertainty(cfg);
  McCormickBounds env = initial_envelope(cfg, um);
  BuildContext ctx{cfg, um, L, env};
  ConicProblem prob;
  SlotMap map(L.total_slots());
  add_cg_block(prob, map, ctx, 0);
  add_cg_model(prob, map, ctx, 0);
  prob.add_eq(Affine(map.var(L.reserve_cg(0, 0, 0)), 1.0), 1.0);  // full share
  prob.add_lin(map.var(L.gen_cg(0, 0)), -1.0);                    // push output up
  ConicSolution sol = solve(prob);
  REQUIRE(sol.ok());
  // capacity 260, worst-case mean call 3.9894, Chebyshev margin z*std of the
  // call spread; frozen from the closed-form moment values at scale 10
  CHECK(sol.x[map.var(L.gen_cg(0, 0))] == doctest::Approx(230.56248084035624).epsilon(1e-7));
}

TEST_CASE("consumption floor cut binds at the flexibility-adjusted level") {
  ScenarioConfig cfg = cg_probe();
  cfg.cg.clear();  // only the flexible user and the renewable remain
  cfg.users[0].p_min = fill(1, 40.0);
  cfg.users[0].p_max = fill(1, 180.0);
  IndexLayout L = derive_indices(cfg);
  UncertaintyModel um = build_uncertainty(cfg);
  McCormickBounds env = initial_envelope(cfg, um);
  BuildContext ctx{cfg, um, L, env};
  ConicProblem prob;
  SlotMap map(L.total_slots());
  add_user_block(prob, map, ctx, 0, 0);
  add_user_model(prob, map, ctx, 0);
  prob.add_eq(Affine(map.var(L.flex_user(0, 0, 0)), 1.0), 1.0);  // full flexibility
  prob.add_lin(map.var(L.load(0, 0)), 1.0);                      // push load down
  ConicSolution sol = solve(prob);
  REQUIRE(sol.ok());
  CHECK(sol.x[map.var(L.load(0, 0))] == doctest::Approx(69.43751915964374).epsilon(1e-7));
}

TEST_CASE("allowance cover requirement for a full reserve assignment") {
  ScenarioConfig cfg = cg_probe();
  cfg.users.clear();  // generator and renewable only; assignment forces the share
  cfg.algo.big_m = 5400.0;
  IndexLayout L = derive_indices(cfg);
  UncertaintyModel um = build_uncertainty(cfg);
  McCormickBounds env = initial_envelope(cfg, um);
  BuildContext ctx{cfg, um, L, env};
  ConicProblem prob;
  SlotMap map(L.total_slots());
  add_res_block(prob, map, ctx, 0);
  add_res_model(prob, map, ctx, 0);
  prob.add_lin(map.var(L.carbon_share(0)), 1.0);  // cheapest cover
  ConicSolution sol = solve(prob);
  REQUIRE(sol.ok());
  CHECK(sol.x[map.var(L.carbon_share(0))] ==
        doctest::Approx(25.610641668890054).epsilon(1e-7));
  CHECK(sol.x[map.var(L.reserve_res(0, 0, 0))] == doctest::Approx(-1.0));

  // the ledger evaluator reproduces the same requirement from a state
  TradeState s = zero_state(L);
  s.res_res[0](0, 0) = -1.0;
  s.carbon[0] = 30.0;
  CarbonLedger led = carbon_ledger(s, cfg, um);
  CHECK(led.res_need[0] == doctest::Approx(25.610641668890054).epsilon(1e-12));
  CHECK(led.res_cap[0] == 30.0);
}

TEST_CASE("ledger accounting for user purchases and allowance position") {
  ScenarioConfig cfg = tiny_community();
  IndexLayout L = derive_indices(cfg);
  UncertaintyModel um = build_uncertainty(cfg);
  TradeState s = zero_state(L);
  s.buy[0](0, 0) = -4.0;  // buys 4 from the generator in hour 0
  s.buy[1](0, 0) = -2.0;
  s.buy[0](0, 1) = -3.0;  // renewable purchases carry no charge
  s.carbon[0] = -1.5;
  s.carbon_sold[0] = 0.5;
  CarbonLedger led = carbon_ledger(s, cfg, um);
  CHECK(led.user_emission[0] == doctest::Approx(0.87 * 6.0).epsilon(1e-12));
  CHECK(led.user_cap[0] == doctest::Approx(30.0 - 1.5 - 0.5).epsilon(1e-12));
}

TEST_CASE("standby cost of the all-zero state") {
  ScenarioConfig cfg = bundled_reference_case();
  IndexLayout L = derive_indices(cfg);
  UncertaintyModel um = build_uncertainty(cfg);
  TradeState s = zero_state(L);
  // only the generators' fixed terms remain
  CHECK(exact_cost(s, cfg, um) == doctest::Approx(145.2).epsilon(1e-12));
  CHECK(relaxed_cost(s, cfg, um) == doctest::Approx(145.2).epsilon(1e-12));
}

TEST_CASE("relaxed cost matches the built objective on arbitrary points") {
  ScenarioConfig cfg = bundled_reference_case();
  IndexLayout L = derive_indices(cfg);
  UncertaintyModel um = build_uncertainty(cfg);
  McCormickBounds env = initial_envelope(cfg, um);
  BuildContext ctx{cfg, um, L, env};
  CentralizedModel m = build_centralized(ctx, {1, 0, 1});
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-50.0, 50.0);
  for (int trial = 0; trial < 5; ++trial) {
    Eigen::VectorXd x(m.prob.num_vars());
    for (int i = 0; i < x.size(); ++i) x[i] = u(rng);
    TradeState s = zero_state(L);
    scatter(x, m.map, L, s);
    double direct = m.prob.eval_objective(x);
    double viaState = relaxed_cost(s, cfg, um);
    CHECK(viaState == doctest::Approx(direct).epsilon(1e-9));
  }
}

TEST_CASE("exact and relaxed costs agree when the product variables are honest") {
  ScenarioConfig cfg = bundled_reference_case();
  IndexLayout L = derive_indices(cfg);
  UncertaintyModel um = build_uncertainty(cfg);
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  TradeState s = zero_state(L);
  for (int t = 0; t < L.horizon; ++t) {
    for (int g = 0; g < L.n_cg; ++g) {
      s.gen_cg(g, t) = 200.0 * u(rng);
      for (int r = 0; r < L.n_res; ++r) s.res_cg[t](g, r) = u(rng);
      s.dev_cg(g, t) = um.slice[t].mean.dot(s.res_cg[t].row(g).transpose());
      s.bil_cg(g, t) = s.gen_cg(g, t) * s.dev_cg(g, t);
    }
    for (int uu = 0; uu < L.n_users; ++uu) {
      s.load(uu, t) = 100.0 * u(rng);
      for (int r = 0; r < L.n_res; ++r) s.flex_user[t](uu, r) = u(rng);
      s.dev_user(uu, t) = um.slice[t].mean.dot(s.flex_user[t].row(uu).transpose());
      s.bil_user(uu, t) = s.load(uu, t) * s.dev_user(uu, t);
    }
    for (int r = 0; r < L.n_res; ++r) s.to_manager(r, t) = 20.0 * u(rng);
  }
  s.carbon_sold.setConstant(3.0);
  CHECK(exact_cost(s, cfg, um) == doctest::Approx(relaxed_cost(s, cfg, um)).epsilon(1e-12));
  CHECK(bilinear_gap_cg(s) <= 1e-12);
  CHECK(bilinear_gap_user(s) <= 1e-12);
  // perturbing one stored product shows up in the gap but not the exact cost
  double before = exact_cost(s, cfg, um);
  s.bil_cg(0, 12) += 5.0;
  CHECK(exact_cost(s, cfg, um) == doctest::Approx(before).epsilon(1e-14));
  CHECK(bilinear_gap_cg(s) > 1e-3);
}

TEST_CASE("flatten and unflatten are inverse over the full slot numbering") {
  ScenarioConfig cfg = tiny_community();
  IndexLayout L = derive_indices(cfg);
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(-10.0, 10.0);
  Eigen::VectorXd v(L.total_slots());
  for (int i = 0; i < v.size(); ++i) v[i] = u(rng);
  for (int uu = 0; uu < L.n_users; ++uu) v[L.seller_flag(uu)] = uu % 2;
  TradeState s = unflatten(v, L);
  Eigen::VectorXd w = flatten(s, L);
  CHECK((w - v).lpNorm<Eigen::Infinity>() == 0.0);

  // residual evaluators see exactly the structured entries
  double worst = std::max((s.sell[0] + s.buy[0]).cwiseAbs().maxCoeff(),
                          (s.sell[1] + s.buy[1]).cwiseAbs().maxCoeff());
  CHECK(energy_imbalance(s) == doctest::Approx(worst).epsilon(1e-15));
}

TEST_CASE("scatter writes only the slots a participant owns") {
  ScenarioConfig cfg = tiny_community();
  IndexLayout L = derive_indices(cfg);
  UncertaintyModel um = build_uncertainty(cfg);
  McCormickBounds env = initial_envelope(cfg, um);
  BuildContext ctx{cfg, um, L, env};
  ConicProblem prob;
  SlotMap map(L.total_slots());
  add_user_block(prob, map, ctx, 0, 0);
  Eigen::VectorXd x = Eigen::VectorXd::Constant(prob.num_vars(), 2.5);
  TradeState s = zero_state(L);
  s.gen_cg.setConstant(9.0);  // foreign block, must survive
  scatter(x, map, L, s);
  CHECK(s.load(0, 0) == 2.5);
  CHECK(s.buy[1](0, 1) == 2.5);
  CHECK(s.carbon[0] == 2.5);
  CHECK(s.gen_cg(0, 0) == 9.0);
  CHECK(s.sell[0](0, 0) == 0.0);
}

TEST_CASE("centralized model solves and couples the tiny community") {
  ScenarioConfig cfg = tiny_community();
  IndexLayout L = derive_indices(cfg);
  UncertaintyModel um = build_uncertainty(cfg);
  McCormickBounds env = initial_envelope(cfg, um);
  BuildContext ctx{cfg, um, L, env};
  CentralizedModel m = build_centralized(ctx, {0});
  ConicSolution sol = solve(m.prob);
  REQUIRE(sol.ok());
  CHECK(m.prob.max_violation(sol.x) <= 1e-6);

  TradeState s = zero_state(L);
  scatter(sol.x, m.map, L, s);
  CHECK(energy_imbalance(s) <= 1e-6);
  CHECK(factor_imbalance(s) <= 1e-6);
  CHECK(carbon_imbalance(s) <= 1e-6);

  // every hour's shortfall is fully assigned, dark hour included
  for (int t = 0; t < 2; ++t)
    CHECK(s.res_cg[t].sum() + s.flex_user[t].sum() == doctest::Approx(1.0).epsilon(1e-6));

  // the renewable's surplus goes to the manager: committed plus surplus
  // covers the forecast
  CHECK(s.gen_res(0, 0) + s.to_manager(0, 0) == doctest::Approx(10.0).epsilon(1e-6));
  CHECK(s.gen_res(0, 1) == doctest::Approx(0.0).epsilon(1e-8));

  // dark hour: no deviation, and the envelope pins the product at zero
  CHECK(s.dev_cg(0, 1) == doctest::Approx(0.0).epsilon(1e-8));
  CHECK(s.bil_cg(0, 1) == doctest::Approx(0.0).epsilon(1e-6));

  // the relaxation never claims a higher cost than the exact evaluation
  CHECK(relaxed_cost(s, cfg, um) <= exact_cost(s, cfg, um) + 1e-7);
  CHECK(sol.objective == doctest::Approx(relaxed_cost(s, cfg, um)).epsilon(1e-7));

  // allowance accounting holds at the solution
  CarbonLedger led = carbon_ledger(s, cfg, um);
  CHECK(led.user_emission[0] <= led.user_cap[0] + 1e-6);
  CHECK(led.res_need[0] <= led.res_cap[0] + 1e-6);

  // consumption is worth more than the manager pays, so the user is served
  // before surplus is exported
  CHECK(s.load(0, 0) > 2.0 + 1e-3);
}

TEST_CASE("realized quantities follow one drawn shortfall field") {
  ScenarioConfig cfg = tiny_community();
  IndexLayout L = derive_indices(cfg);
  UncertaintyModel um = build_uncertainty(cfg);
  TradeState s = zero_state(L);
  s.gen_cg(0, 0) = 4.0;
  s.res_cg[0](0, 0) = 0.6;
  s.load(0, 0) = 5.0;
  s.flex_user[0](0, 0) = 0.4;
  s.to_manager(0, 0) = 1.0;
  Eigen::MatrixXd omega = Eigen::MatrixXd::Zero(2, 1);
  omega(0, 0) = -2.0;  // shortfall of 2 in hour 0
  Eigen::MatrixXd pg = realized_cg(s, omega);
  Eigen::MatrixXd pu = realized_user(s, omega);
  CHECK(pg(0, 0) == doctest::Approx(4.0 + 0.6 * 2.0).epsilon(1e-12));
  CHECK(pu(0, 0) == doctest::Approx(5.0 - 0.4 * 2.0).epsilon(1e-12));
  CHECK(pg(0, 1) == doctest::Approx(0.0));
  Eigen::VectorXd em = realized_res_emission(s, cfg, omega);
  CHECK(em[0] == doctest::Approx(0.87 * 0.6 * 2.0).epsilon(1e-12));

  // realized cost at the drawn field equals the direct arithmetic
  const auto& gp = cfg.cg[0];
  const auto& up = cfg.users[0];
  double expected = 0;
  expected += gp.c2 * pg(0, 0) * pg(0, 0) + gp.c1 * pg(0, 0) + gp.c0;
  expected += gp.c2 * pg(0, 1) * pg(0, 1) + gp.c1 * pg(0, 1) + gp.c0;
  expected -= up.d2 * pu(0, 0) * pu(0, 0) + up.d1 * pu(0, 0);
  expected -= up.d2 * pu(0, 1) * pu(0, 1) + up.d1 * pu(0, 1);
  expected -= cfg.prices.r_e[0] * 1.0;
  CHECK(realized_cost(s, cfg, omega) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("unmapped slot lookups fail loudly") {
  SlotMap map(4);
  CHECK_FALSE(map.has(2));
  CHECK_THROWS_AS((void)map.var(2), std::logic_error);
  map.at(2) = 0;
  CHECK(map.has(2));
  CHECK(map.var(2) == 0);
}
