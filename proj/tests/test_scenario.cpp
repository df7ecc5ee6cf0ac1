#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <string>
#include <vector>

#include "ecmarket/scenario.hpp"

using namespace ecmarket;

namespace {

// Expect validate (or a parser) to reject cfg and name the offending field.
template <class Fn>
void expect_rejects(Fn&& fn, const std::string& field) {
  try {
    fn();
    FAIL_CHECK("expected rejection mentioning '" << field << "'");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find(field) != std::string::npos);
  }
}

}  // namespace

TEST_CASE("bundled community has the documented shape") {
  ScenarioConfig cfg = bundled_reference_case();
  CHECK(cfg.horizon == 24);
  CHECK(cfg.n_cg() == 3);
  CHECK(cfg.n_users() == 3);
  CHECK(cfg.n_res() == 2);
  CHECK(cfg.n_sellers() == 5);
  CHECK(cfg.n_traders() == 5);
  validate(cfg);  // must not throw

  CHECK(cfg.cg[1].name == "MT2");
  CHECK(cfg.cg[1].p_max[0] == 270.0);
  CHECK(cfg.cg[2].c2 == 0.00019);
  CHECK(cfg.cg[0].sigma == 0.870);

  // users: fixed share of the shiftable load is firm
  for (const auto& u : cfg.users) {
    CHECK(u.psi0 == 1800.0);
    for (int t = 0; t < 24; ++t) CHECK(u.p_min[t] == doctest::Approx(0.4 * u.p_max[t]));
  }
  // evening demand peak exceeds the morning one
  CHECK(cfg.users[0].p_max[18] > cfg.users[0].p_max[9]);

  // PV: dark outside 07:00-19:00, full nameplate at 13:00
  for (int t : {0, 3, 6, 20, 23}) {
    CHECK(cfg.res[0].forecast[t] == 0.0);
    CHECK(cfg.res[1].forecast[t] == 0.0);
  }
  CHECK(cfg.res[0].forecast[13] == doctest::Approx(150.0));
  CHECK(cfg.res[1].forecast[13] == doctest::Approx(120.0));

  CHECK(cfg.prices.r_e[0] == 0.06);
  CHECK(cfg.prices.r_c_sell == 0.003);
  // default community allowance: the sum of user endowments
  CHECK(cfg.big_m_value() == doctest::Approx(5400.0));
}

TEST_CASE("validation names the offending field") {
  ScenarioConfig base = bundled_reference_case();

  SUBCASE("inverted setpoint box") {
    ScenarioConfig c = base;
    c.cg[0].p_min[3] = 300.0;  // above the 260 cap
    expect_rejects([&] { validate(c); }, "cg[0].p_min[3]");
  }
  SUBCASE("convexity of generation cost") {
    ScenarioConfig c = base;
    c.cg[2].c2 = -1e-5;
    expect_rejects([&] { validate(c); }, "cg[2].c2");
  }
  SUBCASE("concavity of user utility") {
    ScenarioConfig c = base;
    c.users[1].d2 = 0.0;
    expect_rejects([&] { validate(c); }, "users[1].d2");
  }
  SUBCASE("risk level out of range") {
    ScenarioConfig c = base;
    c.res[1].epsilon = 1.0;
    expect_rejects([&] { validate(c); }, "res[1].epsilon");
  }
  SUBCASE("negative forecast") {
    ScenarioConfig c = base;
    c.res[0].forecast[12] = -1.0;
    expect_rejects([&] { validate(c); }, "res[0].forecast[12]");
  }
  SUBCASE("correlation matrix must be PSD with unit diagonal") {
    ScenarioConfig c = base;
    c.res_correlation.setConstant(2, 2, 1.5);
    expect_rejects([&] { validate(c); }, "res_correlation");
    c.res_correlation.setIdentity(2, 2);
    c.res_correlation(0, 1) = c.res_correlation(1, 0) = 1.2;  // not PSD
    expect_rejects([&] { validate(c); }, "res_correlation");
  }
  SUBCASE("contraction schedule must shrink but stay positive") {
    ScenarioConfig c = base;
    c.algo.contract_kappa = 0.7;  // >= eps0
    expect_rejects([&] { validate(c); }, "contract_kappa");
  }
  SUBCASE("empty participant groups") {
    ScenarioConfig c = base;
    c.users.clear();
    expect_rejects([&] { validate(c); }, "users");
  }
}

TEST_CASE("scenario JSON round trip is exact") {
  ScenarioConfig cfg = bundled_reference_case();
  cfg.algo.pen_energy = 2.5;
  cfg.algo.big_m = 4321.0;
  cfg.res_correlation.setIdentity(2, 2);
  cfg.res_correlation(0, 1) = cfg.res_correlation(1, 0) = 0.35;

  ScenarioConfig back = scenario_from_json(scenario_to_json(cfg));
  CHECK(back == cfg);

  // and through a file
  std::string path = "roundtrip_scenario.json";
  save_scenario(cfg, path);
  ScenarioConfig loaded = load_scenario(path);
  CHECK(loaded == cfg);
  std::remove(path.c_str());
}

TEST_CASE("scalar entries broadcast across the horizon") {
  std::string text = R"({
    "horizon": 4,
    "cg": [{"c0": 1, "c1": 0.05, "c2": 0.0002, "p_min": 0, "p_max": 100, "sigma": 0.9}],
    "users": [{"d1": 0.08, "d2": -0.0001, "p_min": 10, "p_max": [20, 30, 25, 22], "psi0": 500}],
    "res": [{"forecast": [0, 40, 60, 10]}],
    "prices": {"r_e": 0.06, "r_c_sell": 0.003}
  })";
  ScenarioConfig cfg = scenario_from_json(text);
  CHECK(cfg.horizon == 4);
  CHECK(cfg.cg[0].p_max.size() == 4);
  CHECK((cfg.cg[0].p_max.array() == 100.0).all());
  CHECK(cfg.users[0].p_min.size() == 4);
  CHECK((cfg.users[0].p_min.array() == 10.0).all());
  CHECK(cfg.users[0].p_max[1] == 30.0);
  CHECK((cfg.prices.r_e.array() == 0.06).all());
  // defaults fill in
  CHECK(cfg.res[0].sigma_rel == 0.10);
  CHECK(cfg.cg[0].epsilon == 0.05);
  CHECK(cfg.users[0].name == "U1");
}

TEST_CASE("parser reports missing and malformed fields") {
  expect_rejects([] { scenario_from_json("{\"horizon\": 2}"); }, "prices");
  expect_rejects([] { scenario_from_json("{ not json"); }, "JSON");
  expect_rejects(
      [] {
        scenario_from_json(R"({"horizon": 2,
          "cg": [{"c0": 1, "c2": 0, "p_min": 0, "p_max": 10, "sigma": 0}],
          "users": [{"d1": 1, "d2": -1, "p_min": 0, "p_max": 5, "psi0": 1}],
          "prices": {"r_e": 0.1, "r_c_sell": 0}})");
      },
      "cg[0].c1");
  expect_rejects(
      [] {
        scenario_from_json(R"({"horizon": 3,
          "cg": [{"c0": 1, "c1": 1, "c2": 0, "p_min": 0, "p_max": 10, "sigma": 0}],
          "users": [{"d1": 1, "d2": -1, "p_min": 0, "p_max": [5, 5], "psi0": 1}],
          "prices": {"r_e": 0.1, "r_c_sell": 0}})");
      },
      "users[0].p_max");
  expect_rejects([] { load_scenario("no_such_file.json"); }, "no_such_file.json");
}

TEST_CASE("index layout enumerates every slot exactly once") {
  IndexLayout L(2, 1, 2, 3);  // 2 users, 1 CG, 2 RES, 3 hours
  std::vector<int> seen;
  for (int t = 0; t < 3; ++t) {
    for (int u = 0; u < 2; ++u)
      for (int s = 0; s < 3; ++s) {
        seen.push_back(L.trade_sell(u, s, t));
        seen.push_back(L.trade_buy(u, s, t));
      }
    for (int g = 0; g < 1; ++g)
      for (int r = 0; r < 2; ++r) {
        seen.push_back(L.reserve_cg(g, r, t));
        seen.push_back(L.reserve_res(g, r, t));
      }
    for (int u = 0; u < 2; ++u)
      for (int r = 0; r < 2; ++r) {
        seen.push_back(L.flex_user(u, r, t));
        seen.push_back(L.flex_res(u, r, t));
      }
    for (int u = 0; u < 2; ++u) {
      seen.push_back(L.load(u, t));
      seen.push_back(L.mean_dev_user(u, t));
      seen.push_back(L.bilinear_user(u, t));
    }
    for (int g = 0; g < 1; ++g) {
      seen.push_back(L.gen_cg(g, t));
      seen.push_back(L.mean_dev_cg(g, t));
      seen.push_back(L.bilinear_cg(g, t));
    }
    for (int r = 0; r < 2; ++r) {
      seen.push_back(L.gen_res(r, t));
      seen.push_back(L.res_to_manager(r, t));
    }
  }
  for (int k = 0; k < 4; ++k) seen.push_back(L.carbon_share(k));
  for (int u = 0; u < 2; ++u) {
    seen.push_back(L.carbon_sold(u));
    seen.push_back(L.seller_flag(u));
  }

  CHECK(static_cast<int>(seen.size()) == L.total_slots());
  std::sort(seen.begin(), seen.end());
  std::vector<int> want(seen.size());
  std::iota(want.begin(), want.end(), 0);
  CHECK(seen == want);
}

TEST_CASE("layout derived from a scenario matches its dimensions") {
  ScenarioConfig cfg = bundled_reference_case();
  IndexLayout L = derive_indices(cfg);
  CHECK(L.n_users == 3);
  CHECK(L.n_cg == 3);
  CHECK(L.n_res == 2);
  CHECK(L.horizon == 24);
  CHECK(L.n_sellers() == 5);
  // spot-check the first and last slots are in range and distinct
  CHECK(L.trade_sell(0, 0, 0) >= 0);
  CHECK(L.seller_flag(2) == L.total_slots() - 1);
}
