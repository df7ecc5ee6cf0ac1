#include "ecmarket/market_model.hpp"

#include <cmath>
#include <stdexcept>

namespace ecmarket {

namespace {

// A per-hour covariance block counts as certain when nothing feeds it; the
// cone cut then collapses to a linear row.
bool is_zero(const Eigen::MatrixXd& m) { return m.size() == 0 || m.lpNorm<Eigen::Infinity>() == 0; }

// chi boxed between the four tangent planes of the product p * pi over
// [p_lo, p_hi] x [pi_lo, pi_hi].
void add_envelope_rows(ConicProblem& p, int vp, int vpi, int vchi, double p_lo,
                       double p_hi, double pi_lo, double pi_hi) {
  Affine under1;  // chi >= p_lo*pi + pi_lo*p - p_lo*pi_lo
  under1.add(vp, pi_lo).add(vpi, p_lo).add(vchi, -1.0);
  p.add_le(under1, p_lo * pi_lo);
  Affine under2;  // chi >= p_hi*pi + pi_hi*p - p_hi*pi_hi
  under2.add(vp, pi_hi).add(vpi, p_hi).add(vchi, -1.0);
  p.add_le(under2, p_hi * pi_hi);
  Affine over1;  // chi <= p_hi*pi + pi_lo*p - p_hi*pi_lo
  over1.add(vp, -pi_lo).add(vpi, -p_hi).add(vchi, 1.0);
  p.add_le(over1, -p_hi * pi_lo);
  Affine over2;  // chi <= p_lo*pi + pi_hi*p - p_lo*pi_hi
  over2.add(vp, -pi_hi).add(vpi, -p_lo).add(vchi, 1.0);
  p.add_le(over2, -p_lo * pi_hi);
}

}  // namespace

int SlotMap::var(int slot) const {
  int v = to_var_.at(slot);
  if (v < 0) throw std::logic_error("slot not mapped to a variable");
  return v;
}

TradeState zero_state(const IndexLayout& L) {
  TradeState s;
  int ns = L.n_sellers();
  s.sell.assign(L.horizon, Eigen::MatrixXd::Zero(L.n_users, ns));
  s.buy.assign(L.horizon, Eigen::MatrixXd::Zero(L.n_users, ns));
  s.res_cg.assign(L.horizon, Eigen::MatrixXd::Zero(L.n_cg, L.n_res));
  s.res_res.assign(L.horizon, Eigen::MatrixXd::Zero(L.n_cg, L.n_res));
  s.flex_user.assign(L.horizon, Eigen::MatrixXd::Zero(L.n_users, L.n_res));
  s.flex_res.assign(L.horizon, Eigen::MatrixXd::Zero(L.n_users, L.n_res));
  s.load = Eigen::MatrixXd::Zero(L.n_users, L.horizon);
  s.gen_cg = Eigen::MatrixXd::Zero(L.n_cg, L.horizon);
  s.gen_res = Eigen::MatrixXd::Zero(L.n_res, L.horizon);
  s.to_manager = Eigen::MatrixXd::Zero(L.n_res, L.horizon);
  s.dev_cg = Eigen::MatrixXd::Zero(L.n_cg, L.horizon);
  s.dev_user = Eigen::MatrixXd::Zero(L.n_users, L.horizon);
  s.bil_cg = Eigen::MatrixXd::Zero(L.n_cg, L.horizon);
  s.bil_user = Eigen::MatrixXd::Zero(L.n_users, L.horizon);
  s.carbon = Eigen::VectorXd::Zero(L.n_users + L.n_res);
  s.carbon_sold = Eigen::VectorXd::Zero(L.n_users);
  s.seller_flag.assign(L.n_users, 0);
  return s;
}

Eigen::VectorXd flatten(const TradeState& s, const IndexLayout& L) {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(L.total_slots());
  for (int t = 0; t < L.horizon; ++t) {
    for (int u = 0; u < L.n_users; ++u)
      for (int c = 0; c < L.n_sellers(); ++c) {
        v[L.trade_sell(u, c, t)] = s.sell[t](u, c);
        v[L.trade_buy(u, c, t)] = s.buy[t](u, c);
      }
    for (int g = 0; g < L.n_cg; ++g)
      for (int r = 0; r < L.n_res; ++r) {
        v[L.reserve_cg(g, r, t)] = s.res_cg[t](g, r);
        v[L.reserve_res(g, r, t)] = s.res_res[t](g, r);
      }
    for (int u = 0; u < L.n_users; ++u)
      for (int r = 0; r < L.n_res; ++r) {
        v[L.flex_user(u, r, t)] = s.flex_user[t](u, r);
        v[L.flex_res(u, r, t)] = s.flex_res[t](u, r);
      }
    for (int u = 0; u < L.n_users; ++u) {
      v[L.load(u, t)] = s.load(u, t);
      v[L.mean_dev_user(u, t)] = s.dev_user(u, t);
      v[L.bilinear_user(u, t)] = s.bil_user(u, t);
    }
    for (int g = 0; g < L.n_cg; ++g) {
      v[L.gen_cg(g, t)] = s.gen_cg(g, t);
      v[L.mean_dev_cg(g, t)] = s.dev_cg(g, t);
      v[L.bilinear_cg(g, t)] = s.bil_cg(g, t);
    }
    for (int r = 0; r < L.n_res; ++r) {
      v[L.gen_res(r, t)] = s.gen_res(r, t);
      v[L.res_to_manager(r, t)] = s.to_manager(r, t);
    }
  }
  for (int k = 0; k < L.n_users + L.n_res; ++k) v[L.carbon_share(k)] = s.carbon[k];
  for (int u = 0; u < L.n_users; ++u) {
    v[L.carbon_sold(u)] = s.carbon_sold(u);
    v[L.seller_flag(u)] = s.seller_flag[u];
  }
  return v;
}

TradeState unflatten(const Eigen::VectorXd& v, const IndexLayout& L) {
  TradeState s = zero_state(L);
  for (int t = 0; t < L.horizon; ++t) {
    for (int u = 0; u < L.n_users; ++u)
      for (int c = 0; c < L.n_sellers(); ++c) {
        s.sell[t](u, c) = v[L.trade_sell(u, c, t)];
        s.buy[t](u, c) = v[L.trade_buy(u, c, t)];
      }
    for (int g = 0; g < L.n_cg; ++g)
      for (int r = 0; r < L.n_res; ++r) {
        s.res_cg[t](g, r) = v[L.reserve_cg(g, r, t)];
        s.res_res[t](g, r) = v[L.reserve_res(g, r, t)];
      }
    for (int u = 0; u < L.n_users; ++u)
      for (int r = 0; r < L.n_res; ++r) {
        s.flex_user[t](u, r) = v[L.flex_user(u, r, t)];
        s.flex_res[t](u, r) = v[L.flex_res(u, r, t)];
      }
    for (int u = 0; u < L.n_users; ++u) {
      s.load(u, t) = v[L.load(u, t)];
      s.dev_user(u, t) = v[L.mean_dev_user(u, t)];
      s.bil_user(u, t) = v[L.bilinear_user(u, t)];
    }
    for (int g = 0; g < L.n_cg; ++g) {
      s.gen_cg(g, t) = v[L.gen_cg(g, t)];
      s.dev_cg(g, t) = v[L.mean_dev_cg(g, t)];
      s.bil_cg(g, t) = v[L.bilinear_cg(g, t)];
    }
    for (int r = 0; r < L.n_res; ++r) {
      s.gen_res(r, t) = v[L.gen_res(r, t)];
      s.to_manager(r, t) = v[L.res_to_manager(r, t)];
    }
  }
  for (int k = 0; k < L.n_users + L.n_res; ++k) s.carbon[k] = v[L.carbon_share(k)];
  for (int u = 0; u < L.n_users; ++u) {
    s.carbon_sold(u) = v[L.carbon_sold(u)];
    s.seller_flag[u] = static_cast<int>(std::lround(v[L.seller_flag(u)]));
  }
  return s;
}

void scatter(const Eigen::VectorXd& x, const SlotMap& map, const IndexLayout& L,
             TradeState& s) {
  auto put = [&](int slot, double& dst) {
    if (map.has(slot)) dst = x[map.var(slot)];
  };
  for (int t = 0; t < L.horizon; ++t) {
    for (int u = 0; u < L.n_users; ++u)
      for (int c = 0; c < L.n_sellers(); ++c) {
        put(L.trade_sell(u, c, t), s.sell[t](u, c));
        put(L.trade_buy(u, c, t), s.buy[t](u, c));
      }
    for (int g = 0; g < L.n_cg; ++g)
      for (int r = 0; r < L.n_res; ++r) {
        put(L.reserve_cg(g, r, t), s.res_cg[t](g, r));
        put(L.reserve_res(g, r, t), s.res_res[t](g, r));
      }
    for (int u = 0; u < L.n_users; ++u)
      for (int r = 0; r < L.n_res; ++r) {
        put(L.flex_user(u, r, t), s.flex_user[t](u, r));
        put(L.flex_res(u, r, t), s.flex_res[t](u, r));
      }
    for (int u = 0; u < L.n_users; ++u) {
      put(L.load(u, t), s.load(u, t));
      put(L.mean_dev_user(u, t), s.dev_user(u, t));
      put(L.bilinear_user(u, t), s.bil_user(u, t));
    }
    for (int g = 0; g < L.n_cg; ++g) {
      put(L.gen_cg(g, t), s.gen_cg(g, t));
      put(L.mean_dev_cg(g, t), s.dev_cg(g, t));
      put(L.bilinear_cg(g, t), s.bil_cg(g, t));
    }
    for (int r = 0; r < L.n_res; ++r) {
      put(L.gen_res(r, t), s.gen_res(r, t));
      put(L.res_to_manager(r, t), s.to_manager(r, t));
    }
  }
  for (int k = 0; k < L.n_users + L.n_res; ++k) put(L.carbon_share(k), s.carbon[k]);
  for (int u = 0; u < L.n_users; ++u) put(L.carbon_sold(u), s.carbon_sold(u));
}

McCormickBounds initial_envelope(const ScenarioConfig& cfg, const UncertaintyModel& um) {
  int T = cfg.horizon, ng = cfg.n_cg(), nu = cfg.n_users();
  McCormickBounds e;
  e.cg_p_lo.resize(ng, T);
  e.cg_p_hi.resize(ng, T);
  e.user_p_lo.resize(nu, T);
  e.user_p_hi.resize(nu, T);
  for (int t = 0; t < T; ++t) {
    for (int g = 0; g < ng; ++g) {
      e.cg_p_lo(g, t) = cfg.cg[g].p_min[t];
      e.cg_p_hi(g, t) = cfg.cg[g].p_max[t];
    }
    for (int u = 0; u < nu; ++u) {
      e.user_p_lo(u, t) = cfg.users[u].p_min[t];
      e.user_p_hi(u, t) = cfg.users[u].p_max[t];
    }
  }
  // The expected deviation is a mean-weighted mix of factors, so the largest
  // single-hour shortfall mean bounds it from below; it never exceeds zero.
  Eigen::VectorXd pi_floor(T);
  for (int t = 0; t < T; ++t)
    pi_floor[t] = um.slice[t].mean.size() ? um.slice[t].mean.minCoeff() : 0.0;
  e.cg_pi_lo = pi_floor.transpose().replicate(ng, 1);
  e.cg_pi_hi = Eigen::MatrixXd::Zero(ng, T);
  e.user_pi_lo = pi_floor.transpose().replicate(nu, 1);
  e.user_pi_hi = Eigen::MatrixXd::Zero(nu, T);
  return e;
}

namespace {

void contract_pair(Eigen::MatrixXd& lo, Eigen::MatrixXd& hi,
                   const Eigen::MatrixXd& ini_lo, const Eigen::MatrixXd& ini_hi,
                   const Eigen::MatrixXd& star, double eps, bool nonpositive) {
  for (int i = 0; i < lo.rows(); ++i)
    for (int t = 0; t < lo.cols(); ++t) {
      double v = star(i, t);
      // (1 - eps) and (1 + eps) swap roles on the nonpositive side.
      double a = nonpositive ? (1 + eps) * v : (1 - eps) * v;
      double b = nonpositive ? (1 - eps) * v : (1 + eps) * v;
      lo(i, t) = std::max(a, ini_lo(i, t));
      hi(i, t) = std::min(b, ini_hi(i, t));
      if (hi(i, t) < lo(i, t)) hi(i, t) = lo(i, t);  // anchor left the box
    }
}

}  // namespace

void contract_envelope(McCormickBounds& env, const McCormickBounds& initial,
                       const TradeState& anchor, double eps) {
  contract_pair(env.cg_p_lo, env.cg_p_hi, initial.cg_p_lo, initial.cg_p_hi,
                anchor.gen_cg, eps, false);
  contract_pair(env.user_p_lo, env.user_p_hi, initial.user_p_lo, initial.user_p_hi,
                anchor.load, eps, false);
  contract_pair(env.cg_pi_lo, env.cg_pi_hi, initial.cg_pi_lo, initial.cg_pi_hi,
                anchor.dev_cg, eps, true);
  contract_pair(env.user_pi_lo, env.user_pi_hi, initial.user_pi_lo, initial.user_pi_hi,
                anchor.dev_user, eps, true);
}

Eigen::Vector4d envelope_margins(double p, double pi, double chi, double p_lo,
                                 double p_hi, double pi_lo, double pi_hi) {
  Eigen::Vector4d m;
  m[0] = chi - (p_lo * pi + pi_lo * p - p_lo * pi_lo);
  m[1] = chi - (p_hi * pi + pi_hi * p - p_hi * pi_hi);
  m[2] = (p_hi * pi + pi_lo * p - p_hi * pi_lo) - chi;
  m[3] = (p_lo * pi + pi_hi * p - p_lo * pi_hi) - chi;
  return m;
}

void add_user_block(ConicProblem& p, SlotMap& map, const BuildContext& ctx, int u,
                    int seller_flag_fixed, bool bounded) {
  const auto& L = ctx.layout;
  const auto& up = ctx.cfg.users[u];
  double M = ctx.cfg.big_m_value();
  double inf = ConicProblem::inf;
  for (int t = 0; t < L.horizon; ++t) {
    for (int c = 0; c < L.n_sellers(); ++c)
      map.at(L.trade_buy(u, c, t)) =
          p.add_var(bounded ? -up.p_max[t] : -inf, bounded ? 0.0 : inf);
    for (int r = 0; r < L.n_res; ++r)
      map.at(L.flex_user(u, r, t)) =
          p.add_var(0.0, !ctx.cfg.user_flex ? 0.0 : (bounded ? 1.0 : inf));
    map.at(L.load(u, t)) = p.add_var(ctx.env.user_p_lo(u, t), ctx.env.user_p_hi(u, t));
    map.at(L.mean_dev_user(u, t)) =
        p.add_var(ctx.env.user_pi_lo(u, t), ctx.env.user_pi_hi(u, t));
    map.at(L.bilinear_user(u, t)) = p.add_var();
  }
  if (ctx.cfg.prices.carbon_buy) {
    // Sharing suspended: the share slot only records manager purchases.
    map.at(L.carbon_share(u)) = p.add_var(0.0, M);
    map.at(L.carbon_sold(u)) = p.add_var(0.0, seller_flag_fixed ? M : 0.0);
  } else if (seller_flag_fixed) {
    map.at(L.carbon_share(u)) = p.add_var(-M, 0.0);
    map.at(L.carbon_sold(u)) = p.add_var(0.0, M);
  } else {
    map.at(L.carbon_share(u)) = p.add_var(0.0, M);
    map.at(L.carbon_sold(u)) = p.add_var(0.0, 0.0);
  }
}

void add_cg_block(ConicProblem& p, SlotMap& map, const BuildContext& ctx, int g,
                  bool bounded) {
  const auto& L = ctx.layout;
  const auto& gp = ctx.cfg.cg[g];
  double inf = ConicProblem::inf;
  for (int t = 0; t < L.horizon; ++t) {
    for (int u = 0; u < L.n_users; ++u)
      map.at(L.trade_sell(u, g, t)) = p.add_var(0.0, bounded ? gp.p_max[t] : inf);
    for (int r = 0; r < L.n_res; ++r)
      map.at(L.reserve_cg(g, r, t)) = p.add_var(0.0, bounded ? 1.0 : inf);
    map.at(L.gen_cg(g, t)) = p.add_var(ctx.env.cg_p_lo(g, t), ctx.env.cg_p_hi(g, t));
    map.at(L.mean_dev_cg(g, t)) =
        p.add_var(ctx.env.cg_pi_lo(g, t), ctx.env.cg_pi_hi(g, t));
    map.at(L.bilinear_cg(g, t)) = p.add_var();
  }
}

void add_res_block(ConicProblem& p, SlotMap& map, const BuildContext& ctx, int r,
                   bool bounded) {
  const auto& L = ctx.layout;
  const auto& rp = ctx.cfg.res[r];
  double M = ctx.cfg.big_m_value();
  double inf = ConicProblem::inf;
  int col = L.n_cg + r;  // seller column of this renewable
  for (int t = 0; t < L.horizon; ++t) {
    double f = rp.forecast[t];
    for (int u = 0; u < L.n_users; ++u)
      map.at(L.trade_sell(u, col, t)) = p.add_var(0.0, bounded ? f : inf);
    for (int g = 0; g < L.n_cg; ++g)
      map.at(L.reserve_res(g, r, t)) =
          p.add_var(bounded ? -1.0 : -inf, bounded ? 0.0 : inf);
    for (int u = 0; u < L.n_users; ++u)
      map.at(L.flex_res(u, r, t)) =
          !ctx.cfg.user_flex
              ? p.add_var(0.0, 0.0)
              : p.add_var(bounded ? -1.0 : -inf, bounded ? 0.0 : inf);
    map.at(L.gen_res(r, t)) = p.add_var(0.0, f);
    map.at(L.res_to_manager(r, t)) = p.add_var(0.0, f);
  }
  map.at(L.carbon_share(L.n_users + r)) = p.add_var(0.0, M);
}

void add_user_model(ConicProblem& p, const SlotMap& map, const BuildContext& ctx, int u) {
  const auto& L = ctx.layout;
  const auto& up = ctx.cfg.users[u];
  for (int t = 0; t < L.horizon; ++t) {
    const auto& sl = ctx.um.slice[t];
    int vload = map.var(L.load(u, t));
    int vdev = map.var(L.mean_dev_user(u, t));

    // Consumption is what the user buys across all sellers.
    Affine setpoint(vload, 1.0);
    for (int c = 0; c < L.n_sellers(); ++c) setpoint.add(map.var(L.trade_buy(u, c, t)), 1.0);
    p.add_eq(setpoint, 0.0);

    // Expected curtailment from the flexibility offered to each renewable.
    Affine dev(vdev, 1.0);
    for (int r = 0; r < L.n_res; ++r)
      dev.add(map.var(L.flex_user(u, r, t)), -sl.mean[r]);
    p.add_eq(dev, 0.0);

    // Curtailment must leave the floor intact except with small probability:
    // consumption + expected curtailment clears the floor by a safety margin
    // proportional to the curtailment spread.
    Affine head(vload, 1.0);
    for (int r = 0; r < L.n_res; ++r)
      head.add(map.var(L.flex_user(u, r, t)), sl.mean[r]);
    head += -up.p_min[t];
    if (is_zero(sl.sqrt)) {
      Affine neg;
      for (const auto& term : head.terms) neg.add(term.var, -term.coeff);
      p.add_le(neg, head.constant);
    } else {
      std::vector<Affine> vec(L.n_res);
      for (int j = 0; j < L.n_res; ++j)
        for (int r = 0; r < L.n_res; ++r) {
          double c = ctx.um.z_user[u] * sl.sqrt(j, r);
          if (c != 0) vec[j].add(map.var(L.flex_user(u, r, t)), c);
        }
      p.add_soc(head, std::move(vec));
    }

    add_envelope_rows(p, vload, vdev, map.var(L.bilinear_user(u, t)),
                      ctx.env.user_p_lo(u, t), ctx.env.user_p_hi(u, t),
                      ctx.env.user_pi_lo(u, t), ctx.env.user_pi_hi(u, t));
  }

  // Emission charges for generator purchases stay within the allowance
  // position (grant, plus shares bought or minus shares sold).
  Affine emis;
  for (int t = 0; t < L.horizon; ++t)
    for (int g = 0; g < L.n_cg; ++g)
      emis.add(map.var(L.trade_buy(u, g, t)), -ctx.cfg.cg[g].sigma);
  emis.add(map.var(L.carbon_share(u)), -1.0);
  emis.add(map.var(L.carbon_sold(u)), 1.0);
  p.add_le(emis, up.psi0);
}

void add_cg_model(ConicProblem& p, const SlotMap& map, const BuildContext& ctx, int g) {
  const auto& L = ctx.layout;
  const auto& gp = ctx.cfg.cg[g];
  for (int t = 0; t < L.horizon; ++t) {
    const auto& sl = ctx.um.slice[t];
    int vgen = map.var(L.gen_cg(g, t));
    int vdev = map.var(L.mean_dev_cg(g, t));

    // Output is what the generator sells across all users.
    Affine setpoint(vgen, 1.0);
    for (int u = 0; u < L.n_users; ++u) setpoint.add(map.var(L.trade_sell(u, g, t)), -1.0);
    p.add_eq(setpoint, 0.0);

    // Expected reserve call from the shares of each renewable's shortfall.
    Affine dev(vdev, 1.0);
    for (int r = 0; r < L.n_res; ++r)
      dev.add(map.var(L.reserve_cg(g, r, t)), -sl.mean[r]);
    p.add_eq(dev, 0.0);

    // Setpoint plus the reserve call stays under capacity except with small
    // probability.
    Affine head(vgen, -1.0);
    for (int r = 0; r < L.n_res; ++r)
      head.add(map.var(L.reserve_cg(g, r, t)), sl.mean[r]);
    head += gp.p_max[t];
    if (is_zero(sl.sqrt)) {
      Affine neg;
      for (const auto& term : head.terms) neg.add(term.var, -term.coeff);
      p.add_le(neg, head.constant);
    } else {
      std::vector<Affine> vec(L.n_res);
      for (int j = 0; j < L.n_res; ++j)
        for (int r = 0; r < L.n_res; ++r) {
          double c = ctx.um.z_cg[g] * sl.sqrt(j, r);
          if (c != 0) vec[j].add(map.var(L.reserve_cg(g, r, t)), c);
        }
      p.add_soc(head, std::move(vec));
    }

    add_envelope_rows(p, vgen, vdev, map.var(L.bilinear_cg(g, t)),
                      ctx.env.cg_p_lo(g, t), ctx.env.cg_p_hi(g, t),
                      ctx.env.cg_pi_lo(g, t), ctx.env.cg_pi_hi(g, t));
  }
}

void add_res_model(ConicProblem& p, const SlotMap& map, const BuildContext& ctx, int r) {
  const auto& L = ctx.layout;
  const auto& rp = ctx.cfg.res[r];
  int col = L.n_cg + r;
  for (int t = 0; t < L.horizon; ++t) {
    // In-community sales, with the remainder going to the manager.
    Affine setpoint(map.var(L.gen_res(r, t)), 1.0);
    for (int u = 0; u < L.n_users; ++u) setpoint.add(map.var(L.trade_sell(u, col, t)), -1.0);
    p.add_eq(setpoint, 0.0);

    Affine split(map.var(L.gen_res(r, t)), 1.0);
    split.add(map.var(L.res_to_manager(r, t)), 1.0);
    p.add_eq(split, rp.forecast[t]);

    // The shortfall is fully assigned: reserve and flexibility shares on this
    // renewable sum to -1 every hour.
    Affine assign;
    for (int g = 0; g < L.n_cg; ++g) assign.add(map.var(L.reserve_res(g, r, t)), 1.0);
    for (int u = 0; u < L.n_users; ++u) assign.add(map.var(L.flex_res(u, r, t)), 1.0);
    p.add_eq(assign, -1.0);
  }

  // Emissions caused by this renewable's reserve calls over the whole day are
  // covered by its allowance share except with small probability. The
  // per-hour emission rate is the generator-intensity-weighted reserve mix.
  const auto& hm = ctx.um.horizon[r];
  Affine head(map.var(L.carbon_share(L.n_users + r)), 1.0);
  for (int t = 0; t < L.horizon; ++t)
    for (int g = 0; g < L.n_cg; ++g)
      head.add(map.var(L.reserve_res(g, r, t)), -hm.mean[t] * ctx.cfg.cg[g].sigma);
  if (is_zero(hm.sqrt)) {
    Affine neg;
    for (const auto& term : head.terms) neg.add(term.var, -term.coeff);
    p.add_le(neg, head.constant);
  } else {
    std::vector<Affine> vec(L.horizon);
    for (int j = 0; j < L.horizon; ++j)
      for (int t = 0; t < L.horizon; ++t) {
        if (hm.sqrt(j, t) == 0) continue;
        for (int g = 0; g < L.n_cg; ++g)
          vec[j].add(map.var(L.reserve_res(g, r, t)),
                     -ctx.um.z_res[r] * hm.sqrt(j, t) * ctx.cfg.cg[g].sigma);
      }
    p.add_soc(head, std::move(vec));
  }
}

void add_user_cost(ConicProblem& p, const SlotMap& map, const BuildContext& ctx, int u) {
  const auto& L = ctx.layout;
  const auto& up = ctx.cfg.users[u];
  for (int t = 0; t < L.horizon; ++t) {
    int vload = map.var(L.load(u, t));
    int vdev = map.var(L.mean_dev_user(u, t));
    // Negated expected utility of the curtailed consumption: the cross term
    // uses the envelope variable, the spread enters through the flexibility
    // covariance.
    p.add_quad(vload, vload, -up.d2);
    p.add_lin(vload, -up.d1);
    p.add_lin(map.var(L.bilinear_user(u, t)), -2.0 * up.d2);
    p.add_lin(vdev, -up.d1);
    p.add_quad(vdev, vdev, -up.d2);
    const auto& cov = ctx.um.slice[t].cov;
    for (int r1 = 0; r1 < L.n_res; ++r1)
      for (int r2 = 0; r2 < L.n_res; ++r2)
        if (cov(r1, r2) != 0)
          p.add_quad(map.var(L.flex_user(u, r1, t)), map.var(L.flex_user(u, r2, t)),
                     -up.d2 * cov(r1, r2));
  }
  p.add_lin(map.var(L.carbon_sold(u)), -ctx.cfg.prices.r_c_sell);
  if (ctx.cfg.prices.carbon_buy)
    p.add_lin(map.var(L.carbon_share(u)), *ctx.cfg.prices.carbon_buy);
}

void add_cg_cost(ConicProblem& p, const SlotMap& map, const BuildContext& ctx, int g) {
  const auto& L = ctx.layout;
  const auto& gp = ctx.cfg.cg[g];
  for (int t = 0; t < L.horizon; ++t) {
    int vgen = map.var(L.gen_cg(g, t));
    int vdev = map.var(L.mean_dev_cg(g, t));
    // Expected fuel cost of setpoint minus the (negative) reserve deviation.
    p.add_quad(vgen, vgen, gp.c2);
    p.add_lin(vgen, gp.c1);
    p.add_const(gp.c0);
    p.add_lin(map.var(L.bilinear_cg(g, t)), -2.0 * gp.c2);
    p.add_lin(vdev, -gp.c1);
    p.add_quad(vdev, vdev, gp.c2);
    const auto& cov = ctx.um.slice[t].cov;
    for (int r1 = 0; r1 < L.n_res; ++r1)
      for (int r2 = 0; r2 < L.n_res; ++r2)
        if (cov(r1, r2) != 0)
          p.add_quad(map.var(L.reserve_cg(g, r1, t)), map.var(L.reserve_cg(g, r2, t)),
                     gp.c2 * cov(r1, r2));
  }
}

void add_res_cost(ConicProblem& p, const SlotMap& map, const BuildContext& ctx, int r) {
  const auto& L = ctx.layout;
  for (int t = 0; t < L.horizon; ++t)
    p.add_lin(map.var(L.res_to_manager(r, t)), -ctx.cfg.prices.r_e[t]);
  if (ctx.cfg.prices.carbon_buy)
    p.add_lin(map.var(L.carbon_share(L.n_users + r)), *ctx.cfg.prices.carbon_buy);
}

void add_coupling(ConicProblem& p, const SlotMap& map, const BuildContext& ctx) {
  const auto& L = ctx.layout;
  for (int t = 0; t < L.horizon; ++t) {
    for (int u = 0; u < L.n_users; ++u)
      for (int c = 0; c < L.n_sellers(); ++c) {
        Affine row(map.var(L.trade_sell(u, c, t)), 1.0);
        row.add(map.var(L.trade_buy(u, c, t)), 1.0);
        p.add_eq(row, 0.0);
      }
    for (int g = 0; g < L.n_cg; ++g)
      for (int r = 0; r < L.n_res; ++r) {
        Affine row(map.var(L.reserve_cg(g, r, t)), 1.0);
        row.add(map.var(L.reserve_res(g, r, t)), 1.0);
        p.add_eq(row, 0.0);
      }
    for (int u = 0; u < L.n_users; ++u)
      for (int r = 0; r < L.n_res; ++r) {
        Affine row(map.var(L.flex_user(u, r, t)), 1.0);
        row.add(map.var(L.flex_res(u, r, t)), 1.0);
        p.add_eq(row, 0.0);
      }
  }
  if (!ctx.cfg.prices.carbon_buy) {
    Affine total;
    for (int k = 0; k < L.n_users + L.n_res; ++k)
      total.add(map.var(L.carbon_share(k)), 1.0);
    p.add_eq(total, 0.0);
  }
}

CentralizedModel build_centralized(const BuildContext& ctx,
                                   const std::vector<int>& seller_pattern) {
  CentralizedModel m;
  m.map = SlotMap(ctx.layout.total_slots());
  for (int u = 0; u < ctx.layout.n_users; ++u) {
    add_user_block(m.prob, m.map, ctx, u, seller_pattern.at(u));
    add_user_model(m.prob, m.map, ctx, u);
    add_user_cost(m.prob, m.map, ctx, u);
  }
  for (int g = 0; g < ctx.layout.n_cg; ++g) {
    add_cg_block(m.prob, m.map, ctx, g);
    add_cg_model(m.prob, m.map, ctx, g);
    add_cg_cost(m.prob, m.map, ctx, g);
  }
  for (int r = 0; r < ctx.layout.n_res; ++r) {
    add_res_block(m.prob, m.map, ctx, r);
    add_res_model(m.prob, m.map, ctx, r);
    add_res_cost(m.prob, m.map, ctx, r);
  }
  add_coupling(m.prob, m.map, ctx);
  return m;
}

double exact_cost(const TradeState& s, const ScenarioConfig& cfg, const UncertaintyModel& um) {
  double total = 0;
  int T = cfg.horizon;
  for (int t = 0; t < T; ++t) {
    const auto& sl = um.slice[t];
    for (int g = 0; g < cfg.n_cg(); ++g) {
      const auto& gp = cfg.cg[g];
      Eigen::VectorXd a = s.res_cg[t].row(g).transpose();
      double ep = s.gen_cg(g, t) - sl.mean.dot(a);
      double var = a.dot(sl.cov * a);
      total += gp.c2 * (ep * ep + var) + gp.c1 * ep + gp.c0;
    }
    for (int u = 0; u < cfg.n_users(); ++u) {
      const auto& up = cfg.users[u];
      Eigen::VectorXd b = s.flex_user[t].row(u).transpose();
      double eu = s.load(u, t) + sl.mean.dot(b);
      double var = b.dot(sl.cov * b);
      total -= up.d2 * (eu * eu + var) + up.d1 * eu;
    }
    for (int r = 0; r < cfg.n_res(); ++r)
      total -= cfg.prices.r_e[t] * s.to_manager(r, t);
  }
  for (int u = 0; u < cfg.n_users(); ++u)
    total -= cfg.prices.r_c_sell * s.carbon_sold(u);
  return total;
}

double relaxed_cost(const TradeState& s, const ScenarioConfig& cfg, const UncertaintyModel& um) {
  double total = 0;
  int T = cfg.horizon;
  for (int t = 0; t < T; ++t) {
    const auto& sl = um.slice[t];
    for (int g = 0; g < cfg.n_cg(); ++g) {
      const auto& gp = cfg.cg[g];
      Eigen::VectorXd a = s.res_cg[t].row(g).transpose();
      double pg = s.gen_cg(g, t), pi = s.dev_cg(g, t);
      total += gp.c2 * pg * pg + gp.c1 * pg + gp.c0 - 2.0 * gp.c2 * s.bil_cg(g, t) -
               gp.c1 * pi + gp.c2 * (pi * pi + a.dot(sl.cov * a));
    }
    for (int u = 0; u < cfg.n_users(); ++u) {
      const auto& up = cfg.users[u];
      Eigen::VectorXd b = s.flex_user[t].row(u).transpose();
      double pu = s.load(u, t), pi = s.dev_user(u, t);
      total -= up.d2 * pu * pu + up.d1 * pu + 2.0 * up.d2 * s.bil_user(u, t) +
               up.d1 * pi + up.d2 * (pi * pi + b.dot(sl.cov * b));
    }
    for (int r = 0; r < cfg.n_res(); ++r)
      total -= cfg.prices.r_e[t] * s.to_manager(r, t);
  }
  for (int u = 0; u < cfg.n_users(); ++u)
    total -= cfg.prices.r_c_sell * s.carbon_sold(u);
  return total;
}

namespace {

double worst_product_gap(const Eigen::MatrixXd& p, const Eigen::MatrixXd& pi,
                         const Eigen::MatrixXd& bil) {
  double worst = 0;
  for (int i = 0; i < p.rows(); ++i)
    for (int t = 0; t < p.cols(); ++t) {
      double denom = std::max(std::abs(bil(i, t)), 1e-6);
      worst = std::max(worst, std::abs(bil(i, t) - p(i, t) * pi(i, t)) / denom);
    }
  return worst;
}

}  // namespace

double bilinear_gap_cg(const TradeState& s) {
  return worst_product_gap(s.gen_cg, s.dev_cg, s.bil_cg);
}

double bilinear_gap_user(const TradeState& s) {
  return worst_product_gap(s.load, s.dev_user, s.bil_user);
}

double energy_imbalance(const TradeState& s) {
  double worst = 0;
  for (size_t t = 0; t < s.sell.size(); ++t)
    worst = std::max(worst, (s.sell[t] + s.buy[t]).lpNorm<Eigen::Infinity>());
  return worst;
}

double factor_imbalance(const TradeState& s) {
  double worst = 0;
  for (size_t t = 0; t < s.res_cg.size(); ++t) {
    worst = std::max(worst, (s.res_cg[t] + s.res_res[t]).lpNorm<Eigen::Infinity>());
    worst = std::max(worst, (s.flex_user[t] + s.flex_res[t]).lpNorm<Eigen::Infinity>());
  }
  return worst;
}

double carbon_imbalance(const TradeState& s) { return std::abs(s.carbon.sum()); }

CarbonLedger carbon_ledger(const TradeState& s, const ScenarioConfig& cfg,
                           const UncertaintyModel& um) {
  int nu = cfg.n_users(), nr = cfg.n_res(), ng = cfg.n_cg(), T = cfg.horizon;
  CarbonLedger led;
  led.user_emission = Eigen::VectorXd::Zero(nu);
  led.user_cap = Eigen::VectorXd::Zero(nu);
  led.res_need = Eigen::VectorXd::Zero(nr);
  led.res_cap = Eigen::VectorXd::Zero(nr);
  for (int u = 0; u < nu; ++u) {
    for (int t = 0; t < T; ++t)
      for (int g = 0; g < ng; ++g)
        led.user_emission[u] -= cfg.cg[g].sigma * s.buy[t](u, g);
    led.user_cap[u] = cfg.users[u].psi0 + s.carbon[u] - s.carbon_sold[u];
  }
  for (int r = 0; r < nr; ++r) {
    const auto& hm = um.horizon[r];
    Eigen::VectorXd m(T);
    for (int t = 0; t < T; ++t) {
      m[t] = 0;
      for (int g = 0; g < ng; ++g)
        m[t] -= cfg.cg[g].sigma * s.res_res[t](g, r);
    }
    led.res_need[r] = -hm.mean.dot(m) + um.z_res[r] * (hm.sqrt * m).norm();
    led.res_cap[r] = s.carbon[nu + r];
  }
  return led;
}

Eigen::MatrixXd realized_cg(const TradeState& s, const Eigen::MatrixXd& omega) {
  Eigen::MatrixXd out = s.gen_cg;
  for (int t = 0; t < out.cols(); ++t)
    out.col(t) -= s.res_cg[t] * omega.row(t).transpose();
  return out;
}

Eigen::MatrixXd realized_user(const TradeState& s, const Eigen::MatrixXd& omega) {
  Eigen::MatrixXd out = s.load;
  for (int t = 0; t < out.cols(); ++t)
    out.col(t) += s.flex_user[t] * omega.row(t).transpose();
  return out;
}

Eigen::VectorXd realized_res_emission(const TradeState& s, const ScenarioConfig& cfg,
                                      const Eigen::MatrixXd& omega) {
  int nr = cfg.n_res(), ng = cfg.n_cg(), T = cfg.horizon;
  Eigen::VectorXd out = Eigen::VectorXd::Zero(nr);
  for (int r = 0; r < nr; ++r)
    for (int t = 0; t < T; ++t) {
      double call = -omega(t, r);  // shortfall covered by reserves
      for (int g = 0; g < ng; ++g)
        out[r] += cfg.cg[g].sigma * s.res_cg[t](g, r) * call;
    }
  return out;
}

double realized_cost(const TradeState& s, const ScenarioConfig& cfg,
                     const Eigen::MatrixXd& omega) {
  Eigen::MatrixXd pg = realized_cg(s, omega);
  Eigen::MatrixXd pu = realized_user(s, omega);
  double total = 0;
  for (int t = 0; t < cfg.horizon; ++t) {
    for (int g = 0; g < cfg.n_cg(); ++g) {
      const auto& gp = cfg.cg[g];
      total += gp.c2 * pg(g, t) * pg(g, t) + gp.c1 * pg(g, t) + gp.c0;
    }
    for (int u = 0; u < cfg.n_users(); ++u) {
      const auto& up = cfg.users[u];
      total -= up.d2 * pu(u, t) * pu(u, t) + up.d1 * pu(u, t);
    }
    for (int r = 0; r < cfg.n_res(); ++r)
      total -= cfg.prices.r_e[t] * s.to_manager(r, t);
  }
  for (int u = 0; u < cfg.n_users(); ++u)
    total -= cfg.prices.r_c_sell * s.carbon_sold(u);
  return total;
}

}  // namespace ecmarket
