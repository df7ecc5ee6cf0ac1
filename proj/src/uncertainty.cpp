#include "ecmarket/uncertainty.hpp"

#include <cmath>
#include <stdexcept>

#include <Eigen/Eigenvalues>

namespace ecmarket {

ErrorMoments moments_from_sigma(double sigma) {
  if (sigma < 0) throw std::invalid_argument("moments_from_sigma: sigma must be >= 0");
  ErrorMoments m;
  m.delta = sigma * std::sqrt((M_PI - 2.0) / M_PI);
  m.mu = sigma * std::sqrt(2.0 / M_PI);
  m.mean = -m.mu / 2.0;
  m.variance = m.delta * m.delta / 2.0 + m.mu * m.mu / 4.0;
  return m;
}

double chebyshev_z(double epsilon) {
  if (!(epsilon > 0 && epsilon < 1))
    throw std::invalid_argument("chebyshev_z: epsilon must be in (0, 1)");
  return std::sqrt((1.0 - epsilon) / epsilon);
}

namespace {

Eigen::MatrixXd sym_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  Eigen::VectorXd d = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * d.asDiagonal() * es.eigenvectors().transpose();
}

Eigen::MatrixXd correlate(const std::vector<ErrorMoments>& moms,
                          const Eigen::MatrixXd& corr) {
  int n = static_cast<int>(moms.size());
  Eigen::VectorXd sd(n);
  for (int i = 0; i < n; ++i) sd[i] = std::sqrt(moms[i].variance);
  if (corr.size() == 0) return Eigen::MatrixXd(sd.array().square().matrix().asDiagonal());
  return sd.asDiagonal() * corr * sd.asDiagonal();
}

}  // namespace

TimeSliceMoments build_time_slice(const std::vector<ErrorMoments>& per_res,
                                  const Eigen::MatrixXd& correlation) {
  TimeSliceMoments s;
  int n = static_cast<int>(per_res.size());
  s.mean.resize(n);
  for (int i = 0; i < n; ++i) s.mean[i] = per_res[i].mean;
  s.cov = correlate(per_res, correlation);
  s.sqrt = sym_sqrt(s.cov);
  return s;
}

HorizonMoments build_horizon(const std::vector<ErrorMoments>& per_hour,
                             const Eigen::MatrixXd& correlation) {
  HorizonMoments h;
  int n = static_cast<int>(per_hour.size());
  h.mean.resize(n);
  for (int i = 0; i < n; ++i) h.mean[i] = per_hour[i].mean;
  h.cov = correlate(per_hour, correlation);
  h.sqrt = sym_sqrt(h.cov);
  return h;
}

UncertaintyModel build_uncertainty(const ScenarioConfig& cfg) {
  UncertaintyModel m;
  int nr = cfg.n_res(), T = cfg.horizon;
  m.sigma.resize(nr, T);
  for (int r = 0; r < nr; ++r)
    for (int t = 0; t < T; ++t)
      m.sigma(r, t) = cfg.res[r].sigma_rel * cfg.res[r].forecast[t];

  m.slice.reserve(T);
  for (int t = 0; t < T; ++t) {
    std::vector<ErrorMoments> per_res(nr);
    for (int r = 0; r < nr; ++r) per_res[r] = moments_from_sigma(m.sigma(r, t));
    m.slice.push_back(build_time_slice(per_res, cfg.res_correlation));
  }
  m.horizon.reserve(nr);
  for (int r = 0; r < nr; ++r) {
    std::vector<ErrorMoments> per_hour(T);
    for (int t = 0; t < T; ++t) per_hour[t] = moments_from_sigma(m.sigma(r, t));
    m.horizon.push_back(build_horizon(per_hour, cfg.time_correlation));
  }
  m.z_cg.resize(cfg.n_cg());
  for (int g = 0; g < cfg.n_cg(); ++g) m.z_cg[g] = chebyshev_z(cfg.cg[g].epsilon);
  m.z_user.resize(cfg.n_users());
  for (int u = 0; u < cfg.n_users(); ++u) m.z_user[u] = chebyshev_z(cfg.users[u].epsilon);
  m.z_res.resize(nr);
  for (int r = 0; r < nr; ++r) m.z_res[r] = chebyshev_z(cfg.res[r].epsilon);
  if (cfg.res_correlation.size() > 0) m.res_corr_sqrt = sym_sqrt(cfg.res_correlation);
  if (cfg.time_correlation.size() > 0) m.time_corr_sqrt = sym_sqrt(cfg.time_correlation);
  return m;
}

ErrorSampler::ErrorSampler(std::uint64_t seed) : eng_(seed) {}

double ErrorSampler::uniform01() {
  // 53-bit mantissa uniform in [0, 1)
  return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
}

double ErrorSampler::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = 1.0 - uniform01();  // (0, 1], keeps log() finite
  double u2 = uniform01();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * M_PI * u2;
  spare_ = r * std::sin(a);
  has_spare_ = true;
  return r * std::cos(a);
}

double ErrorSampler::draw(double sigma) { return std::min(normal() * sigma, 0.0); }

Eigen::MatrixXd ErrorSampler::draw_field(const UncertaintyModel& model,
                                         const ScenarioConfig& cfg) {
  int T = cfg.horizon, nr = cfg.n_res();
  Eigen::MatrixXd e(T, nr);
  for (int t = 0; t < T; ++t)
    for (int r = 0; r < nr; ++r) e(t, r) = normal();
  if (model.res_corr_sqrt.size() > 0) e = e * model.res_corr_sqrt;
  if (model.time_corr_sqrt.size() > 0) e = model.time_corr_sqrt * e;
  for (int t = 0; t < T; ++t)
    for (int r = 0; r < nr; ++r)
      e(t, r) = std::min(e(t, r) * model.sigma(r, t), 0.0);
  return e;
}

}  // namespace ecmarket
