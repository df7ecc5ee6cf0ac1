#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <random>
#include <vector>

#include "ecmarket/scenario.hpp"

namespace ecmarket {

// Moments of the one-sided forecast error w = min(w0, 0), where w0 ~ N(0, sigma^2)
// is the raw error. Surplus (w0 > 0) is absorbed by the producer itself, so only
// the deficiency tail reaches the balancing market. With P(w0 >= 0) = 1/2:
//   mu    = sigma*sqrt(2/pi)        magnitude of the deficiency branch mean
//   delta = sigma*sqrt((pi-2)/pi)   std dev of the deficiency branch
//   E(w)   = -mu/2
//   Var(w) = delta^2/2 + mu^2/4
struct ErrorMoments {
  double delta = 0;
  double mu = 0;
  double mean = 0;
  double variance = 0;
};

ErrorMoments moments_from_sigma(double sigma);  // throws on sigma < 0

// One-sided Chebyshev safety factor: P(X < E(X) - z*std) <= eps for any
// distribution when z = sqrt((1-eps)/eps).
double chebyshev_z(double epsilon);

// Joint moments of the error vector across renewables for one hour.
struct TimeSliceMoments {
  Eigen::VectorXd mean;  // per renewable, <= 0
  Eigen::MatrixXd cov;
  Eigen::MatrixXd sqrt;  // symmetric PSD square root, ||sqrt*v|| = sqrt(v'cov v)
};

// Joint moments of one renewable's error across the horizon.
struct HorizonMoments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  Eigen::MatrixXd sqrt;
};

TimeSliceMoments build_time_slice(const std::vector<ErrorMoments>& per_res,
                                  const Eigen::MatrixXd& correlation);  // empty = independent
HorizonMoments build_horizon(const std::vector<ErrorMoments>& per_hour,
                             const Eigen::MatrixXd& correlation);

// All moment data the market model needs, precomputed from a scenario:
// sigma_{r,t} = sigma_rel * forecast, one slice per hour, one horizon block per
// renewable, plus the per-participant Chebyshev factors.
struct UncertaintyModel {
  std::vector<TimeSliceMoments> slice;     // size horizon
  std::vector<HorizonMoments> horizon;     // size n_res
  Eigen::MatrixXd sigma;                   // n_res x horizon, underlying normal scale
  Eigen::VectorXd z_cg, z_user, z_res;     // Chebyshev factors per participant
  Eigen::MatrixXd res_corr_sqrt, time_corr_sqrt;  // empty when independent
};

UncertaintyModel build_uncertainty(const ScenarioConfig& cfg);

// Deterministic sampler (explicit Box-Muller over mt19937_64, so draws are
// reproducible across standard libraries). draw() returns one error realization
// min(N(0, sigma^2), 0); draw_field() returns a horizon x n_res matrix of joint
// draws honoring the configured correlations (Kronecker structure when both
// hooks are present).
class ErrorSampler {
 public:
  explicit ErrorSampler(std::uint64_t seed);

  double normal();                   // standard normal deviate
  double draw(double sigma);         // one-sided error for a single scale
  Eigen::MatrixXd draw_field(const UncertaintyModel& model, const ScenarioConfig& cfg);

 private:
  std::mt19937_64 eng_;
  double spare_ = 0;
  bool has_spare_ = false;
  double uniform01();
};

}  // namespace ecmarket
