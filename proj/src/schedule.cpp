#include "micn/schedule.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace micn {

ScheduleKind parse_schedule_kind(std::string_view name) {
  if (name == "cosine") return ScheduleKind::Cosine;
  if (name == "linear-alpha-bar") return ScheduleKind::LinearAlphaBar;
  throw std::invalid_argument("unknown schedule kind '" + std::string(name) + "'");
}

std::string_view schedule_kind_name(ScheduleKind kind) {
  return kind == ScheduleKind::Cosine ? "cosine" : "linear-alpha-bar";
}

double NoiseSchedule::beta(int t) const {
  if (t < 1 || t > T) throw std::out_of_range("beta: t must be in 1..T");
  return 1.0 - alpha_bar(t) / alpha_bar(t - 1);
}

void NoiseSchedule::check_timestep(int t) const {
  if (t < 0 || t > T) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside 0.." + std::to_string(T));
  }
}

NoiseSchedule make_schedule(int T, ScheduleKind kind) {
  if (T < 2) throw std::invalid_argument("make_schedule: T must be at least 2");
  NoiseSchedule s;
  s.T = T;
  s.kind = kind;
  std::vector<double> abar(static_cast<std::size_t>(T) + 1);
  abar[0] = 1.0;
  if (kind == ScheduleKind::Cosine) {
    constexpr double offset = 0.008;
    auto f = [&](int t) {
      const double c = std::cos((t / static_cast<double>(T) + offset) / (1.0 + offset) *
                                std::numbers::pi / 2.0);
      return c * c;
    };
    const double f0 = f(0);
    for (int t = 1; t <= T; ++t) {
      double beta = 1.0 - (f(t) / f0) / (f(t - 1) / f0);
      beta = std::min(beta, 0.999);
      abar[t] = abar[t - 1] * (1.0 - beta);
    }
  } else {
    constexpr double floor = 1e-3;
    for (int t = 1; t <= T; ++t) abar[t] = 1.0 - (t / static_cast<double>(T)) * (1.0 - floor);
  }
  s.alpha.resize(abar.size());
  s.sigma.resize(abar.size());
  for (std::size_t t = 0; t < abar.size(); ++t) {
    s.alpha[t] = std::sqrt(abar[t]);
    s.sigma[t] = std::sqrt(1.0 - abar[t]);
  }
  s.alpha[0] = 1.0;
  s.sigma[0] = 0.0;
  return s;
}

ad::Matrix perturb(const ad::Matrix& x0, std::span<const int> t, const ad::Matrix& eps,
                   const NoiseSchedule& schedule) {
  if (x0.rows() != eps.rows() || x0.cols() != eps.cols() ||
      static_cast<std::size_t>(x0.rows()) != t.size()) {
    throw ad::ShapeError("perturb: x0, eps and t disagree in shape");
  }
  ad::Matrix out(x0.rows(), x0.cols());
  for (ad::Index r = 0; r < x0.rows(); ++r) {
    const int tr = t[static_cast<std::size_t>(r)];
    schedule.check_timestep(tr);
    out.row(r) = schedule.alpha[tr] * x0.row(r) + schedule.sigma[tr] * eps.row(r);
  }
  return out;
}

ad::Matrix eps_to_score(const ad::Matrix& eps_hat, std::span<const int> t,
                        const NoiseSchedule& schedule) {
  if (static_cast<std::size_t>(eps_hat.rows()) != t.size()) {
    throw ad::ShapeError("eps_to_score: one timestep per row required");
  }
  ad::Matrix out(eps_hat.rows(), eps_hat.cols());
  for (ad::Index r = 0; r < eps_hat.rows(); ++r) {
    const int tr = t[static_cast<std::size_t>(r)];
    schedule.check_timestep(tr);
    if (tr == 0) throw std::domain_error("eps_to_score: sigma_0 = 0, score undefined at t = 0");
    out.row(r) = -eps_hat.row(r) / schedule.sigma[tr];
  }
  return out;
}

ad::Tensor score_scale(std::span<const int> t, const NoiseSchedule& schedule) {
  ad::Matrix col(static_cast<ad::Index>(t.size()), 1);
  for (std::size_t r = 0; r < t.size(); ++r) {
    schedule.check_timestep(t[r]);
    if (t[r] == 0) throw std::domain_error("score at t = 0 is undefined");
    col(static_cast<ad::Index>(r), 0) = -1.0 / schedule.sigma[t[r]];
  }
  return ad::Tensor::constant(std::move(col));
}

}  // namespace micn
