#pragma once

#include "micn/autodiff.hpp"

#include <string_view>
#include <vector>

namespace micn {

enum class ScheduleKind { Cosine, LinearAlphaBar };

ScheduleKind parse_schedule_kind(std::string_view name);
std::string_view schedule_kind_name(ScheduleKind kind);

/// alpha_t scales the clean signal, sigma_t = sqrt(1 - alpha_t^2) the noise.
struct NoiseSchedule {
  int T = 0;
  ScheduleKind kind = ScheduleKind::Cosine;
  std::vector<double> alpha;  // T + 1 entries, alpha[0] == 1
  std::vector<double> sigma;

  double alpha_bar(int t) const { return alpha[t] * alpha[t]; }
  /// Per-step variance 1 - alpha_bar(t) / alpha_bar(t - 1), t >= 1.
  double beta(int t) const;
  void check_timestep(int t) const;
};

/// T >= 2. Cosine: the improved-DDPM cosine curve with per-step beta capped at
/// 0.999. LinearAlphaBar: alpha_bar falls linearly from 1 to 1e-3.
NoiseSchedule make_schedule(int T, ScheduleKind kind);

/// alpha_t x0 + sigma_t eps, row-wise with one timestep per row.
ad::Matrix perturb(const ad::Matrix& x0, std::span<const int> t, const ad::Matrix& eps,
                   const NoiseSchedule& schedule);

/// -eps_hat / sigma_t per row; t == 0 is rejected.
ad::Matrix eps_to_score(const ad::Matrix& eps_hat, std::span<const int> t,
                        const NoiseSchedule& schedule);

/// Column of -1 / sigma_t for use inside recorded computations.
ad::Tensor score_scale(std::span<const int> t, const NoiseSchedule& schedule);

}  // namespace micn
