#pragma once

#include "micn/schedule.hpp"
#include "micn/scorenet.hpp"

#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace micn {

/// Raised when a non-finite value shows up mid-computation.
class NumericalAbort : public std::runtime_error {
 public:
  NumericalAbort(const std::string& what, long step)
      : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

struct DiffusionBatch {
  ad::Matrix x0;
  std::vector<int> t;
  ad::Matrix eps;
  ad::Matrix xt;
  std::vector<double> weight;  // w(t), identically 1
};

/// t ~ U{t_min..T} and eps ~ N(0, I) per row.
DiffusionBatch make_batch(const ad::Matrix& x0, const NoiseSchedule& schedule,
                          std::mt19937_64& rng, int t_min = 0);

/// mean over rows of w(t) |eps_hat - eps|^2.
ad::Tensor dsm_loss_from_prediction(const ad::Tensor& eps_hat, const DiffusionBatch& batch);

ad::Tensor dsm_loss(const DiffusionBatch& batch, const BaseModel& base,
                    std::span<const ControlInput> controls, const ComposeOptions& options);

/// Inputs of one ancestral sampling run.
struct SampleRequest {
  std::size_t n = 0;
  std::uint64_t seed = 0;
  /// One condition batch per branch, each with n rows (or a single row that
  /// is repeated).
  std::vector<const ControlBranch*> branches;
  std::vector<ConditionBatch> conditions;
  ComposeOptions options;
};

/// DDPM ancestral chain from x_T ~ N(0, I) with a deterministic final step.
ad::Matrix sample(const BaseModel& base, const NoiseSchedule& schedule,
                  const SampleRequest& request);

}  // namespace micn
