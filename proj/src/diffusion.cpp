#include "micn/diffusion.hpp"

#include <cmath>

namespace micn {

using ad::Matrix;
using ad::Tensor;

DiffusionBatch make_batch(const Matrix& x0, const NoiseSchedule& schedule, std::mt19937_64& rng,
                          int t_min) {
  DiffusionBatch b;
  b.x0 = x0;
  b.t.resize(static_cast<std::size_t>(x0.rows()));
  std::uniform_int_distribution<int> tdist(t_min, schedule.T);
  for (int& t : b.t) t = tdist(rng);
  std::normal_distribution<double> normal(0.0, 1.0);
  b.eps.resize(x0.rows(), x0.cols());
  for (ad::Index i = 0; i < b.eps.size(); ++i) b.eps.data()[i] = normal(rng);
  b.xt = perturb(x0, b.t, b.eps, schedule);
  b.weight.assign(b.t.size(), 1.0);
  return b;
}

Tensor dsm_loss_from_prediction(const Tensor& eps_hat, const DiffusionBatch& batch) {
  if (eps_hat.rows() != batch.eps.rows() || eps_hat.cols() != batch.eps.cols()) {
    throw ad::ShapeError("dsm_loss: prediction shape differs from the noise");
  }
  const Tensor diff = ad::sub(eps_hat, Tensor::constant(batch.eps));
  Matrix w(static_cast<ad::Index>(batch.weight.size()), 1);
  for (std::size_t r = 0; r < batch.weight.size(); ++r) {
    w(static_cast<ad::Index>(r), 0) = batch.weight[r];
  }
  const Tensor per_row = ad::mul(ad::dot_rows(diff, diff), Tensor::constant(w));
  return ad::affine(ad::sum_all(per_row), 1.0 / static_cast<double>(batch.eps.rows()), 0.0);
}

Tensor dsm_loss(const DiffusionBatch& batch, const BaseModel& base,
                std::span<const ControlInput> controls, const ComposeOptions& options) {
  const Tensor x = Tensor::constant(batch.xt);
  return dsm_loss_from_prediction(predict_noise(base, controls, x, batch.t, options), batch);
}

Matrix sample(const BaseModel& base, const NoiseSchedule& schedule, const SampleRequest& request) {
  if (request.n == 0) throw std::invalid_argument("sample: n must be positive");
  if (request.branches.size() != request.conditions.size()) {
    throw std::invalid_argument("sample: one condition batch per branch required");
  }
  const auto n = static_cast<ad::Index>(request.n);
  const int d = base.config().data_dim;
  std::vector<ConditionBatch> conds;
  conds.reserve(request.conditions.size());
  for (const auto& c : request.conditions) {
    conds.push_back(c.rows() == 1 && n != 1 ? c.repeat(n) : c);
    conds.back().validate(n, d);
  }
  std::vector<ControlInput> controls;
  for (std::size_t k = 0; k < conds.size(); ++k) controls.push_back({request.branches[k], &conds[k]});

  ad::NoGradGuard no_grad;
  std::mt19937_64 rng(request.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix x(n, d);
  for (ad::Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rng);

  std::vector<int> t(static_cast<std::size_t>(n));
  for (int step = schedule.T; step >= 1; --step) {
    std::fill(t.begin(), t.end(), step);
    const Matrix eps = predict_noise(base, controls, Tensor::constant(x), t, request.options).value();
    const double beta = schedule.beta(step);
    const double sigma = schedule.sigma[step];
    Matrix mean = (x - (beta / sigma) * eps) / std::sqrt(1.0 - beta);
    if (step > 1) {
      const double abar_prev = schedule.alpha_bar(step - 1);
      const double abar = schedule.alpha_bar(step);
      const double var = beta * (1.0 - abar_prev) / (1.0 - abar);
      const double sd = std::sqrt(var);
      for (ad::Index i = 0; i < mean.size(); ++i) mean.data()[i] += sd * normal(rng);
    }
    if (!mean.allFinite()) throw NumericalAbort("sampler produced a non-finite state", step);
    x = std::move(mean);
  }
  return x;
}

}  // namespace micn
