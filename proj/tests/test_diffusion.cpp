#include "support.hpp"

#include "micn/diffusion.hpp"
#include "micn/evalsuite.hpp"
#include "micn/trainer.hpp"

#include <doctest.h>

using namespace micn;
using ad::Matrix;
using ad::Tensor;

TEST_CASE("schedules: endpoints, monotonicity, unit norm") {
  for (auto kind : {ScheduleKind::Cosine, ScheduleKind::LinearAlphaBar}) {
    for (int T : {2, 200, 1000}) {
      const NoiseSchedule s = make_schedule(T, kind);
      CHECK(s.alpha[0] == 1.0);
      CHECK(s.sigma[0] == 0.0);
      CHECK(s.alpha[T] <= 0.05);
      for (int t = 0; t <= T; ++t) {
        CHECK(std::abs(s.alpha[t] * s.alpha[t] + s.sigma[t] * s.sigma[t] - 1.0) <= 1e-12);
        if (t > 0) CHECK(s.alpha[t] < s.alpha[t - 1]);
        if (t > 0) CHECK((s.beta(t) > 0.0 && s.beta(t) <= 0.999));
      }
    }
  }
  CHECK_THROWS_AS(make_schedule(1, ScheduleKind::Cosine), std::invalid_argument);
  CHECK(parse_schedule_kind(schedule_kind_name(ScheduleKind::LinearAlphaBar)) == ScheduleKind::LinearAlphaBar);
}

TEST_CASE("perturb: t = 0, eps = 0 and direct arithmetic") {
  const NoiseSchedule s = make_schedule(200, ScheduleKind::Cosine);
  std::mt19937_64 rng(1);
  const Matrix x0 = testing::random_matrix(6, 8, rng), eps = testing::random_matrix(6, 8, rng);
  const std::vector<int> zero(6, 0), t{0, 1, 17, 100, 199, 200};
  CHECK(perturb(x0, zero, eps, s) == x0);
  const Matrix a = perturb(x0, t, Matrix::Zero(6, 8), s);
  const Matrix b = perturb(x0, t, eps, s);
  for (int r = 0; r < 6; ++r) {
    CHECK((a.row(r) - s.alpha[t[r]] * x0.row(r)).cwiseAbs().maxCoeff() == 0.0);
    CHECK((b.row(r) - (s.alpha[t[r]] * x0.row(r) + s.sigma[t[r]] * eps.row(r))).cwiseAbs().maxCoeff() <= 1e-12);
  }
  CHECK_THROWS_AS(perturb(x0, std::vector<int>{1, 2}, eps, s), ad::ShapeError);
}

TEST_CASE("eps_to_score") {
  const NoiseSchedule s = make_schedule(200, ScheduleKind::Cosine);
  std::mt19937_64 rng(2);
  const std::vector<int> t{1, 50, 200};
  CHECK(eps_to_score(Matrix::Zero(3, 4), t, s) == Matrix::Zero(3, 4));
  const Matrix e = testing::random_matrix(3, 4, rng);
  const Matrix sc = eps_to_score(e, t, s);
  for (int r = 0; r < 3; ++r) CHECK((sc.row(r) * s.sigma[t[r]] + e.row(r)).cwiseAbs().maxCoeff() <= 1e-12);

  // optimal eps_hat gives the exact Gaussian score
  const Matrix x0 = testing::random_matrix(3, 4, rng), eps = testing::random_matrix(3, 4, rng);
  const Matrix xt = perturb(x0, t, eps, s);
  Matrix opt(3, 4), exact(3, 4);
  for (int r = 0; r < 3; ++r) {
    opt.row(r) = (xt.row(r) - s.alpha[t[r]] * x0.row(r)) / s.sigma[t[r]];
    exact.row(r) = -(xt.row(r) - s.alpha[t[r]] * x0.row(r)) / (s.sigma[t[r]] * s.sigma[t[r]]);
  }
  CHECK(testing::rel_error(eps_to_score(opt, t, s), exact) <= 1e-12);
  CHECK_THROWS_AS(eps_to_score(e, std::vector<int>{0, 1, 2}, s), std::domain_error);
}

TEST_CASE("dsm loss: exact prediction, zero prediction, single item") {
  const NoiseSchedule s = make_schedule(200, ScheduleKind::Cosine);
  std::mt19937_64 rng(3);
  const Matrix x0 = testing::random_matrix(20000, 8, rng);
  const DiffusionBatch b = make_batch(x0, s, rng);
  for (int t : b.t) CHECK((t >= 0 && t <= 200));
  CHECK(dsm_loss_from_prediction(Tensor::constant(b.eps), b).item() == 0.0);
  const double zero = dsm_loss_from_prediction(Tensor::constant(Matrix::Zero(20000, 8)), b).item();
  CHECK(std::abs(zero - 8.0) <= 0.05 * 8.0);

  DiffusionBatch one = make_batch(x0.topRows(1), s, rng);
  const Matrix pred = testing::random_matrix(1, 8, rng);
  CHECK(dsm_loss_from_prediction(Tensor::constant(pred), one).item() ==
        doctest::Approx((pred - one.eps).squaredNorm()).epsilon(1e-14));
}

TEST_CASE("dsm loss gradient on a four-parameter model matches finite differences") {
  const NoiseSchedule s = make_schedule(200, ScheduleKind::Cosine);
  std::mt19937_64 rng(4);
  const DiffusionBatch b = make_batch(testing::random_matrix(64, 2, rng), s, rng);
  const Matrix p0 = testing::random_matrix(1, 4, rng);
  auto loss = [&](const Tensor& p) {
    const Tensor x = Tensor::constant(b.xt);
    const Tensor a = ad::broadcast_rows(ad::slice_cols(p, 0, 2), 64);
    const Tensor c = ad::broadcast_rows(ad::slice_cols(p, 2, 2), 64);
    return dsm_loss_from_prediction(ad::add(ad::mul(ad::silu(x), a), c), b);
  };
  Tensor p = Tensor::variable(p0);
  const Matrix g = ad::gradient(loss(p), std::vector<Tensor>{p})[0].value();
  const Matrix fd = testing::fd_gradient([&](const Matrix& q) { return loss(Tensor::constant(q)).item(); }, p0);
  CHECK(testing::rel_error(g, fd) <= 1e-4);
}

TEST_CASE("sampler: determinism and finiteness when untrained") {
  const NoiseSchedule s = make_schedule(200, ScheduleKind::Cosine);
  std::mt19937_64 rng(5);
  const BaseModel base = BaseModel::init(ModelConfig{}, rng);
  SampleRequest req;
  req.n = 64;
  req.seed = 9;
  const Matrix a = sample(base, s, req);
  const Matrix b = sample(base, s, req);
  CHECK(a == b);
  CHECK(a.allFinite());
  req.seed = 10;
  CHECK(sample(base, s, req) != a);
}

TEST_CASE("sampler: non-finite state aborts with the step index") {
  const NoiseSchedule s = make_schedule(200, ScheduleKind::Cosine);
  BaseModel base = BaseModel::zeros(ModelConfig{});
  base.decoder().out.bias.leaf_value()(0, 0) = std::numeric_limits<double>::quiet_NaN();
  SampleRequest req;
  req.n = 4;
  try {
    sample(base, s, req);
    FAIL("expected an abort");
  } catch (const NumericalAbort& e) {
    CHECK(e.step() == 200);
  }
}

namespace {

std::vector<ConditionedSample> as_records(const Matrix& x0) {
  std::vector<ConditionedSample> out;
  for (ad::Index r = 0; r < x0.rows(); ++r) {
    ConditionedSample c;
    c.x0 = x0.row(r);
    c.condition = extract_condition(c.x0, RowVector::Zero(x0.cols()));
    out.push_back(c);
  }
  return out;
}

}  // namespace

TEST_CASE("sampler: a base model trained on a point mass samples near it") {
  Matrix mu(1, 8);
  mu << 0.7, -1.2, 0.3, 1.5, -0.4, 0.0, 0.9, -0.8;
  TrainConfig cfg = TrainConfig::recipe(Stage::Base);
  cfg.steps = 1500;
  cfg.seed = 1;
  const Checkpoint ck = train(cfg, as_records(mu.replicate(256, 1)), nullptr);
  const RestoredModel m = restore(ck);
  SampleRequest req;
  req.n = 500;
  req.seed = 3;
  const Matrix x = sample(m.base, m.schedule, req);
  const Matrix mean = x.colwise().mean();
  CHECK((mean - mu).cwiseAbs().maxCoeff() <= 0.1);
}

TEST_CASE("sampler: a base model trained on a 2-D mixture matches it in MMD") {
  SyntheticTask task;
  task.data_dim = 2;
  const Matrix data = gen_ground_truth(task, 20000, 5);
  TrainConfig cfg = TrainConfig::recipe(Stage::Base);
  cfg.model.data_dim = 2;
  cfg.steps = 4000;
  cfg.seed = 2;
  const Checkpoint ck = train(cfg, as_records(data), nullptr);
  const RestoredModel m = restore(ck);
  SampleRequest req;
  req.n = 1000;
  req.seed = 4;
  const Matrix x = sample(m.base, m.schedule, req);
  const double v = eval::mmd(x, gen_ground_truth(task, 1000, 6)).mmd2;
  MESSAGE("2-D mixture MMD^2 = " << v);
  CHECK(v <= 0.05);
}
