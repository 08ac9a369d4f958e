#include "support.hpp"

#include <doctest.h>

#include <random>

using namespace micn;
using ad::Matrix;
using ad::Tensor;
using testing::MicroNet;
using testing::fd_gradient;
using testing::random_matrix;
using testing::rel_error;

namespace {

Matrix m(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix out(static_cast<ad::Index>(rows.size()), static_cast<ad::Index>(rows.begin()->size()));
  ad::Index r = 0;
  for (const auto& row : rows) {
    ad::Index c = 0;
    for (double v : row) out(r, c++) = v;
    ++r;
  }
  return out;
}

double weighted_sum(const Matrix& out, const Matrix& w) { return (out.array() * w.array()).sum(); }

}  // namespace

TEST_CASE("evaluate: identity affine map and elementwise square") {
  Tensor x = Tensor::variable(m({{0.5, -1.5}}));
  Tensor y = ad::linear(x, Tensor::constant(Matrix::Identity(2, 2)), Tensor::constant(Matrix::Zero(1, 2)));
  CHECK(y.value() == m({{0.5, -1.5}}));

  Tensor v = Tensor::variable(m({{3.0, -2.0}}));
  ad::Graph g({v}, {ad::mul(v, v)});
  const auto out = g.evaluate(std::vector<Tensor>{Tensor::constant(m({{3.0, -2.0}}))});
  CHECK(out[0].value() == m({{9.0, 4.0}}));
}

TEST_CASE("evaluate: replay is bit-identical and names the rejecting operation") {
  std::mt19937_64 rng(3);
  MicroNet net(3, 4, rng);
  Tensor x = Tensor::variable(random_matrix(3, 4, rng));
  auto params = net.variables();
  std::vector<Tensor> inputs{x};
  inputs.insert(inputs.end(), params.begin(), params.end());
  ad::Graph g(inputs, {net.forward(x, params)});
  CHECK(g.num_operations() > 0);
  const auto a = g.evaluate(inputs);
  const auto b = g.evaluate(inputs);
  CHECK(a[0].value() == b[0].value());

  Tensor p = Tensor::variable(Matrix::Ones(2, 3));
  Tensor q = Tensor::variable(Matrix::Ones(3, 2));
  ad::Graph mm({p, q}, {ad::matmul(p, q)});
  std::vector<Tensor> bad{Tensor::constant(Matrix::Ones(2, 3)), Tensor::constant(Matrix::Ones(2, 2))};
  try {
    mm.evaluate(bad);
    FAIL("expected a shape error");
  } catch (const ad::ShapeError& e) {
    CHECK(std::string(e.what()).find("operation 0 (matmul) rejected") != std::string::npos);
  }
}

TEST_CASE("straight-line reimplementation of a 3-layer network") {
  std::mt19937_64 rng(11);
  const Matrix x = random_matrix(5, 4, rng);
  const Matrix w1 = random_matrix(6, 4, rng), b1 = random_matrix(1, 6, rng);
  const Matrix w2 = random_matrix(6, 6, rng), b2 = random_matrix(1, 6, rng);
  const Matrix w3 = random_matrix(3, 6, rng), b3 = random_matrix(1, 3, rng);
  auto silu = [](const Matrix& z) -> Matrix { return z.array() / (1.0 + (-z.array()).exp()); };
  Matrix h = silu((x * w1.transpose()).rowwise() + b1.row(0));
  h = silu((h * w2.transpose()).rowwise() + b2.row(0));
  const Matrix expect = (h * w3.transpose()).rowwise() + b3.row(0);

  Tensor t = ad::silu(ad::linear(Tensor::variable(x), Tensor::variable(w1), Tensor::variable(b1)));
  t = ad::silu(ad::linear(t, Tensor::variable(w2), Tensor::variable(b2)));
  t = ad::linear(t, Tensor::variable(w3), Tensor::variable(b3));
  CHECK((t.value() - expect).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("gradient: small cases and errors") {
  Tensor x = Tensor::variable(m({{3.0}}));
  CHECK(ad::gradient(ad::mul(x, x), std::vector<Tensor>{x})[0].item() == doctest::Approx(6.0).epsilon(1e-15));

  Tensor c = Tensor::variable(m({{1.0, 2.0}}));
  const auto g0 = ad::gradient(Tensor::scalar(4.0), std::vector<Tensor>{c});
  CHECK(g0[0].value() == Matrix::Zero(1, 2));

  CHECK_THROWS_AS(ad::gradient(c, std::vector<Tensor>{c}), ad::ShapeError);
}

TEST_CASE("gradient of |Wx|^2 with respect to W matches finite differences") {
  std::mt19937_64 rng(5);
  const Matrix W = random_matrix(3, 4, rng), x = random_matrix(1, 4, rng);
  Tensor w = Tensor::variable(W);
  Tensor y = ad::matmul(Tensor::constant(x), ad::transpose(w));
  const Matrix g = ad::gradient(ad::sum_all(ad::mul(y, y)), std::vector<Tensor>{w})[0].value();
  const Matrix fd = fd_gradient([&](const Matrix& Wp) { return (x * Wp.transpose()).squaredNorm(); }, W);
  CHECK(rel_error(g, fd) <= 1e-5);
}

TEST_CASE("vjp and jvp on hand-sized maps") {
  const Matrix A = m({{1, 2}, {3, 4}});
  Tensor x = Tensor::variable(m({{0.3, -0.7}}));
  Tensor y = ad::matmul(x, Tensor::constant(A.transpose()));
  CHECK(ad::vjp(y, x, Tensor::constant(m({{1, 0}}))).value() == m({{1, 2}}));
  CHECK(ad::jvp(y, x, Tensor::constant(m({{0, 1}}))).value() == m({{2, 4}}));

  Tensor s = Tensor::variable(m({{1, 2}}));
  CHECK(ad::vjp(ad::mul(s, s), s, Tensor::constant(m({{1, 1}}))).value() == m({{2, 4}}));
  const Matrix tangent = m({{0.25, -4}});
  CHECK(ad::jvp(s, s, Tensor::constant(tangent)).value() == tangent);

  CHECK_THROWS_AS(ad::vjp(y, x, Tensor::constant(m({{1, 0, 0}}))), ad::ShapeError);
  CHECK_THROWS_AS(ad::jvp(y, x, Tensor::constant(m({{1, 0}, {0, 1}}))), ad::ShapeError);
}

TEST_CASE("every primitive: reverse mode against finite differences over 100 cases") {
  std::mt19937_64 rng(17);
  using Fn = std::function<Tensor(const Tensor&)>;
  const Tensor other = Tensor::constant(random_matrix(3, 4, rng));
  const Tensor square = Tensor::constant(random_matrix(4, 2, rng));
  const std::vector<std::pair<std::string, Fn>> prims = {
      {"matmul", [&](const Tensor& x) { return ad::matmul(x, square); }},
      {"add", [&](const Tensor& x) { return ad::add(x, other); }},
      {"sub", [&](const Tensor& x) { return ad::sub(other, x); }},
      {"mul", [&](const Tensor& x) { return ad::mul(x, ad::sigmoid(x)); }},
      {"div", [&](const Tensor& x) { return ad::div(other, ad::affine(ad::mul(x, x), 1.0, 1.0)); }},
      {"affine", [&](const Tensor& x) { return ad::affine(x, -1.7, 0.4); }},
      {"sigmoid", [&](const Tensor& x) { return ad::sigmoid(x); }},
      {"sum_rows", [&](const Tensor& x) { return ad::sum_rows(x); }},
      {"sum_cols", [&](const Tensor& x) { return ad::sum_cols(x); }},
      {"broadcast_rows", [&](const Tensor& x) { return ad::broadcast_rows(ad::slice_cols(ad::sum_rows(x), 0, 4), 2); }},
      {"broadcast_cols", [&](const Tensor& x) { return ad::broadcast_cols(ad::sum_cols(x), 3); }},
      {"transpose", [&](const Tensor& x) { return ad::transpose(x); }},
      {"slice_cols", [&](const Tensor& x) { return ad::slice_cols(x, 1, 2); }},
      {"pad_cols", [&](const Tensor& x) { return ad::pad_cols(x, 2, 7); }},
      {"concat_cols", [&](const Tensor& x) { return ad::concat_cols(x, ad::mul(x, x)); }},
      {"clamp", [&](const Tensor& x) { return ad::clamp(x, -10.0, 10.0); }},
  };
  for (int trial = 0; trial < 100; ++trial) {
    for (const auto& [name, f] : prims) {
      CAPTURE(name);
      CAPTURE(trial);
      const Matrix x0 = random_matrix(3, 4, rng);
      Tensor x = Tensor::variable(x0);
      const Tensor y = f(x);
      const Matrix w = random_matrix(y.rows(), y.cols(), rng);
      const Matrix g = ad::gradient(ad::sum_all(ad::mul(y, Tensor::constant(w))), std::vector<Tensor>{x})[0].value();
      const Matrix fd = fd_gradient(
          [&](const Matrix& xp) {
            ad::NoGradGuard ng;
            return weighted_sum(f(Tensor::constant(xp)).value(), w);
          },
          x0);
      CHECK(rel_error(g, fd) <= 1e-5);
    }
  }
}

TEST_CASE("random micro-networks: gradient, vjp, jvp and second order") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 30; ++trial) {
    CAPTURE(trial);
    MicroNet net(3, 3, rng);
    const Matrix x0 = random_matrix(net.rows(), net.in(), rng);
    auto params = net.variables();
    Tensor x = Tensor::variable(x0);
    const Tensor y = net.forward(x, params);
    const Matrix u = random_matrix(y.rows(), y.cols(), rng);
    const Matrix v = random_matrix(x0.rows(), x0.cols(), rng);

    // vjp against finite differences of <u, f(x)>
    const Matrix vj = ad::vjp(y, x, Tensor::constant(u)).value();
    const Matrix fd_vj = fd_gradient([&](const Matrix& xp) { return weighted_sum(net.eval(xp, net.params()), u); }, x0);
    CHECK(rel_error(vj, fd_vj) <= 1e-5);

    // jvp against a directional difference
    const Matrix jv = ad::jvp(y, x, Tensor::constant(v)).value();
    const double h = 1e-5;
    const Matrix fd_jv = (net.eval(x0 + h * v, net.params()) - net.eval(x0 - h * v, net.params())) / (2 * h);
    CHECK(rel_error(jv, fd_jv) <= 1e-5);

    // duality
    CHECK(std::abs(weighted_sum(jv, u) - weighted_sum(vj, v)) <= 1e-10 * std::max(1.0, std::abs(weighted_sum(jv, u))));

    // second order: gradient of |vjp|^2 with respect to the first weight
    Tensor vjt = ad::vjp(y, x, Tensor::constant(u), true);
    const Matrix g2 = ad::gradient(ad::sum_all(ad::mul(vjt, vjt)), std::span<const Tensor>(params.data(), 1))[0].value();
    const Matrix fd2 = fd_gradient(
        [&](const Matrix& w) {
          std::vector<Tensor> p = net.variables();
          p[0] = Tensor::variable(w);
          Tensor xx = Tensor::variable(x0);
          return ad::vjp(net.forward(xx, p), xx, Tensor::constant(u), false).value().squaredNorm();
        },
        net.params()[0]);
    CHECK(rel_error(g2, fd2) <= 1e-4);
  }
}

TEST_CASE("vjp agrees with the jvp-built Jacobian contracted with the cotangent") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix W1 = random_matrix(5, 4, rng), b1 = random_matrix(1, 5, rng);
    const Matrix W2 = random_matrix(3, 5, rng), b2 = random_matrix(1, 3, rng);
    const Matrix x0 = random_matrix(1, 4, rng);
    Tensor x = Tensor::variable(x0);
    Tensor y = ad::linear(ad::silu(ad::linear(x, Tensor::constant(W1), Tensor::constant(b1))),
                          Tensor::constant(W2), Tensor::constant(b2));
    Matrix J(3, 4);
    for (int j = 0; j < 4; ++j) {
      Matrix e = Matrix::Zero(1, 4);
      e(0, j) = 1.0;
      J.col(j) = ad::jvp(y, x, Tensor::constant(e)).value().row(0).transpose();
    }
    const Matrix u = random_matrix(1, 3, rng);
    const Matrix vj = ad::vjp(y, x, Tensor::constant(u)).value();
    CHECK((vj - u * J).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("recording guards and determinism") {
  std::mt19937_64 rng(1);
  const Matrix x0 = random_matrix(2, 3, rng);
  {
    ad::NoGradGuard ng;
    CHECK_FALSE(ad::grad_enabled());
    Tensor x = Tensor::variable(x0);
    CHECK_FALSE(ad::sigmoid(x).requires_grad());
    {
      ad::EnableGradGuard eg;
      CHECK(ad::sigmoid(x).requires_grad());
    }
    CHECK_FALSE(ad::grad_enabled());
  }
  CHECK(ad::grad_enabled());
  CHECK_FALSE(ad::detach(ad::sigmoid(Tensor::variable(x0))).requires_grad());

  auto run = [&] {
    std::mt19937_64 r(77);
    MicroNet net(2, 3, r);
    auto p = net.variables();
    Tensor y = net.forward(Tensor::constant(x0), p);
    auto g = ad::gradient(ad::sum_all(ad::mul(y, y)), p);
    std::vector<Matrix> out;
    for (auto& t : g) out.push_back(t.value());
    return out;
  };
  CHECK(run() == run());
}
