#pragma once

// Shared oracles for the unit tests and the acceptance binary: random
// micro-networks over every primitive, central finite differences, and a
// plain-Eigen forward pass of the score network.

#include "micn/autodiff.hpp"
#include "micn/combine.hpp"
#include "micn/scorenet.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace micn::testing {

using ad::Matrix;
using ad::Tensor;

inline Matrix random_matrix(ad::Index r, ad::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline double rel_error(const Matrix& a, const Matrix& b, double floor = 1e-6) {
  return (a - b).norm() / std::max({a.norm(), b.norm(), floor});
}

/// Central difference of a scalar function of one matrix, entry by entry.
inline Matrix fd_gradient(const std::function<double(const Matrix&)>& f, const Matrix& x,
                          double h = 1e-5) {
  Matrix g(x.rows(), x.cols());
  Matrix xp = x;
  for (ad::Index i = 0; i < x.size(); ++i) {
    const double keep = xp.data()[i];
    xp.data()[i] = keep + h;
    const double up = f(xp);
    xp.data()[i] = keep - h;
    const double down = f(xp);
    xp.data()[i] = keep;
    g.data()[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// A random composition of primitives with its own parameters.
class MicroNet {
 public:
  enum Step {
    kLinear,
    kSilu,
    kSigmoid,
    kSquare,
    kDivide,
    kConcatSlice,
    kSliceDrop,
    kPad,
    kMatmulT,
    kClamp,
    kBiasRows,
    kScaleRows,
    kRowMix,
    kColBroadcast,
    kSub,
    kCount
  };

  MicroNet(int rows, int in, std::mt19937_64& rng) : rows_(rows), in_(in) {
    std::uniform_int_distribution<int> len(3, 6);
    std::uniform_int_distribution<int> pick(0, kCount - 1);
    int width = in;
    const int n = len(rng);
    steps_.push_back(kLinear);
    for (int k = 0; k < n; ++k) steps_.push_back(static_cast<Step>(pick(rng)));
    steps_.push_back(kSilu);
    steps_.push_back(kLinear);
    std::uniform_int_distribution<int> wdist(1, 4);
    for (Step s : steps_) {
      switch (s) {
        case kLinear: {
          const int out = wdist(rng);
          params_.push_back(random_matrix(out, width, rng, 0.7));
          params_.push_back(random_matrix(1, out, rng, 0.3));
          width = out;
          break;
        }
        case kMatmulT:
          params_.push_back(random_matrix(width, width, rng, 0.7));
          break;
        case kBiasRows:
          params_.push_back(random_matrix(1, width, rng, 0.5));
          break;
        case kConcatSlice:
          ++width;
          break;
        case kSliceDrop:
          if (width > 1) --width;
          break;
        case kPad:
          width += 2;
          break;
        default:
          break;
      }
    }
    out_ = width;
  }

  int rows() const { return rows_; }
  int in() const { return in_; }
  int out() const { return out_; }
  const std::vector<Matrix>& params() const { return params_; }

  std::vector<Tensor> variables() const {
    std::vector<Tensor> v;
    for (const auto& p : params_) v.push_back(Tensor::variable(p));
    return v;
  }

  Tensor forward(const Tensor& x, const std::vector<Tensor>& p) const {
    Tensor h = x;
    std::size_t k = 0;
    for (Step s : steps_) {
      switch (s) {
        case kLinear:
          h = ad::linear(h, p[k], p[k + 1]);
          k += 2;
          break;
        case kSilu: h = ad::silu(h); break;
        case kSigmoid: h = ad::sigmoid(h); break;
        case kSquare: h = ad::mul(h, h); break;
        case kDivide: h = ad::div(h, ad::affine(ad::sigmoid(h), 1.0, 1.0)); break;
        case kConcatSlice: h = ad::concat_cols(h, ad::slice_cols(h, 0, 1)); break;
        case kSliceDrop:
          if (h.cols() > 1) h = ad::slice_cols(h, 1, h.cols() - 1);
          break;
        case kPad: h = ad::add(ad::pad_cols(h, 1, h.cols() + 2), ad::Tensor::constant(Matrix::Constant(h.rows(), h.cols() + 2, 0.1))); break;
        case kMatmulT: h = ad::matmul(h, ad::transpose(p[k++])); break;
        case kClamp: h = ad::clamp(h, -50.0, 50.0); break;
        case kBiasRows: h = ad::add(h, ad::broadcast_rows(p[k++], h.rows())); break;
        case kScaleRows: h = ad::scale_rows(h, ad::sigmoid(ad::sum_cols(h))); break;
        case kRowMix: h = ad::add(h, ad::affine(ad::broadcast_rows(ad::sum_rows(h), h.rows()), 0.2, 0.0)); break;
        case kColBroadcast: h = ad::add(h, ad::affine(ad::broadcast_cols(ad::sum_cols(h), h.cols()), 0.1, 0.0)); break;
        case kSub: h = ad::sub(h, ad::affine(ad::sigmoid(h), 0.5, 0.0)); break;
        case kCount: break;
      }
    }
    return h;
  }

  Matrix eval(const Matrix& x, const std::vector<Matrix>& p) const {
    std::vector<Tensor> t;
    for (const auto& m : p) t.push_back(Tensor::constant(m));
    ad::NoGradGuard g;
    return forward(Tensor::constant(x), t).value();
  }

 private:
  int rows_;
  int in_;
  int out_ = 0;
  std::vector<Step> steps_;
  std::vector<Matrix> params_;
};

// ---------------------------------------------------------------------------
// Plain-Eigen forward pass of the score network (no autodiff machinery).

inline Matrix plain_silu(const Matrix& z) {
  return z.array() / (1.0 + (-z.array()).exp());
}

inline Matrix plain_linear(const Matrix& x, const Linear& l) {
  return (x * l.weight.value().transpose()).rowwise() + l.bias.value().row(0);
}

inline std::vector<Matrix> plain_encoder(const EncoderStack& e, const Matrix& input, const Matrix& temb) {
  std::vector<Matrix> out;
  Matrix h = input;
  for (std::size_t i = 0; i < e.blocks.size(); ++i) {
    Matrix pre = plain_linear(h, e.blocks[i]);
    if (i == 0) pre += plain_linear(temb, e.time_proj);
    h = plain_silu(pre);
    out.push_back(h);
  }
  return out;
}

inline std::vector<double> row_of(const Matrix& m, ad::Index r) {
  return {m.row(r).data(), m.row(r).data() + m.cols()};
}

/// eps_hat of base + branches, computed row by row with the scalar combine
/// functions.
inline Matrix plain_predict(const BaseModel& base, std::vector<const ControlBranch*> branches,
                            std::vector<const ConditionBatch*> conds, const Matrix& x,
                            std::span<const int> t, Mode mode, combine::Formula formula) {
  BaseModel& b = const_cast<BaseModel&>(base);
  const Matrix temb = time_embedding(t, base.config().time_dim);
  std::vector<Matrix> enc = plain_encoder(b.encoder(), x, temb);
  std::vector<std::vector<Matrix>> ctrl;
  for (std::size_t k = 0; k < branches.size(); ++k) {
    ControlBranch& c = const_cast<ControlBranch&>(*branches[k]);
    Matrix cin(x.rows(), 2 * x.cols());
    cin << conds[k]->mask, conds[k]->values;
    const Matrix input = x + plain_linear(cin, c.embed());
    std::vector<Matrix> h = plain_encoder(c.blocks(), input, temb);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = plain_linear(h[i], c.projections()[i]);
    ctrl.push_back(h);
  }
  std::vector<Matrix> fd = enc;
  if (!ctrl.empty()) {
    for (std::size_t i = 0; i < enc.size(); ++i) {
      if (mode == Mode::VanillaAdd) {
        for (const auto& c : ctrl) fd[i] += c[i];
        continue;
      }
      for (ad::Index r = 0; r < x.rows(); ++r) {
        combine::LevelVectors comb = {row_of(ctrl[0][i], r)};
        for (std::size_t k = 1; k < ctrl.size(); ++k) {
          comb = combine::add_com(comb, {row_of(ctrl[k][i], r)}, formula);
        }
        const auto out = combine::add_inj({row_of(enc[i], r)}, comb, formula);
        for (ad::Index j = 0; j < fd[i].cols(); ++j) fd[i](r, j) = out[0][static_cast<std::size_t>(j)];
      }
    }
  }
  const auto& dec = b.decoder();
  const std::size_t top = dec.blocks.size() - 1;
  Matrix g = plain_silu(plain_linear(fd[top], dec.blocks[top]));
  for (std::size_t k = top; k-- > 0;) {
    Matrix cat(g.rows(), g.cols() + fd[k].cols());
    cat << g, fd[k];
    g = plain_silu(plain_linear(cat, dec.blocks[k]));
  }
  return plain_linear(g, dec.out);
}


// ---------------------------------------------------------------------------
// Property scan over the combine operators; every field counts violations.

struct CombineScan {
  int cases = 0;
  int clamp_violations = 0;
  int complement_checked = 0;
  int complement_violations = 0;
  int homogeneity_violations = 0;
  int segment_violations = 0;
  int acute_checked = 0;
  int acute_violations = 0;
  int silent_violations = 0;

  int failures() const {
    return clamp_violations + complement_violations + homogeneity_violations + segment_violations +
           acute_violations + silent_violations;
  }
};

inline std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = g(rng);
  return v;
}

inline double raw_lambda_star(const std::vector<double>& v1, const std::vector<double>& v2) {
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < v1.size(); ++k) {
    num += (v2[k] - v1[k]) * v2[k];
    den += (v2[k] - v1[k]) * (v2[k] - v1[k]);
  }
  return num / den;
}

inline CombineScan scan_combine(int cases, std::uint64_t seed) {
  CombineScan s;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> len(1, 12);
  std::uniform_real_distribution<double> scale(1e-3, 1e3);
  std::uniform_int_distribution<int> kind(0, 5);
  for (int c = 0; c < cases; ++c) {
    ++s.cases;
    const auto n = static_cast<std::size_t>(len(rng));
    std::vector<double> v1 = random_vector(n, rng), v2 = random_vector(n, rng);
    // Mix in degenerate and boundary inputs.
    switch (kind(rng)) {
      case 0: v2 = v1; break;
      case 1: std::fill(v2.begin(), v2.end(), 0.0); break;
      case 2: for (std::size_t k = 0; k < n; ++k) v2[k] = 2.0 * v1[k]; break;
      case 3: for (std::size_t k = 0; k < n; ++k) v2[k] = v1[k] + 1e-9; break;
      default: break;
    }
    for (auto f : {combine::Formula::Paper, combine::Formula::MinNorm}) {
      const auto co = combine::coefficients(v1, v2, f);
      if (!(co.lambda_star >= 0.0 && co.lambda_star <= 1.0)) ++s.clamp_violations;
      if (!(co.lambda_inj >= 0.0 && co.lambda_inj <= combine::kLambdaMax)) ++s.clamp_violations;
    }

    // Complement identity on fresh generic pairs whenever neither call clamps.
    const std::vector<double> a = random_vector(n, rng), b = random_vector(n, rng);
    const double r12 = raw_lambda_star(a, b), r21 = raw_lambda_star(b, a);
    if (r12 > 0.0 && r12 < 1.0 && r21 > 0.0 && r21 < 1.0) {
      ++s.complement_checked;
      if (std::abs(combine::lambda_star(a, b) + combine::lambda_star(b, a) - 1.0) > 1e-10) {
        ++s.complement_violations;
      }
    }

    const double k = scale(rng);
    std::vector<double> ka = a, kb = b;
    for (auto& x : ka) x *= k;
    for (auto& x : kb) x *= k;
    if (std::abs(combine::lambda_star(ka, kb) - combine::lambda_star(a, b)) > 1e-10) {
      ++s.homogeneity_violations;
    }

    for (auto f : {combine::Formula::Paper, combine::Formula::MinNorm}) {
      const auto out = combine::add_com({a}, {b}, f)[0];
      // out = a + w (b - a) with w recovered by least squares, then checked.
      double num = 0.0, den = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        num += (out[j] - a[j]) * (b[j] - a[j]);
        den += (b[j] - a[j]) * (b[j] - a[j]);
      }
      const double w = den > 0.0 ? num / den : 0.5;
      double off = 0.0;
      for (std::size_t j = 0; j < n; ++j) off = std::max(off, std::abs(a[j] + w * (b[j] - a[j]) - out[j]));
      if (w < -1e-12 || w > 1.0 + 1e-12 || off > 1e-10 * (1.0 + std::sqrt(den))) ++s.segment_violations;
    }

    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += a[j] * b[j];
    if (dot >= 0.0 && r12 > 0.0 && r12 < 1.0) {
      ++s.acute_checked;
      const auto out = combine::add_com({a}, {b})[0];
      double da = 0.0, db = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        da += out[j] * a[j];
        db += out[j] * b[j];
      }
      if (da < -1e-12 || db < -1e-12) ++s.acute_violations;
    }

    const std::vector<double> zero(n, 0.0);
    for (auto f : {combine::Formula::Paper, combine::Formula::MinNorm}) {
      if (combine::add_inj({v1}, {zero}, f)[0] != v1) ++s.silent_violations;
    }
  }
  return s;
}

}  // namespace micn::testing
