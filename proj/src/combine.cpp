#include "micn/combine.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace micn::combine {

namespace {

void require_aligned(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw std::invalid_argument(std::string(what) + ": length mismatch (" + std::to_string(a) +
                                " vs " + std::to_string(b) + ")");
  }
}

double raw_star(const double* v1, const double* v2, std::size_t n, bool* degenerate) {
  double num = 0.0;
  double den = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double diff = v2[k] - v1[k];
    num += diff * v2[k];
    den += diff * diff;
  }
  *degenerate = den < kDegenerateDistance;
  return *degenerate ? 0.5 : num / den;
}

double clamp_star(double raw) { return std::min(1.0, std::max(raw, 0.0)); }

// Upper clamp applied before the ratio so the pole at the boundary never
// produces a division by zero; the ratio is monotone so the result matches
// clamping afterwards.
constexpr double kStarCap = kLambdaMax / (1.0 + kLambdaMax);

}  // namespace

Formula parse_formula(std::string_view name) {
  if (name == "paper") return Formula::Paper;
  if (name == "min-norm") return Formula::MinNorm;
  throw std::invalid_argument("unknown combination formula '" + std::string(name) + "'");
}

std::string_view formula_name(Formula f) { return f == Formula::Paper ? "paper" : "min-norm"; }

double lambda_star(std::span<const double> v1, std::span<const double> v2) {
  require_aligned(v1.size(), v2.size(), "lambda_star");
  bool degenerate = false;
  return clamp_star(raw_star(v1.data(), v2.data(), v1.size(), &degenerate));
}

double lambda_from_star(double star, Formula formula) {
  double lam = 0.0;
  if (formula == Formula::Paper) {
    lam = star >= 1.0 ? kLambdaMax : star / (1.0 - star);
  } else {
    lam = star <= 0.0 ? kLambdaMax : (1.0 - star) / star;
  }
  return std::min(kLambdaMax, std::max(lam, 0.0));
}

double lambda_inj(std::span<const double> v1, std::span<const double> v2, Formula formula) {
  return lambda_from_star(lambda_star(v1, v2), formula);
}

CombineCoefficients coefficients(std::span<const double> v1, std::span<const double> v2,
                                 Formula formula) {
  const double star = lambda_star(v1, v2);
  return {star, lambda_from_star(star, formula)};
}

LevelVectors add_inj(const LevelVectors& f_e, const LevelVectors& f_c, Formula formula) {
  require_aligned(f_e.size(), f_c.size(), "add_inj levels");
  LevelVectors out(f_e.size());
  for (std::size_t i = 0; i < f_e.size(); ++i) {
    const double lam = lambda_inj(f_e[i], f_c[i], formula);
    out[i].resize(f_e[i].size());
    for (std::size_t k = 0; k < f_e[i].size(); ++k) out[i][k] = f_e[i][k] + lam * f_c[i][k];
  }
  return out;
}

LevelVectors add_com(const LevelVectors& f1, const LevelVectors& f2, Formula formula) {
  require_aligned(f1.size(), f2.size(), "add_com levels");
  LevelVectors out(f1.size());
  for (std::size_t i = 0; i < f1.size(); ++i) {
    const double star = lambda_star(f1[i], f2[i]);
    const double w2 = formula == Formula::Paper ? star : 1.0 - star;
    out[i].resize(f1[i].size());
    for (std::size_t k = 0; k < f1[i].size(); ++k) {
      out[i][k] = (1.0 - w2) * f1[i][k] + w2 * f2[i][k];
    }
  }
  return out;
}

std::vector<double> row_lambda_star(const ad::Matrix& v1, const ad::Matrix& v2) {
  if (v1.rows() != v2.rows() || v1.cols() != v2.cols()) {
    throw std::invalid_argument("row_lambda_star: shape mismatch");
  }
  std::vector<double> out(static_cast<std::size_t>(v1.rows()));
  for (ad::Index r = 0; r < v1.rows(); ++r) {
    bool degenerate = false;
    out[r] = clamp_star(raw_star(v1.row(r).data(), v2.row(r).data(),
                                 static_cast<std::size_t>(v1.cols()), &degenerate));
  }
  return out;
}

namespace {

// Differentiable per-row lambda*, shape (rows, 1).
ad::Tensor tracked_star(const ad::Tensor& v1, const ad::Tensor& v2) {
  using namespace ad;
  const Tensor diff = sub(v2, v1);
  const Tensor num = dot_rows(diff, v2);
  const Tensor den = dot_rows(diff, diff);
  Matrix degenerate = (den.value().array() < kDegenerateDistance).cast<double>().matrix();
  const Tensor safe_den = add(den, Tensor::constant(degenerate));
  const Tensor raw = div(num, safe_den);
  Matrix keep = (1.0 - degenerate.array()).matrix();
  const Tensor mixed =
      add(mul(raw, Tensor::constant(keep)), Tensor::constant(0.5 * degenerate));
  return clamp(mixed, 0.0, 1.0);
}

ad::Tensor tracked_lambda(const ad::Tensor& star, Formula formula) {
  using namespace ad;
  if (formula == Formula::Paper) {
    const Tensor s = clamp(star, 0.0, kStarCap);
    return div(s, affine(s, -1.0, 1.0));
  }
  const Tensor s = clamp(star, 1.0 - kStarCap, 1.0);
  return div(affine(s, -1.0, 1.0), s);
}

ad::Tensor column(const std::vector<double>& v) {
  ad::Matrix m(static_cast<ad::Index>(v.size()), 1);
  for (std::size_t k = 0; k < v.size(); ++k) m(static_cast<ad::Index>(k), 0) = v[k];
  return ad::Tensor::constant(std::move(m));
}

void require_same_shape(const ad::Tensor& a, const ad::Tensor& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ad::ShapeError(std::string(what) + ": level shapes differ");
  }
}

}  // namespace

ad::Tensor inject(const ad::Tensor& f_e, const ad::Tensor& f_c, Formula formula,
                  bool track_gradient) {
  require_same_shape(f_e, f_c, "inject");
  ad::Tensor lam;
  if (track_gradient) {
    lam = tracked_lambda(tracked_star(f_e, f_c), formula);
  } else {
    auto stars = row_lambda_star(f_e.value(), f_c.value());
    for (double& s : stars) s = lambda_from_star(s, formula);
    lam = column(stars);
  }
  return ad::add(f_e, ad::scale_rows(f_c, lam));
}

ad::Tensor combine_pair(const ad::Tensor& f1, const ad::Tensor& f2, Formula formula,
                        bool track_gradient) {
  require_same_shape(f1, f2, "combine_pair");
  ad::Tensor star = track_gradient ? tracked_star(f1, f2)
                                   : column(row_lambda_star(f1.value(), f2.value()));
  // Paper: f1 + star (f2 - f1). Min-norm: f2 + star (f1 - f2).
  if (formula == Formula::Paper) return ad::add(f1, ad::scale_rows(ad::sub(f2, f1), star));
  return ad::add(f2, ad::scale_rows(ad::sub(f1, f2), star));
}

}  // namespace micn::combine
