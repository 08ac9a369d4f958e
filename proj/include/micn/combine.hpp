#pragma once

// Balancing coefficients for feature injection and multi-control feature
// combination, derived from the two-vector closed form of the min-norm
// (MGDA) subproblem.

#include "micn/autodiff.hpp"

#include <span>
#include <string_view>
#include <vector>

namespace micn::combine {

inline constexpr double kLambdaMax = 20.0;
/// Below this squared distance the two vectors are treated as identical.
inline constexpr double kDegenerateDistance = 1e-12;

/// `Paper` places lambda* on the second vector (verbatim formulas).
/// `MinNorm` swaps the placement so the combination is the min-norm point.
enum class Formula { Paper, MinNorm };

Formula parse_formula(std::string_view name);
std::string_view formula_name(Formula f);

struct CombineCoefficients {
  double lambda_star = 0.5;  // in [0, 1]
  double lambda_inj = 1.0;   // in [0, kLambdaMax]
};

/// min[1, max[((v2 - v1)^T v2) / |v2 - v1|^2, 0]], or 0.5 when v1 ~ v2.
double lambda_star(std::span<const double> v1, std::span<const double> v2);

/// Injection coefficient from lambda*: lambda* / (1 - lambda*) under `Paper`,
/// (1 - lambda*) / lambda* under `MinNorm`, clamped to [0, kLambdaMax].
double lambda_from_star(double star, Formula formula = Formula::Paper);

double lambda_inj(std::span<const double> v1, std::span<const double> v2,
                  Formula formula = Formula::Paper);

CombineCoefficients coefficients(std::span<const double> v1, std::span<const double> v2,
                                 Formula formula = Formula::Paper);

/// One feature vector per level, for a single sample.
using LevelVectors = std::vector<std::vector<double>>;

/// Level i: f_e[i] + lambda_i(f_e[i], f_c[i]) * f_c[i].
LevelVectors add_inj(const LevelVectors& f_e, const LevelVectors& f_c,
                     Formula formula = Formula::Paper);

/// Level i: (1 - lambda*_i) f1[i] + lambda*_i f2[i] (weights swapped under
/// `MinNorm`).
LevelVectors add_com(const LevelVectors& f1, const LevelVectors& f2,
                     Formula formula = Formula::Paper);

// Batched forms on (samples, width) tensors; coefficients are computed per
// row. With `track_gradient` false the coefficients enter as constants.

ad::Tensor inject(const ad::Tensor& f_e, const ad::Tensor& f_c, Formula formula,
                  bool track_gradient);

ad::Tensor combine_pair(const ad::Tensor& f1, const ad::Tensor& f2, Formula formula,
                        bool track_gradient);

/// Per-row lambda* of two (samples, width) tensors.
std::vector<double> row_lambda_star(const ad::Matrix& v1, const ad::Matrix& v2);

}  // namespace micn::combine
