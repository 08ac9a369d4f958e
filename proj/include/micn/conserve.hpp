#pragma once

// Jacobian-symmetry machinery for the score field.
//
// A SplitField s(x_e, x_c) reads the encoder path from x_e and every control
// path from x_c. On the diagonal x_e = x_c = x it is the ordinary score, and
// its full Jacobian splits as J = J_e + J_c. All quantities below are built
// from batched vector-Jacobian and Jacobian-vector products; rows are
// independent samples.

#include "micn/autodiff.hpp"
#include "micn/diffusion.hpp"
#include "micn/scorenet.hpp"
#include "micn/synthdata.hpp"

#include <json.hpp>

#include <functional>
#include <optional>
#include <random>
#include <vector>

namespace micn::conserve {

using SplitField = std::function<ad::Tensor(const ad::Tensor& x_e, const ad::Tensor& x_c)>;

enum class Path { Full, Encoder, Control };

/// Score field of a composed model. `t` and each condition batch hold either
/// one row (broadcast to every input row) or exactly as many rows as the
/// inputs. Branches and conditions are matched by position.
SplitField model_field(const BaseModel& base, const NoiseSchedule& schedule,
                       std::vector<const ControlBranch*> branches,
                       std::vector<ConditionBatch> conditions, std::vector<int> t,
                       ComposeOptions options);

/// Field wrapper for a plain vector field (no control path).
SplitField plain_field(std::function<ad::Tensor(const ad::Tensor&)> f);

struct FieldPoint {
  SplitField field;
  RowVector x;
};

inline constexpr int kMaxExactDim = 32;

/// Rows are J^T (row j is J e_j); differentiable with respect to parameters.
ad::Tensor jacobian_rows(const SplitField& field, const RowVector& x, Path path);

/// d x d Jacobian of the selected path at x, built column by column from jvp.
ad::Matrix exact_jacobian(const SplitField& field, const RowVector& x, Path path);

/// 1/2 |J - J^T|_F^2.
double l_qc_exact(const ad::Matrix& J);
/// tr(J J^T) - tr(J J).
double l_qc_trace_form(const ad::Matrix& J);
/// 2 tr(J_e J_c^T) - 2 tr(J_e J_c) + tr(J_c J_c^T) - tr(J_c J_c).
double l_qc_cross_exact(const ad::Matrix& J_e, const ad::Matrix& J_c);

/// k x d matrix of independent +-1 entries.
ad::Matrix rademacher_probes(std::size_t k, int d, std::mt19937_64& rng);

/// Per-row v^T J J^T v - v^T J J v = |J^T v|^2 - (J^T v).(J v) along `path`,
/// as a (rows, 1) tensor. With `create_graph` the result can be
/// differentiated with respect to parameters.
ad::Tensor path_terms(const SplitField& field, const ad::Matrix& x, const ad::Matrix& probes,
                      Path path, bool create_graph = true);

/// Same-probe evaluation of the three Hutchinson integrands.
struct ProbeTerms {
  std::vector<double> full;    // v^T [J J^T - J J] v
  std::vector<double> cross;   // v^T [2 J_e J_c^T - (J_e J_c + J_c J_e) + J_c J_c^T - J_c J_c] v
  std::vector<double> e_only;  // v^T [J_e J_e^T - J_e J_e] v
  std::vector<double> scale;   // magnitude of the products involved, for relative residuals
};

ProbeTerms probe_terms(const SplitField& field, const ad::Matrix& x, const ad::Matrix& probes);

struct Estimate {
  double mean = 0.0;
  double std_error = 0.0;
  std::size_t count = 0;
};

/// Mean and standard error with pairwise summation, so the result does not
/// depend on how the terms were partitioned.
Estimate summarize(std::span<const double> terms);
double pairwise_sum(std::span<const double> v);

/// Hutchinson estimate of L_QC along `path`; `probes` rows are reused at
/// every point.
Estimate hutchinson_qc(std::span<const FieldPoint> points, const ad::Matrix& probes, Path path);

/// Hutchinson estimate of the cross loss (terms touching J_c).
Estimate qc_cross(std::span<const FieldPoint> points, const ad::Matrix& probes);

/// Control-path-only loss, differentiable with respect to control parameters.
ad::Tensor qc_simple(std::span<const FieldPoint> points, const ad::Matrix& probes);

/// Mean over points of 1/2 |J_c - J_c^T|_F^2, exact.
double asym(std::span<const FieldPoint> points);

struct PointAudit {
  double l_qc = 0.0;
  double l_qc_c = 0.0;
  double l_qc_simple = 0.0;
  double e_only = 0.0;
  double je_norm = 0.0;
  double jc_norm = 0.0;
  double decomposition_residual = 0.0;
};

struct ConservReport {
  double l_qc = 0.0;
  double l_qc_est = 0.0;
  double l_qc_c = 0.0;
  double l_qc_simple = 0.0;
  double asym = 0.0;
  double m_hat = 0.0;
  double bound_rhs = 0.0;
  double decomposition_residual = 0.0;  // max over points, relative Frobenius
  double prop2_residual = 0.0;          // max over probes, relative
  std::size_t points = 0;
  std::size_t probes = 0;

  nlohmann::json to_json() const;
};

struct Audit {
  ConservReport report;
  std::vector<PointAudit> per_point;
};

/// Exact Jacobians at every point plus a same-probe Hutchinson pass.
Audit audit(std::span<const FieldPoint> points, std::size_t probes_per_point,
            std::mt19937_64& rng);

struct BoundCheck {
  bool pass = true;
  double min_slack = 0.0;  // smallest rhs - lhs over points and the average
  std::optional<std::size_t> offending_point;
};

/// L_QC^c <= 2 sqrt(2) M sqrt(L_QC^simple) + L_QC^simple, checked at every
/// point and for the averages, with M the largest observed |J_e|_F.
BoundCheck check_bound(const Audit& audit, double tolerance = 1e-8);

/// Relative size of the control-parameter gradient of the encoder-only
/// asymmetry versus that of the control-only asymmetry (exact forms).
struct AssumptionReport {
  double grad_e_only_norm = 0.0;
  double grad_simple_norm = 0.0;
  double ratio = 0.0;
};

AssumptionReport assumption_violation(std::span<const FieldPoint> points,
                                      const NamedTensors& control_params);

}  // namespace micn::conserve
