#include "micn/conserve.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace micn::conserve {

using ad::Matrix;
using ad::Tensor;

namespace {

struct PathInputs {
  Tensor x_e;
  Tensor x_c;
  Tensor wrt;
};

PathInputs path_inputs(const Matrix& x, Path path) {
  const Tensor var = Tensor::variable(x);
  const Tensor cst = Tensor::constant(x);
  switch (path) {
    case Path::Full: return {var, var, var};
    case Path::Encoder: return {var, cst, var};
    case Path::Control: return {cst, var, var};
  }
  return {var, var, var};
}

void check_probes(const Matrix& x, const Matrix& probes) {
  if (x.rows() != probes.rows() || x.cols() != probes.cols()) {
    throw ad::ShapeError("probes must match the evaluation batch shape");
  }
}

Matrix repeat_point(const RowVector& x, ad::Index rows) { return x.replicate(rows, 1); }

double row_dot(const Matrix& a, const Matrix& b, ad::Index r) { return a.row(r).dot(b.row(r)); }

}  // namespace

SplitField model_field(const BaseModel& base, const NoiseSchedule& schedule,
                       std::vector<const ControlBranch*> branches,
                       std::vector<ConditionBatch> conditions, std::vector<int> t,
                       ComposeOptions options) {
  if (branches.size() != conditions.size()) {
    throw std::invalid_argument("model_field: one condition per branch required");
  }
  if (t.empty()) throw std::invalid_argument("model_field: timestep required");
  return [&base, &schedule, branches = std::move(branches), conditions = std::move(conditions),
          t = std::move(t), options = std::move(options)](const Tensor& x_e, const Tensor& x_c) {
    const ad::Index rows = x_e.rows();
    std::vector<int> tt = t.size() == 1 ? std::vector<int>(static_cast<std::size_t>(rows), t[0]) : t;
    std::vector<ConditionBatch> conds;
    conds.reserve(conditions.size());
    for (const auto& c : conditions) conds.push_back(c.rows() == 1 && rows != 1 ? c.repeat(rows) : c);
    std::vector<ControlInput> controls;
    for (std::size_t k = 0; k < branches.size(); ++k) controls.push_back({branches[k], &conds[k]});
    return score_split(base, schedule, controls, x_e, x_c, tt, options);
  };
}

SplitField plain_field(std::function<Tensor(const Tensor&)> f) {
  return [f = std::move(f)](const Tensor& x_e, const Tensor&) { return f(x_e); };
}

Tensor jacobian_rows(const SplitField& field, const RowVector& x, Path path) {
  const auto d = x.size();
  if (d > kMaxExactDim) {
    throw std::invalid_argument("exact Jacobian limited to " + std::to_string(kMaxExactDim) +
                                " dimensions, got " + std::to_string(d));
  }
  const auto in = path_inputs(repeat_point(x, d), path);
  const Tensor s = field(in.x_e, in.x_c);
  return ad::jvp(s, in.wrt, Tensor::constant(Matrix::Identity(d, d)));
}

Matrix exact_jacobian(const SplitField& field, const RowVector& x, Path path) {
  return jacobian_rows(field, x, path).value().transpose();
}

double l_qc_exact(const Matrix& J) {
  if (J.rows() != J.cols()) throw std::invalid_argument("l_qc: Jacobian must be square");
  return 0.5 * (J - J.transpose()).squaredNorm();
}

double l_qc_trace_form(const Matrix& J) {
  if (J.rows() != J.cols()) throw std::invalid_argument("l_qc: Jacobian must be square");
  return (J * J.transpose()).trace() - (J * J).trace();
}

double l_qc_cross_exact(const Matrix& J_e, const Matrix& J_c) {
  return 2.0 * (J_e * J_c.transpose()).trace() - 2.0 * (J_e * J_c).trace() +
         (J_c * J_c.transpose()).trace() - (J_c * J_c).trace();
}

Matrix rademacher_probes(std::size_t k, int d, std::mt19937_64& rng) {
  std::bernoulli_distribution coin(0.5);
  Matrix v(static_cast<ad::Index>(k), d);
  for (ad::Index i = 0; i < v.size(); ++i) v.data()[i] = coin(rng) ? 1.0 : -1.0;
  return v;
}

Tensor path_terms(const SplitField& field, const Matrix& x, const Matrix& probes, Path path,
                  bool create_graph) {
  check_probes(x, probes);
  const auto in = path_inputs(x, path);
  const Tensor s = field(in.x_e, in.x_c);
  const Tensor v = Tensor::constant(probes);
  const Tensor u = ad::vjp(s, in.wrt, v, create_graph);
  Tensor w;
  if (create_graph) {
    w = ad::jvp(s, in.wrt, v);
  } else {
    ad::NoGradGuard g;
    w = ad::jvp(s, in.wrt, v);
  }
  return ad::sub(ad::dot_rows(u, u), ad::dot_rows(u, w));
}

ProbeTerms probe_terms(const SplitField& field, const Matrix& x, const Matrix& probes) {
  check_probes(x, probes);
  const Tensor v = Tensor::constant(probes);
  Matrix u_e, u_c, w_e, w_c, u, w;
  {
    const Tensor x_e = Tensor::variable(x);
    const Tensor x_c = Tensor::variable(x);
    const Tensor s = field(x_e, x_c);
    u_e = ad::vjp(s, x_e, v, false).value();
    u_c = ad::vjp(s, x_c, v, false).value();
    ad::NoGradGuard g;
    w_e = ad::jvp(s, x_e, v).value();
    w_c = ad::jvp(s, x_c, v).value();
  }
  {
    const Tensor xf = Tensor::variable(x);
    const Tensor s = field(xf, xf);
    u = ad::vjp(s, xf, v, false).value();
    ad::NoGradGuard g;
    w = ad::jvp(s, xf, v).value();
  }
  ProbeTerms out;
  const auto n = static_cast<std::size_t>(x.rows());
  out.full.resize(n);
  out.cross.resize(n);
  out.e_only.resize(n);
  out.scale.resize(n);
  for (ad::Index r = 0; r < x.rows(); ++r) {
    const auto k = static_cast<std::size_t>(r);
    out.full[k] = row_dot(u, u, r) - row_dot(u, w, r);
    out.cross[k] = 2.0 * row_dot(u_e, u_c, r) - row_dot(u_e, w_c, r) - row_dot(u_c, w_e, r) +
                   row_dot(u_c, u_c, r) - row_dot(u_c, w_c, r);
    out.e_only[k] = row_dot(u_e, u_e, r) - row_dot(u_e, w_e, r);
    const double m = u_e.row(r).norm() + u_c.row(r).norm() + w_e.row(r).norm() + w_c.row(r).norm();
    out.scale[k] = m * m;
  }
  return out;
}

double pairwise_sum(std::span<const double> v) {
  if (v.size() <= 8) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  const std::size_t half = v.size() / 2;
  return pairwise_sum(v.subspan(0, half)) + pairwise_sum(v.subspan(half));
}

Estimate summarize(std::span<const double> terms) {
  Estimate e;
  e.count = terms.size();
  if (terms.empty()) return e;
  e.mean = pairwise_sum(terms) / static_cast<double>(terms.size());
  if (terms.size() > 1) {
    std::vector<double> sq(terms.size());
    for (std::size_t k = 0; k < terms.size(); ++k) sq[k] = (terms[k] - e.mean) * (terms[k] - e.mean);
    const double var = pairwise_sum(sq) / static_cast<double>(terms.size() - 1);
    e.std_error = std::sqrt(var / static_cast<double>(terms.size()));
  }
  return e;
}

Estimate hutchinson_qc(std::span<const FieldPoint> points, const Matrix& probes, Path path) {
  std::vector<double> all;
  all.reserve(points.size() * static_cast<std::size_t>(probes.rows()));
  for (const auto& p : points) {
    const Tensor terms = path_terms(p.field, repeat_point(p.x, probes.rows()), probes, path, false);
    for (ad::Index r = 0; r < terms.rows(); ++r) all.push_back(terms.value()(r, 0));
  }
  return summarize(all);
}

Estimate qc_cross(std::span<const FieldPoint> points, const Matrix& probes) {
  std::vector<double> all;
  for (const auto& p : points) {
    const auto terms = probe_terms(p.field, repeat_point(p.x, probes.rows()), probes);
    all.insert(all.end(), terms.cross.begin(), terms.cross.end());
  }
  return summarize(all);
}

Tensor qc_simple(std::span<const FieldPoint> points, const Matrix& probes) {
  if (points.empty()) throw std::invalid_argument("qc_simple: no evaluation points");
  Tensor total;
  for (const auto& p : points) {
    const Tensor s = ad::sum_all(
        path_terms(p.field, repeat_point(p.x, probes.rows()), probes, Path::Control, true));
    total = total.defined() ? ad::add(total, s) : s;
  }
  const double n = static_cast<double>(points.size()) * static_cast<double>(probes.rows());
  return ad::affine(total, 1.0 / n, 0.0);
}

double asym(std::span<const FieldPoint> points) {
  std::vector<double> vals;
  vals.reserve(points.size());
  for (const auto& p : points) vals.push_back(l_qc_exact(exact_jacobian(p.field, p.x, Path::Control)));
  return summarize(vals).mean;
}

nlohmann::json ConservReport::to_json() const {
  return {{"l_qc", l_qc},
          {"l_qc_est", l_qc_est},
          {"l_qc_c", l_qc_c},
          {"l_qc_simple", l_qc_simple},
          {"asym", asym},
          {"M_hat", m_hat},
          {"bound_rhs", bound_rhs},
          {"decomposition_residual", decomposition_residual},
          {"prop2_residual", prop2_residual},
          {"points", points},
          {"probes", probes}};
}

Audit audit(std::span<const FieldPoint> points, std::size_t probes_per_point,
            std::mt19937_64& rng) {
  Audit out;
  std::vector<double> l_qc, l_c, simple, est;
  double prop2 = 0.0;
  for (const auto& p : points) {
    const Matrix J = exact_jacobian(p.field, p.x, Path::Full);
    const Matrix Je = exact_jacobian(p.field, p.x, Path::Encoder);
    const Matrix Jc = exact_jacobian(p.field, p.x, Path::Control);
    PointAudit pa;
    pa.l_qc = l_qc_exact(J);
    pa.l_qc_c = l_qc_cross_exact(Je, Jc);
    pa.l_qc_simple = l_qc_exact(Jc);
    pa.e_only = l_qc_exact(Je);
    pa.je_norm = Je.norm();
    pa.jc_norm = Jc.norm();
    const double jn = J.norm();
    const double res = (J - Je - Jc).norm();
    pa.decomposition_residual = jn > 0.0 ? res / jn : res;
    out.per_point.push_back(pa);
    l_qc.push_back(pa.l_qc);
    l_c.push_back(pa.l_qc_c);
    simple.push_back(pa.l_qc_simple);

    if (probes_per_point > 0) {
      const Matrix v = rademacher_probes(probes_per_point, static_cast<int>(p.x.size()), rng);
      const auto terms = probe_terms(p.field, repeat_point(p.x, v.rows()), v);
      est.insert(est.end(), terms.full.begin(), terms.full.end());
      for (std::size_t k = 0; k < terms.full.size(); ++k) {
        const double diff = std::abs(terms.full[k] - terms.cross[k] - terms.e_only[k]);
        prop2 = std::max(prop2, terms.scale[k] > 0.0 ? diff / terms.scale[k] : diff);
      }
    }
  }
  auto& r = out.report;
  r.points = points.size();
  r.probes = probes_per_point;
  r.l_qc = summarize(l_qc).mean;
  r.l_qc_c = summarize(l_c).mean;
  r.l_qc_simple = summarize(simple).mean;
  r.asym = r.l_qc_simple;
  r.l_qc_est = summarize(est).mean;
  for (const auto& pa : out.per_point) {
    r.m_hat = std::max(r.m_hat, pa.je_norm);
    r.decomposition_residual = std::max(r.decomposition_residual, pa.decomposition_residual);
  }
  r.bound_rhs = 2.0 * std::numbers::sqrt2 * r.m_hat * std::sqrt(r.l_qc_simple) + r.l_qc_simple;
  r.prop2_residual = prop2;
  return out;
}

BoundCheck check_bound(const Audit& audit, double tolerance) {
  BoundCheck out;
  const double m = audit.report.m_hat;
  auto rhs = [m](double simple) {
    return 2.0 * std::numbers::sqrt2 * m * std::sqrt(std::max(simple, 0.0)) + simple;
  };
  double min_slack = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < audit.per_point.size(); ++k) {
    const auto& p = audit.per_point[k];
    const double slack = rhs(p.l_qc_simple) - p.l_qc_c;
    // Rounding in the trace form grows with the squared Jacobian norms.
    const double scale = (p.je_norm + p.jc_norm) * (p.je_norm + p.jc_norm);
    const double tol = tolerance + 1e-12 * scale;
    min_slack = std::min(min_slack, slack);
    if (slack < -tol && out.pass) {
      out.pass = false;
      out.offending_point = k;
    }
  }
  const double avg_slack = audit.report.bound_rhs - audit.report.l_qc_c;
  min_slack = std::min(min_slack, avg_slack);
  if (avg_slack < -tolerance * std::max(1.0, std::abs(audit.report.l_qc_c))) out.pass = false;
  out.min_slack = min_slack;
  return out;
}

AssumptionReport assumption_violation(std::span<const FieldPoint> points,
                                      const NamedTensors& control_params) {
  if (points.empty()) throw std::invalid_argument("assumption_violation: no points");
  ad::EnableGradGuard g;
  Tensor e_total, c_total;
  auto asym_of = [](const Tensor& rows) {
    const Tensor a = ad::sub(rows, ad::transpose(rows));
    return ad::affine(ad::sum_all(ad::mul(a, a)), 0.5, 0.0);
  };
  for (const auto& p : points) {
    const Tensor e = asym_of(jacobian_rows(p.field, p.x, Path::Encoder));
    const Tensor c = asym_of(jacobian_rows(p.field, p.x, Path::Control));
    e_total = e_total.defined() ? ad::add(e_total, e) : e;
    c_total = c_total.defined() ? ad::add(c_total, c) : c;
  }
  std::vector<Tensor> wrt;
  for (const auto& [name, t] : control_params) wrt.push_back(t);
  auto norm = [](const std::vector<Tensor>& gs) {
    double s = 0.0;
    for (const auto& gt : gs) s += gt.value().squaredNorm();
    return std::sqrt(s);
  };
  const double n = static_cast<double>(points.size());
  AssumptionReport r;
  r.grad_e_only_norm = norm(ad::gradient(e_total, wrt)) / n;
  r.grad_simple_norm = norm(ad::gradient(c_total, wrt)) / n;
  r.ratio = r.grad_simple_norm > 0.0 ? r.grad_e_only_norm / r.grad_simple_norm : 0.0;
  return r;
}

}  // namespace micn::conserve
