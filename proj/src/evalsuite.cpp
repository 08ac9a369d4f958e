#include "micn/evalsuite.hpp"

#include "binary_io.hpp"
#include "micn/conserve.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace micn::eval {

using ad::Matrix;

double total_variance(const Matrix& samples, Region region) {
  if (samples.rows() < 2) throw std::invalid_argument("total_variance: need at least two samples");
  if (region.begin < 0 || region.end > samples.cols() || region.size() <= 0) {
    throw std::invalid_argument("total_variance: region outside the sample dimension");
  }
  double tv = 0.0;
  const double n = static_cast<double>(samples.rows());
  for (int k = region.begin; k < region.end; ++k) {
    const auto col = samples.col(k);
    const double mean = col.mean();
    tv += (col.array() - mean).square().sum() / (n - 1.0);
  }
  return tv;
}

double cycle_l1(const Matrix& samples, const ConditionBatch& conditions) {
  conditions.validate(samples.rows(), static_cast<int>(samples.cols()));
  double sum = 0.0;
  double count = 0.0;
  for (ad::Index i = 0; i < samples.size(); ++i) {
    if (conditions.mask.data()[i] == 1.0) {
      sum += std::abs(samples.data()[i] - conditions.values.data()[i]);
      count += 1.0;
    }
  }
  if (count == 0.0) throw std::invalid_argument("cycle_l1: every condition is silent");
  return sum / count;
}

double median_bandwidth(const Matrix& a, const Matrix& b) {
  const ad::Index total = a.rows() + b.rows();
  if (total < 2) throw std::invalid_argument("median_bandwidth: need at least two rows");
  constexpr ad::Index kMaxRows = 2000;
  const ad::Index stride = (total + kMaxRows - 1) / kMaxRows;
  std::vector<const double*> rows;
  const ad::Index cols = a.rows() > 0 ? a.cols() : b.cols();
  for (ad::Index i = 0; i < total; i += stride) {
    rows.push_back(i < a.rows() ? a.row(i).data() : b.row(i - a.rows()).data());
  }
  std::vector<double> dist;
  dist.reserve(rows.size() * (rows.size() - 1) / 2);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = i + 1; j < rows.size(); ++j) {
      double s = 0.0;
      for (ad::Index k = 0; k < cols; ++k) s += (rows[i][k] - rows[j][k]) * (rows[i][k] - rows[j][k]);
      dist.push_back(std::sqrt(s));
    }
  }
  if (dist.empty()) return 1.0;
  auto mid = dist.begin() + static_cast<std::ptrdiff_t>(dist.size() / 2);
  std::nth_element(dist.begin(), mid, dist.end());
  return *mid > 0.0 ? *mid : 1.0;
}

namespace {

Matrix kernel_matrix(const Matrix& z, double h) {
  const Eigen::VectorXd sq = z.rowwise().squaredNorm();
  Matrix d2 = (-2.0 * z * z.transpose()).colwise() + sq;
  d2.rowwise() += sq.transpose();
  return (-d2.cwiseMax(0.0) / (2.0 * h * h)).array().exp().matrix();
}

/// Unbiased MMD^2 from a pooled kernel matrix and a group assignment.
double mmd_from_kernel(const Matrix& K, const std::vector<ad::Index>& ia,
                       const std::vector<ad::Index>& ib) {
  auto within = [&K](const std::vector<ad::Index>& idx) {
    double s = 0.0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t j = 0; j < idx.size(); ++j) {
        if (i != j) s += K(idx[i], idx[j]);
      }
    }
    const double m = static_cast<double>(idx.size());
    return s / (m * (m - 1.0));
  };
  double cross = 0.0;
  for (auto i : ia) {
    for (auto j : ib) cross += K(i, j);
  }
  cross /= static_cast<double>(ia.size()) * static_cast<double>(ib.size());
  return within(ia) + within(ib) - 2.0 * cross;
}

Matrix pooled(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("mmd: sample dimensions differ");
  if (a.rows() < 2 || b.rows() < 2) throw std::invalid_argument("mmd: need at least two samples per set");
  Matrix z(a.rows() + b.rows(), a.cols());
  z << a, b;
  return z;
}

}  // namespace

MmdResult mmd(const Matrix& a, const Matrix& b, double bandwidth) {
  const Matrix z = pooled(a, b);
  MmdResult r;
  r.bandwidth = bandwidth > 0.0 ? bandwidth : median_bandwidth(a, b);
  const Matrix K = kernel_matrix(z, r.bandwidth);
  std::vector<ad::Index> ia(static_cast<std::size_t>(a.rows()));
  std::vector<ad::Index> ib(static_cast<std::size_t>(b.rows()));
  std::iota(ia.begin(), ia.end(), 0);
  std::iota(ib.begin(), ib.end(), a.rows());
  r.raw = mmd_from_kernel(K, ia, ib);
  r.mmd2 = std::max(r.raw, 0.0);
  return r;
}

PermutationTest permutation_test(const Matrix& a, const Matrix& b, double bandwidth,
                                 std::size_t permutations, std::uint64_t seed) {
  if (permutations == 0) throw std::invalid_argument("permutation_test: need permutations");
  const Matrix z = pooled(a, b);
  const double h = bandwidth > 0.0 ? bandwidth : median_bandwidth(a, b);
  const Matrix K = kernel_matrix(z, h);
  std::vector<ad::Index> idx(static_cast<std::size_t>(z.rows()));
  std::iota(idx.begin(), idx.end(), 0);
  const auto na = static_cast<std::ptrdiff_t>(a.rows());
  auto stat = [&](const std::vector<ad::Index>& order) {
    return mmd_from_kernel(K, {order.begin(), order.begin() + na}, {order.begin() + na, order.end()});
  };
  PermutationTest out;
  out.statistic = stat(idx);
  std::mt19937_64 rng(seed);
  std::vector<double> null;
  null.reserve(permutations);
  std::size_t exceed = 0;
  for (std::size_t p = 0; p < permutations; ++p) {
    std::shuffle(idx.begin(), idx.end(), rng);
    null.push_back(stat(idx));
    if (null.back() >= out.statistic) ++exceed;
  }
  std::sort(null.begin(), null.end());
  auto quantile = [&null](double q) {
    const auto k = static_cast<std::size_t>(std::ceil(q * static_cast<double>(null.size()))) - 1;
    return null[std::min(k, null.size() - 1)];
  };
  out.p_value = static_cast<double>(1 + exceed) / static_cast<double>(1 + permutations);
  out.null_q95 = quantile(0.95);
  out.null_q99 = quantile(0.99);
  return out;
}

ConditionBatch single_conditions(const SyntheticTask& task, ConditionType type, std::size_t n,
                                 std::uint64_t seed) {
  const auto pairs = gen_rebalanced_pairs(task, n, type, seed);
  ConditionBatch c{Matrix(static_cast<ad::Index>(n), task.data_dim),
                   Matrix(static_cast<ad::Index>(n), task.data_dim)};
  for (std::size_t i = 0; i < n; ++i) {
    c.mask.row(static_cast<ad::Index>(i)) = pairs[i].condition.mask;
    c.values.row(static_cast<ad::Index>(i)) = pairs[i].condition.values;
  }
  return c;
}

double total_variance_silent(const BaseModel& base, const NoiseSchedule& schedule,
                             const ControlBranch& branch, const ConditionBatch& conditions,
                             Region region, std::uint64_t seed, const ComposeOptions& options) {
  for (ad::Index r = 0; r < conditions.rows(); ++r) {
    for (int k = region.begin; k < region.end; ++k) {
      if (conditions.mask(r, k) != 0.0) {
        throw std::invalid_argument("total_variance_silent: condition reveals the measured region");
      }
    }
  }
  SampleRequest req;
  req.n = static_cast<std::size_t>(conditions.rows());
  req.seed = seed;
  req.branches = {&branch};
  req.conditions = {conditions};
  req.options = options;
  return total_variance(sample(base, schedule, req), region);
}

namespace {

struct FixedPoints {
  Matrix x0;
  ConditionBatch cond;
  std::vector<int> t;
  Matrix eps;
};

FixedPoints fixed_points(const std::vector<ConditionedSample>& records, std::size_t n,
                         std::uint64_t seed, int d, int t_min, int T) {
  if (records.empty() || n == 0) throw std::invalid_argument("evaluation needs records");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, records.size() - 1);
  std::uniform_int_distribution<int> tdist(t_min, T);
  std::normal_distribution<double> normal(0.0, 1.0);
  FixedPoints p;
  const auto rows = static_cast<ad::Index>(n);
  p.x0.resize(rows, d);
  p.cond = {Matrix(rows, d), Matrix(rows, d)};
  p.eps.resize(rows, d);
  for (ad::Index r = 0; r < rows; ++r) {
    const auto& rec = records[pick(rng)];
    p.x0.row(r) = rec.x0;
    p.cond.mask.row(r) = rec.condition.mask;
    p.cond.values.row(r) = rec.condition.values;
    p.t.push_back(tdist(rng));
    for (int k = 0; k < d; ++k) p.eps(r, k) = normal(rng);
  }
  return p;
}

}  // namespace

double held_out_dsm(const RestoredModel& model, const std::vector<ConditionedSample>& records,
                    std::size_t n, std::uint64_t seed, const ComposeOptions& options) {
  const int d = model.base.config().data_dim;
  FixedPoints p = fixed_points(records, n, seed, d, 0, model.schedule.T);
  DiffusionBatch b;
  b.x0 = p.x0;
  b.t = p.t;
  b.eps = p.eps;
  b.xt = perturb(p.x0, p.t, p.eps, model.schedule);
  b.weight.assign(n, 1.0);
  ad::NoGradGuard g;
  std::vector<ControlInput> controls;
  if (model.branch) controls.push_back({&*model.branch, &p.cond});
  return dsm_loss(b, model.base, controls, options).item();
}

double held_out_asym(const RestoredModel& model, const std::vector<ConditionedSample>& records,
                     std::size_t n, std::uint64_t seed, const ComposeOptions& options) {
  if (!model.branch) throw std::invalid_argument("asym: checkpoint has no control branch");
  const int d = model.base.config().data_dim;
  FixedPoints p = fixed_points(records, n, seed, d, 1, model.schedule.T);
  const Matrix xt = perturb(p.x0, p.t, p.eps, model.schedule);
  std::vector<conserve::FieldPoint> points;
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<ad::Index>(i);
    ConditionBatch c{p.cond.mask.row(r), p.cond.values.row(r)};
    points.push_back({conserve::model_field(model.base, model.schedule, {&*model.branch}, {c},
                                            {p.t[i]}, options),
                      xt.row(r)});
  }
  return conserve::asym(points);
}

// ----------------------------------------------------------------- report

double EvalReport::value(std::string_view scenario, std::string_view metric, std::string_view key,
                         std::uint64_t seed) const {
  for (const auto& r : rows) {
    if (r.scenario == scenario && r.metric == metric && r.key == key && r.seed == seed) return r.value;
  }
  throw std::out_of_range("report has no " + std::string(metric) + " for " + std::string(scenario));
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json rs = nlohmann::json::array();
  for (const auto& r : rows) {
    rs.push_back({{"scenario", r.scenario},
                  {"seed", r.seed},
                  {"metric", r.metric},
                  {"key", r.key},
                  {"value", r.value},
                  {"count", r.count}});
  }
  return {{"experiment", experiment}, {"config", config}, {"summary", summary}, {"rows", rs}};
}

std::string EvalReport::to_csv() const {
  std::string out = "scenario,seed,metric,key,value,count\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.17g", r.value);
    out += r.scenario + "," + std::to_string(r.seed) + "," + r.metric + "," + r.key + "," + buf +
           "," + std::to_string(r.count) + "\n";
  }
  return out;
}

void write_report(const EvalReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  io::write_file_atomic(dir / "report.json", report.to_json().dump(2) + "\n");
  io::write_file_atomic(dir / "metrics.csv", report.to_csv());
}

Checkpoint require_checkpoint(const std::filesystem::path& path, const std::string& role) {
  if (path.empty() || !std::filesystem::exists(path)) {
    throw std::runtime_error("missing checkpoint for " + role + ": '" + path.string() +
                             "' does not exist; train that run first (micn train ...)");
  }
  return load_checkpoint(path);
}

// ------------------------------------------------------------ experiments

namespace {

SyntheticTask task_of(const nlohmann::json& config) {
  return config.contains("task") ? SyntheticTask::from_json(config.at("task")) : SyntheticTask{};
}

ComposeOptions options_of(const Checkpoint& c) { return TrainConfig::from_json(c.config).compose(); }

ConditionType type_of(const Checkpoint& c, ConditionType fallback) {
  const std::string t = c.extra.value("condition_type", std::string());
  if (t == "A") return ConditionType::A;
  if (t == "B") return ConditionType::B;
  return fallback;
}

ConditionType other(ConditionType t) { return t == ConditionType::A ? ConditionType::B : ConditionType::A; }
std::string type_name(ConditionType t) { return t == ConditionType::A ? "A" : "B"; }

std::vector<ConditionedSample> evaluation_records(const nlohmann::json& config,
                                                  const SyntheticTask& task, ConditionType type,
                                                  std::uint64_t seed) {
  if (config.contains("dataset")) {
    return select_records(read_dataset(config.at("dataset").get<std::string>()).records,
                          type_name(type));
  }
  return gen_rebalanced_pairs(task, config.value("records", std::size_t{4096}), type,
                              stream_seed(seed, 11));
}

EvalReport single_silent_tv(const nlohmann::json& config) {
  const SyntheticTask task = task_of(config);
  const auto n = config.value("n", std::size_t{500});
  const auto seed = config.value("seed", std::uint64_t{0});
  EvalReport rep;
  nlohmann::json tv = nlohmann::json::object();
  for (const auto& [name, path] : config.at("runs").items()) {
    const Checkpoint ckpt = require_checkpoint(path.get<std::string>(), "run '" + name + "'");
    const RestoredModel m = restore(ckpt);
    if (!m.branch) throw std::invalid_argument("run '" + name + "' has no control branch");
    const ConditionType type = type_of(ckpt, ConditionType::A);
    const Region region = region_of(other(type), task.data_dim);
    const ConditionBatch cond = single_conditions(task, type, n, stream_seed(seed, 5));
    const double v = total_variance_silent(m.base, m.schedule, *m.branch, cond, region,
                                           stream_seed(seed, 6), options_of(ckpt));
    rep.rows.push_back({name, seed, "total_variance_silent", type_name(other(type)), v, n});
    tv[name] = v;
  }
  rep.summary["total_variance_silent"] = tv;
  rep.summary["region_size"] = task.data_dim / 2;
  rep.summary["ground_truth_total_variance"] = task.data_dim / 2 * task.mixture_variance();
  if (tv.contains("rebalanced") && tv.contains("biased")) {
    const double b = tv["biased"].get<double>();
    rep.summary["ratio"] = b > 0.0 ? tv["rebalanced"].get<double>() / b
                                   : std::numeric_limits<double>::infinity();
  }
  return rep;
}

EvalReport asym_two_stage(const nlohmann::json& config) {
  const SyntheticTask task = task_of(config);
  const auto points = config.value("points", std::size_t{50});
  const auto dsm_n = config.value("dsm_samples", std::size_t{4096});
  const auto seed = config.value("seed", std::uint64_t{0});
  EvalReport rep;
  std::map<std::string, std::pair<double, double>> got;
  for (const char* role : {"stage1", "stage2"}) {
    const Checkpoint ckpt = require_checkpoint(config.at(role).get<std::string>(), role);
    const RestoredModel m = restore(ckpt);
    const ConditionType type = type_of(ckpt, ConditionType::A);
    const auto records = evaluation_records(config, task, type, seed);
    const ComposeOptions opts = options_of(ckpt);
    const double a = held_out_asym(m, records, points, stream_seed(seed, 3), opts);
    const double l = held_out_dsm(m, records, dsm_n, stream_seed(seed, 4), opts);
    rep.rows.push_back({role, seed, "asym", "", a, points});
    rep.rows.push_back({role, seed, "dsm_loss", "", l, dsm_n});
    got[role] = {a, l};
  }
  const auto [a1, l1] = got["stage1"];
  const auto [a2, l2] = got["stage2"];
  rep.summary = {{"asym_stage1", a1},
                 {"asym_stage2", a2},
                 {"asym_ratio", a1 > 0.0 ? a2 / a1 : 0.0},
                 {"dsm_stage1", l1},
                 {"dsm_stage2", l2},
                 {"dsm_degradation", l1 > 0.0 ? (l2 - l1) / l1 : 0.0}};
  return rep;
}

/// Values of every coordinate that neither condition reveals, restricted to
/// `region`, as one column.
Matrix silent_values(const Matrix& x, const ConditionBatch& a, const ConditionBatch& b, Region region) {
  std::vector<double> v;
  for (ad::Index r = 0; r < x.rows(); ++r) {
    for (int k = region.begin; k < region.end; ++k) {
      if (a.mask(r, k) == 0.0 && b.mask(r, k) == 0.0) v.push_back(x(r, k));
    }
  }
  return Eigen::Map<const Matrix>(v.data(), static_cast<ad::Index>(v.size()), 1);
}

Matrix mixture_column(const SyntheticTask& task, ad::Index count, std::uint64_t seed) {
  const ad::Index rows = (count + task.data_dim - 1) / task.data_dim;
  const Matrix g = gen_ground_truth(task, static_cast<std::size_t>(rows), seed);
  return Eigen::Map<const Matrix>(g.data(), count, 1);
}

EvalReport multi_combo(const nlohmann::json& config) {
  const SyntheticTask task = task_of(config);
  const auto n = config.value("n", std::size_t{500});
  const auto seeds = config.value("seeds", std::vector<std::uint64_t>{0});
  const Region ra = region_of(ConditionType::A, task.data_dim);
  const Region rb = region_of(ConditionType::B, task.data_dim);
  const Region all{0, task.data_dim};
  EvalReport rep;
  nlohmann::json means = nlohmann::json::object();

  struct Variant {
    std::string name;
    std::vector<Checkpoint> ckpts;
    std::vector<RestoredModel> models;
    ComposeOptions options;
  };
  std::vector<Variant> variants;
  for (const auto& [name, spec] : config.at("variants").items()) {
    Variant v;
    v.name = name;
    const auto paths = spec.at("branches").get<std::vector<std::string>>();
    if (paths.size() != 2) throw std::invalid_argument("variant '" + name + "' needs two branches");
    for (std::size_t k = 0; k < paths.size(); ++k) {
      v.ckpts.push_back(require_checkpoint(paths[k], "variant '" + name + "' branch " + std::to_string(k)));
      v.models.push_back(restore(v.ckpts.back()));
      if (!v.models.back().branch) throw std::invalid_argument(paths[k] + " has no control branch");
    }
    for (const auto& [pname, t] : v.models[0].base.parameters()) {
      if (*v.ckpts[1].find(pname) != t.value()) {
        throw std::invalid_argument("variant '" + name + "': branches were trained on different base models");
      }
    }
    v.options.mode = parse_mode(spec.value("mode", std::string("minimal-impact")));
    v.options.formula = combine::parse_formula(spec.value("formula", std::string("paper")));
    variants.push_back(std::move(v));
  }

  for (const auto seed : seeds) {
    const auto layout = gen_multi_condition(task, n, stream_seed(seed, 8));
    const auto rows = static_cast<ad::Index>(n);
    ConditionBatch ca{Matrix(rows, task.data_dim), Matrix(rows, task.data_dim)};
    ConditionBatch cb = ca;
    for (ad::Index r = 0; r < rows; ++r) {
      ca.mask.row(r) = layout[r].a.mask;
      ca.values.row(r) = layout[r].a.values;
      cb.mask.row(r) = layout[r].b.mask;
      cb.values.row(r) = layout[r].b.values;
    }
    const Matrix truth = gen_ground_truth(task, n, stream_seed(seed, 9));
    for (const auto& v : variants) {
      SampleRequest req;
      req.n = n;
      req.seed = stream_seed(seed, 7);
      req.options = v.options;
      for (std::size_t k = 0; k < 2; ++k) {
        const ConditionType t = type_of(v.ckpts[k], k == 0 ? ConditionType::A : ConditionType::B);
        req.branches.push_back(&*v.models[k].branch);
        req.conditions.push_back(t == ConditionType::A ? ca : cb);
      }
      const Matrix x = sample(v.models[0].base, v.models[0].schedule, req);
      const double la = cycle_l1(x, ca);
      const double lb = cycle_l1(x, cb);
      rep.rows.push_back({v.name, seed, "cycle_l1", "A", la, static_cast<std::size_t>(ca.mask.sum())});
      rep.rows.push_back({v.name, seed, "cycle_l1", "B", lb, static_cast<std::size_t>(cb.mask.sum())});
      for (const auto& [key, region] : {std::pair{"silent", all}, {"silent-A", ra}, {"silent-B", rb}}) {
        const Matrix s = silent_values(x, ca, cb, region);
        if (s.rows() < 2) continue;
        const Matrix ref = mixture_column(task, s.rows(), stream_seed(seed, 10));
        const double h = median_bandwidth(ref, Matrix(0, 1));
        rep.rows.push_back({v.name, seed, "mmd", key, mmd(s, ref, h).mmd2, static_cast<std::size_t>(s.rows())});
      }
      rep.rows.push_back({v.name, seed, "mmd", "full", mmd(x, truth).mmd2, n});
      auto& m = means[v.name];
      for (const char* key : {"cycle_l1_A", "cycle_l1_B", "mmd_silent"}) {
        if (!m.contains(key)) m[key] = 0.0;
      }
      m["cycle_l1_A"] = m["cycle_l1_A"].get<double>() + la / static_cast<double>(seeds.size());
      m["cycle_l1_B"] = m["cycle_l1_B"].get<double>() + lb / static_cast<double>(seeds.size());
      m["mmd_silent"] = m["mmd_silent"].get<double>() +
                        rep.value(v.name, "mmd", "silent", seed) / static_cast<double>(seeds.size());
    }
  }
  rep.summary["means"] = means;
  return rep;
}

}  // namespace

EvalReport run_experiment(const std::string& name, const nlohmann::json& config) {
  EvalReport rep;
  if (name == "single-silent-tv") rep = single_silent_tv(config);
  else if (name == "asym-two-stage") rep = asym_two_stage(config);
  else if (name == "multi-combo") rep = multi_combo(config);
  else throw std::invalid_argument("unknown experiment '" + name +
                                   "' (expected single-silent-tv, asym-two-stage or multi-combo)");
  rep.experiment = name;
  rep.config = config;
  return rep;
}

}  // namespace micn::eval
