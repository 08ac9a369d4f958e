#include "micn/trainer.hpp"

#include "binary_io.hpp"
#include "micn/conserve.hpp"

#include <chrono>
#include <cmath>
#include <set>
#include <sstream>

namespace micn {

using ad::Matrix;
using ad::Tensor;

namespace {

constexpr std::string_view kCheckpointMagic = "MICNCKPT";

std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void rng_from_string(std::mt19937_64& rng, const std::string& s) {
  std::istringstream is(s);
  is >> rng;
  if (!is) throw FormatError("checkpoint: unreadable RNG state");
}

void assign(const NamedTensors& params, const Checkpoint& ckpt) {
  for (const auto& [name, t] : params) {
    const Matrix* m = ckpt.find(name);
    if (m == nullptr) throw ShapeMismatchError("checkpoint: missing tensor '" + name + "'");
    if (m->rows() != t.rows() || m->cols() != t.cols()) {
      throw ShapeMismatchError("checkpoint: tensor '" + name + "' is " + std::to_string(m->rows()) +
                               "x" + std::to_string(m->cols()) + ", model expects " +
                               std::to_string(t.rows()) + "x" + std::to_string(t.cols()));
    }
    Tensor(t).leaf_value() = *m;
  }
}

bool all_finite(const std::vector<Tensor>& grads) {
  for (const auto& g : grads) {
    if (!g.value().allFinite()) return false;
  }
  return true;
}

}  // namespace

// ------------------------------------------------------------------ Adam

void adam_step(std::span<const Tensor> params, std::span<const Matrix> grads, AdamState& state,
               const AdamOptions& options) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam: one gradient per parameter");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(Matrix::Zero(p.rows(), p.cols()));
      state.v.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam: state size mismatch");
  ++state.step;
  const double c1 = 1.0 - std::pow(options.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(options.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Matrix& g = grads[k];
    Matrix& w = Tensor(params[k]).leaf_value();
    if (g.rows() != w.rows() || g.cols() != w.cols() || state.m[k].rows() != w.rows() ||
        state.m[k].cols() != w.cols()) {
      throw ad::ShapeError("adam: gradient " + std::to_string(k) + " does not match its parameter");
    }
    state.m[k] = options.beta1 * state.m[k] + (1.0 - options.beta1) * g;
    state.v[k] = options.beta2 * state.v[k] + (1.0 - options.beta2) * g.cwiseProduct(g);
    w.array() -= options.lr * (state.m[k].array() / c1) /
                 ((state.v[k].array() / c2).sqrt() + options.eps);
  }
}

// ---------------------------------------------------------------- config

Stage parse_stage(std::string_view name) {
  if (name == "base" || name == "0") return Stage::Base;
  if (name == "1") return Stage::One;
  if (name == "2") return Stage::Two;
  throw std::invalid_argument("unknown stage '" + std::string(name) + "' (expected base, 1 or 2)");
}

std::string_view stage_name(Stage stage) {
  switch (stage) {
    case Stage::Base: return "base";
    case Stage::One: return "1";
    case Stage::Two: return "2";
  }
  return "base";
}

nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"data_dim", c.data_dim},
          {"levels", c.levels},
          {"widths", c.widths},
          {"time_dim", c.time_dim},
          {"timesteps", c.timesteps}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "data_dim") c.data_dim = value.get<int>();
    else if (key == "levels") c.levels = value.get<int>();
    else if (key == "widths") c.widths = value.get<std::vector<int>>();
    else if (key == "time_dim") c.time_dim = value.get<int>();
    else if (key == "timesteps") c.timesteps = value.get<int>();
    else throw std::invalid_argument("model config: unknown key '" + key + "'");
  }
  if (!j.contains("widths") && j.contains("levels")) c.widths.assign(c.levels + 1, c.widths.front());
  c.validate();
  return c;
}

TrainConfig TrainConfig::recipe(Stage stage) {
  TrainConfig c;
  c.stage = stage;
  switch (stage) {
    case Stage::Base:
      c.steps = 5000;
      c.lr = 1e-3;
      break;
    case Stage::One:
      c.steps = 2000;
      c.lr = 1e-3;
      break;
    case Stage::Two:
      c.steps = 2000;
      c.lr = 3e-4;
      break;
  }
  return c;
}

void TrainConfig::validate() const {
  if (steps < 0) throw std::invalid_argument("train: steps must be >= 0");
  if (batch <= 0) throw std::invalid_argument("train: batch must be positive");
  if (!(lr > 0.0)) throw std::invalid_argument("train: lr must be positive");
  if (!(qc_coef >= 0.0)) throw std::invalid_argument("train: qc_coef must be >= 0");
  if (probes <= 0) throw std::invalid_argument("train: probes must be positive");
  if (!condition_type.empty() && condition_type != "A" && condition_type != "B") {
    throw std::invalid_argument("train: condition_type must be A, B or empty");
  }
  if (!(zero_std >= 0.0)) throw std::invalid_argument("train: zero_std must be >= 0");
  model.validate();
}

ComposeOptions TrainConfig::compose() const {
  ComposeOptions o;
  o.mode = mode;
  o.formula = formula;
  o.lambda_gradient = lambda_gradient;
  return o;
}

nlohmann::json TrainConfig::to_json() const {
  return {{"stage", stage_name(stage)},
          {"steps", steps},
          {"batch", batch},
          {"lr", lr},
          {"qc_coef", qc_coef},
          {"probes", probes},
          {"seed", seed},
          {"dataset", dataset},
          {"condition_type", condition_type},
          {"mode", mode_name(mode)},
          {"formula", combine::formula_name(formula)},
          {"lambda_gradient", lambda_gradient},
          {"model", model_config_to_json(model)},
          {"schedule", schedule_kind_name(schedule)},
          {"zero_std", zero_std}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("train config must be a JSON object");
  Stage stage = Stage::One;
  if (j.contains("stage")) {
    const auto& s = j.at("stage");
    stage = parse_stage(s.is_string() ? s.get<std::string>() : std::to_string(s.get<int>()));
  }
  TrainConfig c = recipe(stage);
  for (const auto& [key, value] : j.items()) {
    if (key == "stage") continue;
    else if (key == "steps") c.steps = value.get<std::int64_t>();
    else if (key == "batch") c.batch = value.get<int>();
    else if (key == "lr") c.lr = value.get<double>();
    else if (key == "qc_coef") c.qc_coef = value.get<double>();
    else if (key == "probes") c.probes = value.get<int>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "dataset") c.dataset = value.get<std::string>();
    else if (key == "condition_type") c.condition_type = value.get<std::string>();
    else if (key == "mode") c.mode = parse_mode(value.get<std::string>());
    else if (key == "formula") c.formula = combine::parse_formula(value.get<std::string>());
    else if (key == "lambda_gradient") c.lambda_gradient = value.get<bool>();
    else if (key == "model") c.model = model_config_from_json(value);
    else if (key == "schedule") c.schedule = parse_schedule_kind(value.get<std::string>());
    else if (key == "zero_std") c.zero_std = value.get<double>();
    else throw std::invalid_argument("train config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

// ------------------------------------------------------------ checkpoint

const Matrix* Checkpoint::find(std::string_view name) const {
  for (const auto& [n, m] : tensors) {
    if (n == name) return &m;
  }
  return nullptr;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json dir = nlohmann::json::array();
  std::uint64_t offset = 0;
  std::set<std::string> seen;
  for (const auto& [name, m] : ckpt.tensors) {
    if (!seen.insert(name).second) throw std::invalid_argument("checkpoint: duplicate tensor " + name);
    dir.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(m.size()) * sizeof(double);
  }
  const nlohmann::json header = {{"format", "micn-checkpoint"},
                                 {"model", model_config_to_json(ckpt.model)},
                                 {"schedule", {{"kind", schedule_kind_name(ckpt.schedule)},
                                               {"T", ckpt.model.timesteps}}},
                                 {"stage", stage_name(ckpt.stage)},
                                 {"step", ckpt.step},
                                 {"config", ckpt.config},
                                 {"extra", ckpt.extra},
                                 {"rng", ckpt.rng_state},
                                 {"qc_rng", ckpt.qc_rng_state},
                                 {"adam_step", ckpt.adam_step},
                                 {"payload_bytes", offset},
                                 {"tensors", dir}};
  const std::string text = header.dump();
  std::string buf;
  buf.reserve(kCheckpointMagic.size() + 12 + text.size() + offset);
  io::append_bytes(buf, kCheckpointMagic.data(), kCheckpointMagic.size());
  io::append_pod<std::uint32_t>(buf, kCheckpointVersion);
  io::append_pod<std::uint64_t>(buf, text.size());
  buf += text;
  for (const auto& [name, m] : ckpt.tensors) {
    io::append_doubles(buf, std::span<const double>(m.data(), static_cast<std::size_t>(m.size())));
  }
  return buf;
}

Checkpoint decode_checkpoint(const std::string& bytes, const std::string& what) {
  io::Reader in(bytes);
  in.expect_magic(kCheckpointMagic, what);
  const auto version = in.pod<std::uint32_t>(what);
  if (version != kCheckpointVersion) {
    throw VersionError(what + ": format version " + std::to_string(version) + ", this build reads " +
                       std::to_string(kCheckpointVersion));
  }
  const auto len = in.pod<std::uint64_t>(what);
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(in.bytes(len, what));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(what + ": malformed header: " + e.what());
  }
  Checkpoint c;
  try {
    c.model = model_config_from_json(h.at("model"));
    c.schedule = parse_schedule_kind(h.at("schedule").at("kind").get<std::string>());
    c.stage = parse_stage(h.at("stage").get<std::string>());
    c.step = h.at("step").get<std::int64_t>();
    c.config = h.at("config");
    c.extra = h.at("extra");
    c.rng_state = h.at("rng").get<std::string>();
    c.qc_rng_state = h.at("qc_rng").get<std::string>();
    c.adam_step = h.at("adam_step").get<std::int64_t>();
    const auto payload = h.at("payload_bytes").get<std::uint64_t>();
    if (in.remaining() < payload) throw TruncatedError(what + ": payload is truncated");
    if (in.remaining() > payload) throw FormatError(what + ": trailing bytes after the payload");
    std::uint64_t expected = 0;
    for (const auto& e : h.at("tensors")) {
      const auto shape = e.at("shape").get<std::vector<ad::Index>>();
      if (shape.size() != 2 || shape[0] < 0 || shape[1] < 0) {
        throw FormatError(what + ": bad shape for " + e.at("name").get<std::string>());
      }
      if (e.at("offset").get<std::uint64_t>() != expected) {
        throw FormatError(what + ": tensor offsets are not contiguous");
      }
      Matrix m(shape[0], shape[1]);
      in.doubles(std::span<double>(m.data(), static_cast<std::size_t>(m.size())), what);
      expected += static_cast<std::uint64_t>(m.size()) * sizeof(double);
      c.tensors.emplace_back(e.at("name").get<std::string>(), std::move(m));
    }
    if (expected != payload) throw FormatError(what + ": tensor directory disagrees with payload size");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + ": bad header field: " + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(what + ": " + e.what());
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  io::write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw std::runtime_error("checkpoint not found: " + path.string());
  return decode_checkpoint(io::read_file(path), "checkpoint " + path.string());
}

RestoredModel restore(const Checkpoint& ckpt) {
  RestoredModel r;
  r.schedule = make_schedule(ckpt.model.timesteps, ckpt.schedule);
  r.base = BaseModel::zeros(ckpt.model);
  assign(r.base.parameters(), ckpt);
  if (ckpt.has_branch()) {
    std::mt19937_64 unused(0);
    r.branch = ControlBranch::init(r.base, unused);
    assign(r.branch->parameters(), ckpt);
  }
  return r;
}

// -------------------------------------------------------------- training

nlohmann::json StepRecord::to_json() const {
  nlohmann::json j = {{"step", step}, {"dsm_loss", dsm_loss}, {"wall_ms", wall_ms}};
  j["qc_simple"] = qc_simple ? nlohmann::json(*qc_simple) : nlohmann::json(nullptr);
  return j;
}

std::vector<ConditionedSample> select_records(const std::vector<ConditionedSample>& records,
                                              const std::string& condition_type) {
  if (condition_type.empty()) return records;
  const ConditionType want = condition_type == "A" ? ConditionType::A : ConditionType::B;
  std::vector<ConditionedSample> out;
  for (const auto& r : records) {
    if (r.type == want) out.push_back(r);
  }
  return out;
}

namespace {

struct RunState {
  BaseModel base;
  std::optional<ControlBranch> branch;
  AdamState adam;
  std::mt19937_64 rng;
  std::mt19937_64 qc_rng;
  std::int64_t step = 0;
};

NamedTensors trainable(const RunState& s, Stage stage) {
  return stage == Stage::Base ? s.base.parameters() : s.branch->parameters();
}

Checkpoint snapshot(const RunState& s, const TrainConfig& config) {
  Checkpoint c;
  c.model = config.model;
  c.schedule = config.schedule;
  c.stage = config.stage;
  c.step = s.step;
  c.config = config.to_json();
  c.extra = {{"condition_type", config.condition_type}, {"mode", mode_name(config.mode)}};
  c.rng_state = rng_to_string(s.rng);
  c.qc_rng_state = rng_to_string(s.qc_rng);
  c.adam_step = s.adam.step;
  for (const auto& [name, t] : s.base.parameters()) c.tensors.emplace_back(name, t.value());
  if (s.branch) {
    for (const auto& [name, t] : s.branch->parameters()) c.tensors.emplace_back(name, t.value());
  }
  const NamedTensors params = trainable(s, config.stage);
  for (std::size_t k = 0; k < s.adam.m.size(); ++k) {
    c.tensors.emplace_back("adam.m." + params[k].first, s.adam.m[k]);
  }
  for (std::size_t k = 0; k < s.adam.v.size(); ++k) {
    c.tensors.emplace_back("adam.v." + params[k].first, s.adam.v[k]);
  }
  return c;
}

RunState start(const TrainConfig& config, const Checkpoint* init) {
  RunState s;
  const bool resume = init != nullptr && init->stage == config.stage;
  if (init != nullptr) {
    if (!(init->model == config.model) || init->schedule != config.schedule) {
      throw std::invalid_argument("train: init checkpoint has a different model or schedule");
    }
  }
  std::mt19937_64 init_rng(stream_seed(config.seed, 1));
  switch (config.stage) {
    case Stage::Base:
      if (init != nullptr && !resume) {
        throw std::invalid_argument("train: the base stage can only resume a base checkpoint");
      }
      s.base = resume ? restore(*init).base : BaseModel::init(config.model, init_rng);
      break;
    case Stage::One:
      if (init == nullptr || init->stage == Stage::Two) {
        throw std::invalid_argument("train: stage 1 needs a base checkpoint (train --stage base first)");
      }
      if (resume) {
        auto r = restore(*init);
        s.base = std::move(r.base);
        s.branch = std::move(r.branch);
      } else {
        s.base = restore(*init).base;
        s.branch = ControlBranch::init(s.base, init_rng, config.zero_std);
      }
      break;
    case Stage::Two:
      if (init == nullptr || init->stage == Stage::Base) {
        throw std::invalid_argument("train: stage 2 needs a stage-1 checkpoint (train --stage 1 first)");
      }
      {
        auto r = restore(*init);
        s.base = std::move(r.base);
        s.branch = std::move(r.branch);
      }
      break;
  }
  s.base.set_requires_grad(config.stage == Stage::Base);
  if (s.branch) s.branch->set_requires_grad(true);

  if (resume) {
    rng_from_string(s.rng, init->rng_state);
    rng_from_string(s.qc_rng, init->qc_rng_state);
    s.step = init->step;
    s.adam.step = init->adam_step;
    for (const auto& [name, t] : trainable(s, config.stage)) {
      const Matrix* m = init->find("adam.m." + name);
      const Matrix* v = init->find("adam.v." + name);
      if (m == nullptr || v == nullptr) {
        if (init->adam_step != 0) throw ShapeMismatchError("checkpoint: missing Adam state for " + name);
        s.adam.m.clear();
        s.adam.v.clear();
        break;
      }
      s.adam.m.push_back(*m);
      s.adam.v.push_back(*v);
    }
  } else {
    s.rng.seed(stream_seed(config.seed, 0));
    s.qc_rng.seed(stream_seed(config.seed, 2));
  }
  return s;
}

}  // namespace

Checkpoint train(const TrainConfig& config, const std::vector<ConditionedSample>& data,
                 const Checkpoint* init, const LogSink& log) {
  config.validate();
  const auto records = select_records(data, config.condition_type);
  if (records.empty()) throw std::invalid_argument("train: dataset has no usable records");
  const int d = config.model.data_dim;
  if (records.front().x0.size() != d) {
    throw std::invalid_argument("train: dataset dimension " + std::to_string(records.front().x0.size()) +
                                " differs from the model's " + std::to_string(d));
  }
  const NoiseSchedule schedule = make_schedule(config.model.timesteps, config.schedule);
  RunState s = start(config, init);
  const NamedTensors named = trainable(s, config.stage);
  std::vector<Tensor> params;
  for (const auto& [name, t] : named) params.push_back(t);

  const ComposeOptions options = config.compose();
  const auto n = static_cast<ad::Index>(config.batch);
  const auto clock_start = std::chrono::steady_clock::now();
  std::uniform_int_distribution<std::size_t> pick(0, records.size() - 1);
  std::uniform_int_distribution<int> tq(1, schedule.T);

  for (std::int64_t k = 0; k < config.steps; ++k) {
    Matrix x0(n, d);
    ConditionBatch cond{Matrix(n, d), Matrix(n, d)};
    for (ad::Index r = 0; r < n; ++r) {
      const auto& rec = records[pick(s.rng)];
      x0.row(r) = rec.x0;
      cond.mask.row(r) = rec.condition.mask;
      cond.values.row(r) = rec.condition.values;
    }
    const DiffusionBatch batch = make_batch(x0, schedule, s.rng);
    std::vector<ControlInput> controls;
    if (s.branch) controls.push_back({&*s.branch, &cond});
    const Tensor dsm = dsm_loss(batch, s.base, controls, options);
    Tensor total = dsm;
    std::optional<double> qc_value;

    if (config.stage == Stage::Two) {
      const auto reps = static_cast<ad::Index>(config.probes);
      std::vector<int> tq_rows(static_cast<std::size_t>(n));
      for (int& t : tq_rows) t = tq(s.qc_rng);
      const Matrix xq = perturb(x0, tq_rows, batch.eps, schedule);
      std::vector<int> t_rep;
      t_rep.reserve(static_cast<std::size_t>(n * reps));
      for (ad::Index p = 0; p < reps; ++p) t_rep.insert(t_rep.end(), tq_rows.begin(), tq_rows.end());
      ConditionBatch cq{cond.mask.replicate(reps, 1), cond.values.replicate(reps, 1)};
      const Matrix probes = conserve::rademacher_probes(static_cast<std::size_t>(n * reps), d, s.qc_rng);
      const auto field = conserve::model_field(s.base, schedule, {&*s.branch}, {std::move(cq)},
                                               std::move(t_rep), options);
      const bool differentiate = config.qc_coef != 0.0;
      const Tensor qc = ad::mean_all(conserve::path_terms(field, xq.replicate(reps, 1), probes,
                                                          conserve::Path::Control, differentiate));
      qc_value = qc.item();
      if (differentiate) total = ad::add(total, ad::affine(qc, config.qc_coef, 0.0));
    }

    const double loss = total.item();
    std::vector<Tensor> grads;
    if (std::isfinite(loss)) grads = ad::gradient(total, params);
    if (!std::isfinite(loss) || !all_finite(grads)) {
      throw TrainingAborted("non-finite training loss or gradient", static_cast<long>(s.step + 1),
                            snapshot(s, config));
    }
    std::vector<Matrix> g;
    g.reserve(grads.size());
    for (const auto& t : grads) g.push_back(t.value());
    adam_step(params, g, s.adam, AdamOptions{config.lr});
    ++s.step;
    if (log) {
      StepRecord rec;
      rec.step = s.step;
      rec.dsm_loss = dsm.item();
      rec.qc_simple = qc_value;
      rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                              clock_start)
                        .count();
      log(rec);
    }
  }
  return snapshot(s, config);
}

}  // namespace micn
