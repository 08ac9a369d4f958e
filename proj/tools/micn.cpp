// micn: data generation, training, sampling, evaluation and the
// conservativity audit from one entry point.
//
// Every command resolves an effective JSON config (the --config file, then
// --set overrides, then dedicated flags), writes it to <out>/config.json and
// only then starts work. Exit codes: 0 success, 1 usage or input error,
// 2 numerical abort.

#include "micn/conserve.hpp"
#include "micn/evalsuite.hpp"
#include "micn/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace micn;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool force = false;
};

void set_dotted(json& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw UsageError("override '" + assignment + "' must look like key.path=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  std::string pointer;
  std::size_t start = 0;
  while (start <= key.size()) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw UsageError("override key '" + key + "' has an empty component");
    pointer += "/" + part;
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  root[json::json_pointer(pointer)] = value;
}

json load_config(const Globals& g) {
  json cfg = json::object();
  if (!g.config_path.empty()) {
    std::ifstream in(g.config_path);
    if (!in) throw UsageError("cannot read config file " + g.config_path);
    try {
      cfg = json::parse(in);
    } catch (const json::parse_error& e) {
      throw UsageError("config file " + g.config_path + " is not valid JSON: " + e.what());
    }
    if (!cfg.is_object()) throw UsageError("config file must hold a JSON object");
  }
  for (const auto& o : g.overrides) set_dotted(cfg, o);
  if (g.seed) cfg["seed"] = *g.seed;
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = fs::path(path).concat(".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
  }
  fs::rename(tmp, path);
}

/// Refuse to clobber outputs unless --force, then echo the config.
fs::path prepare_output(const Globals& g, const json& cfg, const std::vector<std::string>& outputs) {
  if (g.out.empty()) throw UsageError("--out is required");
  const fs::path dir(g.out);
  if (!g.force) {
    for (const auto& name : outputs) {
      if (fs::exists(dir / name)) {
        throw UsageError((dir / name).string() + " already exists; pass --force to overwrite");
      }
    }
  }
  fs::create_directories(dir);
  write_text(dir / "config.json", cfg.dump(2) + "\n");
  return dir;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string matrix_csv(const ad::Matrix& m, const std::string& prefix) {
  std::string out;
  for (ad::Index k = 0; k < m.cols(); ++k) out += (k ? "," : "") + prefix + std::to_string(k);
  out += "\n";
  for (ad::Index r = 0; r < m.rows(); ++r) {
    for (ad::Index k = 0; k < m.cols(); ++k) out += (k ? "," : "") + fmt(m(r, k));
    out += "\n";
  }
  return out;
}

template <typename T>
T take(const json& cfg, const char* key, T fallback) {
  return cfg.contains(key) ? cfg.at(key).get<T>() : fallback;
}

ConditionType parse_type(const std::string& s) {
  if (s == "A") return ConditionType::A;
  if (s == "B") return ConditionType::B;
  throw UsageError("condition type must be A or B, got '" + s + "'");
}

// ---------------------------------------------------------------- gen-data

int cmd_gen_data(const Globals& g, json cfg) {
  const std::string kind = take<std::string>(cfg, "kind", "");
  if (kind.empty()) throw UsageError("gen-data needs kind (ground-truth, biased, rebalanced, multi)");
  const auto n = take<std::size_t>(cfg, "n", 0);
  if (n == 0) throw UsageError("gen-data needs n >= 1");
  const auto seed = take<std::uint64_t>(cfg, "seed", 0);
  const SyntheticTask task = cfg.contains("task") ? SyntheticTask::from_json(cfg["task"]) : SyntheticTask{};
  cfg["task"] = task.to_json();
  cfg["seed"] = seed;
  const fs::path dir = prepare_output(g, cfg, {"dataset.bin"});

  std::vector<ConditionedSample> records;
  json header = {{"kind", kind}, {"n", n}, {"seed", seed}, {"task", task.to_json()}};
  if (kind == "ground-truth") {
    const ad::Matrix x = gen_ground_truth(task, n, seed);
    for (ad::Index r = 0; r < x.rows(); ++r) {
      records.push_back({x.row(r), {RowVector::Zero(task.data_dim), RowVector::Zero(task.data_dim)},
                         ConditionType::A, false});
    }
  } else if (kind == "biased" || kind == "rebalanced") {
    const std::string type = take<std::string>(cfg, "type", "A");
    header["type"] = type;
    records = kind == "biased" ? gen_biased_pairs(task, n, parse_type(type), seed)
                               : gen_rebalanced_pairs(task, n, parse_type(type), seed);
  } else if (kind == "multi") {
    records = flatten_multi(gen_multi_condition(task, n, seed));
  } else {
    throw UsageError("unknown dataset kind '" + kind + "'");
  }
  write_dataset(dir / "dataset.bin", header, records);
  std::cout << "wrote " << records.size() << " records to " << (dir / "dataset.bin").string() << "\n";
  return 0;
}

// ------------------------------------------------------------------- train

int cmd_train(const Globals& g, json cfg) {
  std::string init_path = take<std::string>(cfg, "init", "");
  cfg.erase("init");
  const TrainConfig tc = TrainConfig::from_json(cfg);
  json echo = tc.to_json();
  if (!init_path.empty()) echo["init"] = init_path;
  if (tc.dataset.empty()) throw UsageError("train needs a dataset path");
  std::optional<Checkpoint> init;
  if (!init_path.empty()) init = eval::require_checkpoint(init_path, "--init");
  const Dataset data = read_dataset(tc.dataset);
  const fs::path dir = prepare_output(g, echo, {"checkpoint.bin", "train_log.jsonl"});

  std::ofstream log(dir / "train_log.jsonl", std::ios::binary | std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write the training log");
  try {
    const Checkpoint out = train(tc, data.records, init ? &*init : nullptr,
                                 [&log](const StepRecord& r) { log << r.to_json().dump() << "\n"; });
    save_checkpoint(dir / "checkpoint.bin", out);
    std::cout << "stage " << stage_name(tc.stage) << ": " << out.step << " steps, checkpoint "
              << (dir / "checkpoint.bin").string() << "\n";
  } catch (const TrainingAborted& e) {
    log.flush();
    save_checkpoint(dir / "last_good.bin", e.last_good());
    std::cerr << "numerical abort: " << e.what() << "; last good state in "
              << (dir / "last_good.bin").string() << "\n";
    return 2;
  }
  return 0;
}

// ------------------------------------------------------------------ sample

struct LoadedBranches {
  std::vector<Checkpoint> ckpts;
  std::vector<RestoredModel> models;
};

LoadedBranches load_branches(const std::vector<std::string>& paths) {
  LoadedBranches b;
  for (std::size_t k = 0; k < paths.size(); ++k) {
    b.ckpts.push_back(eval::require_checkpoint(paths[k], "branch " + std::to_string(k)));
    b.models.push_back(restore(b.ckpts.back()));
  }
  for (std::size_t k = 1; k < b.models.size(); ++k) {
    for (const auto& [name, t] : b.models[0].base.parameters()) {
      if (*b.ckpts[k].find(name) != t.value()) {
        throw UsageError("branch checkpoints " + paths[0] + " and " + paths[k] +
                         " were trained on different base models");
      }
    }
  }
  return b;
}

int cmd_sample(const Globals& g, json cfg) {
  const auto branches = take<std::vector<std::string>>(cfg, "branches", {});
  const std::string base_path = take<std::string>(cfg, "base", "");
  if (branches.empty() && base_path.empty()) throw UsageError("sample needs branches or a base checkpoint");
  const auto n = take<std::size_t>(cfg, "n", 0);
  if (n == 0) throw UsageError("sample needs n >= 1");
  const auto seed = take<std::uint64_t>(cfg, "seed", 0);
  const std::string conditions = take<std::string>(cfg, "conditions", "silent");
  ComposeOptions options;
  options.mode = parse_mode(take<std::string>(cfg, "mode", "minimal-impact"));
  options.formula = combine::parse_formula(take<std::string>(cfg, "formula", "paper"));
  const SyntheticTask task = cfg.contains("task") ? SyntheticTask::from_json(cfg["task"]) : SyntheticTask{};
  cfg["seed"] = seed;
  cfg["mode"] = mode_name(options.mode);
  cfg["formula"] = combine::formula_name(options.formula);
  cfg["conditions"] = conditions;

  LoadedBranches loaded;
  if (!branches.empty()) {
    loaded = load_branches(branches);
  } else {
    loaded.ckpts.push_back(eval::require_checkpoint(base_path, "base"));
    loaded.models.push_back(restore(loaded.ckpts.back()));
  }
  const int d = loaded.models[0].base.config().data_dim;
  if (d != task.data_dim) throw UsageError("task data_dim differs from the model's");
  const fs::path dir = prepare_output(g, cfg, {"samples.csv", "conditions.csv", "pipeline.json"});

  SampleRequest req;
  req.n = n;
  req.seed = seed;
  req.options = options;
  const auto rows = static_cast<ad::Index>(n);
  std::vector<ConditionBatch> conds;
  if (conditions == "generate") {
    const auto layout = gen_multi_condition(task, n, stream_seed(seed, 8));
    ConditionBatch ca{ad::Matrix(rows, d), ad::Matrix(rows, d)};
    ConditionBatch cb = ca;
    for (ad::Index r = 0; r < rows; ++r) {
      ca.mask.row(r) = layout[r].a.mask;
      ca.values.row(r) = layout[r].a.values;
      cb.mask.row(r) = layout[r].b.mask;
      cb.values.row(r) = layout[r].b.values;
    }
    for (std::size_t k = 0; k < branches.size(); ++k) {
      // Branches trained on every record type fall back to their position.
      std::string t = loaded.ckpts[k].extra.value("condition_type", std::string());
      if (t.empty()) t = k == 0 ? "A" : "B";
      conds.push_back(t == "B" ? cb : ca);
    }
  } else if (conditions == "silent") {
    for (std::size_t k = 0; k < branches.size(); ++k) conds.push_back(ConditionBatch::silent(rows, d));
  } else {
    throw UsageError("conditions must be 'silent' or 'generate'");
  }
  for (std::size_t k = 0; k < branches.size(); ++k) {
    req.branches.push_back(&*loaded.models[k].branch);
    req.conditions.push_back(conds[k]);
  }
  // Record the stage order of the first network evaluation.
  std::vector<std::string> stages;
  const std::size_t per_eval = options.mode == Mode::VanillaAdd ? 0 : (branches.size() > 1 ? 2 : 1);
  req.options.trace = [&stages, per_eval](std::string_view s) {
    if (stages.size() < per_eval) stages.emplace_back(s);
  };
  const ad::Matrix x = sample(loaded.models[0].base, loaded.models[0].schedule, req);

  write_text(dir / "samples.csv", matrix_csv(x, "x"));
  std::string ctext = "branch,row,kind";
  for (int k = 0; k < d; ++k) ctext += ",c" + std::to_string(k);
  ctext += "\n";
  for (std::size_t b = 0; b < conds.size(); ++b) {
    for (ad::Index r = 0; r < rows; ++r) {
      for (const char* kind : {"mask", "values"}) {
        const auto& m = std::string(kind) == "mask" ? conds[b].mask : conds[b].values;
        ctext += std::to_string(b) + "," + std::to_string(r) + "," + kind;
        for (int k = 0; k < d; ++k) ctext += "," + fmt(m(r, k));
        ctext += "\n";
      }
    }
  }
  write_text(dir / "conditions.csv", ctext);
  write_text(dir / "pipeline.json", json{{"mode", mode_name(options.mode)}, {"stages", stages}}.dump(2) + "\n");
  std::cout << "wrote " << n << " samples to " << (dir / "samples.csv").string() << "\n";
  return 0;
}

// -------------------------------------------------------------------- eval

int cmd_eval(const Globals& g, json cfg) {
  const std::string experiment = take<std::string>(cfg, "experiment", "");
  if (experiment.empty()) throw UsageError("eval needs an experiment name");
  json ecfg = cfg;
  ecfg.erase("experiment");
  if (cfg.contains("seed") && !ecfg.contains("seeds")) ecfg["seeds"] = {cfg["seed"]};
  // Fail on missing checkpoints before touching the output directory.
  const eval::EvalReport report = eval::run_experiment(experiment, ecfg);
  const fs::path dir = prepare_output(g, cfg, {"report.json", "metrics.csv"});
  eval::write_report(report, dir);
  std::cout << report.summary.dump(2) << "\n";
  return 0;
}

// ------------------------------------------------------------------- audit

int cmd_audit(const Globals& g, json cfg) {
  const std::string path = take<std::string>(cfg, "checkpoint", "");
  const Checkpoint ckpt = eval::require_checkpoint(path, "audit");
  RestoredModel m = restore(ckpt);
  if (!m.branch) throw UsageError("audit needs a checkpoint with a control branch");
  const auto batches = take<std::size_t>(cfg, "batches", 1);
  const auto points = take<std::size_t>(cfg, "points", 50);
  const auto probes = take<std::size_t>(cfg, "probes", 8);
  const auto seed = take<std::uint64_t>(cfg, "seed", 0);
  const bool zero_branch = take<bool>(cfg, "zero_branch", false);
  if (batches == 0 || points == 0) throw UsageError("audit needs batches >= 1 and points >= 1");
  const SyntheticTask task = cfg.contains("task") ? SyntheticTask::from_json(cfg["task"]) : SyntheticTask{};
  cfg["seed"] = seed;
  const fs::path dir = prepare_output(g, cfg, {"audit.json", "audit_log.jsonl", "audit_points.csv"});
  if (zero_branch) m.branch->scale_output(0.0);

  const ComposeOptions options = TrainConfig::from_json(ckpt.config).compose();
  const std::string type = ckpt.extra.value("condition_type", std::string("A"));
  const auto records = gen_rebalanced_pairs(task, batches * points, parse_type(type.empty() ? "A" : type),
                                            stream_seed(seed, 12));
  std::mt19937_64 rng(stream_seed(seed, 13));
  std::uniform_int_distribution<int> tdist(1, m.schedule.T);
  std::normal_distribution<double> normal(0.0, 1.0);
  json series = json::array();
  std::string log;
  std::string csv = "batch,point,t,l_qc,l_qc_c,l_qc_simple,e_only,je_norm,jc_norm,decomposition_residual\n";
  bool all_pass = true;
  for (std::size_t b = 0; b < batches; ++b) {
    std::vector<conserve::FieldPoint> pts;
    std::vector<int> ts;
    for (std::size_t i = 0; i < points; ++i) {
      const auto& rec = records[b * points + i];
      const int t = tdist(rng);
      ad::Matrix eps(1, task.data_dim);
      for (int k = 0; k < task.data_dim; ++k) eps(0, k) = normal(rng);
      const ad::Matrix xt = perturb(rec.x0, std::vector<int>{t}, eps, m.schedule);
      ConditionBatch c{rec.condition.mask, rec.condition.values};
      pts.push_back({conserve::model_field(m.base, m.schedule, {&*m.branch}, {c}, {t}, options), xt.row(0)});
      ts.push_back(t);
    }
    const conserve::Audit a = conserve::audit(pts, probes, rng);
    const conserve::BoundCheck bound = conserve::check_bound(a);
    const conserve::AssumptionReport assumption = conserve::assumption_violation(pts, m.branch->parameters());
    json entry = a.report.to_json();
    entry["batch"] = b;
    entry["bound_holds"] = bound.pass;
    entry["bound_min_slack"] = bound.min_slack;
    entry["assumption_grad_e_only"] = assumption.grad_e_only_norm;
    entry["assumption_grad_simple"] = assumption.grad_simple_norm;
    entry["assumption_ratio"] = assumption.ratio;
    series.push_back(entry);
    log += a.report.to_json().dump() + "\n";
    all_pass = all_pass && bound.pass;
    for (std::size_t i = 0; i < a.per_point.size(); ++i) {
      const auto& p = a.per_point[i];
      csv += std::to_string(b) + "," + std::to_string(i) + "," + std::to_string(ts[i]) + "," + fmt(p.l_qc) +
             "," + fmt(p.l_qc_c) + "," + fmt(p.l_qc_simple) + "," + fmt(p.e_only) + "," + fmt(p.je_norm) +
             "," + fmt(p.jc_norm) + "," + fmt(p.decomposition_residual) + "\n";
    }
  }
  write_text(dir / "audit.json", json{{"checkpoint", path}, {"bound_holds", all_pass}, {"series", series}}.dump(2) + "\n");
  write_text(dir / "audit_log.jsonl", log);
  write_text(dir / "audit_points.csv", csv);
  std::cout << series.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Minimal-impact control branches for a toy diffusion model"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "JSON config file")->option_text("FILE");
  app.add_option("--set", g.overrides, "Dotted override key.path=value (repeatable)");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--seed", g.seed, "Seed (overrides the config)");
  app.add_flag("--force", g.force, "Overwrite existing outputs");
  app.fallthrough();

  json flags = json::object();
  auto str_opt = [&flags](CLI::App* sub, const std::string& name, const std::string& key, const std::string& help) {
    sub->add_option_function<std::string>(name, [&flags, key](const std::string& v) { flags[key] = v; }, help);
  };

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset");
  str_opt(gen, "--kind", "kind", "ground-truth | biased | rebalanced | multi");
  gen->add_option_function<std::size_t>("--n", [&flags](std::size_t v) { flags["n"] = v; }, "Record count");
  str_opt(gen, "--type", "type", "Condition type A or B (biased, rebalanced)");

  auto* tr = app.add_subcommand("train", "Run one training stage");
  str_opt(tr, "--stage", "stage", "base | 1 | 2");
  str_opt(tr, "--mode", "mode", "vanilla-add | minimal-impact");
  str_opt(tr, "--dataset", "dataset", "Dataset file");
  str_opt(tr, "--init", "init", "Checkpoint to start from");
  str_opt(tr, "--condition-type", "condition_type", "Train on records of type A or B only");
  tr->add_option_function<double>("--qc-coef", [&flags](double v) { flags["qc_coef"] = v; }, "Stage-2 penalty weight");
  tr->add_option_function<std::int64_t>("--steps", [&flags](std::int64_t v) { flags["steps"] = v; }, "Step count");

  auto* sm = app.add_subcommand("sample", "Generate samples");
  sm->add_option_function<std::vector<std::string>>(
      "--branch", [&flags](const std::vector<std::string>& v) { flags["branches"] = v; }, "Branch checkpoint (repeatable)");
  str_opt(sm, "--base", "base", "Base checkpoint for unconditional sampling");
  str_opt(sm, "--mode", "mode", "vanilla-add | minimal-impact");
  str_opt(sm, "--conditions", "conditions", "silent | generate");
  sm->add_option_function<std::size_t>("--n", [&flags](std::size_t v) { flags["n"] = v; }, "Sample count");

  auto* ev = app.add_subcommand("eval", "Run an evaluation experiment");
  str_opt(ev, "--experiment", "experiment", "single-silent-tv | asym-two-stage | multi-combo");

  auto* au = app.add_subcommand("audit", "Conservativity audit of a branch checkpoint");
  str_opt(au, "--checkpoint", "checkpoint", "Branch checkpoint");
  au->add_flag_function("--zero-branch", [&flags](std::int64_t) { flags["zero_branch"] = true; },
                        "Zero the branch output projections first");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    json cfg = load_config(g);
    for (const auto& [k, v] : flags.items()) cfg[k] = v;
    if (gen->parsed()) return cmd_gen_data(g, cfg);
    if (tr->parsed()) return cmd_train(g, cfg);
    if (sm->parsed()) return cmd_sample(g, cfg);
    if (ev->parsed()) return cmd_eval(g, cfg);
    if (au->parsed()) return cmd_audit(g, cfg);
  } catch (const NumericalAbort& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
