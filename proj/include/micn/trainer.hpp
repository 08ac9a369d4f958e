#pragma once

// Adam, the three training stages, and the checkpoint file.
//
// Stages: `Base` pre-trains the unconditional model; `One` trains a control
// branch on a frozen base with the denoising loss; `Two` continues a stage-1
// branch with the control-path conservativity penalty added.

#include "micn/diffusion.hpp"
#include "micn/errors.hpp"
#include "micn/scorenet.hpp"
#include "micn/synthdata.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace micn {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::int64_t step = 0;
  std::vector<ad::Matrix> m;
  std::vector<ad::Matrix> v;
};

/// One bias-corrected Adam update, applied in place to every parameter.
void adam_step(std::span<const ad::Tensor> params, std::span<const ad::Matrix> grads,
               AdamState& state, const AdamOptions& options);

enum class Stage { Base, One, Two };
Stage parse_stage(std::string_view name);
std::string_view stage_name(Stage stage);

nlohmann::json model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct TrainConfig {
  Stage stage = Stage::One;
  std::int64_t steps = 2000;
  int batch = 256;
  double lr = 1e-3;
  double qc_coef = 0.01;
  int probes = 1;  // Rademacher probes per sample for the stage-2 penalty
  std::uint64_t seed = 0;
  std::string dataset;
  std::string condition_type;  // "A", "B", or empty for every record
  Mode mode = Mode::MinimalImpact;
  combine::Formula formula = combine::Formula::Paper;
  bool lambda_gradient = false;
  ModelConfig model;
  ScheduleKind schedule = ScheduleKind::Cosine;
  double zero_std = 1e-4;

  /// Desk recipe: base 5000 steps, stage 1 2000 steps at 1e-3, stage 2
  /// 2000 steps at 3e-4.
  static TrainConfig recipe(Stage stage);
  void validate() const;
  ComposeOptions compose() const;
  nlohmann::json to_json() const;
  /// Missing keys keep the recipe defaults of the stage named in `j`.
  static TrainConfig from_json(const nlohmann::json& j);
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig model;
  ScheduleKind schedule = ScheduleKind::Cosine;
  Stage stage = Stage::Base;
  std::int64_t step = 0;
  nlohmann::json config;   // TrainConfig snapshot
  nlohmann::json extra;    // free-form metadata (e.g. the condition type)
  std::string rng_state;   // textual std::mt19937_64 state
  std::string qc_rng_state;
  std::int64_t adam_step = 0;
  /// Parameters by name, then Adam moments as "adam.m.<name>" / "adam.v.<name>".
  std::vector<std::pair<std::string, ad::Matrix>> tensors;

  const ad::Matrix* find(std::string_view name) const;
  bool has_branch() const { return stage != Stage::Base; }
};

std::string encode_checkpoint(const Checkpoint& ckpt);
/// Throws FormatError, TruncatedError, VersionError.
Checkpoint decode_checkpoint(const std::string& bytes, const std::string& what = "checkpoint");
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct RestoredModel {
  BaseModel base;
  std::optional<ControlBranch> branch;
  NoiseSchedule schedule;
};

/// Rebuild the networks. Throws ShapeMismatchError when a stored tensor is
/// missing or has the wrong shape.
RestoredModel restore(const Checkpoint& ckpt);

struct StepRecord {
  std::int64_t step = 0;
  double dsm_loss = 0.0;
  std::optional<double> qc_simple;
  double wall_ms = 0.0;

  nlohmann::json to_json() const;
};

using LogSink = std::function<void(const StepRecord&)>;

/// Non-finite loss or gradient; carries the state from before the failing
/// step.
class TrainingAborted : public NumericalAbort {
 public:
  TrainingAborted(const std::string& what, long step, Checkpoint last_good)
      : NumericalAbort(what, step), last_good_(std::move(last_good)) {}
  const Checkpoint& last_good() const { return last_good_; }

 private:
  Checkpoint last_good_;
};

/// Records the configured run selects from a dataset.
std::vector<ConditionedSample> select_records(const std::vector<ConditionedSample>& records,
                                              const std::string& condition_type);

/// Run `config.steps` steps. `init` is required for stages 1 and 2: a base
/// (stage 1) or stage-1 (stage 2) checkpoint starts a fresh run, a checkpoint
/// of the same stage resumes it. Optional `init` for the base stage resumes.
Checkpoint train(const TrainConfig& config, const std::vector<ConditionedSample>& data,
                 const Checkpoint* init, const LogSink& log = {});

}  // namespace micn
