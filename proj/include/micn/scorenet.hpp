#pragma once

// Encoder/decoder score network with residual skips, plus a control branch
// that mirrors the encoder and feeds per-level residuals into the decoder.
//
//   encoder:  f^e_0 = x_e,           h_i = silu(E_i h_{i-1} [+ time]),  f^eres_i = h_i
//   control:  f^c_0 = x_c + embed(c), h_i = silu(C_i h_{i-1} [+ time]), f^cres_i = Z_i h_i
//   decoder:  f^d_i = add(f^eres_i, f^cres_i),  eps_hat = D(f^d_1, ..., f^d_{l+1})

#include "micn/autodiff.hpp"
#include "micn/combine.hpp"
#include "micn/schedule.hpp"

#include <functional>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace micn {

struct ModelConfig {
  int data_dim = 8;
  int levels = 3;                          // l; every stack has l + 1 entries
  std::vector<int> widths{32, 32, 32, 32};  // one per stack entry
  int time_dim = 16;
  int timesteps = 200;  // T, the largest accepted timestep

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// One residual vector per level, each (samples, width_i).
using FeatureStack = std::vector<ad::Tensor>;

struct Linear {
  ad::Tensor weight;  // (out, in)
  ad::Tensor bias;    // (1, out)

  ad::Tensor operator()(const ad::Tensor& x) const { return ad::linear(x, weight, bias); }
};

using NamedTensors = std::vector<std::pair<std::string, ad::Tensor>>;

/// Per-sample control input: binary mask and the revealed values.
struct ConditionBatch {
  ad::Matrix mask;    // (samples, d), entries in {0, 1}
  ad::Matrix values;  // (samples, d), zero where mask is zero

  ad::Index rows() const { return mask.rows(); }
  void validate(ad::Index rows, int data_dim) const;
  static ConditionBatch silent(ad::Index rows, int data_dim);
  /// Repeat a single-row condition.
  ConditionBatch repeat(ad::Index rows) const;
};

/// Sinusoidal embedding of one timestep per row, (samples, time_dim).
ad::Matrix time_embedding(std::span<const int> t, int time_dim);

struct EncoderStack {
  Linear time_proj;
  std::vector<Linear> blocks;

  FeatureStack forward(const ad::Tensor& input, const ad::Tensor& temb) const;
};

struct DecoderStack {
  std::vector<Linear> blocks;  // blocks[i] consumes level i (and level i + 1's output)
  Linear out;

  ad::Tensor forward(const FeatureStack& stacks) const;
};

class BaseModel {
 public:
  BaseModel() = default;
  static BaseModel init(const ModelConfig& config, std::mt19937_64& rng);
  /// Every affine layer (weights and biases) set to zero.
  static BaseModel zeros(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  /// Copy with fresh parameter storage (plain copies share parameters).
  BaseModel clone() const;

  FeatureStack encode(const ad::Tensor& x_t, std::span<const int> t) const;
  ad::Tensor decode(const FeatureStack& stacks) const;

  NamedTensors parameters() const;
  void set_requires_grad(bool on);

  EncoderStack& encoder() { return encoder_; }
  DecoderStack& decoder() { return decoder_; }
  const EncoderStack& encoder() const { return encoder_; }

 private:
  ModelConfig config_;
  EncoderStack encoder_;
  DecoderStack decoder_;
};

class ControlBranch {
 public:
  ControlBranch() = default;
  /// Blocks copy the base encoder; output projections ~ N(0, zero_std^2).
  static ControlBranch init(const BaseModel& base, std::mt19937_64& rng,
                            double zero_std = 1e-4);

  const ModelConfig& config() const { return config_; }
  /// Copy with fresh parameter storage (plain copies share parameters).
  ControlBranch clone() const;

  FeatureStack control(const ad::Tensor& x_t, const ConditionBatch& c,
                       std::span<const int> t) const;

  NamedTensors parameters() const;
  void set_requires_grad(bool on);

  Linear& embed() { return embed_; }
  std::vector<Linear>& projections() { return zero_; }
  EncoderStack& blocks() { return blocks_; }
  /// Scale every output projection (weights and biases) by `factor`.
  void scale_output(double factor);

 private:
  ModelConfig config_;
  Linear embed_;  // (mask | values) in R^{2d} -> R^d
  EncoderStack blocks_;
  std::vector<Linear> zero_;
};

enum class Mode { VanillaAdd, MinimalImpact };
Mode parse_mode(std::string_view name);
std::string_view mode_name(Mode mode);

struct ComposeOptions {
  Mode mode = Mode::MinimalImpact;
  combine::Formula formula = combine::Formula::Paper;
  bool lambda_gradient = false;
  /// Called with "add_com" / "add_inj" as each stage runs.
  std::function<void(std::string_view)> trace;
};

struct ControlInput {
  const ControlBranch* branch = nullptr;
  const ConditionBatch* condition = nullptr;
};

/// f^d stacks from the encoder stack and any number of control stacks.
/// Vanilla: element sum. Minimal impact: add_com folded over the controls,
/// then add_inj into the encoder stack.
FeatureStack merge_stacks(const FeatureStack& encoder, const std::vector<FeatureStack>& controls,
                          const ComposeOptions& options);

/// Noise prediction with the encoder reading x_e and every control branch
/// reading x_c.
ad::Tensor predict_noise_split(const BaseModel& base, std::span<const ControlInput> controls,
                               const ad::Tensor& x_e, const ad::Tensor& x_c,
                               std::span<const int> t, const ComposeOptions& options);

ad::Tensor predict_noise(const BaseModel& base, std::span<const ControlInput> controls,
                         const ad::Tensor& x_t, std::span<const int> t,
                         const ComposeOptions& options);

/// s = -eps_hat / sigma_t, t >= 1.
ad::Tensor score(const BaseModel& base, const NoiseSchedule& schedule,
                 std::span<const ControlInput> controls, const ad::Tensor& x_t,
                 std::span<const int> t, const ComposeOptions& options);

ad::Tensor score_split(const BaseModel& base, const NoiseSchedule& schedule,
                       std::span<const ControlInput> controls, const ad::Tensor& x_e,
                       const ad::Tensor& x_c, std::span<const int> t,
                       const ComposeOptions& options);

}  // namespace micn
