#include "micn/scorenet.hpp"

#include <cmath>
#include <stdexcept>

namespace micn {

using ad::Matrix;
using ad::Tensor;

void ModelConfig::validate() const {
  if (data_dim <= 0) throw std::invalid_argument("ModelConfig: data_dim must be positive");
  if (levels <= 0) throw std::invalid_argument("ModelConfig: levels must be positive");
  if (widths.size() != static_cast<std::size_t>(levels) + 1) {
    throw std::invalid_argument("ModelConfig: need levels + 1 widths");
  }
  for (int w : widths) {
    if (w <= 0) throw std::invalid_argument("ModelConfig: widths must be positive");
  }
  if (time_dim <= 0 || time_dim % 2 != 0) {
    throw std::invalid_argument("ModelConfig: time_dim must be positive and even");
  }
  if (timesteps < 2) throw std::invalid_argument("ModelConfig: timesteps must be >= 2");
}

void ConditionBatch::validate(ad::Index rows, int data_dim) const {
  if (mask.rows() != rows || values.rows() != rows || mask.cols() != data_dim ||
      values.cols() != data_dim) {
    throw std::invalid_argument("condition: expected " + std::to_string(rows) + " rows of " +
                                std::to_string(data_dim) + " entries");
  }
  for (ad::Index r = 0; r < rows; ++r) {
    for (ad::Index k = 0; k < data_dim; ++k) {
      const double m = mask(r, k);
      if (m != 0.0 && m != 1.0) throw std::invalid_argument("condition: mask must be binary");
      if (m == 0.0 && values(r, k) != 0.0) {
        throw std::invalid_argument("condition: values must be zero where the mask is zero");
      }
    }
  }
}

ConditionBatch ConditionBatch::silent(ad::Index rows, int data_dim) {
  return {Matrix::Zero(rows, data_dim), Matrix::Zero(rows, data_dim)};
}

ConditionBatch ConditionBatch::repeat(ad::Index rows) const {
  if (mask.rows() != 1) throw std::invalid_argument("condition: repeat needs a single row");
  return {mask.replicate(rows, 1), values.replicate(rows, 1)};
}

Matrix time_embedding(std::span<const int> t, int time_dim) {
  const int half = time_dim / 2;
  Matrix out(static_cast<ad::Index>(t.size()), time_dim);
  for (std::size_t r = 0; r < t.size(); ++r) {
    for (int k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * k / half);
      const double arg = t[r] * freq;
      out(static_cast<ad::Index>(r), k) = std::sin(arg);
      out(static_cast<ad::Index>(r), half + k) = std::cos(arg);
    }
  }
  return out;
}

namespace {

Linear random_linear(int in, int out, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> normal(0.0, stddev);
  Matrix w(out, in);
  for (ad::Index i = 0; i < w.size(); ++i) w.data()[i] = normal(rng);
  return {Tensor::variable(std::move(w)), Tensor::variable(Matrix::Zero(1, out))};
}

Linear zero_linear(int in, int out) {
  return {Tensor::variable(Matrix::Zero(out, in)), Tensor::variable(Matrix::Zero(1, out))};
}

Linear copy_linear(const Linear& l) {
  return {Tensor::variable(l.weight.value()), Tensor::variable(l.bias.value())};
}

Linear glorot(int in, int out, std::mt19937_64& rng) {
  return random_linear(in, out, rng, 1.0 / std::sqrt(static_cast<double>(in)));
}

void append(NamedTensors& out, const std::string& prefix, const Linear& l) {
  out.emplace_back(prefix + ".weight", l.weight);
  out.emplace_back(prefix + ".bias", l.bias);
}

void append(NamedTensors& out, const std::string& prefix, const EncoderStack& e) {
  append(out, prefix + ".time", e.time_proj);
  for (std::size_t i = 0; i < e.blocks.size(); ++i) {
    append(out, prefix + ".block" + std::to_string(i), e.blocks[i]);
  }
}

void set_flag(const NamedTensors& params, bool on) {
  for (const auto& [name, t] : params) t.node()->requires_grad = on;
}

void check_timesteps(std::span<const int> t, ad::Index rows, const ModelConfig& config) {
  if (static_cast<ad::Index>(t.size()) != rows) {
    throw std::invalid_argument("one timestep per row required");
  }
  for (int v : t) {
    if (v < 0 || v > config.timesteps) {
      throw std::out_of_range("timestep " + std::to_string(v) + " outside 0.." +
                              std::to_string(config.timesteps));
    }
  }
}

void check_state(const Tensor& x, const ModelConfig& config) {
  if (x.cols() != config.data_dim) {
    throw ad::ShapeError("state must have " + std::to_string(config.data_dim) + " columns, got " +
                         std::to_string(x.cols()));
  }
}

}  // namespace

FeatureStack EncoderStack::forward(const Tensor& input, const Tensor& temb) const {
  FeatureStack out;
  out.reserve(blocks.size());
  Tensor h = input;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    Tensor pre = blocks[i](h);
    if (i == 0) pre = ad::add(pre, time_proj(temb));
    h = ad::silu(pre);
    out.push_back(h);
  }
  return out;
}

Tensor DecoderStack::forward(const FeatureStack& stacks) const {
  if (stacks.size() != blocks.size()) {
    throw ad::ShapeError("decode: expected " + std::to_string(blocks.size()) + " levels, got " +
                         std::to_string(stacks.size()));
  }
  const std::size_t top = blocks.size() - 1;
  for (std::size_t i = 0; i < stacks.size(); ++i) {
    if (stacks[i].cols() != blocks[i].weight.rows()) {
      throw ad::ShapeError("decode: level " + std::to_string(i) + " has width " +
                           std::to_string(stacks[i].cols()) + ", decoder expects " +
                           std::to_string(blocks[i].weight.rows()));
    }
  }
  Tensor g = ad::silu(blocks[top](stacks[top]));
  for (std::size_t k = top; k-- > 0;) {
    g = ad::silu(blocks[k](ad::concat_cols(g, stacks[k])));
  }
  return out(g);
}

// ------------------------------------------------------------ BaseModel

BaseModel BaseModel::init(const ModelConfig& config, std::mt19937_64& rng) {
  config.validate();
  BaseModel m;
  m.config_ = config;
  const auto& w = config.widths;
  m.encoder_.time_proj = glorot(config.time_dim, w[0], rng);
  int in = config.data_dim;
  for (int width : w) {
    m.encoder_.blocks.push_back(glorot(in, width, rng));
    in = width;
  }
  const std::size_t n = w.size();
  m.decoder_.blocks.resize(n);
  m.decoder_.blocks[n - 1] = glorot(w[n - 1], w[n - 1], rng);
  for (std::size_t i = n - 1; i-- > 0;) {
    m.decoder_.blocks[i] = glorot(w[i + 1] + w[i], w[i], rng);
  }
  m.decoder_.out = glorot(w[0], config.data_dim, rng);
  return m;
}

BaseModel BaseModel::zeros(const ModelConfig& config) {
  config.validate();
  BaseModel m;
  m.config_ = config;
  const auto& w = config.widths;
  m.encoder_.time_proj = zero_linear(config.time_dim, w[0]);
  int in = config.data_dim;
  for (int width : w) {
    m.encoder_.blocks.push_back(zero_linear(in, width));
    in = width;
  }
  const std::size_t n = w.size();
  m.decoder_.blocks.resize(n);
  m.decoder_.blocks[n - 1] = zero_linear(w[n - 1], w[n - 1]);
  for (std::size_t i = n - 1; i-- > 0;) m.decoder_.blocks[i] = zero_linear(w[i + 1] + w[i], w[i]);
  m.decoder_.out = zero_linear(w[0], config.data_dim);
  return m;
}

namespace {

EncoderStack copy_stack(const EncoderStack& e) {
  EncoderStack out;
  out.time_proj = copy_linear(e.time_proj);
  for (const auto& b : e.blocks) out.blocks.push_back(copy_linear(b));
  return out;
}

}  // namespace

BaseModel BaseModel::clone() const {
  BaseModel m;
  m.config_ = config_;
  m.encoder_ = copy_stack(encoder_);
  for (const auto& b : decoder_.blocks) m.decoder_.blocks.push_back(copy_linear(b));
  m.decoder_.out = copy_linear(decoder_.out);
  return m;
}

FeatureStack BaseModel::encode(const Tensor& x_t, std::span<const int> t) const {
  check_state(x_t, config_);
  check_timesteps(t, x_t.rows(), config_);
  const Tensor temb = Tensor::constant(time_embedding(t, config_.time_dim));
  return encoder_.forward(x_t, temb);
}

Tensor BaseModel::decode(const FeatureStack& stacks) const { return decoder_.forward(stacks); }

NamedTensors BaseModel::parameters() const {
  NamedTensors out;
  append(out, "base.encoder", encoder_);
  for (std::size_t i = 0; i < decoder_.blocks.size(); ++i) {
    append(out, "base.decoder.block" + std::to_string(i), decoder_.blocks[i]);
  }
  append(out, "base.decoder.out", decoder_.out);
  return out;
}

void BaseModel::set_requires_grad(bool on) { set_flag(parameters(), on); }

// -------------------------------------------------------- ControlBranch

ControlBranch ControlBranch::init(const BaseModel& base, std::mt19937_64& rng, double zero_std) {
  const ModelConfig& config = base.config();
  ControlBranch c;
  c.config_ = config;
  c.embed_ = glorot(2 * config.data_dim, config.data_dim, rng);
  c.blocks_.time_proj = copy_linear(base.encoder().time_proj);
  for (const auto& b : base.encoder().blocks) c.blocks_.blocks.push_back(copy_linear(b));
  for (int width : config.widths) c.zero_.push_back(random_linear(width, width, rng, zero_std));
  return c;
}

ControlBranch ControlBranch::clone() const {
  ControlBranch c;
  c.config_ = config_;
  c.embed_ = copy_linear(embed_);
  c.blocks_ = copy_stack(blocks_);
  for (const auto& z : zero_) c.zero_.push_back(copy_linear(z));
  return c;
}

FeatureStack ControlBranch::control(const Tensor& x_t, const ConditionBatch& c,
                                    std::span<const int> t) const {
  check_state(x_t, config_);
  check_timesteps(t, x_t.rows(), config_);
  c.validate(x_t.rows(), config_.data_dim);
  const Tensor cond = ad::concat_cols(Tensor::constant(c.mask), Tensor::constant(c.values));
  const Tensor input = ad::add(x_t, embed_(cond));
  const Tensor temb = Tensor::constant(time_embedding(t, config_.time_dim));
  FeatureStack hidden = blocks_.forward(input, temb);
  FeatureStack out;
  out.reserve(hidden.size());
  for (std::size_t i = 0; i < hidden.size(); ++i) out.push_back(zero_[i](hidden[i]));
  return out;
}

NamedTensors ControlBranch::parameters() const {
  NamedTensors out;
  append(out, "control.embed", embed_);
  append(out, "control.encoder", blocks_);
  for (std::size_t i = 0; i < zero_.size(); ++i) {
    append(out, "control.projection" + std::to_string(i), zero_[i]);
  }
  return out;
}

void ControlBranch::set_requires_grad(bool on) { set_flag(parameters(), on); }

void ControlBranch::scale_output(double factor) {
  for (auto& z : zero_) {
    z.weight.leaf_value() *= factor;
    z.bias.leaf_value() *= factor;
  }
}

// ---------------------------------------------------------- composition

Mode parse_mode(std::string_view name) {
  if (name == "vanilla-add") return Mode::VanillaAdd;
  if (name == "minimal-impact") return Mode::MinimalImpact;
  throw std::invalid_argument("unknown mode '" + std::string(name) + "'");
}

std::string_view mode_name(Mode mode) {
  return mode == Mode::VanillaAdd ? "vanilla-add" : "minimal-impact";
}

FeatureStack merge_stacks(const FeatureStack& encoder, const std::vector<FeatureStack>& controls,
                          const ComposeOptions& options) {
  if (controls.empty()) return encoder;
  for (const auto& c : controls) {
    if (c.size() != encoder.size()) throw ad::ShapeError("merge: level count mismatch");
  }
  FeatureStack out(encoder.size());
  if (options.mode == Mode::VanillaAdd) {
    for (std::size_t i = 0; i < encoder.size(); ++i) {
      Tensor acc = encoder[i];
      for (const auto& c : controls) acc = ad::add(acc, c[i]);
      out[i] = acc;
    }
    return out;
  }
  FeatureStack combined = controls.front();
  if (controls.size() > 1) {
    for (std::size_t k = 1; k < controls.size(); ++k) {
      for (std::size_t i = 0; i < encoder.size(); ++i) {
        combined[i] = combine::combine_pair(combined[i], controls[k][i], options.formula,
                                            options.lambda_gradient);
      }
    }
    if (options.trace) options.trace("add_com");
  }
  for (std::size_t i = 0; i < encoder.size(); ++i) {
    out[i] = combine::inject(encoder[i], combined[i], options.formula, options.lambda_gradient);
  }
  if (options.trace) options.trace("add_inj");
  return out;
}

Tensor predict_noise_split(const BaseModel& base, std::span<const ControlInput> controls,
                           const Tensor& x_e, const Tensor& x_c, std::span<const int> t,
                           const ComposeOptions& options) {
  if (x_e.rows() != x_c.rows() || x_e.cols() != x_c.cols()) {
    throw ad::ShapeError("split inputs must share a shape");
  }
  const FeatureStack enc = base.encode(x_e, t);
  std::vector<FeatureStack> ctrl;
  ctrl.reserve(controls.size());
  for (const auto& c : controls) {
    if (c.branch == nullptr || c.condition == nullptr) {
      throw std::invalid_argument("control input needs a branch and a condition");
    }
    if (!(c.branch->config() == base.config())) {
      throw std::invalid_argument("control branch config does not match the base model");
    }
    ctrl.push_back(c.branch->control(x_c, *c.condition, t));
  }
  return base.decode(merge_stacks(enc, ctrl, options));
}

Tensor predict_noise(const BaseModel& base, std::span<const ControlInput> controls,
                     const Tensor& x_t, std::span<const int> t, const ComposeOptions& options) {
  return predict_noise_split(base, controls, x_t, x_t, t, options);
}

Tensor score(const BaseModel& base, const NoiseSchedule& schedule,
             std::span<const ControlInput> controls, const Tensor& x_t, std::span<const int> t,
             const ComposeOptions& options) {
  return score_split(base, schedule, controls, x_t, x_t, t, options);
}

Tensor score_split(const BaseModel& base, const NoiseSchedule& schedule,
                   std::span<const ControlInput> controls, const Tensor& x_e, const Tensor& x_c,
                   std::span<const int> t, const ComposeOptions& options) {
  const Tensor scale = score_scale(t, schedule);
  const Tensor eps = predict_noise_split(base, controls, x_e, x_c, t, options);
  return ad::scale_rows(eps, scale);
}

}  // namespace micn
