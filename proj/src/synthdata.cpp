#include "micn/synthdata.hpp"

#include "binary_io.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace micn {

namespace {

constexpr std::string_view kDatasetMagic = "MICNDSET";

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

double draw_mixture(const SyntheticTask& task, std::mt19937_64& rng) {
  std::bernoulli_distribution sign(0.5);
  std::normal_distribution<double> noise(0.0, task.spread);
  const double center = sign(rng) ? task.mode : -task.mode;
  return center + noise(rng);
}

RowVector draw_sample(const SyntheticTask& task, std::mt19937_64& rng) {
  RowVector x(task.data_dim);
  for (int k = 0; k < task.data_dim; ++k) x(k) = draw_mixture(task, rng);
  return x;
}

}  // namespace

void SyntheticTask::validate() const {
  if (data_dim < 2 || data_dim % 2 != 0) {
    throw std::invalid_argument("task: data_dim must be even and at least 2");
  }
  if (!(spread > 0.0) || !(mode > 0.0)) throw std::invalid_argument("task: bad mixture spec");
  if (!(bias_spread > 0.0 && bias_spread < spread)) {
    throw std::invalid_argument("task: bias_spread must lie in (0, spread)");
  }
  if (!(reveal_prob >= 0.0 && reveal_prob <= 1.0) || !(flip_prob >= 0.0 && flip_prob <= 1.0)) {
    throw std::invalid_argument("task: probabilities must lie in [0, 1]");
  }
}

double SyntheticTask::mixture_mean_abs_difference() const {
  // X - Y = (+-mode -+mode) + N(0, 2 spread^2): half the mass centred at 0,
  // half at +-2 mode.
  const double tau = spread * std::numbers::sqrt2;
  auto folded_mean = [tau](double mu) {
    return tau * std::sqrt(2.0 / std::numbers::pi) * std::exp(-mu * mu / (2.0 * tau * tau)) +
           mu * (1.0 - 2.0 * normal_cdf(-mu / tau));
  };
  return 0.5 * folded_mean(0.0) + 0.5 * folded_mean(2.0 * mode);
}

nlohmann::json SyntheticTask::to_json() const {
  return {{"data_dim", data_dim},       {"mode", mode},
          {"spread", spread},           {"bias_spread", bias_spread},
          {"reveal_prob", reveal_prob}, {"flip_prob", flip_prob}};
}

SyntheticTask SyntheticTask::from_json(const nlohmann::json& j) {
  SyntheticTask t;
  t.data_dim = j.value("data_dim", t.data_dim);
  t.mode = j.value("mode", t.mode);
  t.spread = j.value("spread", t.spread);
  t.bias_spread = j.value("bias_spread", t.bias_spread);
  t.reveal_prob = j.value("reveal_prob", t.reveal_prob);
  t.flip_prob = j.value("flip_prob", t.flip_prob);
  t.validate();
  return t;
}

Region region_of(ConditionType type, int data_dim) {
  const int half = data_dim / 2;
  return type == ConditionType::A ? Region{0, half} : Region{half, data_dim};
}

Condition extract_condition(const RowVector& x0, const RowVector& mask) {
  if (x0.size() != mask.size()) throw std::invalid_argument("extract_condition: size mismatch");
  for (Eigen::Index k = 0; k < mask.size(); ++k) {
    if (mask(k) != 0.0 && mask(k) != 1.0) {
      throw std::invalid_argument("extract_condition: mask must be binary");
    }
  }
  return {mask, mask.cwiseProduct(x0)};
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 finaliser over a combined word.
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

ad::Matrix gen_ground_truth(const SyntheticTask& task, std::size_t n, std::uint64_t seed) {
  return gen_ground_truth(task, 0, n, seed);
}

ad::Matrix gen_ground_truth(const SyntheticTask& task, std::size_t begin, std::size_t end,
                            std::uint64_t seed) {
  task.validate();
  if (end <= begin) throw std::invalid_argument("gen_ground_truth: need at least one sample");
  ad::Matrix out(static_cast<ad::Index>(end - begin), task.data_dim);
  for (std::size_t i = begin; i < end; ++i) {
    std::mt19937_64 rng(stream_seed(seed, i));
    out.row(static_cast<ad::Index>(i - begin)) = draw_sample(task, rng);
  }
  return out;
}

RowVector random_mask(const SyntheticTask& task, Region region, std::mt19937_64& rng) {
  RowVector mask = RowVector::Zero(task.data_dim);
  const int m = region.size();
  if (m <= 0) return mask;
  const double expected = task.reveal_prob * m;
  int length = static_cast<int>(std::floor(expected));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (unit(rng) < expected - length) ++length;
  std::uniform_int_distribution<int> start_dist(0, m - 1);
  const int start = start_dist(rng);
  for (int k = 0; k < length; ++k) mask(region.begin + (start + k) % m) = 1.0;
  for (int k = region.begin; k < region.end; ++k) {
    if (unit(rng) < task.flip_prob) mask(k) = unit(rng) < task.reveal_prob ? 1.0 : 0.0;
  }
  return mask;
}

std::vector<ConditionedSample> gen_biased_pairs(const SyntheticTask& task, std::size_t n,
                                                ConditionType type, std::uint64_t seed,
                                                std::size_t begin) {
  task.validate();
  if (n == 0) throw std::invalid_argument("gen_biased_pairs: n must be positive");
  const Region region = region_of(type, task.data_dim);
  std::vector<ConditionedSample> out;
  out.reserve(n);
  for (std::size_t i = begin; i < begin + n; ++i) {
    std::mt19937_64 rng(stream_seed(seed, i));
    RowVector x0 = draw_sample(task, rng);
    RowVector mask = random_mask(task, region, rng);
    std::normal_distribution<double> blur(0.0, task.bias_spread);
    for (int k = 0; k < task.data_dim; ++k) {
      if (mask(k) == 0.0) x0(k) = blur(rng);
    }
    Condition c = extract_condition(x0, mask);
    out.push_back({std::move(x0), std::move(c), type, false});
  }
  return out;
}

std::vector<ConditionedSample> gen_rebalanced_pairs(const SyntheticTask& task, std::size_t n,
                                                    ConditionType type, std::uint64_t seed,
                                                    std::size_t begin) {
  task.validate();
  if (n == 0) throw std::invalid_argument("gen_rebalanced_pairs: n must be positive");
  const Region region = region_of(type, task.data_dim);
  std::vector<ConditionedSample> out;
  out.reserve(n);
  for (std::size_t i = begin; i < begin + n; ++i) {
    std::mt19937_64 rng(stream_seed(seed, i));
    RowVector x0 = draw_sample(task, rng);
    RowVector mask = random_mask(task, region, rng);
    Condition c = extract_condition(x0, mask);
    out.push_back({std::move(x0), std::move(c), type, false});
  }
  return out;
}

std::vector<MultiConditionSample> gen_multi_condition(const SyntheticTask& task, std::size_t n,
                                                      std::uint64_t seed, std::size_t begin) {
  task.validate();
  if (n == 0) throw std::invalid_argument("gen_multi_condition: n must be positive");
  const Region ra = region_of(ConditionType::A, task.data_dim);
  const Region rb = region_of(ConditionType::B, task.data_dim);
  std::vector<MultiConditionSample> out;
  out.reserve(n);
  for (std::size_t i = begin; i < begin + n; ++i) {
    std::mt19937_64 rng(stream_seed(seed, i));
    RowVector x0 = draw_sample(task, rng);
    RowVector ma = random_mask(task, ra, rng);
    RowVector mb = random_mask(task, rb, rng);
    MultiConditionSample s{x0, extract_condition(x0, ma), extract_condition(x0, mb), false};
    s.degenerate = s.a.silent() && s.b.silent();
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<ConditionedSample> flatten_multi(const std::vector<MultiConditionSample>& samples) {
  std::vector<ConditionedSample> out;
  out.reserve(2 * samples.size());
  for (const auto& s : samples) {
    out.push_back({s.x0, s.a, ConditionType::A, s.degenerate});
    out.push_back({s.x0, s.b, ConditionType::B, s.degenerate});
  }
  return out;
}

// ------------------------------------------------------------ dataset file

void write_dataset(const std::filesystem::path& path, const nlohmann::json& header,
                   const std::vector<ConditionedSample>& records) {
  if (records.empty()) throw std::invalid_argument("write_dataset: no records");
  const int d = static_cast<int>(records.front().x0.size());
  nlohmann::json h = header;
  h["format"] = "micn-dataset";
  h["version"] = 1;
  h["data_dim"] = d;
  h["records"] = records.size();
  h["record_doubles"] = 3 * d + 1;
  const std::string text = h.dump();

  std::string buf;
  buf.reserve(kDatasetMagic.size() + 8 + text.size() +
              records.size() * static_cast<std::size_t>(3 * d + 1) * 8);
  io::append_bytes(buf, kDatasetMagic.data(), kDatasetMagic.size());
  io::append_pod<std::uint64_t>(buf, text.size());
  buf += text;
  std::vector<double> rec(static_cast<std::size_t>(3 * d + 1));
  for (const auto& r : records) {
    if (r.x0.size() != d) throw std::invalid_argument("write_dataset: ragged records");
    for (int k = 0; k < d; ++k) {
      rec[k] = r.x0(k);
      rec[d + k] = r.condition.mask(k);
      rec[2 * d + k] = r.condition.values(k);
    }
    rec[3 * d] = static_cast<double>(static_cast<int>(r.type) + (r.degenerate ? 2 : 0));
    io::append_doubles(buf, rec);
  }
  io::write_file_atomic(path, buf);
}

Dataset read_dataset(const std::filesystem::path& path) {
  io::Reader in(io::read_file(path));
  const std::string what = "dataset " + path.string();
  in.expect_magic(kDatasetMagic, what);
  const auto len = in.pod<std::uint64_t>(what);
  Dataset ds;
  try {
    ds.header = nlohmann::json::parse(in.bytes(len, what));
  } catch (const nlohmann::json::parse_error& e) {
    throw io::FormatError(what + ": malformed header: " + e.what());
  }
  const int d = ds.header.at("data_dim").get<int>();
  const auto count = ds.header.at("records").get<std::size_t>();
  std::vector<double> rec(static_cast<std::size_t>(3 * d + 1));
  if (in.remaining() != count * rec.size() * sizeof(double)) {
    throw io::TruncatedError(what + ": payload size does not match the header");
  }
  ds.records.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    in.doubles(rec, what);
    ConditionedSample s;
    s.x0 = Eigen::Map<const RowVector>(rec.data(), d);
    s.condition.mask = Eigen::Map<const RowVector>(rec.data() + d, d);
    s.condition.values = Eigen::Map<const RowVector>(rec.data() + 2 * d, d);
    const int tag = static_cast<int>(rec[3 * d]);
    s.type = static_cast<ConditionType>(tag % 2);
    s.degenerate = tag >= 2;
    ds.records.push_back(std::move(s));
  }
  return ds;
}

}  // namespace micn
