#pragma once

// Synthetic ground truth and conditioned training pairs.
//
// Each coordinate is an independent two-component Gaussian mixture (modes at
// +-mode, shared spread). A condition is a binary mask plus the revealed
// values mask * x0; an all-zero mask is a silent condition.

#include "micn/autodiff.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace micn {

using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

struct SyntheticTask {
  int data_dim = 8;
  double mode = 1.0;
  double spread = 0.25;
  double bias_spread = 0.1;  // std of the "blurred" silent-region redraw
  double reveal_prob = 0.5;  // marginal probability a coordinate is revealed
  double flip_prob = 0.2;    // per-coordinate resampling after the block draw

  void validate() const;
  double mixture_variance() const { return mode * mode + spread * spread; }
  /// E|X - Y| for independent X, Y from one coordinate's mixture.
  double mixture_mean_abs_difference() const;

  nlohmann::json to_json() const;
  static SyntheticTask from_json(const nlohmann::json& j);
};

/// Which coordinate block a control branch may reveal: A the first half, B
/// the second half.
enum class ConditionType : std::uint8_t { A = 0, B = 1 };

struct Region {
  int begin = 0;
  int end = 0;
  int size() const { return end - begin; }
  bool contains(int k) const { return k >= begin && k < end; }
};

Region region_of(ConditionType type, int data_dim);

struct Condition {
  RowVector mask;
  RowVector values;

  bool silent() const { return mask.sum() == 0.0; }
};

Condition extract_condition(const RowVector& x0, const RowVector& mask);

struct ConditionedSample {
  RowVector x0;
  Condition condition;
  ConditionType type = ConditionType::A;
  bool degenerate = false;  // multi-condition layout with both masks silent
};

struct MultiConditionSample {
  RowVector x0;
  Condition a;
  Condition b;
  bool degenerate = false;
};

// Every generator derives an independent stream per sample index from the
// seed, so shards [begin, end) concatenate to the full stream.

ad::Matrix gen_ground_truth(const SyntheticTask& task, std::size_t n, std::uint64_t seed);
ad::Matrix gen_ground_truth(const SyntheticTask& task, std::size_t begin, std::size_t end,
                            std::uint64_t seed);

/// Random mask restricted to `region`: a cyclic contiguous block of expected
/// length reveal_prob * |region|, then independent Bernoulli(reveal_prob)
/// resampling of each region coordinate with probability flip_prob.
RowVector random_mask(const SyntheticTask& task, Region region, std::mt19937_64& rng);

/// Unrevealed coordinates are redrawn from N(0, bias_spread^2).
std::vector<ConditionedSample> gen_biased_pairs(const SyntheticTask& task, std::size_t n,
                                                ConditionType type, std::uint64_t seed,
                                                std::size_t begin = 0);

/// x0 always from the unbiased mixture; the mask picks the revealed portion.
std::vector<ConditionedSample> gen_rebalanced_pairs(const SyntheticTask& task, std::size_t n,
                                                    ConditionType type, std::uint64_t seed,
                                                    std::size_t begin = 0);

/// Disjoint conditions: A reveals part of region A, B part of region B.
std::vector<MultiConditionSample> gen_multi_condition(const SyntheticTask& task, std::size_t n,
                                                      std::uint64_t seed,
                                                      std::size_t begin = 0);

/// Mix a seed and an index into an independent 64-bit stream seed.
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t index);

// ------------------------------------------------------------ dataset file
//
// "MICNDSET", uint64 header length, JSON header, then `records` records of
// (x0 | mask | values | tag) as little-endian float64. tag = type + 2 * degenerate.

struct Dataset {
  nlohmann::json header;
  std::vector<ConditionedSample> records;
};

void write_dataset(const std::filesystem::path& path, const nlohmann::json& header,
                   const std::vector<ConditionedSample>& records);
Dataset read_dataset(const std::filesystem::path& path);

/// Flatten multi-condition samples into consecutive (A, B) record pairs.
std::vector<ConditionedSample> flatten_multi(const std::vector<MultiConditionSample>& samples);

}  // namespace micn
