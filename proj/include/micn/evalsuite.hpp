#pragma once

// Desk-scale metrics and the experiment runner.

#include "micn/diffusion.hpp"
#include "micn/synthdata.hpp"
#include "micn/trainer.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace micn::eval {

/// Sum over region coordinates of the unbiased per-coordinate sample variance.
double total_variance(const ad::Matrix& samples, Region region);

/// Mean |x_k - c_k| over every revealed coordinate of every row. Throws when
/// nothing is revealed.
double cycle_l1(const ad::Matrix& samples, const ConditionBatch& conditions);

/// Median pairwise Euclidean distance over the pooled rows (exact for up to
/// 2000 rows, an evenly strided subset beyond that).
double median_bandwidth(const ad::Matrix& a, const ad::Matrix& b);

struct MmdResult {
  double mmd2 = 0.0;  // clipped at 0
  double raw = 0.0;   // unbiased estimate, may be negative
  double bandwidth = 0.0;
};

/// Unbiased Gaussian-kernel MMD^2 with k(x, y) = exp(-|x - y|^2 / (2 h^2)).
/// `bandwidth` <= 0 selects the median heuristic.
MmdResult mmd(const ad::Matrix& a, const ad::Matrix& b, double bandwidth = 0.0);

struct PermutationTest {
  double statistic = 0.0;  // raw unbiased MMD^2
  double p_value = 1.0;
  double null_q95 = 0.0;
  double null_q99 = 0.0;
};

PermutationTest permutation_test(const ad::Matrix& a, const ad::Matrix& b, double bandwidth,
                                 std::size_t permutations, std::uint64_t seed);

/// `n` conditions that reveal part of `type`'s region from unbiased draws and
/// are silent on the other region.
ConditionBatch single_conditions(const SyntheticTask& task, ConditionType type, std::size_t n,
                                 std::uint64_t seed);

/// Generate `conditions.rows()` samples with one branch and measure total
/// variance over `region`.
double total_variance_silent(const BaseModel& base, const NoiseSchedule& schedule,
                             const ControlBranch& branch, const ConditionBatch& conditions,
                             Region region, std::uint64_t seed, const ComposeOptions& options);

/// Denoising loss of a model on a fixed batch drawn from `records`.
double held_out_dsm(const RestoredModel& model, const std::vector<ConditionedSample>& records,
                    std::size_t n, std::uint64_t seed, const ComposeOptions& options);

/// Exact Asym at `n` points (x_t from `records`, t ~ U{1..T}).
double held_out_asym(const RestoredModel& model, const std::vector<ConditionedSample>& records,
                     std::size_t n, std::uint64_t seed, const ComposeOptions& options);

/// Flat metric row for the CSV tables.
struct MetricRow {
  std::string scenario;
  std::uint64_t seed = 0;
  std::string metric;
  std::string key;  // condition type, region, or empty
  double value = 0.0;
  std::size_t count = 0;
};

struct EvalReport {
  std::string experiment;
  std::vector<MetricRow> rows;
  nlohmann::json summary;  // experiment-specific aggregates
  nlohmann::json config;

  /// First row matching all given fields; throws when absent.
  double value(std::string_view scenario, std::string_view metric, std::string_view key = "",
               std::uint64_t seed = 0) const;
  nlohmann::json to_json() const;
  std::string to_csv() const;
};

/// Loads a checkpoint for `role`; a missing file raises an error naming the
/// run that produces it.
Checkpoint require_checkpoint(const std::filesystem::path& path, const std::string& role);

/// `single-silent-tv`, `asym-two-stage` or `multi-combo`; see README for the
/// config keys each expects.
EvalReport run_experiment(const std::string& name, const nlohmann::json& config);

/// Write `report.json` and `metrics.csv` into `dir`.
void write_report(const EvalReport& report, const std::filesystem::path& dir);

}  // namespace micn::eval
