#include "support.hpp"

#include "micn/evalsuite.hpp"

#include <doctest.h>

#include <filesystem>

using namespace micn;
using ad::Matrix;

namespace {

std::filesystem::path temp_dir() {
  const auto d = std::filesystem::temp_directory_path() / "micn_test_eval";
  std::filesystem::create_directories(d);
  return d;
}

// Cheap checkpoints: a short base plus two short branch runs.
struct Runs {
  std::string a, b, base;
  Runs() {
    const auto dir = temp_dir();
    const auto data = flatten_multi(gen_multi_condition(SyntheticTask{}, 2000, 1));
    TrainConfig bc = TrainConfig::recipe(Stage::Base);
    bc.steps = 30;
    bc.batch = 64;
    const Checkpoint base_ck = train(bc, data, nullptr);
    base = (dir / "base.bin").string();
    save_checkpoint(base, base_ck);
    for (const char* t : {"A", "B"}) {
      TrainConfig c = TrainConfig::recipe(Stage::One);
      c.steps = 10;
      c.batch = 64;
      c.condition_type = t;
      const Checkpoint ck = train(c, data, &base_ck);
      const auto path = (dir / (std::string("branch_") + t + ".bin")).string();
      save_checkpoint(path, ck);
      (std::string(t) == "A" ? a : b) = path;
    }
  }
};

const Runs& runs() {
  static const Runs r;
  return r;
}

}  // namespace

TEST_CASE("total variance: ground truth and collapsed samples") {
  const SyntheticTask task;
  const Matrix x = gen_ground_truth(task, 10000, 2);
  const Region r = region_of(ConditionType::B, 8);
  CHECK(std::abs(eval::total_variance(x, r) - 4 * 1.0625) <= 0.05 * 4 * 1.0625);
  CHECK(eval::total_variance(Matrix::Constant(50, 8, 0.3), r) <= 1e-20);
  CHECK_THROWS_AS(eval::total_variance(x.topRows(1), r), std::invalid_argument);
}

TEST_CASE("cycle L1: copy oracle, shuffled conditions, independent draws") {
  const SyntheticTask task;
  const ConditionBatch c = eval::single_conditions(task, ConditionType::A, 20000, 3);
  // copy oracle: revealed coordinates reproduced exactly, the rest arbitrary
  const Matrix x = c.values + (1.0 - c.mask.array()).matrix().cwiseProduct(Matrix::Constant(20000, 8, 7.0));
  CHECK(eval::cycle_l1(x, c) == 0.0);

  Matrix shuffled = x;
  shuffled.topRows(19999) = x.bottomRows(19999);
  shuffled.row(19999) = x.row(0);
  CHECK(eval::cycle_l1(shuffled, c) > 0.5);

  const Matrix independent = gen_ground_truth(task, 20000, 4);
  CHECK(eval::cycle_l1(independent, c) ==
        doctest::Approx(task.mixture_mean_abs_difference()).epsilon(0.03));

  CHECK_THROWS_AS(eval::cycle_l1(x, ConditionBatch::silent(20000, 8)), std::invalid_argument);
}

TEST_CASE("MMD: identical sets, null case, shifted case") {
  std::mt19937_64 rng(5);
  const Matrix a = testing::random_matrix(1000, 2, rng);
  CHECK(eval::mmd(a, a).mmd2 == 0.0);
  const Matrix b = testing::random_matrix(1000, 2, rng);
  const auto null = eval::permutation_test(a, b, 0.0, 200, 6);
  CHECK(std::abs(null.statistic) <= null.null_q99);
  CHECK(eval::mmd(a, b).raw == doctest::Approx(null.statistic).epsilon(1e-12));

  const Matrix shifted = (testing::random_matrix(1000, 2, rng).array() + 2.0).matrix();
  const auto alt = eval::permutation_test(a, shifted, 0.0, 200, 7);
  CHECK(alt.statistic > alt.null_q99);
  CHECK(alt.p_value < 0.01);
  CHECK(eval::mmd(a, shifted).mmd2 > 0.1);
}

TEST_CASE("MMD: permutation null coverage") {
  std::mt19937_64 rng(8);
  int below = 0;
  const int trials = 60;
  for (int k = 0; k < trials; ++k) {
    const Matrix a = testing::random_matrix(80, 3, rng), b = testing::random_matrix(80, 3, rng);
    const auto t = eval::permutation_test(a, b, 0.0, 200, static_cast<std::uint64_t>(k));
    below += t.statistic < t.null_q95;
  }
  CHECK(below >= 0.9 * trials);
}

TEST_CASE("median bandwidth") {
  Matrix a(2, 1), b(1, 1);
  a << 0.0, 1.0;
  b << 3.0;
  // pairwise distances 1, 2, 3
  CHECK(eval::median_bandwidth(a, b) == 2.0);
  CHECK(eval::median_bandwidth(a, Matrix(0, 1)) == 1.0);
}

TEST_CASE("experiments: missing checkpoint names the run, unknown experiment") {
  try {
    eval::run_experiment("asym-two-stage", {{"stage1", "/nonexistent/s1.bin"}, {"stage2", "/nonexistent/s2.bin"}});
    FAIL("expected an error");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("stage1") != std::string::npos);
    CHECK(msg.find("train") != std::string::npos);
  }
  CHECK_THROWS_AS(eval::run_experiment("nope", nlohmann::json::object()), std::invalid_argument);
}

TEST_CASE("experiments: single-silent-tv and asym-two-stage are reproducible") {
  const auto& r = runs();
  const nlohmann::json tv_cfg = {{"runs", {{"biased", r.a}, {"rebalanced", r.a}}}, {"n", 60}, {"seed", 2}};
  const auto rep = eval::run_experiment("single-silent-tv", tv_cfg);
  CHECK(rep.to_json() == eval::run_experiment("single-silent-tv", tv_cfg).to_json());
  CHECK(rep.summary["ratio"].get<double>() == 1.0);
  CHECK(rep.summary["region_size"] == 4);
  CHECK(rep.value("biased", "total_variance_silent", "B", 2) > 0.0);

  const nlohmann::json asym_cfg = {{"stage1", r.a}, {"stage2", r.a}, {"points", 3}, {"dsm_samples", 64}, {"records", 100}};
  const auto ar = eval::run_experiment("asym-two-stage", asym_cfg);
  CHECK(ar.summary["asym_ratio"].get<double>() == doctest::Approx(1.0));
  CHECK(ar.summary["dsm_degradation"].get<double>() == 0.0);
  CHECK(ar.summary["asym_stage1"].get<double>() >= 0.0);
}

TEST_CASE("experiments: multi-combo layout and CSV") {
  const auto& r = runs();
  const nlohmann::json cfg = {
      {"variants",
       {{"minimal-impact", {{"mode", "minimal-impact"}, {"branches", {r.a, r.b}}}},
        {"vanilla-add", {{"mode", "vanilla-add"}, {"branches", {r.a, r.b}}}}}},
      {"n", 40},
      {"seeds", {0, 1}}};
  const auto rep = eval::run_experiment("multi-combo", cfg);
  for (const char* v : {"minimal-impact", "vanilla-add"}) {
    for (std::uint64_t seed : {0, 1}) {
      CHECK(rep.value(v, "cycle_l1", "A", seed) >= 0.0);
      CHECK(rep.value(v, "cycle_l1", "B", seed) >= 0.0);
      for (const char* key : {"silent", "silent-A", "silent-B", "full"}) CHECK(rep.value(v, "mmd", key, seed) >= 0.0);
    }
    CHECK(rep.summary["means"][v].contains("cycle_l1_A"));
  }
  for (const auto& row : rep.rows) CHECK(row.count > 0);
  const std::string csv = rep.to_csv();
  CHECK(csv.rfind("scenario,seed,metric,key,value,count\n", 0) == 0);
  CHECK(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')) == rep.rows.size() + 1);
  CHECK(rep.to_json() == eval::run_experiment("multi-combo", cfg).to_json());

  const auto dir = temp_dir() / "report";
  eval::write_report(rep, dir);
  CHECK(std::filesystem::exists(dir / "report.json"));
  CHECK(std::filesystem::exists(dir / "metrics.csv"));

  // branches from different bases are refused
  TrainConfig bc = TrainConfig::recipe(Stage::Base);
  bc.steps = 1;
  bc.seed = 99;
  const auto data = gen_rebalanced_pairs(SyntheticTask{}, 100, ConditionType::B, 1);
  const Checkpoint other_base = train(bc, data, nullptr);
  TrainConfig c1 = TrainConfig::recipe(Stage::One);
  c1.steps = 0;
  const auto path = (temp_dir() / "other.bin").string();
  save_checkpoint(path, train(c1, data, &other_base));
  nlohmann::json bad = cfg;
  bad["variants"] = {{"x", {{"branches", {r.a, path}}}}};
  CHECK_THROWS_AS(eval::run_experiment("multi-combo", bad), std::invalid_argument);
}
