// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <map>

#include "robustlab/harness.hpp"

using namespace robustlab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name)
      : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string sub(const std::string& n) const { return (path / n).string(); }
};

TrainConfig tiny_config() {
  TrainConfig cfg = default_train_config();
  cfg.arch = ArchSpec::mlp(1, 8, {1, 6, 6}, 2);
  cfg.attack.epsilon = 8.0 / 255.0;
  cfg.attack.steps = 1;
  cfg.epochs = 1;
  cfg.batch_size = 16;
  cfg.lr = 0.05;
  cfg.eval_attack.steps = 5;
  cfg.eval_attack.restarts = 1;
  cfg.eval_subset = 16;
  return cfg;
}

GridSpec tiny_grid() {
  GridSpec g;
  g.base = tiny_config();
  g.losses = {LossType::At, LossType::Trades};
  g.steps = {1, 2};
  g.seeds = {1};
  return g;
}

RunRecord synthetic_record(int i, double flops, double racc) {
  RunRecord r;
  r.config = tiny_config();
  r.config.seed = static_cast<std::uint64_t>(i);
  r.run_id = run_id_for(r.config);
  r.train_flops = flops;
  r.robust_acc_final = racc;
  r.robust_acc_earlystop = racc;
  r.clean_acc = std::min(1.0, racc + 0.2);
  r.epochs_trained = 1;
  return r;
}

void null_environment_fields(json& j) {
  j["wall_seconds"] = 0.0;
  j["kwh"] = 0.0;
  j["usd"] = 0.0;
  j["co2_g"] = 0.0;
}

}  // namespace

TEST_CASE("run ids are stable hashes of the canonical config") {
  TrainConfig a = tiny_config();
  CHECK(run_id_for(a) == run_id_for(a));
  CHECK(run_id_for(a).size() == 16);
  TrainConfig b = a;
  b.seed = 99;
  CHECK(run_id_for(a) != run_id_for(b));
  TrainConfig c = a;
  c.attack.steps = 7;
  CHECK(run_id_for(a) != run_id_for(c));
}

TEST_CASE("config json round trip preserves the canonical form") {
  TrainConfig cfg = tiny_config();
  cfg.loss = LossType::Trades;
  cfg.attack.loss_kind = AttackLoss::KlVsClean;
  cfg.extra_data = true;
  cfg.extra_ratio = 0.25;
  cfg.ema = true;
  const TrainConfig back = config_from_json(config_to_json(cfg));
  CHECK(canonical_config(back) == canonical_config(cfg));
}

TEST_CASE("record json uses the exact schema keys") {
  const RunRecord r = synthetic_record(0, 1e9, 0.5);
  const json j = record_to_json(r);
  const std::vector<std::string> keys{
      "run_id", "v", "config", "clean_acc", "robust_acc_earlystop",
      "robust_acc_final", "train_flops", "wall_seconds", "kwh", "usd",
      "co2_g", "best_epoch", "epochs_trained", "seed", "failed"};
  CHECK(j.size() == keys.size());
  for (const auto& k : keys) CHECK(j.contains(k));
  const RunRecord back = record_from_json(j);
  CHECK(record_to_json(back).dump() == j.dump());
}

TEST_CASE("grid expansion is the cartesian product minus exclusions") {
  GridSpec g = tiny_grid();
  g.archs = {ArchSpec::mlp(1, 8, {1, 6, 6}, 2), ArchSpec::mlp(2, 8, {1, 6, 6}, 2)};
  auto configs = g.expand();
  CHECK(configs.size() == 8);  // 2 archs x 2 losses x 2 steps

  std::map<std::string, int> ids;
  for (const auto& c : configs) ids[run_id_for(c)]++;
  for (const auto& [id, n] : ids) CHECK(n == 1);

  g.exclude.push_back({{"loss", "trades"}, {"steps", 2}});
  CHECK(g.expand().size() == 6);

  g.exclude.push_back({{"loss", "at"}});
  CHECK(g.expand().size() == 2);

  // trades configs carry the KL attack objective
  for (const auto& c : tiny_grid().expand())
    if (c.loss == LossType::Trades)
      CHECK(c.attack.loss_kind == AttackLoss::KlVsClean);
}

TEST_CASE("records file is line-delimited and independently parseable") {
  TempDir dir("robustlab_records");
  const std::string path = dir.sub("records.jsonl");
  for (int i = 0; i < 3; ++i)
    append_run_record(path, synthetic_record(i, 1e9 * (i + 1), 0.1 * (i + 1)));
  const auto loaded = load_run_records(path);
  REQUIRE(loaded.size() == 3);
  CHECK(loaded[1].train_flops == doctest::Approx(2e9));

  // every line parses on its own
  std::ifstream is(path);
  std::string line;
  int lines = 0;
  while (std::getline(is, line)) {
    ++lines;
    CHECK_NOTHROW(record_from_json(json::parse(line)));
  }
  CHECK(lines == 3);

  std::ofstream(path, std::ios::app) << "{broken\n";
  CHECK_THROWS_WITH_AS(load_run_records(path), doctest::Contains("line 4"),
                       std::runtime_error);
}

TEST_CASE("grid runner: records, models, idempotence, determinism") {
  TempDir dir("robustlab_grid");
  Dataset data = gen_blobs(80, 6, 0.15, 11);
  GridSpec g = tiny_grid();

  GridOutcome first = run_grid(g, data, dir.sub("out"), 1);
  CHECK(first.records.size() == 4);
  CHECK(first.n_new == 4);
  CHECK(first.n_skipped == 0);
  CHECK(first.n_failed == 0);
  for (const auto& r : first.records) {
    CHECK(fs::exists(dir.sub("out") + "/models/" + r.run_id + ".bin"));
    CHECK(!r.run_id.empty());
  }

  // resumption skips completed runs
  GridOutcome second = run_grid(g, data, dir.sub("out"), 1);
  CHECK(second.n_new == 0);
  CHECK(second.n_skipped == 4);
  CHECK(second.records.size() == 4);

  // a second directory with parallel workers reproduces the records
  GridOutcome par = run_grid(g, data, dir.sub("out2"), 3);
  REQUIRE(par.records.size() == first.records.size());
  for (size_t i = 0; i < par.records.size(); ++i) {
    json a = record_to_json(first.records[i]);
    json b = record_to_json(par.records[i]);
    null_environment_fields(a);
    null_environment_fields(b);
    CHECK(a.dump() == b.dump());
  }
}

TEST_CASE("reports from synthetic records") {
  TempDir dir("robustlab_reports");
  std::vector<RunRecord> records;
  // metric values on an exact power law in FLOPs: racc% = 2 * flops^0.1
  for (int i = 0; i < 12; ++i) {
    const double flops = std::pow(10.0, 8.0 + 0.25 * i);
    const double racc_pct = 2.0 * std::pow(flops, 0.1);
    records.push_back(synthetic_record(i, flops, racc_pct / 100.0));
  }

  SUBCASE("summary csv has one row per record") {
    const std::string path = dir.sub("summary.csv");
    report(records, "summary_csv", {}, path);
    std::ifstream is(path);
    std::string line;
    int rows = -1;  // header
    while (std::getline(is, line)) ++rows;
    CHECK(rows == 12);
  }

  SUBCASE("envelope csv holds at most `bins` rows") {
    ReportOptions opt;
    opt.bins = 19;
    const std::string path = dir.sub("envelope.csv");
    report(records, "envelope_csv", opt, path);
    std::ifstream is(path);
    std::string line;
    std::getline(is, line);
    CHECK(line == "flops,metric,run_id");
    int rows = 0;
    while (std::getline(is, line)) ++rows;
    CHECK(rows <= 19);
    CHECK(rows >= 2);
  }

  SUBCASE("fit json recovers the exact generating law") {
    const json fit = make_fit_json(records, {});
    CHECK(std::abs(fit.at("r2").get<double>() - 1.0) < 1e-9);
    CHECK(fit.at("alpha").get<double>() == doctest::Approx(0.1).epsilon(1e-9));
    CHECK(fit.at("C").get<double>() == doctest::Approx(2.0).epsilon(1e-9));
    CHECK(fit.at("n_points").get<int>() >= 2);
    CHECK(fit.at("bins").get<int>() == 19);
  }

  SUBCASE("predictor json trains and reports holdout error") {
    ReportOptions opt;
    opt.seed = 5;
    const json pred = make_predictor_json(records, opt);
    CHECK(pred.contains("base_prediction"));
    CHECK(pred.contains("trees"));
    CHECK(pred.contains("importances"));
    CHECK(pred.at("n_train").get<int>() + pred.at("n_test").get<int>() == 12);
  }

  SUBCASE("zero successful records is an error") {
    for (auto& r : records) r.failed = true;
    CHECK_THROWS_AS(report(records, "envelope_csv", {}, dir.sub("x.csv")),
                    std::invalid_argument);
  }

  SUBCASE("unknown kinds are rejected") {
    CHECK_THROWS_AS(report(records, "nope", {}, dir.sub("x")),
                    std::invalid_argument);
  }
}

TEST_CASE("a stored record whose id belongs to a different config is fatal") {
  TempDir dir("robustlab_collision");
  Dataset data = gen_blobs(40, 6, 0.1, 13);
  GridSpec g = tiny_grid();
  const TrainConfig victim = g.expand().front();

  RunRecord impostor = synthetic_record(99, 1e9, 0.4);
  impostor.run_id = run_id_for(victim);  // same id, different config
  fs::create_directories(dir.sub("out"));
  append_run_record(dir.sub("out") + "/records.jsonl", impostor);
  CHECK_THROWS_WITH_AS(run_grid(g, data, dir.sub("out"), 1),
                       doctest::Contains("collision"), std::runtime_error);
}

TEST_CASE("failed runs are flagged and the grid continues") {
  TempDir dir("robustlab_gridfail");
  Dataset data = gen_blobs(40, 6, 0.15, 12);
  GridSpec g;
  g.base = tiny_config();
  g.base.lr = 1e18;  // diverges
  g.base.epochs = 6;
  g.base.batch_size = 4;
  g.losses = {LossType::At};
  g.steps = {1, 2};
  GridOutcome out = run_grid(g, data, dir.sub("out"), 1);
  CHECK(out.records.size() == 2);
  CHECK(out.n_failed == 2);
  for (const auto& r : out.records) CHECK(r.failed);
}
