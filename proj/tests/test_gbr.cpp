// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <set>

#include "robustlab/gbr.hpp"

using namespace robustlab;

namespace {

FeatureVector fv(double n_params, int synth, int act, int loss, int steps,
                 int ema) {
  FeatureVector f;
  f.n_params = n_params;
  f.synthetic_data = synth;
  f.activation = act;
  f.loss = loss;
  f.pgd_steps = steps;
  f.ema = ema;
  return f;
}

std::vector<LabeledSample> random_recipes(int n, std::uint64_t seed,
                                          double noise_sigma,
                                          double w_loss, double w_ema) {
  std::uint64_t rng = mix_seed(seed, 5);
  std::vector<LabeledSample> out;
  const int steps_choices[] = {1, 2, 5, 7, 10};
  for (int i = 0; i < n; ++i) {
    FeatureVector f = fv(
        1e4 + 1e6 * uniform01(rng), static_cast<int>(splitmix64(rng) % 2),
        static_cast<int>(splitmix64(rng) % 2),
        static_cast<int>(splitmix64(rng) % 2),
        steps_choices[splitmix64(rng) % 5],
        static_cast<int>(splitmix64(rng) % 2));
    const double target =
        w_loss * f.loss + w_ema * f.ema + noise_sigma * normal01(rng);
    out.emplace_back(f, target);
  }
  return out;
}

RunRecord fake_record(std::uint64_t seed, double racc) {
  RunRecord r;
  r.config = default_train_config();
  r.config.arch = ArchSpec::mlp(1, 8, {1, 4, 4}, 2);
  r.config.seed = seed;
  r.run_id = "run" + std::to_string(seed);
  r.robust_acc_final = racc;
  return r;
}

}  // namespace

TEST_CASE("train/test split") {
  std::vector<RunRecord> records;
  for (int i = 0; i < 10; ++i)
    records.push_back(fake_record(static_cast<std::uint64_t>(i), 0.1 * i));

  auto [train, test] = split_train_test(records, 0.7, 3);
  CHECK(train.size() == 7);
  CHECK(test.size() == 3);

  auto [train2, test2] = split_train_test(records, 0.7, 3);
  for (size_t i = 0; i < train.size(); ++i)
    CHECK(train[i].run_id == train2[i].run_id);

  std::multiset<std::string> all;
  for (const auto& r : train) all.insert(r.run_id);
  for (const auto& r : test) all.insert(r.run_id);
  std::multiset<std::string> expect;
  for (const auto& r : records) expect.insert(r.run_id);
  CHECK(all == expect);

  CHECK_THROWS_AS(split_train_test({records.begin(), records.begin() + 3},
                                   0.7, 0),
                  std::invalid_argument);
}

TEST_CASE("constant target gives a degenerate model") {
  std::vector<LabeledSample> train;
  for (int i = 0; i < 8; ++i) train.emplace_back(fv(1e5, i % 2, 0, 1, 5, 0), 42.0);
  const GbrModel m = fit_gbr(train, 50, 5, 0.1);
  CHECK(m.degenerate);
  for (double imp : m.importances) CHECK(imp == 0.0);
  CHECK(m.predict(fv(2e5, 1, 1, 0, 1, 1)) == doctest::Approx(42.0));
}

TEST_CASE("single binary feature is learned to numerical zero") {
  std::vector<LabeledSample> train;
  for (int i = 0; i < 12; ++i) {
    const int bit = i % 2;
    train.emplace_back(fv(1e5, bit, 0, 0, 5, 0), static_cast<double>(bit));
  }
  const GbrModel m = fit_gbr(train, 50, 5, 0.5);
  CHECK(m.stage_mse.back() < 1e-6);
  CHECK(m.predict(fv(1e5, 1, 0, 0, 5, 0)) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(m.predict(fv(1e5, 0, 0, 0, 5, 0)) == doctest::Approx(0.0).scale(1.0).epsilon(1e-6));
}

TEST_CASE("planted-signal importance ranking") {
  int recovered = 0;
  const int trials = 20;
  for (int seed = 0; seed < trials; ++seed) {
    const auto train =
        random_recipes(120, static_cast<std::uint64_t>(seed), 0.1, 10.0, 3.0);
    const GbrModel m = fit_gbr(train, 50, 5, 0.1);
    const auto imp = feature_importance(m);
    // indices: 3 = loss, 5 = ema, 2 = activation
    if (imp[3] > imp[5] && imp[5] > imp[2]) ++recovered;
  }
  CHECK(recovered >= trials - 1);
}

TEST_CASE("importances sum to one for nondegenerate fits") {
  const auto train = random_recipes(60, 9, 0.5, 4.0, 2.0);
  const GbrModel m = fit_gbr(train, 30, 4, 0.2);
  double sum = 0;
  for (double v : feature_importance(m)) {
    CHECK(v >= 0.0);
    sum += v;
  }
  CHECK(std::abs(sum - 1.0) < 1e-9);
}

TEST_CASE("zero estimators predict the base") {
  const auto train = random_recipes(20, 2, 0.5, 4.0, 2.0);
  const GbrModel m = fit_gbr(train, 0, 5, 0.1);
  double mean = 0;
  for (const auto& [f, t] : train) mean += t;
  mean /= static_cast<double>(train.size());
  CHECK(m.predict(train[0].first) == doctest::Approx(mean).epsilon(1e-12));
}

TEST_CASE("stagewise training MSE is monotone non-increasing") {
  const auto train = random_recipes(80, 4, 1.0, 6.0, 2.5);
  const GbrModel m = fit_gbr(train, 50, 5, 0.1);
  REQUIRE(m.stage_mse.size() == 50);
  for (size_t i = 1; i < m.stage_mse.size(); ++i)
    CHECK(m.stage_mse[i] <= m.stage_mse[i - 1] + 1e-12);
}

TEST_CASE("identical feature vectors land in identical leaves") {
  const auto train = random_recipes(50, 6, 0.3, 5.0, 1.0);
  const GbrModel m = fit_gbr(train, 25, 5, 0.1);
  const FeatureVector probe = fv(123456, 1, 0, 1, 7, 0);
  CHECK(m.predict(probe) == m.predict(probe));
  FeatureVector probe2 = probe;
  CHECK(m.predict(probe2) == m.predict(probe));
}

TEST_CASE("fitting is deterministic in the input order") {
  const auto train = random_recipes(40, 8, 0.4, 5.0, 1.0);
  const GbrModel a = fit_gbr(train, 20, 5, 0.1);
  const GbrModel b = fit_gbr(train, 20, 5, 0.1);
  CHECK(a.to_json().dump() == b.to_json().dump());
}

TEST_CASE("splits only depend on the feature order statistics") {
  // log10 vs log2 transforms of n_params give identical tree structure;
  // n' = n^(1/log10 2) makes log10(n') == log2(n)
  auto train = random_recipes(60, 12, 0.2, 8.0, 3.0);
  auto rescaled = train;
  for (auto& [f, t] : rescaled)
    f.n_params = std::pow(f.n_params, 1.0 / std::log10(2.0));
  const GbrModel a = fit_gbr(train, 20, 5, 0.1);
  const GbrModel b = fit_gbr(rescaled, 20, 5, 0.1);
  REQUIRE(a.trees.size() == b.trees.size());
  for (size_t t = 0; t < a.trees.size(); ++t) {
    REQUIRE(a.trees[t].nodes.size() == b.trees[t].nodes.size());
    for (size_t n = 0; n < a.trees[t].nodes.size(); ++n) {
      CHECK(a.trees[t].nodes[n].feature == b.trees[t].nodes[n].feature);
      CHECK(a.trees[t].nodes[n].leaf_value ==
            doctest::Approx(b.trees[t].nodes[n].leaf_value).epsilon(1e-9));
    }
  }
  for (size_t i = 0; i < train.size(); ++i)
    CHECK(a.predict(train[i].first) ==
          doctest::Approx(b.predict(rescaled[i].first)).epsilon(1e-9));
}

TEST_CASE("json export round-trips exactly") {
  const auto train = random_recipes(50, 14, 0.3, 6.0, 2.0);
  const GbrModel m = fit_gbr(train, 15, 5, 0.1);
  const auto j = m.to_json();
  const GbrModel back = GbrModel::from_json(j);
  CHECK(back.to_json().dump() == j.dump());
  for (const auto& [f, t] : train)
    CHECK(back.predict(f) == m.predict(f));  // bitwise
}

TEST_CASE("input validation") {
  CHECK_THROWS_AS(fit_gbr({}, 10, 5, 0.1), std::invalid_argument);
  std::vector<LabeledSample> bad{{fv(1e5, 0, 0, 0, 5, 0), 1.0},
                                 {fv(1e5, 1, 0, 0, 5, 0),
                                  std::numeric_limits<double>::quiet_NaN()}};
  CHECK_THROWS_AS(fit_gbr(bad, 10, 5, 0.1), std::invalid_argument);
  FeatureVector f = fv(1e5, 2, 0, 0, 5, 0);
  CHECK_THROWS_AS(f.validate(), std::invalid_argument);
}
