// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>

#include "fd_check.hpp"
#include "robustlab/attacks.hpp"
#include "robustlab/data.hpp"
#include "robustlab/nn.hpp"

using namespace robustlab;

namespace {

constexpr double kEps = 8.0 / 255.0;

Tensor interior_batch(int n, int d, std::uint64_t seed) {
  std::uint64_t rng = mix_seed(seed, 1);
  Tensor x({n, 1, 1, d});
  for (auto& v : x.data()) v = 0.3 + 0.4 * uniform01(rng);
  return x;
}

std::vector<int> random_labels(int n, int classes, std::uint64_t seed) {
  std::uint64_t rng = mix_seed(seed, 2);
  std::vector<int> y(static_cast<size_t>(n));
  for (auto& l : y)
    l = static_cast<int>(splitmix64(rng) % static_cast<std::uint64_t>(classes));
  return y;
}

AttackConfig basic_cfg(int steps, bool random_start = false, int restarts = 1) {
  AttackConfig cfg;
  cfg.epsilon = kEps;
  cfg.steps = steps;
  cfg.random_start = random_start;
  cfg.restarts = restarts;
  return cfg;
}

std::vector<int> all_idx(int n) {
  std::vector<int> v(static_cast<size_t>(n));
  std::iota(v.begin(), v.end(), 0);
  return v;
}

}  // namespace

TEST_CASE("single-step attack without random start is FGSM") {
  const int n = 4, d = 6;
  Model model = Model::build(ArchSpec::mlp(1, 8, {1, 1, d}, 3), 11);
  Tensor x = interior_batch(n, d, 5);
  std::vector<int> y = random_labels(n, 3, 6);

  // reference gradient of the summed CE at the clean point, frozen BN
  Tape tape;
  Tensor xin = x.clone();
  xin.set_requires_grad(true);
  Tensor logits = model.forward(&tape, xin, BnMode::Frozen);
  Tensor loss = ops::sum(&tape, cross_entropy_rows(&tape, logits, y));
  tape.backward(loss);
  Tensor g = tape.grad(xin);

  PgdResult res = pgd(model, x, y, basic_cfg(1), nullptr, 0);
  for (size_t i = 0; i < g.data().size(); ++i) {
    const double gi = g.data()[i];
    const double expect = gi > 0 ? kEps : (gi < 0 ? -kEps : 0.0);
    CHECK(res.delta.data()[i] == expect);
  }
}

TEST_CASE("linear model attack achieves the closed-form worst case") {
  const int n = 6, d = 5;
  Model model = Model::build(ArchSpec::mlp(0, 1, {1, 1, d}, 2), 3);
  Tensor x = interior_batch(n, d, 9);
  std::vector<int> y = random_labels(n, 2, 10);
  const Tensor& w = *model.parameters()[0].second;  // [d, 2]
  const Tensor& b = *model.parameters()[1].second;

  for (int steps : {1, 3, 10}) {
    PgdResult res = pgd(model, x, y, basic_cfg(steps), nullptr, 0);
    for (int i = 0; i < n; ++i) {
      const int yi = y[static_cast<size_t>(i)], oi = 1 - yi;
      // worst case in the epsilon box: delta* = eps * sign(w_other - w_true)
      double worst_margin = b.data()[static_cast<size_t>(oi)] -
                            b.data()[static_cast<size_t>(yi)];
      double got_margin = worst_margin;
      for (int j = 0; j < d; ++j) {
        const double wd = w.data()[static_cast<size_t>(j * 2 + oi)] -
                          w.data()[static_cast<size_t>(j * 2 + yi)];
        const double xj = x.data()[static_cast<size_t>(i * d + j)];
        const double dj = res.delta.data()[static_cast<size_t>(i * d + j)];
        worst_margin += wd * (xj + kEps * (wd > 0 ? 1.0 : (wd < 0 ? -1.0 : 0.0)));
        got_margin += wd * (xj + dj);
      }
      const double worst_loss = std::log1p(std::exp(worst_margin));
      const double got_loss = std::log1p(std::exp(got_margin));
      CHECK(got_loss == doctest::Approx(worst_loss).epsilon(1e-12));
    }
  }
}

TEST_CASE("zero-gradient model leaves the random start in place") {
  const int n = 3, d = 4;
  Model model = Model::build(ArchSpec::mlp(0, 1, {1, 1, d}, 2), 0);
  for (auto& [name, t] : model.parameters())
    for (auto& v : t->data()) v = 0.0;
  Tensor x = interior_batch(n, d, 21);
  std::vector<int> y = random_labels(n, 2, 22);

  PgdResult with_start = pgd(model, x, y, basic_cfg(5, true), nullptr, 7);
  bool any_nonzero = false;
  for (double v : with_start.delta.data()) {
    CHECK(std::abs(v) <= kEps);
    if (v != 0.0) any_nonzero = true;
  }
  CHECK(any_nonzero);

  PgdResult no_start = pgd(model, x, y, basic_cfg(5, false), nullptr, 7);
  for (double v : no_start.delta.data()) CHECK(v == 0.0);

  // constant logits: the attack cannot change the loss
  Tensor clean = model.forward(nullptr, x, BnMode::Frozen);
  Tensor adv_in = ops::add(nullptr, x, with_start.delta);
  Tensor adv = model.forward(nullptr, adv_in, BnMode::Frozen);
  CHECK(cross_entropy(nullptr, clean, y).scalar() ==
        cross_entropy(nullptr, adv, y).scalar());
}

TEST_CASE("kl mode requires clean logits") {
  Model model = Model::build(ArchSpec::mlp(0, 1, {1, 1, 3}, 2), 1);
  Tensor x = interior_batch(2, 3, 1);
  AttackConfig cfg = basic_cfg(2);
  cfg.loss_kind = AttackLoss::KlVsClean;
  CHECK_THROWS_AS(pgd(model, x, {0, 1}, cfg, nullptr, 0),
                  std::invalid_argument);
}

TEST_CASE("projection invariants on fuzzed inputs") {
  std::uint64_t rng = 1234;
  for (int trial = 0; trial < 1000; ++trial) {
    const int d = 1 + static_cast<int>(splitmix64(rng) % 16);
    const double eps = 0.001 + 0.2 * uniform01(rng);
    std::vector<double> x(static_cast<size_t>(d)), delta(static_cast<size_t>(d));
    for (auto& v : x) v = uniform01(rng);
    for (auto& v : delta) v = 6.0 * uniform01(rng) - 3.0;
    project_linf(delta, x, eps);
    std::vector<double> once = delta;
    for (size_t i = 0; i < delta.size(); ++i) {
      CHECK(std::abs(delta[i]) <= eps);
      CHECK(x[i] + delta[i] >= 0.0);
      CHECK(x[i] + delta[i] <= 1.0);
    }
    project_linf(delta, x, eps);
    CHECK(delta == once);  // idempotent, bitwise
  }
}

TEST_CASE("robustness evaluation properties on a trained-ish model") {
  Dataset ds = gen_blobs(160, 6, 0.04, 40);
  Model model = Model::build(ArchSpec::mlp(1, 16, {1, 6, 6}, 2), 40);
  // crude fitting: a few signed-gradient descent steps on the train split
  std::vector<int> idx(static_cast<size_t>(ds.train.size()));
  std::iota(idx.begin(), idx.end(), 0);
  for (int step = 0; step < 60; ++step) {
    Tensor x = batch_images(ds.train, idx);
    std::vector<int> y = batch_labels(ds.train, idx);
    Tape tape;
    Tensor xin = x.clone();
    Tensor loss = cross_entropy(&tape, model.forward(&tape, xin, BnMode::Frozen), y);
    tape.backward(loss);
    for (auto& [name, t] : model.parameters()) {
      Tensor g = tape.grad(*t);
      for (size_t i = 0; i < t->data().size(); ++i)
        t->data()[i] -= 0.5 * g.data()[i];
    }
  }
  REQUIRE(clean_accuracy(model, ds.test) > 0.85);

  SUBCASE("epsilon zero equals clean accuracy") {
    AttackConfig cfg = basic_cfg(3, true);
    cfg.epsilon = 0.0;
    RobustEval ev = robust_eval(model, ds.test, all_idx(ds.test.size()), cfg, 1);
    CHECK(ev.robust_acc == ev.clean_acc);
  }

  SUBCASE("monotone in steps at fixed step size") {
    double prev = 1.1;
    for (int steps : {1, 5, 10, 20}) {
      AttackConfig cfg = basic_cfg(steps, true);
      cfg.step_size = 2.5 * kEps / 20;
      const double r = robust_accuracy(model, ds.test, cfg, 5);
      CHECK(r <= prev + 1e-12);
      prev = r;
    }
  }

  SUBCASE("monotone in restarts") {
    double prev = 1.1;
    for (int restarts : {1, 3, 5}) {
      const double r =
          robust_accuracy(model, ds.test, basic_cfg(5, true, restarts), 5);
      CHECK(r <= prev + 1e-12);
      prev = r;
    }
  }

  SUBCASE("monotone in epsilon and bounded by clean accuracy") {
    const double clean = clean_accuracy(model, ds.test);
    double prev = 1.1;
    for (double eps : {2.0 / 255, 8.0 / 255, 16.0 / 255, 32.0 / 255}) {
      AttackConfig cfg = basic_cfg(10, true);
      cfg.epsilon = eps;
      const double r = robust_accuracy(model, ds.test, cfg, 5);
      CHECK(r <= clean + 1e-12);
      CHECK(r <= prev + 1e-12);
      prev = r;
    }
  }
}

TEST_CASE("2d linear model matches the brute-force grid oracle") {
  const int n = 40, d = 2;
  Model model = Model::build(ArchSpec::mlp(0, 1, {1, 1, d}, 2), 77);
  std::uint64_t rng = 4242;
  ImageSet set;
  set.channels = 1;
  set.height = 1;
  set.width = d;
  set.num_classes = 2;
  for (int i = 0; i < n; ++i) {
    set.pixels.push_back(0.2 + 0.6 * uniform01(rng));
    set.pixels.push_back(0.2 + 0.6 * uniform01(rng));
    set.labels.push_back(static_cast<int>(splitmix64(rng) % 2));
  }

  auto predicts = [&](double a, double b) {
    Tensor x = Tensor::from_data({1, 1, 1, 2}, {a, b});
    return argmax_rows(model.forward(nullptr, x, BnMode::Frozen))[0];
  };
  int grid_robust = 0;
  for (int i = 0; i < n; ++i) {
    const double ax = set.pixels[static_cast<size_t>(2 * i)];
    const double bx = set.pixels[static_cast<size_t>(2 * i + 1)];
    bool robust = true;
    for (int u = 0; u <= 40 && robust; ++u)
      for (int v = 0; v <= 40 && robust; ++v) {
        const double da = -kEps + 2 * kEps * u / 40.0;
        const double db = -kEps + 2 * kEps * v / 40.0;
        if (predicts(ax + da, bx + db) != set.labels[static_cast<size_t>(i)])
          robust = false;
      }
    grid_robust += robust;
  }

  AttackConfig cfg = basic_cfg(20, true, 2);
  const double r = robust_accuracy(model, set, cfg, 3);
  CHECK(r == doctest::Approx(static_cast<double>(grid_robust) / n).epsilon(1e-12));
}

TEST_CASE("empty dataset is rejected") {
  Model model = Model::build(ArchSpec::mlp(0, 1, {1, 1, 2}, 2), 0);
  ImageSet empty;
  empty.channels = 1;
  empty.height = 1;
  empty.width = 2;
  empty.num_classes = 2;
  CHECK_THROWS_AS(robust_eval(model, empty, {}, basic_cfg(1), 0),
                  std::invalid_argument);
}
