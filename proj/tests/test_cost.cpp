// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <thread>

#include "robustlab/cost.hpp"

using namespace robustlab;
namespace fs = std::filesystem;

TEST_CASE("energy arithmetic worked example") {
  // 300 W average, 10 hours, 4 devices, PUE 1.58
  const EnergyReport r = energy_from_power(300.0, 36000.0, 4, 1.58);
  CHECK(r.kwh == doctest::Approx(18.96).epsilon(1e-12));
  CHECK(r.usd == doctest::Approx(2.2752).epsilon(1e-12));
  CHECK(r.co2_g == doctest::Approx(10737.048).epsilon(1e-12));
  CHECK(std::round(r.co2_g * 100.0) / 100.0 == doctest::Approx(10737.05));
}

TEST_CASE("energy unit case and linearity") {
  const EnergyReport unit = energy_from_power(1000.0, 3600.0, 1, 1.0);
  CHECK(unit.kwh == doctest::Approx(1.0).epsilon(1e-12));

  const EnergyReport one = energy_from_power(250.0, 7200.0, 1, 1.58);
  const EnergyReport two = energy_from_power(250.0, 7200.0, 2, 1.58);
  CHECK(two.kwh == doctest::Approx(2 * one.kwh).epsilon(1e-12));
  CHECK(two.usd == doctest::Approx(2 * one.usd).epsilon(1e-12));
  CHECK(two.co2_g == doctest::Approx(2 * one.co2_g).epsilon(1e-12));
}

TEST_CASE("power traces") {
  const fs::path dir = fs::temp_directory_path() / "robustlab_power";
  fs::create_directories(dir);
  const std::string good = (dir / "good.csv").string();
  {
    std::ofstream os(good);
    os << "timestamp_s,watts\n0,100\n10,300\n30,100\n";
  }
  // left-hold: (100*10 + 300*20) / 30
  const auto samples = load_power_trace(good);
  CHECK(time_weighted_mean(samples) ==
        doctest::Approx((100.0 * 10 + 300.0 * 20) / 30).epsilon(1e-12));
  CHECK(time_weighted_mean({{0.0, 42.0}}) == 42.0);
  CHECK_THROWS_AS(time_weighted_mean({}), std::invalid_argument);

  const std::string bad_header = (dir / "bad1.csv").string();
  {
    std::ofstream os(bad_header);
    os << "time,power\n0,100\n";
  }
  CHECK_THROWS_AS(load_power_trace(bad_header), std::runtime_error);

  const std::string nonmono = (dir / "bad2.csv").string();
  {
    std::ofstream os(nonmono);
    os << "timestamp_s,watts\n0,100\n0,200\n";
  }
  CHECK_THROWS_AS(load_power_trace(nonmono), std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("power probe command") {
  CHECK(probe_watts("echo 123.5") == doctest::Approx(123.5));
  CHECK_THROWS_WITH_AS(probe_watts("false"), doctest::Contains("status"),
                       std::runtime_error);
  CHECK_THROWS_AS(probe_watts("echo not-a-number"), std::runtime_error);
}

TEST_CASE("power sampler buffers samples") {
  PowerSampler sampler(PowerSource::constant(55.0), 0.005);
  sampler.start();
  std::this_thread::sleep_for(std::chrono::milliseconds(25));
  const auto samples = sampler.stop();
  CHECK(samples.size() >= 2);
  CHECK(time_weighted_mean(samples) == doctest::Approx(55.0));
  for (size_t i = 1; i < samples.size(); ++i)
    CHECK(samples[i].t > samples[i - 1].t);
}

TEST_CASE("training FLOP model against the headline numbers") {
  const ArchSpec w2810 = ArchSpec::wrn(28, 10, {3, 32, 32}, 10);
  const double F = count_forward_flops(w2810).total();

  const FlopReport at10 = train_flops(w2810, TrainLoss::At, 10, 50000, 0.0, 1);
  CHECK(at10.per_example_train_flops == doctest::Approx(3.0 * 11 * F).epsilon(1e-12));
  CHECK(at10.train_flops == doctest::Approx(3.0 * 11 * F * 50000).epsilon(1e-12));
  // ballpark from the 10.5 GFLOP forward figure
  CHECK(at10.train_flops == doctest::Approx(1.73e16).epsilon(0.01));

  const FlopReport tr10 =
      train_flops(w2810, TrainLoss::Trades, 10, 50000, 0.0, 1);
  const double ratio = tr10.train_flops / at10.train_flops;
  CHECK(ratio == doctest::Approx(12.0 / 11.0).epsilon(1e-12));
  CHECK(std::abs(ratio - 1.08) < 0.02);

  const FlopReport std1 =
      train_flops(w2810, TrainLoss::Standard, 1, 50000, 0.0, 1);
  CHECK(std1.per_example_train_flops == doctest::Approx(3.0 * F).epsilon(1e-12));
}

TEST_CASE("flop model monotonicity and linearity") {
  const ArchSpec base = ArchSpec::wrn(16, 2, {3, 16, 16}, 10);
  auto total = [&](const ArchSpec& a, int steps, int epochs,
                   std::int64_t ds) {
    return train_flops(a, TrainLoss::At, steps, ds, 0.0, epochs).train_flops;
  };
  CHECK(total(base, 2, 1, 1000) < total(base, 3, 1, 1000));
  CHECK(total(base, 2, 1, 1000) < total(base, 2, 2, 1000));
  CHECK(total(base, 2, 1, 1000) < total(base, 2, 1, 2000));
  CHECK(total(base, 2, 1, 1000) <
        total(ArchSpec::wrn(16, 3, {3, 16, 16}, 10), 2, 1, 1000));
  CHECK(total(base, 2, 1, 1000) <
        total(ArchSpec::wrn(22, 2, {3, 16, 16}, 10), 2, 1, 1000));
  // linear in epochs
  CHECK(total(base, 2, 6, 1000) == doctest::Approx(6 * total(base, 2, 1, 1000)));
}

TEST_CASE("ema update cost is included and reported separately") {
  const ArchSpec arch = ArchSpec::wrn(10, 1, {1, 8, 8}, 2);
  const FlopReport with =
      train_flops(arch, TrainLoss::At, 2, 1000, 0.0, 3, 100, 1, true);
  const FlopReport without =
      train_flops(arch, TrainLoss::At, 2, 1000, 0.0, 3, 100, 1, false);
  CHECK(without.ema_update_flops == 0.0);
  CHECK(with.train_flops == without.train_flops);
  const double steps_per_epoch = 10;  // 1000 / 100
  CHECK(with.ema_update_flops ==
        doctest::Approx(2.0 * static_cast<double>(count_params(arch)) *
                        steps_per_epoch * 3));
  CHECK(with.total_train_flops ==
        doctest::Approx(with.train_flops + with.ema_update_flops));
}

TEST_CASE("extra-data interleaving plan") {
  // 100 base examples, ratio 0.25, batch 8: 2 extra + 6 base per batch
  const MixPlan p = extra_mix_plan(100, 0.25, 8);
  CHECK(p.extra_per_batch == 2);
  CHECK(p.full_batches == 16);
  CHECK(p.tail_base == 4);
  CHECK(p.tail_extra == 1);
  CHECK(p.steps_per_epoch == 17);
  CHECK(p.examples_per_epoch == doctest::Approx(100 + 32 + 1));

  const MixPlan clean = extra_mix_plan(100, 0.0, 8);
  CHECK(clean.examples_per_epoch == doctest::Approx(100));
  CHECK(clean.steps_per_epoch == 13);

  CHECK_THROWS_AS(extra_mix_plan(100, 0.5, 0), std::invalid_argument);
  CHECK_THROWS_AS(extra_mix_plan(100, 1.0, 8), std::invalid_argument);
  CHECK_THROWS_AS(extra_mix_plan(0, 0.0, 8), std::invalid_argument);
}

TEST_CASE("restarts multiply the attack share") {
  const ArchSpec arch = ArchSpec::wrn(10, 1, {1, 8, 8}, 2);
  const double F = count_forward_flops(arch).total();
  const FlopReport r2 =
      train_flops(arch, TrainLoss::At, 5, 100, 0.0, 1, 0, 2);
  CHECK(r2.per_example_train_flops ==
        doctest::Approx(3.0 * (2 * 5 + 1) * F).epsilon(1e-12));
}
