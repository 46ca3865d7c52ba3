// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "robustlab/nn.hpp"

namespace robustlab {

enum class TrainLoss { Standard, At, Trades };

std::string train_loss_name(TrainLoss l);
TrainLoss train_loss_from_name(const std::string& s);

/// Deterministic interleaving of extra data: every full batch carries
/// round(ratio * batch_size) extra samples and batch_size - that many base
/// samples; an epoch consumes the base split once. The trailing partial batch
/// scales its extra share proportionally.
struct MixPlan {
  int batch_size = 0;
  int extra_per_batch = 0;
  std::int64_t full_batches = 0;
  int tail_base = 0;
  int tail_extra = 0;
  std::int64_t steps_per_epoch = 0;
  double examples_per_epoch = 0;
};

MixPlan extra_mix_plan(std::int64_t dataset_size, double extra_fraction,
                       int batch_size);

struct FlopReport {
  double forward_flops_per_example = 0;  // F, MAC + per-element terms
  double forward_mac_per_example = 0;
  int backward_multiplier = 2;  // backward approximated as 2x forward
  double per_example_train_flops = 0;
  double examples_per_epoch = 0;
  int epochs = 0;
  double train_flops = 0;       // per_example * examples_per_epoch * epochs
  double ema_update_flops = 0;  // 2 * params per optimizer step, if enabled
  double total_train_flops = 0; // train_flops + ema_update_flops
  double total_mac_flops = 0;   // MAC share of train_flops
};

/// Analytic training cost. Per example, with F = count_forward_flops and
/// B = 2F: standard = F+B, AT = (restarts*steps + 1)(F+B), TRADES =
/// (restarts*steps + 2)(F+B). Per-epoch validation is excluded. batch_size
/// may be 0 (no batch structure) only when extra_fraction == 0 and ema off.
FlopReport train_flops(const ArchSpec& arch, TrainLoss loss, int steps,
                       std::int64_t dataset_size, double extra_fraction,
                       int epochs, int batch_size = 0, int restarts = 1,
                       bool ema = false);

struct PowerSample {
  double t = 0;  // seconds, strictly increasing
  double watts = 0;
};

struct PowerSource {
  enum class Kind { Constant, Trace, Probe };
  Kind kind = Kind::Constant;
  double watts = 0;            // Constant
  std::string path_or_cmd;     // Trace file / Probe command

  static PowerSource constant(double w);
  static PowerSource trace(std::string path);
  static PowerSource probe(std::string cmd);
};

/// CSV with header `timestamp_s,watts`, timestamps strictly increasing.
std::vector<PowerSample> load_power_trace(const std::string& path);
/// Left-hold integral divided by the covered span; a single sample is its own
/// mean.
double time_weighted_mean(const std::vector<PowerSample>& samples);
/// Runs the command, expects one number (watts) on stdout.
double probe_watts(const std::string& cmd);

struct EnergyReport {
  double avg_power_watts = 0;
  double wall_seconds = 0;
  int n_gpus = 1;
  double pue = 1.58;
  double kwh = 0;
  double usd = 0;
  double co2_g = 0;
};

EnergyReport energy_from_power(double avg_watts, double wall_seconds,
                               int n_gpus, double pue = 1.58,
                               double usd_per_kwh = 0.12,
                               double co2_g_per_kwh = 566.3);

EnergyReport energy_report(const PowerSource& source, double wall_seconds,
                           int n_gpus, double pue = 1.58,
                           double usd_per_kwh = 0.12,
                           double co2_g_per_kwh = 566.3);

/// Background sampler for probe sources; samples are buffered in an
/// append-only list owned by the run.
class PowerSampler {
 public:
  PowerSampler(PowerSource source, double period_seconds);
  ~PowerSampler();
  void start();
  std::vector<PowerSample> stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace robustlab
