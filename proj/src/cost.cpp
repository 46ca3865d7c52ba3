// SPDX-License-Identifier: Apache-2.0
#include "robustlab/cost.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace robustlab {

std::string train_loss_name(TrainLoss l) {
  switch (l) {
    case TrainLoss::Standard: return "standard";
    case TrainLoss::At: return "at";
    case TrainLoss::Trades: return "trades";
  }
  return "?";
}

TrainLoss train_loss_from_name(const std::string& s) {
  if (s == "standard") return TrainLoss::Standard;
  if (s == "at") return TrainLoss::At;
  if (s == "trades") return TrainLoss::Trades;
  throw std::invalid_argument("unknown training loss: " + s);
}

MixPlan extra_mix_plan(std::int64_t dataset_size, double extra_fraction,
                       int batch_size) {
  if (dataset_size <= 0)
    throw std::invalid_argument("mix plan: empty dataset");
  if (extra_fraction < 0 || extra_fraction >= 1)
    throw std::invalid_argument("mix plan: extra_fraction must be in [0,1)");
  MixPlan p;
  p.batch_size = batch_size;
  if (batch_size <= 0) {
    if (extra_fraction > 0)
      throw std::invalid_argument(
          "mix plan: batch_size required when extra_fraction > 0");
    p.full_batches = 0;
    p.steps_per_epoch = 0;
    p.examples_per_epoch = static_cast<double>(dataset_size);
    return p;
  }
  p.extra_per_batch = static_cast<int>(
      std::llround(extra_fraction * static_cast<double>(batch_size)));
  const int base_per_batch = batch_size - p.extra_per_batch;
  if (base_per_batch <= 0)
    throw std::invalid_argument("mix plan: extra_fraction leaves no base data");
  p.full_batches = dataset_size / base_per_batch;
  p.tail_base = static_cast<int>(dataset_size - p.full_batches * base_per_batch);
  p.tail_extra =
      p.tail_base > 0
          ? static_cast<int>(std::llround(
                static_cast<double>(p.tail_base) * p.extra_per_batch /
                static_cast<double>(base_per_batch)))
          : 0;
  p.steps_per_epoch = p.full_batches + (p.tail_base > 0 ? 1 : 0);
  p.examples_per_epoch =
      static_cast<double>(dataset_size) +
      static_cast<double>(p.full_batches) * p.extra_per_batch + p.tail_extra;
  return p;
}

FlopReport train_flops(const ArchSpec& arch, TrainLoss loss, int steps,
                       std::int64_t dataset_size, double extra_fraction,
                       int epochs, int batch_size, int restarts, bool ema) {
  if (loss != TrainLoss::Standard && steps < 1)
    throw std::invalid_argument("train_flops: steps must be >= 1");
  if (restarts < 1)
    throw std::invalid_argument("train_flops: restarts must be >= 1");
  if (epochs < 0) throw std::invalid_argument("train_flops: negative epochs");
  if (ema && batch_size <= 0)
    throw std::invalid_argument("train_flops: ema needs batch_size");

  const FlopBreakdown fwd = count_forward_flops(arch);
  const MixPlan mix = extra_mix_plan(dataset_size, extra_fraction, batch_size);

  FlopReport r;
  r.forward_flops_per_example = fwd.total();
  r.forward_mac_per_example = fwd.mac;
  r.backward_multiplier = 2;
  double passes = 1.0;  // standard: one forward+backward unit
  if (loss == TrainLoss::At)
    passes = static_cast<double>(restarts) * steps + 1.0;
  else if (loss == TrainLoss::Trades)
    passes = static_cast<double>(restarts) * steps + 2.0;
  const double unit = fwd.total() * (1.0 + r.backward_multiplier);
  r.per_example_train_flops = passes * unit;
  r.examples_per_epoch = mix.examples_per_epoch;
  r.epochs = epochs;
  r.train_flops = r.per_example_train_flops * r.examples_per_epoch * epochs;
  r.total_mac_flops =
      passes * fwd.mac * 3.0 * r.examples_per_epoch * epochs;
  if (ema) {
    const double params = static_cast<double>(count_params(arch));
    r.ema_update_flops = 2.0 * params *
                         static_cast<double>(mix.steps_per_epoch) * epochs;
  }
  r.total_train_flops = r.train_flops + r.ema_update_flops;
  return r;
}

// ---------------------------------------------------------------------------
// Power and energy

PowerSource PowerSource::constant(double w) {
  if (w < 0) throw std::invalid_argument("power: negative watts");
  PowerSource s;
  s.kind = Kind::Constant;
  s.watts = w;
  return s;
}

PowerSource PowerSource::trace(std::string path) {
  PowerSource s;
  s.kind = Kind::Trace;
  s.path_or_cmd = std::move(path);
  return s;
}

PowerSource PowerSource::probe(std::string cmd) {
  PowerSource s;
  s.kind = Kind::Probe;
  s.path_or_cmd = std::move(cmd);
  return s;
}

std::vector<PowerSample> load_power_trace(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("power trace: cannot open " + path);
  std::string line;
  if (!std::getline(is, line) || line.rfind("timestamp_s,watts", 0) != 0)
    throw std::runtime_error("power trace: missing 'timestamp_s,watts' header");
  std::vector<PowerSample> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos)
      throw std::runtime_error("power trace: bad row '" + line + "'");
    PowerSample s;
    s.t = std::stod(line.substr(0, comma));
    s.watts = std::stod(line.substr(comma + 1));
    if (s.watts < 0)
      throw std::runtime_error("power trace: negative watts in '" + line + "'");
    if (!out.empty() && s.t <= out.back().t)
      throw std::runtime_error("power trace: timestamps must strictly increase");
    out.push_back(s);
  }
  if (out.empty()) throw std::runtime_error("power trace: no samples in " + path);
  return out;
}

double time_weighted_mean(const std::vector<PowerSample>& samples) {
  if (samples.empty())
    throw std::invalid_argument("power: empty sample stream");
  if (samples.size() == 1) return samples[0].watts;
  double integral = 0;
  for (size_t i = 0; i + 1 < samples.size(); ++i)
    integral += samples[i].watts * (samples[i + 1].t - samples[i].t);
  return integral / (samples.back().t - samples.front().t);
}

double probe_watts(const std::string& cmd) {
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) throw std::runtime_error("power probe: cannot run '" + cmd + "'");
  char buf[256];
  std::string output;
  while (fgets(buf, sizeof(buf), pipe)) output += buf;
  const int status = pclose(pipe);
  if (status != 0)
    throw std::runtime_error("power probe: '" + cmd + "' exited with status " +
                             std::to_string(status) + ", output: " + output);
  try {
    size_t pos = 0;
    const double w = std::stod(output, &pos);
    if (w < 0) throw std::invalid_argument("negative");
    return w;
  } catch (const std::exception&) {
    throw std::runtime_error("power probe: '" + cmd +
                             "' did not print watts, output: " + output);
  }
}

EnergyReport energy_from_power(double avg_watts, double wall_seconds,
                               int n_gpus, double pue, double usd_per_kwh,
                               double co2_g_per_kwh) {
  if (wall_seconds <= 0)
    throw std::invalid_argument("energy: wall_seconds must be positive");
  if (n_gpus < 1) throw std::invalid_argument("energy: n_gpus must be >= 1");
  EnergyReport r;
  r.avg_power_watts = avg_watts;
  r.wall_seconds = wall_seconds;
  r.n_gpus = n_gpus;
  r.pue = pue;
  r.kwh = avg_watts * wall_seconds * n_gpus / 3.6e6 * pue;
  r.usd = r.kwh * usd_per_kwh;
  r.co2_g = r.kwh * co2_g_per_kwh;
  return r;
}

EnergyReport energy_report(const PowerSource& source, double wall_seconds,
                           int n_gpus, double pue, double usd_per_kwh,
                           double co2_g_per_kwh) {
  double watts = 0;
  switch (source.kind) {
    case PowerSource::Kind::Constant:
      watts = source.watts;
      break;
    case PowerSource::Kind::Trace:
      watts = time_weighted_mean(load_power_trace(source.path_or_cmd));
      break;
    case PowerSource::Kind::Probe:
      watts = probe_watts(source.path_or_cmd);
      break;
  }
  return energy_from_power(watts, wall_seconds, n_gpus, pue, usd_per_kwh,
                           co2_g_per_kwh);
}

// ---------------------------------------------------------------------------

struct PowerSampler::Impl {
  PowerSource source;
  double period;
  std::vector<PowerSample> samples;
  std::thread worker;
  std::atomic<bool> running{false};
  std::chrono::steady_clock::time_point t0;

  void sample_once() {
    const double t =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    double w = source.kind == PowerSource::Kind::Constant
                   ? source.watts
                   : probe_watts(source.path_or_cmd);
    if (!samples.empty() && t <= samples.back().t) return;
    samples.push_back({t, w});
  }
};

PowerSampler::PowerSampler(PowerSource source, double period_seconds)
    : impl_(std::make_unique<Impl>()) {
  impl_->source = std::move(source);
  impl_->period = period_seconds > 0 ? period_seconds : 1.0;
}

PowerSampler::~PowerSampler() {
  if (impl_ && impl_->running.load()) stop();
}

void PowerSampler::start() {
  impl_->t0 = std::chrono::steady_clock::now();
  impl_->running.store(true);
  impl_->sample_once();
  impl_->worker = std::thread([this] {
    while (impl_->running.load()) {
      std::this_thread::sleep_for(
          std::chrono::duration<double>(impl_->period));
      if (!impl_->running.load()) break;
      impl_->sample_once();
    }
  });
}

std::vector<PowerSample> PowerSampler::stop() {
  impl_->running.store(false);
  if (impl_->worker.joinable()) impl_->worker.join();
  impl_->sample_once();
  return impl_->samples;
}

}  // namespace robustlab
