// SPDX-License-Identifier: Apache-2.0
#include "robustlab/scaling.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

namespace robustlab {

double record_metric(const RunRecord& r, const std::string& metric) {
  if (metric == "robust_acc_final") return r.robust_acc_final * 100.0;
  if (metric == "robust_acc_earlystop") return r.robust_acc_earlystop * 100.0;
  if (metric == "clean_acc") return r.clean_acc * 100.0;
  if (metric == "train_flops") return r.train_flops;
  if (metric == "kwh") return r.kwh;
  if (metric == "usd") return r.usd;
  if (metric == "co2_g") return r.co2_g;
  if (metric == "wall_seconds") return r.wall_seconds;
  throw std::invalid_argument("unknown metric: " + metric);
}

EnvelopeDirection default_direction(const std::string& metric) {
  if (metric == "kwh" || metric == "usd" || metric == "co2_g" ||
      metric == "wall_seconds")
    return EnvelopeDirection::Min;
  return EnvelopeDirection::Max;
}

std::vector<EnvelopePoint> envelope(const std::vector<RunRecord>& runs,
                                    const std::string& metric, int bins,
                                    EnvelopeDirection direction,
                                    bool log_bins) {
  if (bins < 1) throw std::invalid_argument("envelope: bins must be >= 1");
  struct Entry {
    double flops, metric;
    const RunRecord* rec;
  };
  std::vector<Entry> entries;
  for (const auto& r : runs) {
    if (r.failed) continue;
    if (!(r.train_flops > 0))
      throw std::invalid_argument("envelope: run " + r.run_id +
                                  " has nonpositive train_flops");
    entries.push_back({r.train_flops, record_metric(r, metric), &r});
  }
  if (entries.size() < 2)
    throw std::invalid_argument("envelope: need at least 2 successful runs");
  double lo = entries[0].flops, hi = entries[0].flops;
  for (const auto& e : entries) {
    lo = std::min(lo, e.flops);
    hi = std::max(hi, e.flops);
  }
  if (lo == hi)
    throw std::invalid_argument("envelope: all runs have identical FLOPs");
  auto axis = [&](double f) { return log_bins ? std::log10(f) : f; };
  const double alo = axis(lo), ahi = axis(hi);
  const double width = (ahi - alo) / bins;

  std::map<int, Entry> best;
  for (const auto& e : entries) {
    int b = static_cast<int>((axis(e.flops) - alo) / width);
    b = std::clamp(b, 0, bins - 1);
    auto it = best.find(b);
    if (it == best.end()) {
      best.emplace(b, e);
      continue;
    }
    const Entry& cur = it->second;
    const bool better =
        direction == EnvelopeDirection::Max ? e.metric > cur.metric
                                            : e.metric < cur.metric;
    const bool tie = e.metric == cur.metric;
    if (better || (tie && (e.flops < cur.flops ||
                           (e.flops == cur.flops &&
                            e.rec->run_id < cur.rec->run_id))))
      it->second = e;
  }
  std::vector<EnvelopePoint> out;
  for (const auto& [b, e] : best)
    out.push_back({b, e.flops, e.metric, e.rec->run_id});
  return out;
}

PowerLawFit fit_power_law(
    const std::vector<std::pair<double, double>>& points) {
  if (points.size() < 2)
    throw std::invalid_argument("fit_power_law: need at least 2 points");
  std::ostringstream bad;
  int n_bad = 0;
  for (const auto& [x, y] : points)
    if (!(x > 0) || !(y > 0)) {
      bad << " (" << x << "," << y << ")";
      ++n_bad;
    }
  if (n_bad > 0)
    throw std::invalid_argument(
        "fit_power_law: nonpositive points not representable in log space:" +
        bad.str());

  double sx = 0, sy = 0;
  for (const auto& [x, y] : points) {
    sx += std::log10(x);
    sy += std::log10(y);
  }
  const double n = static_cast<double>(points.size());
  const double mx = sx / n, my = sy / n;
  double sxx = 0, sxy = 0;
  for (const auto& [x, y] : points) {
    const double dx = std::log10(x) - mx;
    sxx += dx * dx;
    sxy += dx * (std::log10(y) - my);
  }
  if (sxx == 0)
    throw std::invalid_argument(
        "fit_power_law: need at least 2 distinct x values");

  PowerLawFit fit;
  fit.alpha = sxy / sxx;
  fit.coefficient = std::pow(10.0, my - fit.alpha * mx);
  fit.n_points = static_cast<int>(points.size());
  double ss_res = 0, ss_tot = 0;
  for (const auto& [x, y] : points) {
    const double ly = std::log10(y);
    const double pred = (my - fit.alpha * mx) + fit.alpha * std::log10(x);
    ss_res += (ly - pred) * (ly - pred);
    ss_tot += (ly - my) * (ly - my);
  }
  fit.r2 = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 1.0;
  fit.x_min = points[0].first;
  fit.x_max = points[0].first;
  for (const auto& [x, y] : points) {
    fit.x_min = std::min(fit.x_min, x);
    fit.x_max = std::max(fit.x_max, x);
  }
  return fit;
}

Extrapolation extrapolate_metric(const PowerLawFit& fit, double flops) {
  if (!(flops > 0))
    throw std::invalid_argument("extrapolate: flops must be positive");
  Extrapolation e;
  e.value = fit.coefficient * std::pow(flops, fit.alpha);
  e.extrapolated = flops < fit.x_min || flops > fit.x_max;
  return e;
}

Extrapolation extrapolate_flops(const PowerLawFit& fit, double metric) {
  if (!(metric > 0))
    throw std::invalid_argument("extrapolate: metric must be positive");
  if (fit.alpha == 0)
    throw std::invalid_argument(
        "extrapolate: alpha = 0, metric is compute-independent");
  Extrapolation e;
  e.value = std::pow(metric / fit.coefficient, 1.0 / fit.alpha);
  e.extrapolated = e.value < fit.x_min || e.value > fit.x_max;
  return e;
}

}  // namespace robustlab
