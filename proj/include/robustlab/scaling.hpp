// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "robustlab/train.hpp"

namespace robustlab {

struct PowerLawFit {
  double coefficient = 0;  // C in metric = C * x^alpha
  double alpha = 0;
  double r2 = 0;  // computed in log10 space
  int n_points = 0;
  double x_min = 0;
  double x_max = 0;
};

enum class EnvelopeDirection { Max, Min };

struct EnvelopePoint {
  int bin = 0;
  double flops = 0;
  double metric = 0;
  std::string run_id;
};

/// Record metric accessor. Accuracy metrics are reported in percent (0-100),
/// the unit scaling-law coefficients are quoted in; cost metrics stay raw.
double record_metric(const RunRecord& r, const std::string& metric);
EnvelopeDirection default_direction(const std::string& metric);

/// Per-bin best run over `bins` bins equisized in log10(FLOPs) (linear axis
/// behind the flag). Failed runs are excluded; ties break toward lower FLOPs
/// then lexicographically smaller run_id.
std::vector<EnvelopePoint> envelope(const std::vector<RunRecord>& runs,
                                    const std::string& metric, int bins = 19,
                                    EnvelopeDirection direction =
                                        EnvelopeDirection::Max,
                                    bool log_bins = true);

/// Ordinary least squares on (log10 x, log10 y): C = 10^intercept,
/// alpha = slope. All points must be strictly positive.
PowerLawFit fit_power_law(const std::vector<std::pair<double, double>>& points);

struct Extrapolation {
  double value = 0;
  bool extrapolated = false;  // query fell outside the fitted x range
};

Extrapolation extrapolate_metric(const PowerLawFit& fit, double flops);
Extrapolation extrapolate_flops(const PowerLawFit& fit, double metric);

}  // namespace robustlab
