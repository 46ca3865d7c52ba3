// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "robustlab/train.hpp"

namespace robustlab {

/// Recipe features used to predict robust accuracy without training.
struct FeatureVector {
  double n_params = 0;    // raw count; log10-transformed for splitting
  int synthetic_data = 0; // {0,1}
  int activation = 0;     // 0 = relu, 1 = gelu
  int loss = 0;           // 0 = at/pgd, 1 = trades
  int pgd_steps = 1;
  int ema = 0;            // {0,1}

  void validate() const;
};

constexpr int kNumFeatures = 6;
extern const std::array<const char*, kNumFeatures> kFeatureNames;

std::array<double, kNumFeatures> featurize(const FeatureVector& f);
FeatureVector features_from_record(const RunRecord& r);
/// Prediction target: robust accuracy in percent.
double target_from_record(const RunRecord& r);

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0;
  int left = -1, right = -1;
  double leaf_value = 0;
  bool is_leaf() const { return feature < 0; }
};

struct RegressionTree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root
  double predict(const std::array<double, kNumFeatures>& x) const;
};

struct GbrModel {
  double base_prediction = 0;  // mean of training targets
  double learning_rate = 0.1;
  std::vector<RegressionTree> trees;
  std::array<double, kNumFeatures> importances{};
  bool degenerate = false;  // no split anywhere; importances all zero
  std::vector<double> stage_mse;  // training MSE after each boosting stage

  double predict(const FeatureVector& f) const;
  double predict_features(const std::array<double, kNumFeatures>& x) const;

  nlohmann::json to_json() const;
  static GbrModel from_json(const nlohmann::json& j);
};

using LabeledSample = std::pair<FeatureVector, double>;

/// Stagewise least-squares boosting: each tree fits the residuals of the
/// current ensemble. Axis-aligned splits by variance reduction, midpoint
/// thresholds, at least 2 samples per leaf, ties broken by lowest feature
/// index then lowest threshold. Deterministic given input order.
GbrModel fit_gbr(const std::vector<LabeledSample>& train, int n_estimators = 50,
                 int max_depth = 5, double learning_rate = 0.1);

/// Per-feature sum of squared-error reduction over all splits, normalized to
/// sum 1 (all zeros, flagged, for a degenerate model).
std::array<double, kNumFeatures> feature_importance(const GbrModel& model);

/// Seeded shuffle then split; partitions are disjoint and exhaustive.
std::pair<std::vector<RunRecord>, std::vector<RunRecord>> split_train_test(
    const std::vector<RunRecord>& records, double fraction, std::uint64_t seed);

}  // namespace robustlab
