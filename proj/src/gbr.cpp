// SPDX-License-Identifier: Apache-2.0
#include "robustlab/gbr.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace robustlab {

using nlohmann::json;

const std::array<const char*, kNumFeatures> kFeatureNames = {
    "n_params", "synthetic_data", "activation", "loss", "pgd_steps", "ema"};

void FeatureVector::validate() const {
  if (!(n_params > 0))
    throw std::invalid_argument("features: n_params must be positive");
  auto binary = [](int v, const char* name) {
    if (v != 0 && v != 1)
      throw std::invalid_argument(std::string("features: ") + name +
                                  " must be 0 or 1");
  };
  binary(synthetic_data, "synthetic_data");
  binary(activation, "activation");
  binary(loss, "loss");
  binary(ema, "ema");
  if (pgd_steps < 1)
    throw std::invalid_argument("features: pgd_steps must be >= 1");
}

std::array<double, kNumFeatures> featurize(const FeatureVector& f) {
  f.validate();
  return {std::log10(f.n_params),
          static_cast<double>(f.synthetic_data),
          static_cast<double>(f.activation),
          static_cast<double>(f.loss),
          static_cast<double>(f.pgd_steps),
          static_cast<double>(f.ema)};
}

FeatureVector features_from_record(const RunRecord& r) {
  FeatureVector f;
  f.n_params = static_cast<double>(count_params(r.config.arch));
  f.synthetic_data = r.config.extra_data ? 1 : 0;
  f.activation = r.config.arch.activation == Act::Gelu ? 1 : 0;
  f.loss = r.config.loss == LossType::Trades ? 1 : 0;
  f.pgd_steps = r.config.attack.steps;
  f.ema = r.config.ema ? 1 : 0;
  return f;
}

double target_from_record(const RunRecord& r) {
  return r.robust_acc_final * 100.0;
}

double RegressionTree::predict(
    const std::array<double, kNumFeatures>& x) const {
  int id = 0;
  while (!nodes[static_cast<size_t>(id)].is_leaf()) {
    const TreeNode& n = nodes[static_cast<size_t>(id)];
    id = x[static_cast<size_t>(n.feature)] <= n.threshold ? n.left : n.right;
  }
  return nodes[static_cast<size_t>(id)].leaf_value;
}

double GbrModel::predict_features(
    const std::array<double, kNumFeatures>& x) const {
  double y = base_prediction;
  for (const auto& t : trees) y += learning_rate * t.predict(x);
  return y;
}

double GbrModel::predict(const FeatureVector& f) const {
  return predict_features(featurize(f));
}

// ---------------------------------------------------------------------------
// Fitting

namespace {

constexpr int kMinLeaf = 2;

struct Split {
  bool found = false;
  int feature = -1;
  double threshold = 0;
  double gain = 0;
};

Split best_split(const std::vector<std::array<double, kNumFeatures>>& X,
                 const std::vector<double>& y, const std::vector<int>& idx) {
  Split best;
  const int n = static_cast<int>(idx.size());
  if (n < 2 * kMinLeaf) return best;
  double total = 0;
  for (int i : idx) total += y[static_cast<size_t>(i)];
  double total_sq = 0;
  for (int i : idx) total_sq += y[static_cast<size_t>(i)] * y[static_cast<size_t>(i)];
  const double parent_sse = total_sq - total * total / n;

  std::vector<int> order(idx);
  for (int f = 0; f < kNumFeatures; ++f) {
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return X[static_cast<size_t>(a)][static_cast<size_t>(f)] <
             X[static_cast<size_t>(b)][static_cast<size_t>(f)];
    });
    double left_sum = 0, left_sq = 0;
    for (int k = 0; k < n - 1; ++k) {
      const double yv = y[static_cast<size_t>(order[static_cast<size_t>(k)])];
      left_sum += yv;
      left_sq += yv * yv;
      const double xa =
          X[static_cast<size_t>(order[static_cast<size_t>(k)])][static_cast<size_t>(f)];
      const double xb =
          X[static_cast<size_t>(order[static_cast<size_t>(k + 1)])][static_cast<size_t>(f)];
      if (xa == xb) continue;
      const int nl = k + 1, nr = n - nl;
      if (nl < kMinLeaf || nr < kMinLeaf) continue;
      const double right_sum = total - left_sum;
      const double right_sq = total_sq - left_sq;
      const double sse = (left_sq - left_sum * left_sum / nl) +
                         (right_sq - right_sum * right_sum / nr);
      const double gain = parent_sse - sse;
      const double threshold = 0.5 * (xa + xb);
      // strict > keeps the first (lowest feature, lowest threshold) on ties
      if (gain > best.gain + 1e-12 ||
          (!best.found && gain > 1e-12)) {
        best.found = true;
        best.feature = f;
        best.threshold = threshold;
        best.gain = gain;
      }
    }
  }
  return best;
}

int build_node(const std::vector<std::array<double, kNumFeatures>>& X,
               const std::vector<double>& y, const std::vector<int>& idx,
               int depth, int max_depth, RegressionTree& tree,
               std::array<double, kNumFeatures>& gains) {
  const int id = static_cast<int>(tree.nodes.size());
  tree.nodes.emplace_back();
  double mean = 0;
  for (int i : idx) mean += y[static_cast<size_t>(i)];
  mean /= static_cast<double>(idx.size());
  tree.nodes[static_cast<size_t>(id)].leaf_value = mean;
  if (depth >= max_depth) return id;
  const Split s = best_split(X, y, idx);
  if (!s.found) return id;
  std::vector<int> left, right;
  for (int i : idx)
    (X[static_cast<size_t>(i)][static_cast<size_t>(s.feature)] <= s.threshold
         ? left
         : right)
        .push_back(i);
  gains[static_cast<size_t>(s.feature)] += s.gain;
  const int l = build_node(X, y, left, depth + 1, max_depth, tree, gains);
  const int r = build_node(X, y, right, depth + 1, max_depth, tree, gains);
  TreeNode& node = tree.nodes[static_cast<size_t>(id)];
  node.feature = s.feature;
  node.threshold = s.threshold;
  node.left = l;
  node.right = r;
  return id;
}

}  // namespace

GbrModel fit_gbr(const std::vector<LabeledSample>& train, int n_estimators,
                 int max_depth, double learning_rate) {
  if (train.size() < 2)
    throw std::invalid_argument("fit_gbr: need at least 2 samples");
  if (n_estimators < 0 || max_depth < 1)
    throw std::invalid_argument("fit_gbr: bad hyperparameters");
  if (!(learning_rate > 0 && learning_rate <= 1))
    throw std::invalid_argument("fit_gbr: learning_rate must be in (0,1]");
  const int n = static_cast<int>(train.size());
  std::vector<std::array<double, kNumFeatures>> X;
  std::vector<double> targets;
  X.reserve(train.size());
  for (const auto& [f, t] : train) {
    if (!std::isfinite(t))
      throw std::invalid_argument("fit_gbr: non-finite target");
    X.push_back(featurize(f));
    targets.push_back(t);
  }

  GbrModel model;
  model.learning_rate = learning_rate;
  model.base_prediction =
      std::accumulate(targets.begin(), targets.end(), 0.0) / n;

  std::vector<double> pred(static_cast<size_t>(n), model.base_prediction);
  std::vector<double> residual(static_cast<size_t>(n));
  std::vector<int> all(static_cast<size_t>(n));
  std::iota(all.begin(), all.end(), 0);
  std::array<double, kNumFeatures> gains{};

  for (int stage = 0; stage < n_estimators; ++stage) {
    for (int i = 0; i < n; ++i)
      residual[static_cast<size_t>(i)] =
          targets[static_cast<size_t>(i)] - pred[static_cast<size_t>(i)];
    RegressionTree tree;
    build_node(X, residual, all, 0, max_depth, tree, gains);
    for (int i = 0; i < n; ++i)
      pred[static_cast<size_t>(i)] +=
          learning_rate * tree.predict(X[static_cast<size_t>(i)]);
    double mse = 0;
    for (int i = 0; i < n; ++i) {
      const double d = targets[static_cast<size_t>(i)] - pred[static_cast<size_t>(i)];
      mse += d * d;
    }
    model.stage_mse.push_back(mse / n);
    model.trees.push_back(std::move(tree));
  }

  double total_gain = 0;
  for (double g : gains) total_gain += g;
  if (total_gain > 0) {
    for (int f = 0; f < kNumFeatures; ++f)
      model.importances[static_cast<size_t>(f)] =
          gains[static_cast<size_t>(f)] / total_gain;
  } else {
    model.degenerate = true;
    model.importances.fill(0.0);
  }
  return model;
}

std::array<double, kNumFeatures> feature_importance(const GbrModel& model) {
  if (model.trees.empty() && !model.degenerate)
    throw std::invalid_argument("feature_importance: unfitted model");
  return model.importances;
}

// ---------------------------------------------------------------------------

namespace {

json tree_to_json(const RegressionTree& tree, int id) {
  const TreeNode& n = tree.nodes[static_cast<size_t>(id)];
  if (n.is_leaf()) return json{{"leaf_value", n.leaf_value}};
  return json{{"feature", n.feature},
              {"threshold", n.threshold},
              {"left", tree_to_json(tree, n.left)},
              {"right", tree_to_json(tree, n.right)}};
}

int tree_from_json(const json& j, RegressionTree& tree) {
  const int id = static_cast<int>(tree.nodes.size());
  tree.nodes.emplace_back();
  if (j.contains("leaf_value")) {
    tree.nodes[static_cast<size_t>(id)].leaf_value = j.at("leaf_value");
    return id;
  }
  const int feature = j.at("feature");
  const double threshold = j.at("threshold");
  const int l = tree_from_json(j.at("left"), tree);
  const int r = tree_from_json(j.at("right"), tree);
  TreeNode& n = tree.nodes[static_cast<size_t>(id)];
  n.feature = feature;
  n.threshold = threshold;
  n.left = l;
  n.right = r;
  return id;
}

}  // namespace

json GbrModel::to_json() const {
  json trees_j = json::array();
  for (const auto& t : trees) trees_j.push_back(tree_to_json(t, 0));
  json imp = json::object();
  for (int f = 0; f < kNumFeatures; ++f)
    imp[kFeatureNames[static_cast<size_t>(f)]] =
        importances[static_cast<size_t>(f)];
  return json{{"base_prediction", base_prediction},
              {"learning_rate", learning_rate},
              {"trees", trees_j},
              {"importances", imp},
              {"degenerate", degenerate}};
}

GbrModel GbrModel::from_json(const json& j) {
  GbrModel m;
  m.base_prediction = j.at("base_prediction");
  m.learning_rate = j.at("learning_rate");
  m.degenerate = j.value("degenerate", false);
  for (const auto& tj : j.at("trees")) {
    RegressionTree t;
    tree_from_json(tj, t);
    m.trees.push_back(std::move(t));
  }
  const auto& imp = j.at("importances");
  for (int f = 0; f < kNumFeatures; ++f)
    m.importances[static_cast<size_t>(f)] =
        imp.at(kFeatureNames[static_cast<size_t>(f)]);
  return m;
}

std::pair<std::vector<RunRecord>, std::vector<RunRecord>> split_train_test(
    const std::vector<RunRecord>& records, double fraction,
    std::uint64_t seed) {
  if (records.size() < 4)
    throw std::invalid_argument("split_train_test: need at least 4 records");
  if (!(fraction > 0 && fraction < 1))
    throw std::invalid_argument("split_train_test: fraction must be in (0,1)");
  std::vector<int> idx(records.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::uint64_t s = mix_seed(seed, 0x73706c6974ull);  // "split"
  for (int i = static_cast<int>(idx.size()) - 1; i > 0; --i) {
    const int j = static_cast<int>(splitmix64(s) %
                                   static_cast<std::uint64_t>(i + 1));
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
  const auto n_train = static_cast<size_t>(
      std::llround(fraction * static_cast<double>(records.size())));
  std::pair<std::vector<RunRecord>, std::vector<RunRecord>> out;
  for (size_t i = 0; i < idx.size(); ++i)
    (i < n_train ? out.first : out.second)
        .push_back(records[static_cast<size_t>(idx[i])]);
  return out;
}

}  // namespace robustlab
