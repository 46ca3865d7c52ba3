// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "robustlab/data.hpp"
#include "robustlab/nn.hpp"
#include "robustlab/tensor.hpp"

namespace robustlab {

enum class AttackLoss { CrossEntropy, KlVsClean };

struct AttackConfig {
  double epsilon = 8.0 / 255.0;  // l-inf radius, inputs in [0,1]
  int steps = 10;
  double step_size = 0.0;  // <= 0 means the default 2.5 * epsilon / steps
  bool random_start = true;
  int restarts = 1;
  AttackLoss loss_kind = AttackLoss::CrossEntropy;

  double effective_step() const;
  void validate() const;
};

struct FlopCounter {
  std::uint64_t mac = 0;
  std::uint64_t elementwise = 0;
  void add(const Tape& t) {
    mac += t.mac_flops();
    elementwise += t.elementwise_flops();
  }
  std::uint64_t total() const { return mac + elementwise; }
};

struct PgdResult {
  Tensor delta;  // chosen per-example perturbation, same shape as x
  std::vector<double> best_loss;            // best evaluated per-example loss
  std::vector<std::uint8_t> misclassified;  // any evaluated iterate missed
};

struct PgdOptions {
  // Spend one extra forward per restart to score the final iterate; used by
  // evaluation. Training leaves this off so the attack costs exactly
  // steps * (forward + backward).
  bool evaluate_final = false;
};

/// Projected gradient ascent in the l-inf ball, signed steps, BN frozen
/// throughout. Guarantees max|delta| <= epsilon exactly and x+delta in [0,1].
/// With loss_kind = KlVsClean, clean_logits must be supplied and is treated
/// as a constant target. Per example the final iterate is returned unless an
/// earlier evaluated iterate achieved strictly higher loss than the last
/// evaluated one.
PgdResult pgd(Model& model, const Tensor& x, const std::vector<int>& y,
              const AttackConfig& cfg, const Tensor* clean_logits,
              std::uint64_t seed, FlopCounter* flops = nullptr,
              const PgdOptions& opt = {});

/// Clamp delta to the epsilon box, then clamp x+delta to [0,1]. Idempotent.
void project_linf(std::vector<double>& delta, const std::vector<double>& x,
                  double eps);

struct RobustEval {
  double clean_acc = 0;
  double robust_acc = 0;
};

/// A point counts as robust only if the clean prediction and every evaluated
/// iterate of every restart classify it correctly.
RobustEval robust_eval(Model& model, const ImageSet& data,
                       const std::vector<int>& indices,
                       const AttackConfig& cfg, std::uint64_t seed,
                       int batch_size = 256);

double robust_accuracy(Model& model, const ImageSet& data,
                       const AttackConfig& cfg, std::uint64_t seed,
                       int batch_size = 256);

double clean_accuracy(Model& model, const ImageSet& data, int batch_size = 256);

std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace robustlab
