// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "robustlab/attacks.hpp"
#include "robustlab/cost.hpp"
#include "robustlab/data.hpp"
#include "robustlab/nn.hpp"
#include "robustlab/tensor.hpp"

namespace robustlab {

enum class LossType { At, Trades };
enum class LrSchedule { PiecewiseConstant, Cyclic };

std::string loss_type_name(LossType l);
LossType loss_type_from_name(const std::string& s);

struct TrainConfig {
  ArchSpec arch;
  LossType loss = LossType::At;
  double beta = 6.0;     // TRADES weight; ignored for AT
  AttackConfig attack;   // training-time attack
  int epochs = 10;
  int batch_size = 64;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  LrSchedule schedule = LrSchedule::PiecewiseConstant;
  bool ema = false;
  double ema_decay = 0.995;
  bool extra_data = false;
  double extra_ratio = 0.0;  // fraction of each batch drawn from extra data
  AttackConfig eval_attack;  // early stopping + final evaluation
  int eval_subset = 512;
  std::uint64_t seed = 0;

  void validate() const;
  TrainLoss cost_loss() const {
    return loss == LossType::At ? TrainLoss::At : TrainLoss::Trades;
  }
};

TrainConfig default_train_config();

struct RunRecord {
  std::string run_id;
  TrainConfig config;
  double clean_acc = 0;
  double robust_acc_earlystop = 0;  // best per-epoch PGD metric, eval subset
  double robust_acc_final = 0;      // configured eval attack, full test split
  double train_flops = 0;
  double wall_seconds = 0;
  double kwh = 0;
  double usd = 0;
  double co2_g = 0;
  int best_epoch = -1;
  int epochs_trained = 0;
  std::uint64_t seed = 0;
  bool failed = false;
};

struct EnergyOptions {
  PowerSource source = PowerSource::constant(150.0);
  int n_gpus = 1;
  double pue = 1.58;
  double usd_per_kwh = 0.12;
  double co2_g_per_kwh = 566.3;
  double probe_period_s = 1.0;
};

struct TrainResult {
  Model model;
  RunRecord record;
  // Counter totals from the tensor primitives over all training tapes
  // (attack + update passes; per-epoch evaluation excluded).
  std::uint64_t instrumented_mac_flops = 0;
  std::uint64_t instrumented_total_flops = 0;
};

/// Cross-entropy at a fixed perturbed batch, BN in train mode. Input
/// gradients are computed (the analytic backward = 2x forward accounting
/// includes them).
Tensor at_outer_loss(Tape& tape, Model& model, const Tensor& x_adv,
                     const std::vector<int>& y);

/// Runs the training attack (cross-entropy ascent, BN frozen), then the
/// update-pass cross-entropy at x+delta.
Tensor at_loss(Tape& tape, Model& model, const Tensor& x,
               const std::vector<int>& y, const AttackConfig& attack,
               std::uint64_t seed, FlopCounter* flops = nullptr);

/// TRADES with a fixed delta: clean CE + beta * KL(p_clean, p_adv), gradients
/// flowing through both branches.
Tensor trades_outer_loss(Tape& tape, Model& model, const Tensor& x,
                         const std::vector<int>& y, const Tensor& delta,
                         double beta);

/// Full TRADES loss: one train-mode clean forward (shared between the outer
/// loss and the attack's constant KL target), KL-ascent attack, adversarial
/// branch, combined objective.
Tensor trades_loss(Tape& tape, Model& model, const Tensor& x,
                   const std::vector<int>& y, double beta,
                   const AttackConfig& attack, std::uint64_t seed,
                   FlopCounter* flops = nullptr);

/// ema <- decay*ema + (1-decay)*weights, elementwise.
void ema_update(Tensor& ema, const Tensor& weights, double decay);
void ema_update(std::vector<std::vector<double>>& ema, Model& model,
                double decay);

struct SgdState {
  std::vector<std::vector<double>> momentum;
};

/// SGD with momentum and weight decay, reading gradients off the tape.
void sgd_step(Model& model, Tape& tape, double lr, double momentum,
              double weight_decay, SgdState& state);

double lr_at_epoch(const TrainConfig& cfg, int epoch);

/// Deterministic epoch batching: shuffled base indices, extra samples
/// interleaved per extra_mix_plan. Indices refer to the train / extra splits.
struct Batch {
  std::vector<int> base;
  std::vector<int> extra;
};
std::vector<Batch> epoch_batches(int train_size, int extra_size,
                                 int batch_size, double extra_ratio,
                                 std::uint64_t seed, int epoch);

TrainResult train(const TrainConfig& cfg, const Dataset& data,
                  const EnergyOptions& energy = {});

}  // namespace robustlab
