// SPDX-License-Identifier: Apache-2.0
#include "robustlab/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>

namespace robustlab {

std::string loss_type_name(LossType l) {
  return l == LossType::At ? "at" : "trades";
}

LossType loss_type_from_name(const std::string& s) {
  if (s == "at") return LossType::At;
  if (s == "trades") return LossType::Trades;
  throw std::invalid_argument("unknown loss type: " + s);
}

void TrainConfig::validate() const {
  arch.validate();
  attack.validate();
  eval_attack.validate();
  if (loss == LossType::Trades && !(beta > 0))
    throw std::invalid_argument("config: trades requires beta > 0");
  if (epochs < 1) throw std::invalid_argument("config: epochs must be >= 1");
  if (batch_size < 1)
    throw std::invalid_argument("config: batch_size must be >= 1");
  if (lr < 0) throw std::invalid_argument("config: negative lr");
  if (momentum < 0 || momentum >= 1)
    throw std::invalid_argument("config: momentum must be in [0,1)");
  if (weight_decay < 0)
    throw std::invalid_argument("config: negative weight_decay");
  if (ema && !(ema_decay > 0 && ema_decay < 1))
    throw std::invalid_argument("config: ema_decay must be in (0,1)");
  if (extra_data && !(extra_ratio > 0 && extra_ratio < 1))
    throw std::invalid_argument("config: extra_data requires extra_ratio in (0,1)");
  if (eval_subset < 1)
    throw std::invalid_argument("config: eval_subset must be >= 1");
}

TrainConfig default_train_config() {
  TrainConfig cfg;
  cfg.attack.steps = 10;
  cfg.attack.random_start = true;
  cfg.attack.restarts = 1;
  cfg.eval_attack.steps = 40;
  cfg.eval_attack.restarts = 2;
  cfg.eval_attack.random_start = true;
  return cfg;
}

// ---------------------------------------------------------------------------
// Losses

namespace {

Tensor input_leaf(const Tensor& values) {
  Tensor t = values.detached();
  // Input gradients participate in the backward pass, and so in its FLOP
  // count; the optimizer simply never reads them.
  t.set_requires_grad(true);
  return t;
}

Tensor add_raw(const Tensor& a, const Tensor& b) {
  Tensor out(a.shape());
  const auto& ad = a.data();
  const auto& bd = b.data();
  auto& od = out.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] + bd[i];
  return out;
}

Tensor clamped_probs(Tape* tape, const Tensor& logits) {
  return ops::clamp_min(tape, ops::softmax(tape, logits), 1e-12);
}

}  // namespace

Tensor at_outer_loss(Tape& tape, Model& model, const Tensor& x_adv,
                     const std::vector<int>& y) {
  Tensor x_in = input_leaf(x_adv);
  Tensor logits = model.forward(&tape, x_in, BnMode::TrainUpdate);
  return cross_entropy(&tape, logits, y);
}

Tensor at_loss(Tape& tape, Model& model, const Tensor& x,
               const std::vector<int>& y, const AttackConfig& attack,
               std::uint64_t seed, FlopCounter* flops) {
  AttackConfig cfg = attack;
  cfg.loss_kind = AttackLoss::CrossEntropy;
  PgdResult res = pgd(model, x, y, cfg, nullptr, seed, flops);
  return at_outer_loss(tape, model, add_raw(x, res.delta), y);
}

Tensor trades_outer_loss(Tape& tape, Model& model, const Tensor& x,
                         const std::vector<int>& y, const Tensor& delta,
                         double beta) {
  if (!(beta > 0))
    throw std::invalid_argument("trades: beta must be positive");
  Tensor x_in = input_leaf(x);
  Tensor clean_logits = model.forward(&tape, x_in, BnMode::TrainUpdate);
  Tensor x_adv = input_leaf(add_raw(x, delta));
  Tensor adv_logits = model.forward(&tape, x_adv, BnMode::TrainUpdate);
  Tensor p = clamped_probs(&tape, clean_logits);
  Tensor q = clamped_probs(&tape, adv_logits);
  Tensor kl = kl_divergence(&tape, p, q);
  Tensor ce = cross_entropy(&tape, clean_logits, y);
  return ops::add(&tape, ce, ops::scale(&tape, kl, beta));
}

Tensor trades_loss(Tape& tape, Model& model, const Tensor& x,
                   const std::vector<int>& y, double beta,
                   const AttackConfig& attack, std::uint64_t seed,
                   FlopCounter* flops) {
  if (!(beta > 0))
    throw std::invalid_argument("trades: beta must be positive");
  // One train-mode clean forward serves both the outer loss and, detached,
  // the attack's constant KL target.
  Tensor x_in = input_leaf(x);
  Tensor clean_logits = model.forward(&tape, x_in, BnMode::TrainUpdate);
  Tensor clean_const = clean_logits.detached();

  AttackConfig cfg = attack;
  cfg.loss_kind = AttackLoss::KlVsClean;
  PgdResult res = pgd(model, x, y, cfg, &clean_const, seed, flops);

  Tensor x_adv = input_leaf(add_raw(x, res.delta));
  Tensor adv_logits = model.forward(&tape, x_adv, BnMode::TrainUpdate);
  Tensor p = clamped_probs(&tape, clean_logits);
  Tensor q = clamped_probs(&tape, adv_logits);
  Tensor kl = kl_divergence(&tape, p, q);
  Tensor ce = cross_entropy(&tape, clean_logits, y);
  return ops::add(&tape, ce, ops::scale(&tape, kl, beta));
}

// ---------------------------------------------------------------------------
// Optimizer pieces

void ema_update(Tensor& ema, const Tensor& weights, double decay) {
  if (ema.shape() != weights.shape())
    throw std::invalid_argument("ema_update: shape mismatch " +
                                shape_str(ema.shape()) + " x " +
                                shape_str(weights.shape()));
  if (!(decay > 0 && decay < 1))
    throw std::invalid_argument("ema_update: decay must be in (0,1)");
  auto& e = ema.data();
  const auto& w = weights.data();
  for (size_t i = 0; i < e.size(); ++i)
    e[i] = decay * e[i] + (1.0 - decay) * w[i];
}

void ema_update(std::vector<std::vector<double>>& ema, Model& model,
                double decay) {
  auto params = model.parameters();
  if (params.size() != ema.size())
    throw std::invalid_argument("ema_update: parameter count mismatch");
  for (size_t p = 0; p < params.size(); ++p) {
    auto& e = ema[p];
    const auto& w = params[p].second->data();
    for (size_t i = 0; i < e.size(); ++i)
      e[i] = decay * e[i] + (1.0 - decay) * w[i];
  }
}

void sgd_step(Model& model, Tape& tape, double lr, double momentum,
              double weight_decay, SgdState& state) {
  auto params = model.parameters();
  if (state.momentum.empty()) {
    state.momentum.resize(params.size());
    for (size_t p = 0; p < params.size(); ++p)
      state.momentum[p].assign(params[p].second->data().size(), 0.0);
  }
  for (size_t p = 0; p < params.size(); ++p) {
    Tensor g = tape.grad(*params[p].second);
    const auto& gd = g.data();
    auto& w = params[p].second->data();
    auto& buf = state.momentum[p];
    for (size_t i = 0; i < w.size(); ++i) {
      buf[i] = momentum * buf[i] + gd[i] + weight_decay * w[i];
      w[i] -= lr * buf[i];
    }
  }
}

double lr_at_epoch(const TrainConfig& cfg, int epoch) {
  if (cfg.schedule == LrSchedule::Cyclic) {
    const double frac = (epoch + 0.5) / static_cast<double>(cfg.epochs);
    const double tri = 1.0 - std::abs(2.0 * frac - 1.0);
    return cfg.lr * std::max(tri, 0.05);
  }
  if (epoch >= cfg.epochs * 3 / 4) return cfg.lr * 0.01;
  if (epoch >= cfg.epochs / 2) return cfg.lr * 0.1;
  return cfg.lr;
}

// ---------------------------------------------------------------------------
// Batching

namespace {

std::vector<int> shuffled_indices(int n, std::uint64_t rng_seed) {
  std::vector<int> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::uint64_t s = rng_seed;
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(splitmix64(s) %
                                   static_cast<std::uint64_t>(i + 1));
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
  return idx;
}

}  // namespace

std::vector<Batch> epoch_batches(int train_size, int extra_size,
                                 int batch_size, double extra_ratio,
                                 std::uint64_t seed, int epoch) {
  const double ratio = extra_size > 0 ? extra_ratio : 0.0;
  const MixPlan plan = extra_mix_plan(train_size, ratio, batch_size);
  std::vector<int> base = shuffled_indices(
      train_size, mix_seed(seed, 0x73687566ull + static_cast<std::uint64_t>(epoch)));
  std::vector<int> extra;
  if (plan.extra_per_batch > 0 || plan.tail_extra > 0)
    extra = shuffled_indices(
        extra_size, mix_seed(seed, 0x65787472ull + static_cast<std::uint64_t>(epoch)));

  std::vector<Batch> out;
  size_t bcur = 0, ecur = 0;
  auto take_extra = [&](int count, Batch& b) {
    for (int i = 0; i < count; ++i) {
      b.extra.push_back(extra[ecur % extra.size()]);
      ++ecur;
    }
  };
  const int base_per_batch = batch_size - plan.extra_per_batch;
  for (std::int64_t i = 0; i < plan.full_batches; ++i) {
    Batch b;
    b.base.assign(base.begin() + static_cast<std::ptrdiff_t>(bcur),
                  base.begin() + static_cast<std::ptrdiff_t>(bcur) +
                      base_per_batch);
    bcur += static_cast<size_t>(base_per_batch);
    if (plan.extra_per_batch > 0) take_extra(plan.extra_per_batch, b);
    out.push_back(std::move(b));
  }
  if (plan.tail_base > 0) {
    Batch b;
    b.base.assign(base.begin() + static_cast<std::ptrdiff_t>(bcur), base.end());
    if (plan.tail_extra > 0) take_extra(plan.tail_extra, b);
    out.push_back(std::move(b));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

Tensor assemble_batch(const Dataset& data, const Batch& b,
                      std::vector<int>& labels) {
  Tensor base = batch_images(data.train, b.base);
  labels = batch_labels(data.train, b.base);
  if (b.extra.empty()) return base;
  const ImageSet& pool = *data.extra;
  Tensor extra = batch_images(pool, b.extra);
  std::vector<int> extra_labels = batch_labels(pool, b.extra);
  std::vector<int> shape = base.shape();
  shape[0] += extra.dim(0);
  std::vector<double> joined;
  joined.reserve(base.data().size() + extra.data().size());
  joined.insert(joined.end(), base.data().begin(), base.data().end());
  joined.insert(joined.end(), extra.data().begin(), extra.data().end());
  labels.insert(labels.end(), extra_labels.begin(), extra_labels.end());
  return Tensor::from_data(std::move(shape), std::move(joined));
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const Dataset& data,
                  const EnergyOptions& energy) {
  cfg.validate();
  if (data.train.size() == 0 || data.test.size() == 0)
    throw std::invalid_argument("train: dataset needs train and test splits");
  if (cfg.extra_data && (!data.extra || data.extra->size() == 0))
    throw std::invalid_argument("train: extra_data set but no extra split");
  if (data.train.channels != cfg.arch.input_shape[0] ||
      data.train.height != cfg.arch.input_shape[1] ||
      data.train.width != cfg.arch.input_shape[2])
    throw std::invalid_argument("train: arch input shape does not match data");

  const auto t0 = std::chrono::steady_clock::now();
  std::optional<PowerSampler> sampler;
  if (energy.source.kind == PowerSource::Kind::Probe) {
    sampler.emplace(energy.source, energy.probe_period_s);
    sampler->start();
  }

  Model model = Model::build(cfg.arch, cfg.seed);
  SgdState sgd;
  std::vector<std::vector<double>> ema_w;
  if (cfg.ema) ema_w = snapshot_params(model);
  FlopCounter flops;

  std::vector<int> subset = shuffled_indices(
      data.test.size(), mix_seed(cfg.seed, 0x73756273ull));
  subset.resize(static_cast<size_t>(
      std::min(cfg.eval_subset, data.test.size())));
  AttackConfig earlystop_cfg = cfg.eval_attack;
  earlystop_cfg.restarts = 1;

  double best_racc = -1.0;
  int best_epoch = -1;
  std::vector<std::vector<double>> best_params, best_buffers;
  bool failed = false;
  int epochs_done = 0;

  for (int epoch = 0; epoch < cfg.epochs && !failed; ++epoch) {
    const double lr = lr_at_epoch(cfg, epoch);
    auto batches = epoch_batches(
        data.train.size(), cfg.extra_data && data.extra ? data.extra->size() : 0,
        cfg.batch_size, cfg.extra_data ? cfg.extra_ratio : 0.0, cfg.seed, epoch);
    std::uint64_t bi = 0;
    for (const Batch& b : batches) {
      std::vector<int> y;
      Tensor x = assemble_batch(data, b, y);
      const std::uint64_t atk_seed = mix_seed(
          cfg.seed, 0x61746bull ^ (static_cast<std::uint64_t>(epoch) << 20) ^ bi);
      Tape tape;
      Tensor loss =
          cfg.loss == LossType::At
              ? at_loss(tape, model, x, y, cfg.attack, atk_seed, &flops)
              : trades_loss(tape, model, x, y, cfg.beta, cfg.attack, atk_seed,
                            &flops);
      if (!std::isfinite(loss.scalar())) {
        failed = true;
        break;
      }
      tape.backward(loss);
      flops.add(tape);
      sgd_step(model, tape, lr, cfg.momentum, cfg.weight_decay, sgd);
      if (cfg.ema) ema_update(ema_w, model, cfg.ema_decay);
      ++bi;
    }
    if (failed) break;
    ++epochs_done;

    std::vector<std::vector<double>> live;
    if (cfg.ema) {
      live = snapshot_params(model);
      restore_params(model, ema_w);
    }
    const double racc =
        robust_eval(model, data.test, subset, earlystop_cfg,
                    mix_seed(cfg.seed, 0x6576616cull + static_cast<std::uint64_t>(epoch)))
            .robust_acc;
    if (racc > best_racc) {
      best_racc = racc;
      best_epoch = epoch;
      best_params = snapshot_params(model);
      best_buffers = snapshot_buffers(model);
    }
    if (cfg.ema) restore_params(model, live);
  }

  RunRecord rec;
  rec.config = cfg;
  rec.seed = cfg.seed;
  rec.failed = failed;
  rec.epochs_trained = epochs_done;
  rec.best_epoch = best_epoch;

  if (!failed) {
    restore_params(model, best_params);
    restore_buffers(model, best_buffers);
    rec.robust_acc_earlystop = best_racc;
    rec.clean_acc = clean_accuracy(model, data.test);
    std::vector<int> all_test(static_cast<size_t>(data.test.size()));
    std::iota(all_test.begin(), all_test.end(), 0);
    rec.robust_acc_final =
        robust_eval(model, data.test, all_test, cfg.eval_attack,
                    mix_seed(cfg.seed, 0x66696e616cull))
            .robust_acc;
  }

  const FlopReport fr = train_flops(
      cfg.arch, cfg.cost_loss(), cfg.attack.steps, data.train.size(),
      cfg.extra_data ? cfg.extra_ratio : 0.0,
      failed ? epochs_done : cfg.epochs, cfg.batch_size, cfg.attack.restarts,
      cfg.ema);
  rec.train_flops = fr.total_train_flops;

  rec.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  if (rec.wall_seconds <= 0) rec.wall_seconds = 1e-9;
  EnergyReport er =
      sampler ? energy_from_power(time_weighted_mean(sampler->stop()),
                                  rec.wall_seconds, energy.n_gpus, energy.pue,
                                  energy.usd_per_kwh, energy.co2_g_per_kwh)
              : energy_report(energy.source, rec.wall_seconds, energy.n_gpus,
                              energy.pue, energy.usd_per_kwh,
                              energy.co2_g_per_kwh);
  rec.kwh = er.kwh;
  rec.usd = er.usd;
  rec.co2_g = er.co2_g;

  TrainResult out{std::move(model), std::move(rec), flops.mac, flops.total()};
  return out;
}

}  // namespace robustlab
