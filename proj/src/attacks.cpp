// SPDX-License-Identifier: Apache-2.0
#include "robustlab/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace robustlab {

double AttackConfig::effective_step() const {
  return step_size > 0 ? step_size : 2.5 * epsilon / steps;
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0 && epsilon < 1.0))
    throw std::invalid_argument("attack: epsilon must be in [0,1)");
  if (steps < 1) throw std::invalid_argument("attack: steps must be >= 1");
  if (restarts < 1) throw std::invalid_argument("attack: restarts must be >= 1");
  if (step_size < 0) throw std::invalid_argument("attack: negative step_size");
}

void project_linf(std::vector<double>& delta, const std::vector<double>& x,
                  double eps) {
  for (size_t i = 0; i < delta.size(); ++i) {
    double d = std::clamp(delta[i], -eps, eps);
    d = std::clamp(d, -x[i], 1.0 - x[i]);
    delta[i] = d;
  }
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const int n = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(static_cast<size_t>(n));
  const auto& d = logits.data();
  for (int i = 0; i < n; ++i) {
    const double* row = d.data() + static_cast<std::int64_t>(i) * c;
    int best = 0;
    for (int j = 1; j < c; ++j)
      if (row[j] > row[best]) best = j;
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

namespace {

// Per-example attack objective rows on the given tape.
Tensor attack_loss_rows(Tape* tape, const Tensor& logits,
                        const std::vector<int>& y, AttackLoss kind,
                        const Tensor* clean_probs) {
  if (kind == AttackLoss::CrossEntropy)
    return cross_entropy_rows(tape, logits, y);
  Tensor q = ops::clamp_min(tape, ops::softmax(tape, logits), 1e-12);
  return kl_divergence_rows(tape, *clean_probs, q);
}

}  // namespace

PgdResult pgd(Model& model, const Tensor& x, const std::vector<int>& y,
              const AttackConfig& cfg, const Tensor* clean_logits,
              std::uint64_t seed, FlopCounter* flops, const PgdOptions& opt) {
  cfg.validate();
  if (x.rank() != 4)
    throw std::invalid_argument("pgd: expected [N,C,H,W] input, got " +
                                shape_str(x.shape()));
  const int n = x.dim(0);
  if (static_cast<int>(y.size()) != n)
    throw std::invalid_argument("pgd: label count mismatch");
  if (cfg.loss_kind == AttackLoss::KlVsClean && clean_logits == nullptr)
    throw std::invalid_argument("pgd: kl_vs_clean requires clean_logits");
  {
    const auto& xd = x.data();
    for (double v : xd)
      if (v < 0.0 || v > 1.0)
        throw std::invalid_argument("pgd: inputs must lie in [0,1]");
  }

  Tensor clean_probs;
  if (cfg.loss_kind == AttackLoss::KlVsClean) {
    Tensor p = ops::softmax(nullptr, clean_logits->detached());
    clean_probs = ops::clamp_min(nullptr, p, 1e-12);
  }

  const std::int64_t ex = x.size() / n;
  const double alpha = cfg.effective_step();
  const auto& xd = x.data();

  PgdResult out;
  out.best_loss.assign(static_cast<size_t>(n),
                       -std::numeric_limits<double>::infinity());
  out.misclassified.assign(static_cast<size_t>(n), 0);
  std::vector<double> chosen(x.data().size(), 0.0);

  Tensor x_const = x.detached();

  for (int r = 0; r < cfg.restarts; ++r) {
    std::uint64_t rng = mix_seed(seed, 0x706764ull + static_cast<std::uint64_t>(r));
    std::vector<double> delta(x.data().size(), 0.0);
    if (cfg.random_start)
      for (auto& d : delta) d = (2.0 * uniform01(rng) - 1.0) * cfg.epsilon;
    project_linf(delta, xd, cfg.epsilon);

    std::vector<double> restart_best(static_cast<size_t>(n),
                                     -std::numeric_limits<double>::infinity());
    std::vector<double> last_loss(static_cast<size_t>(n), 0.0);
    std::vector<std::vector<double>> best_delta(
        static_cast<size_t>(n));

    auto track = [&](const std::vector<double>& rows,
                     const std::vector<int>& preds,
                     const std::vector<double>& cur_delta) {
      for (int i = 0; i < n; ++i) {
        if (preds[static_cast<size_t>(i)] != y[static_cast<size_t>(i)])
          out.misclassified[static_cast<size_t>(i)] = 1;
        last_loss[static_cast<size_t>(i)] = rows[static_cast<size_t>(i)];
        if (rows[static_cast<size_t>(i)] > restart_best[static_cast<size_t>(i)]) {
          restart_best[static_cast<size_t>(i)] = rows[static_cast<size_t>(i)];
          best_delta[static_cast<size_t>(i)].assign(
              cur_delta.begin() + i * ex, cur_delta.begin() + (i + 1) * ex);
        }
      }
    };

    for (int t = 0; t < cfg.steps; ++t) {
      Tape tape;
      Tensor dt = Tensor::from_data(x.shape(), delta, true);
      Tensor x_adv = ops::add(&tape, x_const, dt);
      Tensor logits = model.forward(&tape, x_adv, BnMode::Frozen);
      Tensor rows = attack_loss_rows(&tape, logits, y, cfg.loss_kind,
                                     &clean_probs);
      track(rows.data(), argmax_rows(logits), delta);
      Tensor total = ops::sum(&tape, rows);
      tape.backward(total);
      Tensor g = tape.grad(dt);
      const auto& gd = g.data();
      for (size_t i = 0; i < delta.size(); ++i) {
        const double s = gd[i] > 0 ? 1.0 : (gd[i] < 0 ? -1.0 : 0.0);
        delta[i] += alpha * s;
      }
      project_linf(delta, xd, cfg.epsilon);
      if (flops) flops->add(tape);
    }

    // The final iterate was produced but not scored inside the loop. For
    // evaluation we spend one forward to score it; for training we keep it
    // unless an earlier evaluated iterate strictly beat the last one.
    if (opt.evaluate_final) {
      Tensor dt = Tensor::from_data(x.shape(), delta, false);
      Tensor x_adv = ops::add(nullptr, x_const, dt);
      Tensor logits = model.forward(nullptr, x_adv, BnMode::Frozen);
      Tensor rows = attack_loss_rows(nullptr, logits, y, cfg.loss_kind,
                                     &clean_probs);
      track(rows.data(), argmax_rows(logits), delta);
    } else {
      for (int i = 0; i < n; ++i) {
        if (!(restart_best[static_cast<size_t>(i)] >
              last_loss[static_cast<size_t>(i)])) {
          restart_best[static_cast<size_t>(i)] =
              last_loss[static_cast<size_t>(i)];
          best_delta[static_cast<size_t>(i)].assign(
              delta.begin() + i * ex, delta.begin() + (i + 1) * ex);
        }
      }
    }

    for (int i = 0; i < n; ++i) {
      if (restart_best[static_cast<size_t>(i)] >
          out.best_loss[static_cast<size_t>(i)]) {
        out.best_loss[static_cast<size_t>(i)] =
            restart_best[static_cast<size_t>(i)];
        std::copy(best_delta[static_cast<size_t>(i)].begin(),
                  best_delta[static_cast<size_t>(i)].end(),
                  chosen.begin() + i * ex);
      }
    }
  }

  out.delta = Tensor::from_data(x.shape(), std::move(chosen));
  return out;
}

namespace {

std::vector<std::vector<int>> make_batches(const std::vector<int>& indices,
                                           int batch_size) {
  std::vector<std::vector<int>> out;
  for (size_t i = 0; i < indices.size(); i += static_cast<size_t>(batch_size)) {
    const size_t end = std::min(indices.size(), i + static_cast<size_t>(batch_size));
    out.emplace_back(indices.begin() + static_cast<std::ptrdiff_t>(i),
                     indices.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

std::vector<int> all_indices(const ImageSet& data) {
  std::vector<int> idx(static_cast<size_t>(data.size()));
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

}  // namespace

RobustEval robust_eval(Model& model, const ImageSet& data,
                       const std::vector<int>& indices,
                       const AttackConfig& cfg, std::uint64_t seed,
                       int batch_size) {
  cfg.validate();
  if (indices.empty())
    throw std::invalid_argument("robust_eval: empty dataset");
  std::int64_t clean_hits = 0, robust_hits = 0;
  std::uint64_t batch_tag = 0;
  for (const auto& batch : make_batches(indices, batch_size)) {
    Tensor x = batch_images(data, batch);
    std::vector<int> y = batch_labels(data, batch);
    const int n = static_cast<int>(batch.size());

    // The clean point is checked first, whether or not the attack uses a
    // random start.
    Tensor clean_logits = model.forward(nullptr, x, BnMode::Frozen);
    std::vector<int> clean_pred = argmax_rows(clean_logits);
    std::vector<std::uint8_t> robust(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
      robust[static_cast<size_t>(i)] =
          clean_pred[static_cast<size_t>(i)] == y[static_cast<size_t>(i)];
    for (int i = 0; i < n; ++i) clean_hits += robust[static_cast<size_t>(i)];

    PgdOptions opt;
    opt.evaluate_final = true;
    PgdResult res = pgd(model, x, y, cfg,
                        cfg.loss_kind == AttackLoss::KlVsClean ? &clean_logits
                                                               : nullptr,
                        mix_seed(seed, 0x6576616cull + batch_tag), nullptr, opt);
    for (int i = 0; i < n; ++i)
      if (robust[static_cast<size_t>(i)] && !res.misclassified[static_cast<size_t>(i)])
        ++robust_hits;
    ++batch_tag;
  }
  RobustEval out;
  out.clean_acc = static_cast<double>(clean_hits) /
                  static_cast<double>(indices.size());
  out.robust_acc = static_cast<double>(robust_hits) /
                   static_cast<double>(indices.size());
  return out;
}

double robust_accuracy(Model& model, const ImageSet& data,
                       const AttackConfig& cfg, std::uint64_t seed,
                       int batch_size) {
  return robust_eval(model, data, all_indices(data), cfg, seed, batch_size)
      .robust_acc;
}

double clean_accuracy(Model& model, const ImageSet& data, int batch_size) {
  if (data.size() == 0)
    throw std::invalid_argument("clean_accuracy: empty dataset");
  std::int64_t hits = 0;
  for (const auto& batch : make_batches(all_indices(data), batch_size)) {
    Tensor x = batch_images(data, batch);
    std::vector<int> y = batch_labels(data, batch);
    std::vector<int> pred = argmax_rows(model.forward(nullptr, x, BnMode::Frozen));
    for (size_t i = 0; i < batch.size(); ++i) hits += pred[i] == y[i];
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

}  // namespace robustlab
