// SPDX-License-Identifier: Apache-2.0
//
// Command-line surface for the lab: dataset generation, single runs and
// grids, robustness evaluation, analytic cost estimates, scaling-law fits,
// recipe-accuracy prediction, and report files.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "robustlab/attacks.hpp"
#include "robustlab/cost.hpp"
#include "robustlab/data.hpp"
#include "robustlab/gbr.hpp"
#include "robustlab/harness.hpp"
#include "robustlab/nn.hpp"
#include "robustlab/scaling.hpp"
#include "robustlab/train.hpp"

using namespace robustlab;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitRunFailure = 3;

ArchSpec parse_arch(const std::string& name, const std::string& input_csv,
                    int classes, const std::string& activation) {
  std::array<int, 3> input{3, 32, 32};
  if (!input_csv.empty()) {
    if (std::sscanf(input_csv.c_str(), "%d,%d,%d", &input[0], &input[1],
                    &input[2]) != 3)
      throw std::invalid_argument("bad --input, expected c,h,w: " + input_csv);
  }
  const Act act = act_from_name(activation);
  int a = 0, b = 0;
  if (std::sscanf(name.c_str(), "wrn-%d-%d", &a, &b) == 2)
    return ArchSpec::wrn(a, b, input, classes, act);
  if (std::sscanf(name.c_str(), "mlp-%dx%d", &a, &b) == 2)
    return ArchSpec::mlp(a, b, input, classes, act);
  throw std::invalid_argument("bad --arch, expected wrn-D-W or mlp-DxW: " +
                              name);
}

EnergyOptions energy_options(double power_flag, int gpus, double pue,
                             double rate, double intensity) {
  EnergyOptions e;
  if (power_flag > 0) {
    e.source = PowerSource::constant(power_flag);
  } else if (const char* probe = std::getenv("ROBUSTLAB_POWER_PROBE");
             probe && *probe) {
    e.source = PowerSource::probe(probe);
  }
  e.n_gpus = gpus;
  e.pue = pue;
  e.usd_per_kwh = rate;
  e.co2_g_per_kwh = intensity;
  return e;
}

json load_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  return json::parse(is);
}

void emit(const json& j, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << j.dump(2) << "\n";
    return;
  }
  std::ofstream os(out_path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + out_path);
  os << j.dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"robustlab - adversarial training benchmarking pipeline"};
  app.require_subcommand(1);

  // gen-data ---------------------------------------------------------------
  auto* gen = app.add_subcommand("gen-data", "generate a blob dataset");
  int gen_n = 2000, gen_size = 8, gen_extra = 0;
  double gen_sigma = 0.15;
  std::uint64_t gen_seed = 0;
  std::string gen_out = "data";
  gen->add_option("--n", gen_n, "total examples (train+test)");
  gen->add_option("--size", gen_size, "image side length");
  gen->add_option("--sigma", gen_sigma, "noise standard deviation");
  gen->add_option("--extra", gen_extra, "extra-pool size");
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--out", gen_out, "output directory")->required();

  // train ------------------------------------------------------------------
  auto* tr = app.add_subcommand("train", "run one training configuration");
  std::string tr_config, tr_data, tr_out = "runs";
  double tr_power = 0, tr_pue = 1.58, tr_rate = 0.12, tr_int = 566.3;
  int tr_gpus = 1;
  tr->add_option("--config", tr_config, "TrainConfig JSON file")->required();
  tr->add_option("--data", tr_data, "dataset directory")->required();
  tr->add_option("--out", tr_out, "output directory");
  tr->add_option("--power", tr_power, "constant power draw in watts");
  tr->add_option("--gpus", tr_gpus, "device count for energy accounting");
  tr->add_option("--pue", tr_pue, "power usage effectiveness");
  tr->add_option("--rate", tr_rate, "electricity price, $/kWh");
  tr->add_option("--intensity", tr_int, "carbon intensity, gCO2/kWh");

  // grid -------------------------------------------------------------------
  auto* gr = app.add_subcommand("grid", "run an experiment grid");
  std::string gr_config, gr_data, gr_out = "runs";
  int gr_par = 1, gr_gpus = 1;
  double gr_power = 0, gr_pue = 1.58, gr_rate = 0.12, gr_int = 566.3;
  gr->add_option("--config", gr_config, "GridSpec JSON file")->required();
  gr->add_option("--data", gr_data, "dataset directory")->required();
  gr->add_option("--out", gr_out, "output directory");
  gr->add_option("--parallelism", gr_par, "concurrent runs");
  gr->add_option("--power", gr_power, "constant power draw in watts");
  gr->add_option("--gpus", gr_gpus, "device count for energy accounting");
  gr->add_option("--pue", gr_pue, "power usage effectiveness");
  gr->add_option("--rate", gr_rate, "electricity price, $/kWh");
  gr->add_option("--intensity", gr_int, "carbon intensity, gCO2/kWh");

  // eval -------------------------------------------------------------------
  auto* ev = app.add_subcommand("eval", "attack a saved model");
  std::string ev_model, ev_data, ev_split = "test";
  double ev_eps = 8.0 / 255.0, ev_step = 0.0;
  int ev_steps = 40, ev_restarts = 1, ev_subset = 0;
  std::uint64_t ev_seed = 0;
  ev->add_option("--model", ev_model, "model file")->required();
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--split", ev_split, "train|test");
  ev->add_option("--eps", ev_eps, "l-inf radius");
  ev->add_option("--steps", ev_steps, "PGD iterations");
  ev->add_option("--restarts", ev_restarts, "PGD restarts");
  ev->add_option("--step-size", ev_step, "PGD step size (0 = default)");
  ev->add_option("--subset", ev_subset, "evaluate first N points (0 = all)");
  ev->add_option("--seed", ev_seed, "attack seed");

  // cost -------------------------------------------------------------------
  auto* co = app.add_subcommand("cost",
                                "analytic FLOP/energy estimate, no training");
  std::string co_arch = "wrn-28-10", co_input, co_loss = "at",
              co_act = "relu";
  int co_classes = 10, co_steps = 10, co_epochs = 100, co_batch = 128,
      co_restarts = 1, co_gpus = 1;
  std::int64_t co_ds = 50000;
  double co_extra = 0.0, co_power = 0, co_wall = 0, co_gflops = 0,
         co_pue = 1.58, co_rate = 0.12, co_int = 566.3;
  bool co_ema = false;
  co->add_option("--arch", co_arch, "architecture, e.g. wrn-70-16");
  co->add_option("--input", co_input, "input shape c,h,w (default 3,32,32)");
  co->add_option("--classes", co_classes, "number of classes");
  co->add_option("--activation", co_act, "relu|gelu");
  co->add_option("--loss", co_loss, "standard|at|trades");
  co->add_option("--steps", co_steps, "attack iterations");
  co->add_option("--epochs", co_epochs, "training epochs");
  co->add_option("--dataset-size", co_ds, "examples per epoch (base split)");
  co->add_option("--extra-ratio", co_extra, "extra-data fraction per batch");
  co->add_option("--batch-size", co_batch, "batch size");
  co->add_option("--restarts", co_restarts, "training attack restarts");
  co->add_flag("--ema", co_ema, "include EMA update cost");
  co->add_option("--power", co_power, "average device power in watts");
  co->add_option("--gpus", co_gpus, "device count");
  co->add_option("--wall-seconds", co_wall, "measured training walltime");
  co->add_option("--gpu-gflops", co_gflops,
                 "sustained GFLOP/s per device, used to estimate walltime");
  co->add_option("--pue", co_pue, "power usage effectiveness");
  co->add_option("--rate", co_rate, "electricity price, $/kWh");
  co->add_option("--intensity", co_int, "carbon intensity, gCO2/kWh");

  // fit --------------------------------------------------------------------
  auto* fi = app.add_subcommand("fit", "envelope + power-law fit over records");
  std::string fi_records, fi_metric = "robust_acc_final", fi_out,
              fi_envelope;
  int fi_bins = 19;
  bool fi_linear = false;
  fi->add_option("--records", fi_records, "records.jsonl")->required();
  fi->add_option("--metric", fi_metric, "record metric to fit");
  fi->add_option("--bins", fi_bins, "FLOP bins");
  fi->add_flag("--linear-bins", fi_linear, "bin on a linear FLOP axis");
  fi->add_option("--out", fi_out, "fit JSON output (default stdout)");
  fi->add_option("--envelope-out", fi_envelope, "also write envelope CSV");

  // predict ----------------------------------------------------------------
  auto* pr = app.add_subcommand(
      "predict", "fit the recipe-accuracy predictor on records");
  std::string pr_records, pr_out;
  double pr_split = 0.7, pr_lr = 0.1;
  int pr_estimators = 50, pr_depth = 5;
  std::uint64_t pr_seed = 0;
  pr->add_option("--records", pr_records, "records.jsonl")->required();
  pr->add_option("--split", pr_split, "train fraction");
  pr->add_option("--seed", pr_seed, "split seed");
  pr->add_option("--estimators", pr_estimators, "boosting stages");
  pr->add_option("--depth", pr_depth, "max tree depth");
  pr->add_option("--lr", pr_lr, "boosting learning rate");
  pr->add_option("--out", pr_out, "predictor JSON output (default stdout)");

  // report -----------------------------------------------------------------
  auto* re = app.add_subcommand("report", "write a report file from records");
  std::string re_records, re_kind = "summary_csv", re_out,
              re_metric = "robust_acc_final";
  int re_bins = 19;
  double re_split = 0.7;
  std::uint64_t re_seed = 0;
  re->add_option("--records", re_records, "records.jsonl")->required();
  re->add_option("--kind", re_kind,
                 "summary_csv|envelope_csv|fit_json|predictor_json");
  re->add_option("--metric", re_metric, "metric for envelope/fit kinds");
  re->add_option("--bins", re_bins, "FLOP bins");
  re->add_option("--split", re_split, "train fraction for predictor");
  re->add_option("--seed", re_seed, "split seed for predictor");
  re->add_option("--out", re_out, "output path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) {
      Dataset ds = gen_blobs(gen_n, gen_size, gen_sigma, gen_seed, gen_extra);
      save_dataset(ds, gen_out);
      std::cout << "wrote " << ds.train.size() << " train / "
                << ds.test.size() << " test"
                << (ds.extra ? " / " + std::to_string(ds.extra->size()) +
                                   " extra"
                             : "")
                << " examples to " << gen_out << "\n";
      return kExitOk;
    }

    if (*tr) {
      TrainConfig cfg = config_from_json(load_json_file(tr_config));
      Dataset data = load_dataset(tr_data);
      const EnergyOptions energy =
          energy_options(tr_power, tr_gpus, tr_pue, tr_rate, tr_int);
      TrainResult res = train(cfg, data, energy);
      res.record.run_id = run_id_for(cfg);
      std::filesystem::create_directories(tr_out + "/models");
      if (!res.record.failed)
        res.model.save(tr_out + "/models/" + res.record.run_id + ".bin");
      append_run_record(tr_out + "/records.jsonl", res.record);
      std::cout << record_to_json(res.record).dump(2) << "\n";
      return res.record.failed ? kExitRunFailure : kExitOk;
    }

    if (*gr) {
      GridSpec grid = GridSpec::from_json(load_json_file(gr_config));
      Dataset data = load_dataset(gr_data);
      const EnergyOptions energy =
          energy_options(gr_power, gr_gpus, gr_pue, gr_rate, gr_int);
      GridOutcome out = run_grid(grid, data, gr_out, gr_par, energy);
      std::cout << "grid: " << out.records.size() << " records ("
                << out.n_new << " new, " << out.n_skipped << " skipped, "
                << out.n_failed << " failed)\n";
      return out.n_failed > 0 ? kExitRunFailure : kExitOk;
    }

    if (*ev) {
      Model model = Model::load(ev_model);
      Dataset data = load_dataset(ev_data);
      const ImageSet& split = ev_split == "train" ? data.train : data.test;
      AttackConfig cfg;
      cfg.epsilon = ev_eps;
      cfg.steps = ev_steps;
      cfg.restarts = ev_restarts;
      cfg.step_size = ev_step;
      cfg.random_start = true;
      std::vector<int> idx(static_cast<size_t>(
          ev_subset > 0 ? std::min(ev_subset, split.size()) : split.size()));
      for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
      RobustEval r = robust_eval(model, split, idx, cfg, ev_seed);
      std::cout << json{{"clean_acc", r.clean_acc},
                        {"robust_acc", r.robust_acc},
                        {"epsilon", cfg.epsilon},
                        {"steps", cfg.steps},
                        {"restarts", cfg.restarts},
                        {"n", idx.size()}}
                       .dump(2)
                << "\n";
      return kExitOk;
    }

    if (*co) {
      const ArchSpec arch = parse_arch(co_arch, co_input, co_classes, co_act);
      const FlopReport fr =
          train_flops(arch, train_loss_from_name(co_loss), co_steps, co_ds,
                      co_extra, co_epochs, co_batch, co_restarts, co_ema);
      json j{{"arch", arch.name()},
             {"params", count_params(arch)},
             {"loss", co_loss},
             {"steps", co_steps},
             {"epochs", co_epochs},
             {"forward_flops_per_example", fr.forward_flops_per_example},
             {"backward_multiplier", fr.backward_multiplier},
             {"per_example_train_flops", fr.per_example_train_flops},
             {"examples_per_epoch", fr.examples_per_epoch},
             {"train_flops", fr.train_flops},
             {"ema_update_flops", fr.ema_update_flops},
             {"total_train_flops", fr.total_train_flops}};
      if (arch.activation == Act::Gelu)
        j["memory_note"] = "gelu activations are estimated at about 1.5x the "
                           "relu activation memory";
      double wall = co_wall;
      if (wall <= 0 && co_gflops > 0)
        wall = fr.total_train_flops / (co_gflops * 1e9 * co_gpus);
      if (wall > 0 && co_power > 0) {
        const EnergyReport er = energy_from_power(co_power, wall, co_gpus,
                                                  co_pue, co_rate, co_int);
        j["wall_seconds"] = wall;
        j["wall_seconds_estimated"] = co_wall <= 0;
        j["avg_power_watts"] = er.avg_power_watts;
        j["kwh"] = er.kwh;
        j["usd"] = er.usd;
        j["co2_g"] = er.co2_g;
      }
      std::cout << j.dump(2) << "\n";
      return kExitOk;
    }

    if (*fi) {
      const auto records = load_run_records(fi_records);
      ReportOptions opt;
      opt.metric = fi_metric;
      opt.bins = fi_bins;
      opt.log_bins = !fi_linear;
      if (!fi_envelope.empty()) report(records, "envelope_csv", opt, fi_envelope);
      emit(make_fit_json(records, opt), fi_out);
      return kExitOk;
    }

    if (*pr) {
      const auto records = load_run_records(pr_records);
      ReportOptions opt;
      opt.split_fraction = pr_split;
      opt.seed = pr_seed;
      opt.n_estimators = pr_estimators;
      opt.max_depth = pr_depth;
      opt.learning_rate = pr_lr;
      emit(make_predictor_json(records, opt), pr_out);
      return kExitOk;
    }

    if (*re) {
      const auto records = load_run_records(re_records);
      ReportOptions opt;
      opt.metric = re_metric;
      opt.bins = re_bins;
      opt.split_fraction = re_split;
      opt.seed = re_seed;
      report(records, re_kind, opt, re_out);
      std::cout << "wrote " << re_out << "\n";
      return kExitOk;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
