// SPDX-License-Identifier: Apache-2.0
#include "robustlab/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <thread>

namespace robustlab {

namespace fs = std::filesystem;
using nlohmann::json;

json arch_to_json(const ArchSpec& a) {
  return json{{"family", family_name(a.family)},
              {"depth", a.depth},
              {"width", a.width},
              {"activation", act_name(a.activation)},
              {"input_shape", a.input_shape},
              {"num_classes", a.num_classes}};
}

ArchSpec arch_from_json(const json& j) {
  ArchSpec a;
  a.family = family_from_name(j.at("family"));
  a.depth = j.at("depth");
  a.width = j.at("width");
  a.activation = act_from_name(j.at("activation"));
  const auto shp = j.at("input_shape");
  a.input_shape = {shp.at(0), shp.at(1), shp.at(2)};
  a.num_classes = j.at("num_classes");
  a.validate();
  return a;
}

json attack_to_json(const AttackConfig& a) {
  return json{{"epsilon", a.epsilon},
              {"steps", a.steps},
              {"step_size", a.step_size},
              {"random_start", a.random_start},
              {"restarts", a.restarts},
              {"loss_kind", a.loss_kind == AttackLoss::KlVsClean
                                ? "kl_vs_clean"
                                : "cross_entropy"}};
}

AttackConfig attack_from_json(const json& j) {
  AttackConfig a;
  a.epsilon = j.at("epsilon");
  a.steps = j.at("steps");
  a.step_size = j.value("step_size", 0.0);
  a.random_start = j.at("random_start");
  a.restarts = j.value("restarts", 1);
  const std::string kind = j.value("loss_kind", "cross_entropy");
  if (kind == "kl_vs_clean")
    a.loss_kind = AttackLoss::KlVsClean;
  else if (kind == "cross_entropy")
    a.loss_kind = AttackLoss::CrossEntropy;
  else
    throw std::invalid_argument("unknown attack loss_kind: " + kind);
  a.validate();
  return a;
}

json config_to_json(const TrainConfig& c) {
  return json{{"arch", arch_to_json(c.arch)},
              {"loss", loss_type_name(c.loss)},
              {"beta", c.beta},
              {"attack", attack_to_json(c.attack)},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"lr", c.lr},
              {"momentum", c.momentum},
              {"weight_decay", c.weight_decay},
              {"schedule", c.schedule == LrSchedule::Cyclic
                               ? "cyclic"
                               : "piecewise_constant"},
              {"ema", c.ema},
              {"ema_decay", c.ema_decay},
              {"extra_data", c.extra_data},
              {"extra_ratio", c.extra_ratio},
              {"eval_attack", attack_to_json(c.eval_attack)},
              {"eval_subset", c.eval_subset},
              {"seed", c.seed}};
}

TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  c.arch = arch_from_json(j.at("arch"));
  c.loss = loss_type_from_name(j.at("loss"));
  c.beta = j.value("beta", 6.0);
  c.attack = attack_from_json(j.at("attack"));
  c.epochs = j.at("epochs");
  c.batch_size = j.at("batch_size");
  c.lr = j.at("lr");
  c.momentum = j.value("momentum", 0.9);
  c.weight_decay = j.value("weight_decay", 5e-4);
  const std::string sched = j.value("schedule", "piecewise_constant");
  if (sched == "cyclic")
    c.schedule = LrSchedule::Cyclic;
  else if (sched == "piecewise_constant")
    c.schedule = LrSchedule::PiecewiseConstant;
  else
    throw std::invalid_argument("unknown schedule: " + sched);
  c.ema = j.value("ema", false);
  c.ema_decay = j.value("ema_decay", 0.995);
  c.extra_data = j.value("extra_data", false);
  c.extra_ratio = j.value("extra_ratio", 0.0);
  c.eval_attack = attack_from_json(j.at("eval_attack"));
  c.eval_subset = j.value("eval_subset", 512);
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

json record_to_json(const RunRecord& r) {
  return json{{"run_id", r.run_id},
              {"v", 1},
              {"config", config_to_json(r.config)},
              {"clean_acc", r.clean_acc},
              {"robust_acc_earlystop", r.robust_acc_earlystop},
              {"robust_acc_final", r.robust_acc_final},
              {"train_flops", r.train_flops},
              {"wall_seconds", r.wall_seconds},
              {"kwh", r.kwh},
              {"usd", r.usd},
              {"co2_g", r.co2_g},
              {"best_epoch", r.best_epoch},
              {"epochs_trained", r.epochs_trained},
              {"seed", r.seed},
              {"failed", r.failed}};
}

RunRecord record_from_json(const json& j) {
  RunRecord r;
  r.run_id = j.at("run_id");
  r.config = config_from_json(j.at("config"));
  r.clean_acc = j.at("clean_acc");
  r.robust_acc_earlystop = j.at("robust_acc_earlystop");
  r.robust_acc_final = j.at("robust_acc_final");
  r.train_flops = j.at("train_flops");
  r.wall_seconds = j.at("wall_seconds");
  r.kwh = j.at("kwh");
  r.usd = j.at("usd");
  r.co2_g = j.at("co2_g");
  r.best_epoch = j.at("best_epoch");
  r.epochs_trained = j.at("epochs_trained");
  r.seed = j.at("seed").get<std::uint64_t>();
  r.failed = j.at("failed");
  return r;
}

std::string canonical_config(const TrainConfig& c) {
  return config_to_json(c).dump();  // nlohmann objects keep sorted keys
}

std::string run_id_for(const TrainConfig& c) {
  const std::string s = canonical_config(c);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Grid

std::vector<TrainConfig> GridSpec::expand() const {
  auto or_default = [](auto v, auto d) { return v.empty() ? d : v; };
  const auto archs_ = or_default(archs, std::vector<ArchSpec>{base.arch});
  const auto losses_ = or_default(losses, std::vector<LossType>{base.loss});
  const auto steps_ = or_default(steps, std::vector<int>{base.attack.steps});
  const auto ee_ = or_default(
      epochs_ema, std::vector<EpochsEma>{{base.epochs, base.ema}});
  const auto extra_ = or_default(extra_data, std::vector<bool>{base.extra_data});
  const auto act_ =
      or_default(activations, std::vector<Act>{base.arch.activation});
  const auto seeds_ = or_default(seeds, std::vector<std::uint64_t>{base.seed});

  auto excluded = [&](const json& combo) {
    for (const auto& rule : exclude) {
      bool all = true;
      for (auto it = rule.begin(); it != rule.end(); ++it)
        if (!combo.contains(it.key()) || combo.at(it.key()) != it.value()) {
          all = false;
          break;
        }
      if (all) return true;
    }
    return false;
  };

  std::vector<TrainConfig> out;
  for (const auto& arch : archs_)
    for (const auto loss : losses_)
      for (const int n : steps_)
        for (const auto& ee : ee_)
          for (const bool extra : extra_)
            for (const auto act : act_)
              for (const auto seed : seeds_) {
                const json combo{{"arch", arch.name()},
                                 {"loss", loss_type_name(loss)},
                                 {"steps", n},
                                 {"epochs", ee.epochs},
                                 {"ema", ee.ema},
                                 {"extra_data", extra},
                                 {"activation", act_name(act)},
                                 {"seed", seed}};
                if (excluded(combo)) continue;
                TrainConfig c = base;
                c.arch = arch;
                c.arch.activation = act;
                c.loss = loss;
                c.attack.steps = n;
                c.attack.loss_kind = loss == LossType::Trades
                                         ? AttackLoss::KlVsClean
                                         : AttackLoss::CrossEntropy;
                c.epochs = ee.epochs;
                c.ema = ee.ema;
                c.extra_data = extra;
                if (!extra) c.extra_ratio = 0.0;
                c.seed = seed;
                c.validate();
                out.push_back(std::move(c));
              }
  if (out.empty()) throw std::invalid_argument("grid: no combinations left");
  return out;
}

GridSpec GridSpec::from_json(const json& j) {
  GridSpec g;
  g.base = config_from_json(j.at("base"));
  const json axes = j.value("axes", json::object());
  if (axes.contains("arch"))
    for (const auto& a : axes.at("arch")) g.archs.push_back(arch_from_json(a));
  if (axes.contains("loss"))
    for (const auto& l : axes.at("loss"))
      g.losses.push_back(loss_type_from_name(l));
  if (axes.contains("steps"))
    for (const auto& s : axes.at("steps")) g.steps.push_back(s);
  if (axes.contains("epochs_ema"))
    for (const auto& e : axes.at("epochs_ema"))
      g.epochs_ema.push_back({e.at("epochs"), e.at("ema")});
  if (axes.contains("extra_data"))
    for (const auto& e : axes.at("extra_data"))
      g.extra_data.push_back(e.get<bool>());
  if (axes.contains("activation"))
    for (const auto& a : axes.at("activation"))
      g.activations.push_back(act_from_name(a));
  if (axes.contains("seeds"))
    for (const auto& s : axes.at("seeds"))
      g.seeds.push_back(s.get<std::uint64_t>());
  if (j.contains("exclude"))
    for (const auto& e : j.at("exclude")) g.exclude.push_back(e);
  return g;
}

void append_run_record(const std::string& path, const RunRecord& r) {
  std::ofstream os(path, std::ios::app);
  if (!os) throw std::runtime_error("records: cannot open " + path);
  os << record_to_json(r).dump() << "\n";
  os.flush();
  if (!os) throw std::runtime_error("records: write failed for " + path);
}

std::vector<RunRecord> load_run_records(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("records: cannot open " + path);
  std::vector<RunRecord> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error("records: bad line " + std::to_string(lineno) +
                               " in " + path + ": " + e.what());
    }
  }
  return out;
}

GridOutcome run_grid(const GridSpec& grid, const Dataset& data,
                     const std::string& out_dir, int parallelism,
                     const EnergyOptions& energy) {
  if (parallelism < 1)
    throw std::invalid_argument("grid: parallelism must be >= 1");
  fs::create_directories(out_dir);
  fs::create_directories(out_dir + "/models");
  const std::string records_path = out_dir + "/records.jsonl";

  std::vector<TrainConfig> configs = grid.expand();
  std::map<std::string, std::string> id_to_canonical;
  for (const auto& c : configs) {
    const std::string id = run_id_for(c);
    const std::string canon = canonical_config(c);
    auto [it, inserted] = id_to_canonical.emplace(id, canon);
    if (!inserted && it->second != canon)
      throw std::runtime_error("grid: run_id collision on " + id);
  }

  std::map<std::string, RunRecord> done;
  if (fs::exists(records_path))
    for (auto& r : load_run_records(records_path)) {
      auto it = id_to_canonical.find(r.run_id);
      if (it != id_to_canonical.end() &&
          it->second != canonical_config(r.config))
        throw std::runtime_error("grid: run_id collision with existing record " +
                                 r.run_id);
      done.emplace(r.run_id, std::move(r));
    }

  struct Job {
    TrainConfig cfg;
    std::string id;
  };
  std::vector<Job> jobs;
  int n_skipped = 0;
  for (auto& c : configs) {
    const std::string id = run_id_for(c);
    if (done.count(id)) {
      ++n_skipped;
      continue;
    }
    jobs.push_back({c, id});
  }

  std::mutex mu;
  size_t next = 0;
  std::vector<RunRecord> fresh;
  std::exception_ptr fatal;

  auto worker = [&]() {
    for (;;) {
      size_t k;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= jobs.size() || fatal) return;
        k = next++;
      }
      const Job& job = jobs[k];
      RunRecord rec;
      std::optional<TrainResult> result;
      try {
        result = train(job.cfg, data, energy);
        rec = result->record;
      } catch (const std::exception&) {
        rec.config = job.cfg;
        rec.seed = job.cfg.seed;
        rec.failed = true;
      }
      rec.run_id = job.id;
      try {
        if (result && !rec.failed) {
          const std::string tmp =
              out_dir + "/models/" + job.id + ".bin.tmp";
          result->model.save(tmp);
          fs::rename(tmp, out_dir + "/models/" + job.id + ".bin");
        }
        std::lock_guard<std::mutex> lock(mu);
        append_run_record(records_path, rec);
        fresh.push_back(rec);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!fatal) fatal = std::current_exception();
        return;
      }
    }
  };

  std::vector<std::thread> pool;
  const int n_workers = std::min<int>(parallelism, static_cast<int>(jobs.size()));
  for (int i = 0; i < std::max(1, n_workers); ++i) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (fatal) std::rethrow_exception(fatal);

  GridOutcome out;
  out.n_new = static_cast<int>(fresh.size());
  out.n_skipped = n_skipped;
  for (auto& [id, rec] : done)
    if (id_to_canonical.count(id)) out.records.push_back(rec);
  for (auto& rec : fresh) out.records.push_back(rec);
  std::sort(out.records.begin(), out.records.end(),
            [](const RunRecord& a, const RunRecord& b) {
              return a.run_id < b.run_id;
            });
  for (const auto& r : out.records) out.n_failed += r.failed ? 1 : 0;
  return out;
}

// ---------------------------------------------------------------------------
// Reports

void write_summary_csv(const std::vector<RunRecord>& records,
                       const std::string& path) {
  if (records.empty())
    throw std::invalid_argument("report: zero records");
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("report: cannot open " + path);
  os << "run_id,family,depth,width,activation,loss,steps,epochs,ema,"
        "extra_data,seed,clean_acc,robust_acc_earlystop,robust_acc_final,"
        "train_flops,wall_seconds,kwh,usd,co2_g,best_epoch,epochs_trained,"
        "failed\n";
  for (const auto& r : records) {
    const auto& c = r.config;
    os << r.run_id << ',' << family_name(c.arch.family) << ',' << c.arch.depth
       << ',' << c.arch.width << ',' << act_name(c.arch.activation) << ','
       << loss_type_name(c.loss) << ',' << c.attack.steps << ',' << c.epochs
       << ',' << (c.ema ? 1 : 0) << ',' << (c.extra_data ? 1 : 0) << ','
       << c.seed << ',' << r.clean_acc << ',' << r.robust_acc_earlystop << ','
       << r.robust_acc_final << ',' << r.train_flops << ',' << r.wall_seconds
       << ',' << r.kwh << ',' << r.usd << ',' << r.co2_g << ',' << r.best_epoch
       << ',' << r.epochs_trained << ',' << (r.failed ? 1 : 0) << '\n';
  }
}

namespace {

std::vector<RunRecord> successful(const std::vector<RunRecord>& records) {
  std::vector<RunRecord> out;
  for (const auto& r : records)
    if (!r.failed) out.push_back(r);
  if (out.empty())
    throw std::invalid_argument("report: zero successful records");
  return out;
}

}  // namespace

void write_envelope_csv(const std::vector<RunRecord>& records,
                        const ReportOptions& opt, const std::string& path) {
  const auto points = envelope(records, opt.metric, opt.bins,
                               default_direction(opt.metric), opt.log_bins);
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("report: cannot open " + path);
  os << "flops,metric,run_id\n";
  os.precision(17);
  for (const auto& p : points)
    os << p.flops << ',' << p.metric << ',' << p.run_id << '\n';
}

json make_fit_json(const std::vector<RunRecord>& records,
                   const ReportOptions& opt) {
  const auto points = envelope(records, opt.metric, opt.bins,
                               default_direction(opt.metric), opt.log_bins);
  std::vector<std::pair<double, double>> xy;
  for (const auto& p : points) xy.emplace_back(p.flops, p.metric);
  const PowerLawFit fit = fit_power_law(xy);
  return json{{"metric", opt.metric}, {"C", fit.coefficient},
              {"alpha", fit.alpha},   {"r2", fit.r2},
              {"n_points", fit.n_points}, {"bins", opt.bins},
              {"x_min", fit.x_min},   {"x_max", fit.x_max}};
}

json make_predictor_json(const std::vector<RunRecord>& records,
                         const ReportOptions& opt) {
  const auto ok = successful(records);
  auto [train_recs, test_recs] =
      split_train_test(ok, opt.split_fraction, opt.seed);
  std::vector<LabeledSample> samples;
  for (const auto& r : train_recs)
    samples.emplace_back(features_from_record(r), target_from_record(r));
  const GbrModel model = fit_gbr(samples, opt.n_estimators, opt.max_depth,
                                 opt.learning_rate);
  double mse = 0, mae = 0;
  for (const auto& r : test_recs) {
    const double pred = model.predict(features_from_record(r));
    const double err = pred - target_from_record(r);
    mse += err * err;
    mae += std::abs(err);
  }
  const double n = static_cast<double>(test_recs.size());
  json j = model.to_json();
  j["n_train"] = train_recs.size();
  j["n_test"] = test_recs.size();
  j["test_mse"] = test_recs.empty() ? 0.0 : mse / n;
  j["test_mae"] = test_recs.empty() ? 0.0 : mae / n;
  return j;
}

void report(const std::vector<RunRecord>& records, const std::string& kind,
            const ReportOptions& opt, const std::string& out_path) {
  const auto ok = successful(records);
  if (kind == "summary_csv") {
    write_summary_csv(records, out_path);
    return;
  }
  if (kind == "envelope_csv") {
    write_envelope_csv(ok, opt, out_path);
    return;
  }
  std::ofstream os;
  auto open = [&]() -> std::ofstream& {
    os.open(out_path, std::ios::trunc);
    if (!os) throw std::runtime_error("report: cannot open " + out_path);
    return os;
  };
  if (kind == "fit_json")
    open() << make_fit_json(ok, opt).dump(2) << "\n";
  else if (kind == "predictor_json")
    open() << make_predictor_json(ok, opt).dump(2) << "\n";
  else
    throw std::invalid_argument("report: unknown kind " + kind);
}

}  // namespace robustlab
