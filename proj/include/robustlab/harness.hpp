// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "robustlab/gbr.hpp"
#include "robustlab/scaling.hpp"
#include "robustlab/train.hpp"

namespace robustlab {

// JSON mirrors of the config/record types; field names match the structs.
nlohmann::json arch_to_json(const ArchSpec& a);
ArchSpec arch_from_json(const nlohmann::json& j);
nlohmann::json attack_to_json(const AttackConfig& a);
AttackConfig attack_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const TrainConfig& c);
TrainConfig config_from_json(const nlohmann::json& j);
nlohmann::json record_to_json(const RunRecord& r);
RunRecord record_from_json(const nlohmann::json& j);

/// Canonical (sorted-key, compact) dump used for hashing and comparisons.
std::string canonical_config(const TrainConfig& c);
/// FNV-1a 64-bit hash of the canonical config, as 16 hex digits. The seed is
/// part of the config, so it is covered.
std::string run_id_for(const TrainConfig& c);

/// Cartesian product over recipe axes applied onto a base config, with
/// optional exclusion rules (a combination is dropped when every key of an
/// exclusion entry matches it).
struct GridSpec {
  TrainConfig base;
  std::vector<ArchSpec> archs;
  std::vector<LossType> losses;
  std::vector<int> steps;
  struct EpochsEma {
    int epochs = 1;
    bool ema = false;
  };
  std::vector<EpochsEma> epochs_ema;
  std::vector<bool> extra_data;
  std::vector<Act> activations;
  std::vector<std::uint64_t> seeds;
  std::vector<nlohmann::json> exclude;

  std::vector<TrainConfig> expand() const;
  static GridSpec from_json(const nlohmann::json& j);
};

// Line-delimited record persistence; every line parses independently.
void append_run_record(const std::string& path, const RunRecord& r);
std::vector<RunRecord> load_run_records(const std::string& path);

struct GridOutcome {
  std::vector<RunRecord> records;  // full grid, sorted by run_id
  int n_new = 0;
  int n_skipped = 0;
  int n_failed = 0;
};

/// Runs every combination, one record line and one model file per run.
/// Completed run_ids found in <out_dir>/records.jsonl are skipped, so an
/// interrupted grid can be resumed. Individual failures are recorded as
/// flagged records and the grid continues.
GridOutcome run_grid(const GridSpec& grid, const Dataset& data,
                     const std::string& out_dir, int parallelism,
                     const EnergyOptions& energy = {});

struct ReportOptions {
  std::string metric = "robust_acc_final";
  int bins = 19;
  bool log_bins = true;
  double split_fraction = 0.7;
  std::uint64_t seed = 0;
  int n_estimators = 50;
  int max_depth = 5;
  double learning_rate = 0.1;
};

void write_summary_csv(const std::vector<RunRecord>& records,
                       const std::string& path);
void write_envelope_csv(const std::vector<RunRecord>& records,
                        const ReportOptions& opt, const std::string& path);
nlohmann::json make_fit_json(const std::vector<RunRecord>& records,
                             const ReportOptions& opt);
nlohmann::json make_predictor_json(const std::vector<RunRecord>& records,
                                   const ReportOptions& opt);

/// kind: summary_csv | envelope_csv | fit_json | predictor_json.
void report(const std::vector<RunRecord>& records, const std::string& kind,
            const ReportOptions& opt, const std::string& out_path);

}  // namespace robustlab
