#pragma once

#include <nlohmann/json.hpp>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fedsurf/datasplit.hpp"
#include "fedsurf/protocol.hpp"
#include "fedsurf/rsf.hpp"
#include "fedsurf/stats.hpp"
#include "fedsurf/survival.hpp"

namespace fedsurf {

struct CsvSchema {
  std::string time_column = "time";
  std::string event_column = "event";
  /// Feature columns in output order; empty means every other column in
  /// file order.
  std::vector<std::string> features;
  /// Columns forced categorical. Any column holding a non-numeric value is
  /// categorical as well.
  std::vector<std::string> categorical;
};

/// Records in file order. A categorical column becomes one 0/1 feature per
/// distinct value, values sorted bytewise, named "column=value". Empty and
/// "NA" cells are rejected. Throws std::runtime_error naming row and column.
SurvivalDataset load_csv(const std::filesystem::path& path, const CsvSchema& schema);

/// Header: features, then time_column, event_column. Reals in shortest
/// round-trip form.
void write_csv(const std::filesystem::path& path, const SurvivalDataset& data, std::string_view time_column = "time",
               std::string_view event_column = "event");

/// Per-dataset forest settings (trees, depth) for whas500, gbsg2, metabric,
/// nwtco, flchain; s = 6, l = 3 throughout.
std::optional<RsfParams> rsf_preset(std::string_view dataset);
/// Column names for the bundled datasets (gbsg2, whas500).
std::optional<CsvSchema> csv_preset(std::string_view dataset);

enum class Setting { Local, Federated, Global };
enum class MetricId { CIpcw, Ibs, CumulativeAuc };

std::string_view to_string(Setting s);
std::string_view to_string(MetricId m);
Setting parse_setting(std::string_view s);
MetricId parse_metric(std::string_view s);

struct SynthSpec {
  std::size_t n = 1000;
  std::size_t d = 10;
  double censor_rate = 0.4;
};

struct DatasetSpec {
  std::string name;
  std::filesystem::path path;  // CSV source, unless synth is set
  CsvSchema schema;
  std::optional<SynthSpec> synth;
};

struct ExperimentConfig {
  DatasetSpec dataset;
  SplitConfig split;
  RsfParams rsf;
  std::size_t ensemble_size = 0;  // T of the global model; 0 means rsf.n_trees
  std::vector<SamplingStrategy> strategies{kAllStrategies.begin(), kAllStrategies.end()};
  std::vector<MetricId> metrics{MetricId::CIpcw, MetricId::Ibs, MetricId::CumulativeAuc};
  std::vector<Setting> settings{Setting::Local, Setting::Federated, Setting::Global};
  std::size_t repetitions = 20;
  std::uint64_t seed = 0;
  std::size_t threads = 0;  // repetitions in flight; 0 = one per core

  void validate() const;
  [[nodiscard]] std::size_t target() const { return ensemble_size ? ensemble_size : rsf.n_trees; }
};

/// Reads the JSON config format documented in the README. Relative dataset
/// paths resolve against `base_dir`.
ExperimentConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);
/// Normalized config with every default filled in, without `threads`.
nlohmann::json config_to_json(const ExperimentConfig& config);
/// sha256 of config_to_json(config).dump().
std::string config_hash(const ExperimentConfig& config);

SurvivalDataset load_dataset(const DatasetSpec& spec, std::uint64_t seed);

struct Evaluation {
  double c_ipcw = 0.0;
  double ibs = 0.0;
  double cumulative_auc = 0.0;
  [[nodiscard]] double get(MetricId m) const;
};

/// Metrics of `model` on `test`; censoring curve fitted on `censoring_pool`,
/// grid default_grid(test). Throws MetricUndefined.
Evaluation evaluate_model(const SurvivalForest& model, const SurvivalDataset& test,
                          const SurvivalDataset& censoring_pool);

/// Everything one repetition trains on.
struct RepetitionData {
  std::uint64_t seed = 0;
  SurvivalDataset train;
  SurvivalDataset test;
  std::vector<ClientState> clients;
};

/// Seed derive_seed(config.seed, r); train/test split, then label-skew
/// federation with a per-client validation split.
RepetitionData prepare_repetition(const SurvivalDataset& data, const ExperimentConfig& config, std::size_t r);

struct Cell {
  Setting setting = Setting::Local;
  std::optional<SamplingStrategy> strategy;  // Federated only
  MetricId metric = MetricId::CIpcw;
  std::vector<double> values;  // one per successful repetition
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for one value
  std::optional<bool> significant_vs_concordance;
};

struct RepetitionFailure {
  std::size_t repetition = 0;
  std::string reason;
};

struct ExperimentReport {
  std::string dataset;
  nlohmann::json config;
  std::string config_hash;
  std::vector<std::uint64_t> seeds;   // per successful repetition
  std::vector<std::size_t> repetitions;  // indices of successful repetitions
  std::vector<RepetitionFailure> failures;
  std::vector<Cell> cells;
  /// Dunn's test among Federated strategies, per metric.
  std::vector<std::pair<MetricId, TestResult>> dunn;
  double wall_seconds = 0.0;

  [[nodiscard]] const Cell* find(Setting s, std::optional<SamplingStrategy> strategy, MetricId m) const;
};

/// Failed repetitions are dropped and listed; fewer than half successful
/// throws std::runtime_error.
ExperimentReport run_experiment(const ExperimentConfig& config);

/// report.csv, summary.json (deterministic) and timing.json.
void emit_report(const ExperimentReport& report, const std::filesystem::path& out_dir);
std::string report_csv(const ExperimentReport& report);
nlohmann::json report_summary(const ExperimentReport& report);

}  // namespace fedsurf
