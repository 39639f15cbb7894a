#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "crossmodal/adaptation.hpp"
#include "crossmodal/pde.hpp"
#include "crossmodal/proxy.hpp"
#include "crossmodal/transformer.hpp"
#include "json.hpp"

namespace crossmodal {

inline constexpr int kRunRecordSchemaVersion = 1;

struct DatasetSpec {
  PdeParams params;
  GridSpec grid;
  std::size_t n_train = 64;
  std::size_t n_test = 16;
  std::uint64_t seed = 0;
  // Read instead of generated when set; must exist.
  std::optional<std::filesystem::path> path;
};

struct PretrainingSpec {
  std::size_t corpus_sequences = 2000;
  std::uint64_t corpus_seed = 12;
  std::optional<std::filesystem::path> corpus_path;
  PretrainSchedule schedule;
};

struct ProxySpec {
  std::size_t corpus_sequences = 200;
  std::uint64_t corpus_seed = 14;
  std::optional<std::filesystem::path> corpus_path;
  std::optional<std::filesystem::path> path;  // prebuilt proxy set
};

struct ExperimentConfig {
  std::string name = "experiment";
  DatasetSpec dataset;
  ModelConfig model;
  bool pretrained = true;
  // Pretrained weights; when unset and `pretrained`, the model is pretrained
  // in-process from `pretraining`.
  std::optional<std::filesystem::path> checkpoint;
  PretrainingSpec pretraining;
  ProxySpec proxy;
  AdaptationConfig adaptation;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::filesystem::path output_dir = "runs";
  std::size_t workers = 0;  // 0: hardware concurrency

  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);
ExperimentConfig read_experiment_config(const std::filesystem::path& path);

struct RunRecord {
  nlohmann::json config;  // ExperimentConfig snapshot
  std::uint64_t seed = 0;
  std::string source_model_id;
  std::vector<Stage1Report> stage1;  // one per pipeline under ORCA
  std::vector<TrainReport> training;  // one per pipeline
  double test_nrmse = 0.0;
  // Mean total variation of each half of the test predictions.
  double first_half_tv = 0.0;
  double second_half_tv = 0.0;
  bool converged = true;
  // Timing group: the only fields that differ between identical reruns.
  double wallclock_s = 0.0;
  std::string started_at;
};

nlohmann::json to_json(const RunRecord& r);
RunRecord run_record_from_json(const nlohmann::json& j);
// Serialized record without its timing group, for reproducibility checks.
std::string record_fingerprint(const RunRecord& r);
std::string run_file_name(const ExperimentConfig& config, std::uint64_t seed);

// Runs every seed of `config` (in parallel across `workers`), writes one JSON
// file per run into output_dir and returns the records in seed order. Missing
// input files raise IoError naming the artifact.
std::vector<RunRecord> run_experiment(const ExperimentConfig& config);

// The model every seed adapts: loaded, pretrained in-process, or fresh.
TransformerModel source_model(const ExperimentConfig& config, std::uint64_t seed);

std::vector<RunRecord> load_run_records(const std::filesystem::path& dir);

struct ResultsRow {
  std::string dataset;
  std::string arch;
  std::size_t d_model = 0;
  std::size_t n_layers = 0;
  bool pretrained = false;
  std::string method;
  std::string bidir_method;
  std::size_t seed_count = 0;
  double nrmse_mean = 0.0;
  double nrmse_min = 0.0;
  double nrmse_max = 0.0;
  double wallclock_s = 0.0;  // mean per run

  std::string label() const;
};

struct ResultsTable {
  std::vector<ResultsRow> rows;
};

// Groups by (dataset, arch, d_model, n_layers, pretrained, method,
// bidir_method) in order of first appearance. Runs with a non-finite nRMSE
// are left out of the statistics.
ResultsTable build_results_table(const std::vector<RunRecord>& records);

std::string results_csv(const ResultsTable& table);
ResultsTable parse_results_csv(const std::string& text);
void write_results_csv(const std::filesystem::path& path, const ResultsTable& table);
ResultsTable read_results_csv(const std::filesystem::path& path);

struct FigureStyle {
  bool bars_minmax = true;
  std::string title = "Test nRMSE";
  int width = 0;  // 0: sized from the number of bars
  int height = 360;
};

// Grouped bar chart (one group per dataset, one bar per row) with min/max
// whiskers. Throws ContractError for an empty table.
std::string emit_figure(const ResultsTable& table, const FigureStyle& style = {});

}  // namespace crossmodal
