#pragma once

// Experiment orchestration: method variants, the repeated k-fold protocol,
// and on-disk artifacts of a run.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "fediptw/cohort_weights.hpp"
#include "fediptw/datagen.hpp"
#include "fediptw/error.hpp"
#include "fediptw/evaluation.hpp"
#include "fediptw/factual.hpp"
#include "fediptw/propensity.hpp"

namespace fediptw {

enum class Method { fed_iptw, fed_iptw_noh, iptw_l, iptw_g, fedavg_plain, global, global_noh };

std::string_view method_name(Method m) noexcept;
Method parse_method(std::string_view name);  // ConfigError if unknown
const std::vector<Method>& all_methods();

enum class PropensityKind { none, federated, local, centralized };
enum class Numerator { own_rate, pooled_rate };

// The switches that distinguish the variants.
struct MethodSpec {
  PropensityKind propensity = PropensityKind::federated;
  bool use_h = true;
  Numerator numerator = Numerator::own_rate;
  bool hospital_weights = true;
  bool centralized_factual = false;
};
MethodSpec method_spec(Method m) noexcept;

enum class OutcomeKind { automatic, binary, continuous };

struct ExperimentConfig {
  std::string source = "synthetic";  // or "csv"
  SyntheticSettings synthetic;
  std::size_t n_replications = 10;
  std::string csv_path;
  OutcomeKind outcome = OutcomeKind::automatic;

  std::vector<Method> methods{Method::fed_iptw};

  std::size_t n_folds = 10;
  std::size_t n_repeats = 20;
  // Fold rotations evaluated per repeat (rotation k tests folds {k, k+1}).
  std::size_t rotations = 1;

  FederationConfig propensity_federation;
  PropensityOptions propensity;
  FederationConfig factual_federation;
  std::size_t factual_hidden = kDefaultHidden;

  double eps_clip = 0.01;
  HospitalWeightOptions clamp;

  bool if_pehe = true;
  double pi_clip = 0.01;

  std::uint64_t seed = 2024;
  std::size_t jobs = 1;

  void validate() const;
};

// Strict: unknown keys are rejected so that no setting is silently ignored.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_config(const std::filesystem::path& path);

// An error annotated with the pipeline stage it came from.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what) : Error(what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

// ---- data and folds ---------------------------------------------------------------

class DataSource {
 public:
  explicit DataSource(const ExperimentConfig& cfg);
  std::size_t replications() const noexcept { return data_.size(); }
  const std::vector<ClientDataset>& replication(std::size_t r) const { return data_.at(r % data_.size()); }
  const std::optional<SyntheticConfig>& synthetic() const noexcept { return synthetic_; }
  OutputKind outcome_kind() const noexcept { return kind_; }

 private:
  std::optional<SyntheticConfig> synthetic_;
  std::vector<std::vector<ClientDataset>> data_;
  OutputKind kind_ = OutputKind::linear;
};

struct FoldData {
  std::size_t repeat = 0;
  std::size_t rotation = 0;
  std::size_t replication = 0;
  std::vector<ClientDataset> train;
  std::vector<ClientDataset> validation;
  std::vector<ClientDataset> test;
  std::vector<ClientSplit> split;  // row indices into the replication
};

FoldData make_fold(const ExperimentConfig& cfg, const DataSource& data, std::size_t repeat, std::size_t rotation);
std::uint64_t fold_seed(const ExperimentConfig& cfg, std::size_t repeat, std::size_t rotation);

// ---- stages -----------------------------------------------------------------------

struct WeightArtifacts {
  std::optional<PropensityModel> propensity;
  std::vector<PatientWeights> train;
  std::vector<PatientWeights> validation;
  std::vector<ClientStats> stats;
  HospitalWeights hospital;
};

// Stage 1 plus both weight levels.
WeightArtifacts run_weight_stage(const ExperimentConfig& cfg, Method method, const FoldData& fold, std::uint64_t seed,
                                 std::size_t threads);

// Per-client w_c * w_ci as used by the factual stage.
std::vector<Vector> combined_record_weights(std::span<const PatientWeights> patient, const HospitalWeights& hospital);

FactualModel run_factual_stage(const ExperimentConfig& cfg, Method method, const FoldData& fold,
                               const WeightArtifacts& weights, OutputKind kind, std::uint64_t seed,
                               std::size_t threads);

struct FoldEvaluation {
  MetricReport metrics;
  Vector e_hat;
  Vector e_true;
};

FoldEvaluation evaluate_fold(const ExperimentConfig& cfg, Method method, const FoldData& fold,
                             const WeightArtifacts& weights, const FactualModel& model, std::uint64_t seed);

// ---- run driver -------------------------------------------------------------------

enum class RunStage { all, propensity, factual };
RunStage parse_stage(std::string_view s);

struct RunRequest {
  ExperimentConfig cfg;
  std::filesystem::path out;
  RunStage stage = RunStage::all;
};

struct UnitResult {
  Method method = Method::fed_iptw;
  std::size_t repeat = 0;
  std::size_t rotation = 0;
  std::size_t replication = 0;
  std::uint64_t seed = 0;
  std::size_t propensity_best_round = 0;
  std::size_t factual_best_round = 0;
  std::optional<MetricReport> metrics;  // absent for propensity-only runs
};

// Runs every (method, repeat, rotation) unit with cfg.jobs workers and
// writes per-unit artifacts, per-method metrics.csv / summary.csv and
// manifest.json under out.
std::vector<UnitResult> run_experiment(const RunRequest& req);

std::filesystem::path unit_dir(const std::filesystem::path& out, Method m, std::size_t repeat, std::size_t rotation);

// Metric columns of metrics.csv, in order.
const std::vector<std::string>& metric_columns();

// Re-aggregates <out>/<method>/metrics.csv files into a table; returns CSV.
std::string build_report(const std::filesystem::path& out);

// Recomputes covariance summaries from persisted weights; returns CSV.
std::string build_covariance_table(const std::filesystem::path& out);

// Writes the generator output (replication CSVs + ground truth sidecar).
std::vector<std::filesystem::path> generate_datasets(const ExperimentConfig& cfg, const std::filesystem::path& out);

}  // namespace fediptw
