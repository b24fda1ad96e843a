#pragma once

// FedAvg round engine: broadcast, independent local training, weighted
// element-wise aggregation. The engine is generic over the model being
// trained; only parameter vectors cross the client/server boundary.

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fediptw/matrix.hpp"
#include "fediptw/mlp.hpp"
#include "fediptw/rng.hpp"

namespace fediptw {

enum class AggregationMode {
  by_size,           // |D_c| / |D|
  by_size_times_wc,  // w_c |D_c| / sum_c w_c |D_c|
};

struct FederationConfig {
  std::size_t rounds = 50;
  std::size_t local_epochs = 1;
  std::size_t batch_size = 8;
  double learning_rate = 0.001;
  AggregationMode mode = AggregationMode::by_size;

  void validate() const;
};

struct RoundLog {
  std::size_t round = 0;  // 1-based
  std::vector<double> client_loss;
  double aggregate_loss = 0.0;
  std::optional<double> validation_loss;
  double wall_ms = 0.0;
};

std::string to_json_line(const RoundLog& log, std::string_view stage);

struct LocalResult {
  MlpParams params;
  double loss = 0.0;  // mean training loss over the local pass
};

// One client's side of the protocol. Implementations own their data and
// their RNG stream; train() must not depend on other clients.
class LocalTrainer {
 public:
  virtual ~LocalTrainer() = default;
  virtual std::size_t client_id() const = 0;
  virtual std::size_t num_records() const = 0;
  virtual LocalResult train(const MlpParams& global, std::size_t round, const FederationConfig& cfg) = 0;
  // Mean local loss of the given (aggregated) parameters.
  virtual double evaluate(const MlpParams& params) const = 0;
};

// sum_c (weights[c] / sum(weights)) * models[c], element-wise.
MlpParams aggregate(std::span<const MlpParams> models, std::span<const double> weights);

// Mini-batch SGD on a per-record weighted loss:
//   L = (1/|B|) sum_{i in B} w_i * loss(f(input_i, offset), target_i)
// Used for both the factual model (input = [x, t]) and the propensity
// model (input = x, offset = h_c).
class WeightedSgdTrainer : public LocalTrainer {
 public:
  WeightedSgdTrainer(std::size_t client_id, Matrix inputs, Vector targets, Vector weights,
                     OutputKind kind, std::uint64_t seed);

  std::size_t client_id() const override { return client_id_; }
  std::size_t num_records() const override { return targets_.size(); }
  LocalResult train(const MlpParams& global, std::size_t round, const FederationConfig& cfg) override;
  double evaluate(const MlpParams& params) const override;

  // Bias offset added to every record's logit (h_c), or one per record
  // when a pooled trainer spans several hospitals.
  void set_offset(double offset);
  void set_offsets(Vector offsets);
  const Vector& offsets() const noexcept { return offsets_; }
  const Matrix& inputs() const noexcept { return inputs_; }
  const Vector& targets() const noexcept { return targets_; }
  const Vector& weights() const noexcept { return weights_; }
  OutputKind kind() const noexcept { return kind_; }

  // Runs `epochs` passes of mini-batch SGD starting from params.
  double run_epochs(MlpParams& params, std::size_t epochs, std::size_t batch_size, double lr);

 private:
  std::size_t client_id_;
  Matrix inputs_;
  Vector targets_;
  Vector weights_;
  OutputKind kind_;
  Rng rng_;
  Vector offsets_;
  std::vector<std::size_t> order_;
};

// Full-batch gradient of the weighted mean loss above (no update).
Gradient weighted_loss_gradient(const MlpParams& params, const Matrix& inputs, std::span<const double> targets,
                                std::span<const double> weights, double offset, OutputKind kind);

struct RunOptions {
  // Per-client w_c for AggregationMode::by_size_times_wc (empty = all 1).
  std::vector<double> hospital_weights;
  std::size_t threads = 1;
  // Validation loss of the aggregated model after each round; when set the
  // lowest-loss round (earliest on ties) is reported as best.
  std::function<double(const MlpParams&, std::size_t round)> validation;
  // Called when a round becomes the new best, so callers can snapshot
  // client-side state (e.g. h_c) belonging to that round.
  std::function<void(std::size_t round)> on_best;
  bool log_aggregate_loss = true;
  // Observer invoked after every round, in round order.
  std::function<void(const RoundLog&)> on_round;
};

struct FederationResult {
  MlpParams final_params;
  MlpParams best_params;
  std::size_t best_round = 0;  // 0 = initial parameters
  std::vector<RoundLog> log;
};

FederationResult run_rounds(const MlpParams& initial, std::span<LocalTrainer* const> clients,
                            const FederationConfig& cfg, const RunOptions& opts = {});

// Aggregation weight per client under the configured mode.
std::vector<double> aggregation_weights(std::span<LocalTrainer* const> clients, const FederationConfig& cfg,
                                        std::span<const double> hospital_weights);

}  // namespace fediptw
