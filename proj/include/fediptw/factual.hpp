#pragma once

// Factual outcome model g(x, t): an MLP over [x, t] trained with
// patient-weighted local losses and w_c |D_c| aggregation.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fediptw/datagen.hpp"
#include "fediptw/federation.hpp"
#include "fediptw/mlp.hpp"
#include "fediptw/propensity.hpp"

namespace fediptw {

struct FactualModel {
  MlpParams phi;
  OutputKind kind = OutputKind::linear;
  std::size_t best_round = 0;
  std::vector<RoundLog> log;
};

struct ItePrediction {
  Vector e_hat;
  double ate = 0.0;
};

// Rows of [x, t] for every record.
Matrix factual_inputs(const ClientDataset& data);

// Mini-batch SGD on the weighted local loss for `epochs` passes.
MlpParams local_weighted_train(const MlpParams& phi_init, const ClientDataset& data, std::span<const double> weights,
                               const FederationConfig& cfg, OutputKind kind, std::uint64_t seed,
                               std::size_t epochs = 1);

struct FactualRun {
  FederationConfig federation;
  OutputKind kind = OutputKind::linear;
  std::size_t hidden = kDefaultHidden;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  // Optional validation clients and their record weights (empty weights
  // mean unit weights) for best-round selection.
  std::span<const ClientDataset> validation;
  std::span<const Vector> validation_weights;
  bool log_aggregate_loss = true;
};

MlpParams initial_phi(std::size_t d_x, const FactualRun& run);

// Federated training. hospital_weights empty means w_c = 1 (plain |D_c|
// aggregation).
FactualModel train_factual_federated(std::span<const ClientDataset> clients, std::span<const PatientWeights> weights,
                                     std::span<const double> hospital_weights, const FactualRun& run);

// Centralized training over all records pooled into one party. The record
// weights already include any hospital-level factor.
FactualModel train_factual_centralized(std::span<const ClientDataset> clients, std::span<const Vector> record_weights,
                                       const FactualRun& run);

double predict_outcome(const FactualModel& m, std::span<const double> x, double t);
ItePrediction predict_ite(const FactualModel& m, const Matrix& x);

}  // namespace fediptw
