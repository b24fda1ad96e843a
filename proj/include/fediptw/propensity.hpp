#pragma once

// Propensity model f(x, h_c) = sigmoid(MLP(x) + h_c) trained with
// personalized FedAvg: every round each client first refits its private
// scalar h_c with the broadcast weights frozen, then trains the shared
// weights with h_c frozen. Only the shared weights are aggregated; h_c
// never leaves the client.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fediptw/datagen.hpp"
#include "fediptw/federation.hpp"
#include "fediptw/mlp.hpp"

namespace fediptw {

struct PropensityOptions {
  bool use_h = true;
  std::size_t hc_epochs = 5;
  double hc_lr = 0.1;
  double h_limit = 50.0;
  std::size_t hidden = kDefaultHidden;
};

struct HcFit {
  double h = 0.0;
  bool clipped = false;  // |h| exceeded the limit and was clipped
};

// Gradient descent on the scalar h for the mean BCE of
// sigmoid(logit_theta(x_i) + h) against t_i, theta frozen. Each epoch is one
// full-batch step.
HcFit fit_hc(const MlpParams& theta, const ClientDataset& data, double h_init, std::size_t epochs, double lr,
             double h_limit = 50.0);
// Same, from precomputed logits of the frozen network.
HcFit fit_hc_logits(std::span<const double> logits, std::span<const double> t, double h_init,
                    std::size_t epochs, double lr, double h_limit = 50.0);

struct PropensityClientState {
  std::size_t client_id = 0;
  double h = 0.0;
  MlpParams theta_snapshot;
  bool single_class = false;
  std::size_t clip_events = 0;
};

// One client of the personalized federation.
class PropensityTrainer : public LocalTrainer {
 public:
  PropensityTrainer(const ClientDataset& data, const PropensityOptions& opts, std::uint64_t seed);

  std::size_t client_id() const override { return state_.client_id; }
  std::size_t num_records() const override { return sgd_.num_records(); }
  LocalResult train(const MlpParams& global, std::size_t round, const FederationConfig& cfg) override;
  double evaluate(const MlpParams& params) const override { return sgd_.evaluate(params); }

  const PropensityClientState& state() const noexcept { return state_; }

 private:
  PropensityOptions opts_;
  WeightedSgdTrainer sgd_;
  PropensityClientState state_;
};

// Trained propensity model(s). Either one shared theta (federated or
// centralized) or one theta per client (local-only training).
struct PropensityModel {
  std::vector<MlpParams> theta;
  std::vector<double> h;  // per client; zeros when h is disabled
  std::vector<bool> single_class;
  std::size_t best_round = 0;
  std::vector<RoundLog> log;

  const MlpParams& theta_for(std::size_t client_index) const {
    return theta.size() == 1 ? theta.front() : theta.at(client_index);
  }
  // f(x, h_c) for one record of client client_index.
  double predict(std::size_t client_index, std::span<const double> x) const;
};

struct PropensityRun {
  FederationConfig federation;
  PropensityOptions options;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  // Per-client validation sets used to pick the best round (optional).
  std::span<const ClientDataset> validation;
  bool log_aggregate_loss = true;
};

// Personalized FedAvg (plain FedAvg when options.use_h is false).
PropensityModel train_propensity_federated(std::span<const ClientDataset> clients, const PropensityRun& run);
// Each client trains its own theta for rounds * local_epochs epochs, no
// communication and no h.
PropensityModel train_propensity_local(std::span<const ClientDataset> clients, const PropensityRun& run);
// Pooled training over all clients' records as a single party; with
// options.use_h every hospital keeps its own learnable offset.
PropensityModel train_propensity_centralized(std::span<const ClientDataset> clients, const PropensityRun& run);

struct PatientWeights {
  std::size_t client_id = 0;
  Vector w;
};

// Stabilized inverse-propensity weight of one record:
//   rate * [t = 1] / p + (1 - rate) * [t = 0] / (1 - p), p clamped to
// [eps_clip, 1 - eps_clip].
double patient_weight(double propensity, double t, double rate, double eps_clip);

PatientWeights weights_from_propensity(std::size_t client_id, std::span<const double> propensity,
                                       std::span<const double> t, double rate, double eps_clip);

// Weights for data under f(x, h). numerator_rate defaults to the data's
// own treatment rate E[T_c]; pass the pooled E[T] for global weighting.
// A single-class client gets w = 1 for every record (with a warning).
PatientWeights compute_patient_weights(const MlpParams& theta, double h, const ClientDataset& data,
                                       double eps_clip, std::optional<double> numerator_rate = std::nullopt);

}  // namespace fediptw
