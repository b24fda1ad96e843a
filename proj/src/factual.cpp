#include "fediptw/factual.hpp"

#include <memory>
#include <string>

#include "fediptw/error.hpp"
#include "fediptw/rng.hpp"

namespace fediptw {
namespace {

constexpr std::uint64_t kPhiInitStream = 0xFAC7;
constexpr std::uint64_t kClientStream = 0xC11F;

double weighted_validation(const MlpParams& phi, OutputKind kind, std::span<const ClientDataset> validation,
                           std::span<const Vector> weights) {
  double s = 0.0;
  std::size_t n = 0;
  std::vector<double> in;
  for (std::size_t c = 0; c < validation.size(); ++c) {
    const auto& v = validation[c];
    const bool unit = weights.empty() || weights[c].empty();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const auto row = v.x.row(i);
      in.assign(row.begin(), row.end());
      in.push_back(v.t[i]);
      const double w = unit ? 1.0 : weights[c][i];
      s += w * output_loss(kind, mlp_predict(phi, in, 0.0, kind), v.y[i]);
    }
    n += v.size();
  }
  return n > 0 ? s / static_cast<double>(n) : 0.0;
}

void check_run(std::span<const ClientDataset> clients, const FactualRun& run) {
  if (clients.empty()) throw ConfigError("factual: no clients");
  for (const auto& c : clients) {
    if (c.dim() != clients.front().dim()) throw ShapeError("factual: clients disagree on covariate dimension");
  }
  if (!run.validation.empty()) {
    if (!run.validation_weights.empty() && run.validation_weights.size() != run.validation.size()) {
      throw ShapeError("factual: one validation weight vector per validation client required");
    }
  }
}

RunOptions run_options(const FactualRun& run) {
  RunOptions opts;
  opts.threads = run.threads;
  opts.log_aggregate_loss = run.log_aggregate_loss;
  if (!run.validation.empty()) {
    opts.validation = [&run](const MlpParams& phi, std::size_t) {
      return weighted_validation(phi, run.kind, run.validation, run.validation_weights);
    };
  }
  return opts;
}

}  // namespace

Matrix factual_inputs(const ClientDataset& data) {
  Matrix m;
  std::vector<double> row;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto x = data.x.row(i);
    row.assign(x.begin(), x.end());
    row.push_back(data.t[i]);
    m.append_row(row);
  }
  return m;
}

MlpParams local_weighted_train(const MlpParams& phi_init, const ClientDataset& data, std::span<const double> weights,
                               const FederationConfig& cfg, OutputKind kind, std::uint64_t seed, std::size_t epochs) {
  if (weights.size() != data.size()) {
    throw ContractError("local_weighted_train: " + std::to_string(weights.size()) + " weights for " +
                        std::to_string(data.size()) + " records");
  }
  WeightedSgdTrainer trainer(data.client_id, factual_inputs(data), data.y, Vector(weights.begin(), weights.end()),
                             kind, seed);
  MlpParams phi = phi_init;
  trainer.run_epochs(phi, epochs, cfg.batch_size, cfg.learning_rate);
  return phi;
}

MlpParams initial_phi(std::size_t d_x, const FactualRun& run) {
  Rng rng(Rng::derive_seed(run.seed, {kPhiInitStream}));
  return MlpParams::init_uniform(d_x + 1, run.hidden, rng);
}

FactualModel train_factual_federated(std::span<const ClientDataset> clients, std::span<const PatientWeights> weights,
                                     std::span<const double> hospital_weights, const FactualRun& run) {
  check_run(clients, run);
  if (weights.size() != clients.size()) throw ShapeError("factual: one patient-weight vector per client required");
  std::vector<std::unique_ptr<WeightedSgdTrainer>> trainers;
  std::vector<LocalTrainer*> ptrs;
  for (std::size_t c = 0; c < clients.size(); ++c) {
    const auto& data = clients[c];
    if (weights[c].w.size() != data.size()) {
      throw ContractError("factual: patient weights of client " + std::to_string(data.client_id) +
                          " are not aligned with its records");
    }
    trainers.push_back(std::make_unique<WeightedSgdTrainer>(data.client_id, factual_inputs(data), data.y,
                                                            weights[c].w, run.kind,
                                                            Rng::derive_seed(run.seed, {kClientStream, data.client_id})));
    ptrs.push_back(trainers.back().get());
  }
  FederationConfig fed = run.federation;
  fed.mode = AggregationMode::by_size_times_wc;
  RunOptions opts = run_options(run);
  opts.hospital_weights.assign(hospital_weights.begin(), hospital_weights.end());
  auto result = run_rounds(initial_phi(clients.front().dim(), run), ptrs, fed, opts);
  return {std::move(result.best_params), run.kind, result.best_round, std::move(result.log)};
}

FactualModel train_factual_centralized(std::span<const ClientDataset> clients, std::span<const Vector> record_weights,
                                       const FactualRun& run) {
  check_run(clients, run);
  if (record_weights.size() != clients.size()) throw ShapeError("factual: one weight vector per client required");
  Matrix inputs;
  Vector targets, w;
  for (std::size_t c = 0; c < clients.size(); ++c) {
    const auto& data = clients[c];
    if (record_weights[c].size() != data.size()) {
      throw ContractError("factual: record weights of client " + std::to_string(data.client_id) +
                          " are not aligned with its records");
    }
    const Matrix m = factual_inputs(data);
    for (std::size_t i = 0; i < m.rows(); ++i) inputs.append_row(m.row(i));
    targets.insert(targets.end(), data.y.begin(), data.y.end());
    w.insert(w.end(), record_weights[c].begin(), record_weights[c].end());
  }
  WeightedSgdTrainer pooled(0, std::move(inputs), std::move(targets), std::move(w), run.kind,
                            Rng::derive_seed(run.seed, {kClientStream, 0xA11}));
  LocalTrainer* one[] = {&pooled};
  FederationConfig fed = run.federation;
  fed.mode = AggregationMode::by_size;
  auto result = run_rounds(initial_phi(clients.front().dim(), run), one, fed, run_options(run));
  return {std::move(result.best_params), run.kind, result.best_round, std::move(result.log)};
}

double predict_outcome(const FactualModel& m, std::span<const double> x, double t) {
  std::vector<double> in(x.begin(), x.end());
  in.push_back(t);
  return mlp_predict(m.phi, in, 0.0, m.kind);
}

ItePrediction predict_ite(const FactualModel& m, const Matrix& x) {
  if (x.rows() > 0 && x.cols() + 1 != m.phi.in_dim()) throw ShapeError("predict_ite: covariate dimension mismatch");
  ItePrediction out;
  out.e_hat.resize(x.rows());
  double s = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    out.e_hat[i] = predict_outcome(m, x.row(i), 1.0) - predict_outcome(m, x.row(i), 0.0);
    s += out.e_hat[i];
  }
  out.ate = x.rows() > 0 ? s / static_cast<double>(x.rows()) : 0.0;
  return out;
}

}  // namespace fediptw
