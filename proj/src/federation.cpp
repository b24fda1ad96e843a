#include "fediptw/federation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>

#include <json.hpp>

#include "fediptw/error.hpp"
#include "fediptw/parallel.hpp"
#include "fediptw/simd/kernels.hpp"

namespace fediptw {

void FederationConfig::validate() const {
  if (rounds < 1) throw ConfigError("federation: rounds must be >= 1");
  if (batch_size < 1) throw ConfigError("federation: batch_size must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("federation: learning_rate must be > 0");
  }
}

std::string to_json_line(const RoundLog& log, std::string_view stage) {
  nlohmann::json j;
  j["stage"] = stage;
  j["round"] = log.round;
  j["client_loss"] = log.client_loss;
  j["aggregate_loss"] = log.aggregate_loss;
  if (log.validation_loss) j["validation_loss"] = *log.validation_loss;
  j["wall_ms"] = log.wall_ms;
  return j.dump();
}

MlpParams aggregate(std::span<const MlpParams> models, std::span<const double> weights) {
  if (models.empty()) throw ContractError("aggregate: no models");
  if (models.size() != weights.size()) throw ShapeError("aggregate: one weight per model required");
  double total = 0.0;
  for (std::size_t c = 0; c < models.size(); ++c) {
    if (!models[c].same_shape(models.front())) throw ShapeError("aggregate: model shapes differ");
    if (!(weights[c] >= 0.0) || !std::isfinite(weights[c])) {
      throw NumericError("aggregate: weights must be finite and non-negative");
    }
    total += weights[c];
  }
  if (!(total > 0.0)) throw NumericError("aggregate: all aggregation weights are zero");
  MlpParams out(models.front().in_dim(), models.front().hidden());
  auto acc = out.flat_mut();
  for (std::size_t c = 0; c < models.size(); ++c) {
    if (weights[c] == 0.0) continue;
    simd::axpy(weights[c] / total, models[c].flat(), acc);
  }
  return out;
}

// ---- WeightedSgdTrainer -------------------------------------------------------

WeightedSgdTrainer::WeightedSgdTrainer(std::size_t client_id, Matrix inputs, Vector targets, Vector weights,
                                       OutputKind kind, std::uint64_t seed)
    : client_id_(client_id), inputs_(std::move(inputs)), targets_(std::move(targets)),
      weights_(std::move(weights)), kind_(kind), rng_(seed) {
  if (inputs_.rows() != targets_.size()) throw ShapeError("WeightedSgdTrainer: inputs/targets length mismatch");
  if (weights_.empty()) weights_.assign(targets_.size(), 1.0);
  if (weights_.size() != targets_.size()) {
    throw ContractError("WeightedSgdTrainer: weights are not aligned with data rows");
  }
  for (double w : weights_) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw NumericError("WeightedSgdTrainer: weights must be finite and >= 0");
  }
  offsets_.assign(targets_.size(), 0.0);
  order_.resize(targets_.size());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
}

void WeightedSgdTrainer::set_offset(double offset) { std::fill(offsets_.begin(), offsets_.end(), offset); }

void WeightedSgdTrainer::set_offsets(Vector offsets) {
  if (offsets.size() != targets_.size()) throw ShapeError("WeightedSgdTrainer: one offset per record required");
  offsets_ = std::move(offsets);
}

double WeightedSgdTrainer::run_epochs(MlpParams& params, std::size_t epochs, std::size_t batch_size, double lr) {
  const std::size_t n = targets_.size();
  if (n == 0 || epochs == 0) return evaluate(params);
  ForwardCache cache;
  Gradient grad = Gradient::zeros_like(params);
  double loss_sum = 0.0;
  std::size_t seen = 0;
  for (std::size_t e = 0; e < epochs; ++e) {
    rng_.shuffle(std::span<std::size_t>(order_));
    for (std::size_t start = 0; start < n; start += batch_size) {
      const std::size_t stop = std::min(n, start + batch_size);
      const double inv = 1.0 / static_cast<double>(stop - start);
      auto g = grad.params.flat_mut();
      std::fill(g.begin(), g.end(), 0.0);
      grad.bias_offset = 0.0;
      bool any = false;
      for (std::size_t k = start; k < stop; ++k) {
        const std::size_t i = order_[k];
        const double w = weights_[i];
        const double out = mlp_forward_into(params, inputs_.row(i), offsets_[i], kind_, cache);
        loss_sum += w * output_loss(kind_, out, targets_[i]);
        if (w == 0.0) continue;
        mlp_backward_accumulate(params, cache, w * output_loss_grad(kind_, out, targets_[i]) * inv, grad);
        any = true;
      }
      seen += stop - start;
      if (any) sgd_step_inplace(params, grad.params, lr);
    }
  }
  return loss_sum / static_cast<double>(seen);
}

LocalResult WeightedSgdTrainer::train(const MlpParams& global, std::size_t /*round*/, const FederationConfig& cfg) {
  LocalResult r{global, 0.0};
  r.loss = run_epochs(r.params, cfg.local_epochs, cfg.batch_size, cfg.learning_rate);
  return r;
}

double WeightedSgdTrainer::evaluate(const MlpParams& params) const {
  const std::size_t n = targets_.size();
  if (n == 0) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    s += weights_[i] * output_loss(kind_, mlp_predict(params, inputs_.row(i), offsets_[i], kind_), targets_[i]);
  }
  return s / static_cast<double>(n);
}

Gradient weighted_loss_gradient(const MlpParams& params, const Matrix& inputs, std::span<const double> targets,
                                std::span<const double> weights, double offset, OutputKind kind) {
  if (inputs.rows() != targets.size() || weights.size() != targets.size()) {
    throw ShapeError("weighted_loss_gradient: inputs, targets and weights must align");
  }
  Gradient grad = Gradient::zeros_like(params);
  if (targets.empty()) return grad;
  const double inv = 1.0 / static_cast<double>(targets.size());
  ForwardCache cache;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double out = mlp_forward_into(params, inputs.row(i), offset, kind, cache);
    mlp_backward_accumulate(params, cache, weights[i] * output_loss_grad(kind, out, targets[i]) * inv, grad);
  }
  return grad;
}

// ---- round engine ------------------------------------------------------------------

std::vector<double> aggregation_weights(std::span<LocalTrainer* const> clients, const FederationConfig& cfg,
                                        std::span<const double> hospital_weights) {
  std::vector<double> w(clients.size());
  for (std::size_t c = 0; c < clients.size(); ++c) {
    w[c] = static_cast<double>(clients[c]->num_records());
    if (cfg.mode == AggregationMode::by_size_times_wc && !hospital_weights.empty()) {
      if (hospital_weights.size() != clients.size()) {
        throw ShapeError("run_rounds: one hospital weight per client required");
      }
      w[c] *= hospital_weights[c];
    }
  }
  return w;
}

FederationResult run_rounds(const MlpParams& initial, std::span<LocalTrainer* const> clients,
                            const FederationConfig& cfg, const RunOptions& opts) {
  cfg.validate();
  if (clients.empty()) throw ContractError("run_rounds: no clients");
  const auto weights = aggregation_weights(clients, cfg, opts.hospital_weights);

  FederationResult result{initial, initial, 0, {}};
  std::optional<double> best_val;
  std::vector<MlpParams> local(clients.size());
  std::vector<double> losses(clients.size());

  for (std::size_t r = 1; r <= cfg.rounds; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    const MlpParams& broadcast = result.final_params;
    parallel_for(clients.size(), opts.threads, [&](std::size_t c) {
      try {
        auto out = clients[c]->train(broadcast, r, cfg);
        if (!out.params.same_shape(broadcast)) throw ShapeError("local model shape changed");
        local[c] = std::move(out.params);
        losses[c] = out.loss;
      } catch (const std::exception& e) {
        throw Error("round " + std::to_string(r) + ", client " + std::to_string(clients[c]->client_id()) +
                    ": local training failed: " + e.what());
      }
    });
    MlpParams next = aggregate(local, weights);

    RoundLog log;
    log.round = r;
    log.client_loss = losses;
    if (opts.log_aggregate_loss) {
      std::vector<double> eval(clients.size());
      parallel_for(clients.size(), opts.threads, [&](std::size_t c) { eval[c] = clients[c]->evaluate(next); });
      double num = 0.0, den = 0.0;
      for (std::size_t c = 0; c < clients.size(); ++c) {
        const double n = static_cast<double>(clients[c]->num_records());
        num += n * eval[c];
        den += n;
      }
      log.aggregate_loss = den > 0.0 ? num / den : 0.0;
    }
    if (opts.validation) {
      const double v = opts.validation(next, r);
      log.validation_loss = v;
      if (!best_val || v < *best_val) {
        best_val = v;
        result.best_params = next;
        result.best_round = r;
        if (opts.on_best) opts.on_best(r);
      }
    }
    result.final_params = std::move(next);
    log.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (opts.on_round) opts.on_round(log);
    result.log.push_back(std::move(log));
  }
  if (!opts.validation) {
    result.best_params = result.final_params;
    result.best_round = cfg.rounds;
  }
  return result;
}

}  // namespace fediptw
