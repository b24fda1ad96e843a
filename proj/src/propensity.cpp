#include "fediptw/propensity.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

#include "fediptw/error.hpp"
#include "fediptw/log.hpp"
#include "fediptw/rng.hpp"

namespace fediptw {
namespace {

constexpr std::uint64_t kThetaInitStream = 0x7E7A;
constexpr std::uint64_t kClientStream = 0xC11E;

Vector logits_of(const MlpParams& theta, const Matrix& x) {
  Vector out(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) out[i] = mlp_logit(theta, x.row(i));
  return out;
}

double validation_bce(const PropensityModel& model, std::span<const ClientDataset> validation) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < validation.size(); ++c) {
    const auto& v = validation[c];
    for (std::size_t i = 0; i < v.size(); ++i) s += bce_loss(model.predict(c, v.x.row(i)), v.t[i]);
    n += v.size();
  }
  return n > 0 ? s / static_cast<double>(n) : 0.0;
}

void check_clients(std::span<const ClientDataset> clients, const PropensityRun& run) {
  if (clients.empty()) throw ConfigError("propensity: no clients");
  const std::size_t d = clients.front().dim();
  for (const auto& c : clients) {
    if (c.dim() != d) throw ShapeError("propensity: clients disagree on covariate dimension");
    if (c.size() == 0) throw ConfigError("propensity: client " + std::to_string(c.client_id) + " has no records");
  }
  if (!run.validation.empty() && run.validation.size() != clients.size()) {
    throw ShapeError("propensity: one validation set per client required");
  }
}

MlpParams initial_theta(std::size_t d, const PropensityRun& run) {
  Rng rng(Rng::derive_seed(run.seed, {kThetaInitStream}));
  return MlpParams::init_uniform(d, run.options.hidden, rng);
}

// All clients' records as one party, with a per-hospital learnable offset.
class PooledPropensityTrainer : public LocalTrainer {
 public:
  PooledPropensityTrainer(std::span<const ClientDataset> clients, const PropensityOptions& opts, std::uint64_t seed)
      : opts_(opts), sgd_(0, pooled_x(clients), pooled_t(clients), {}, OutputKind::sigmoid, seed) {
    std::size_t start = 0;
    for (const auto& c : clients) {
      segments_.push_back({start, start + c.size()});
      single_class_.push_back(!c.has_both_classes());
      start += c.size();
    }
    h_.assign(clients.size(), 0.0);
  }

  std::size_t client_id() const override { return 0; }
  std::size_t num_records() const override { return sgd_.num_records(); }

  LocalResult train(const MlpParams& global, std::size_t /*round*/, const FederationConfig& cfg) override {
    if (opts_.use_h) {
      const Vector logits = logits_of(global, sgd_.inputs());
      Vector offsets(sgd_.num_records());
      for (std::size_t s = 0; s < segments_.size(); ++s) {
        const auto [lo, hi] = segments_[s];
        if (!single_class_[s]) {
          const std::span<const double> l(logits.data() + lo, hi - lo);
          const std::span<const double> t(sgd_.targets().data() + lo, hi - lo);
          h_[s] = fit_hc_logits(l, t, h_[s], opts_.hc_epochs, opts_.hc_lr, opts_.h_limit).h;
        }
        std::fill(offsets.begin() + static_cast<std::ptrdiff_t>(lo), offsets.begin() + static_cast<std::ptrdiff_t>(hi),
                  h_[s]);
      }
      sgd_.set_offsets(std::move(offsets));
    }
    LocalResult r{global, 0.0};
    r.loss = sgd_.run_epochs(r.params, cfg.local_epochs, cfg.batch_size, cfg.learning_rate);
    return r;
  }

  double evaluate(const MlpParams& params) const override { return sgd_.evaluate(params); }
  const std::vector<double>& h() const { return h_; }

 private:
  static Matrix pooled_x(std::span<const ClientDataset> clients) {
    Matrix x;
    for (const auto& c : clients) {
      for (std::size_t i = 0; i < c.size(); ++i) x.append_row(c.x.row(i));
    }
    return x;
  }
  static Vector pooled_t(std::span<const ClientDataset> clients) {
    Vector t;
    for (const auto& c : clients) t.insert(t.end(), c.t.begin(), c.t.end());
    return t;
  }

  PropensityOptions opts_;
  WeightedSgdTrainer sgd_;
  std::vector<std::pair<std::size_t, std::size_t>> segments_;
  std::vector<bool> single_class_;
  std::vector<double> h_;
};

}  // namespace

// ---- h_c --------------------------------------------------------------------------

HcFit fit_hc_logits(std::span<const double> logits, std::span<const double> t, double h_init, std::size_t epochs,
                    double lr, double h_limit) {
  if (logits.size() != t.size()) throw ShapeError("fit_hc: logits and treatments must align");
  HcFit fit{h_init, false};
  if (t.empty()) return fit;
  const double inv = 1.0 / static_cast<double>(t.size());
  for (std::size_t e = 0; e < epochs; ++e) {
    double g = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) g += sigmoid(logits[i] + fit.h) - t[i];
    fit.h -= lr * g * inv;
    if (!std::isfinite(fit.h)) throw NumericError("fit_hc: h became non-finite");
    if (std::abs(fit.h) > h_limit) {
      fit.h = std::copysign(h_limit, fit.h);
      fit.clipped = true;
    }
  }
  return fit;
}

HcFit fit_hc(const MlpParams& theta, const ClientDataset& data, double h_init, std::size_t epochs, double lr,
             double h_limit) {
  const Vector logits = logits_of(theta, data.x);
  return fit_hc_logits(logits, data.t, h_init, epochs, lr, h_limit);
}

// ---- PropensityTrainer ------------------------------------------------------------

PropensityTrainer::PropensityTrainer(const ClientDataset& data, const PropensityOptions& opts, std::uint64_t seed)
    : opts_(opts), sgd_(data.client_id, data.x, data.t, {}, OutputKind::sigmoid, seed) {
  state_.client_id = data.client_id;
  state_.single_class = !data.has_both_classes();
  if (state_.single_class && opts_.use_h) {
    warn("propensity: client " + std::to_string(data.client_id) +
         " has a single treatment class; h_c update skipped and weights fall back to 1");
  }
}

LocalResult PropensityTrainer::train(const MlpParams& global, std::size_t /*round*/, const FederationConfig& cfg) {
  if (opts_.use_h && !state_.single_class) {
    const Vector logits = logits_of(global, sgd_.inputs());
    const HcFit fit = fit_hc_logits(logits, sgd_.targets(), state_.h, opts_.hc_epochs, opts_.hc_lr, opts_.h_limit);
    if (fit.clipped) {
      ++state_.clip_events;
      warn("propensity: h_c of client " + std::to_string(state_.client_id) + " diverged and was clipped");
    }
    state_.h = fit.h;
  }
  sgd_.set_offset(state_.h);
  LocalResult r{global, 0.0};
  r.loss = sgd_.run_epochs(r.params, cfg.local_epochs, cfg.batch_size, cfg.learning_rate);
  state_.theta_snapshot = r.params;
  return r;
}

// ---- model ---------------------------------------------------------------------------

double PropensityModel::predict(std::size_t client_index, std::span<const double> x) const {
  const double h_c = h.empty() ? 0.0 : h.at(client_index);
  return mlp_predict(theta_for(client_index), x, h_c, OutputKind::sigmoid);
}

PropensityModel train_propensity_federated(std::span<const ClientDataset> clients, const PropensityRun& run) {
  check_clients(clients, run);
  std::vector<std::unique_ptr<PropensityTrainer>> trainers;
  std::vector<LocalTrainer*> ptrs;
  for (const auto& c : clients) {
    trainers.push_back(std::make_unique<PropensityTrainer>(
        c, run.options, Rng::derive_seed(run.seed, {kClientStream, c.client_id})));
    ptrs.push_back(trainers.back().get());
  }
  FederationConfig fed = run.federation;
  fed.mode = AggregationMode::by_size;

  PropensityModel model;
  model.h.assign(clients.size(), 0.0);
  for (const auto& c : clients) model.single_class.push_back(!c.has_both_classes());
  std::vector<double> best_h = model.h;
  auto current_h = [&] {
    std::vector<double> h(trainers.size());
    for (std::size_t c = 0; c < trainers.size(); ++c) h[c] = trainers[c]->state().h;
    return h;
  };

  RunOptions opts;
  opts.threads = run.threads;
  opts.log_aggregate_loss = run.log_aggregate_loss;
  if (!run.validation.empty()) {
    opts.validation = [&](const MlpParams& theta, std::size_t) {
      PropensityModel probe;
      probe.theta = {theta};
      probe.h = current_h();
      return validation_bce(probe, run.validation);
    };
    opts.on_best = [&](std::size_t) { best_h = current_h(); };
  }
  auto result = run_rounds(initial_theta(clients.front().dim(), run), ptrs, fed, opts);
  model.theta = {std::move(result.best_params)};
  model.h = run.validation.empty() ? current_h() : best_h;
  model.best_round = result.best_round;
  model.log = std::move(result.log);
  return model;
}

PropensityModel train_propensity_local(std::span<const ClientDataset> clients, const PropensityRun& run) {
  check_clients(clients, run);
  PropensityModel model;
  model.h.assign(clients.size(), 0.0);
  const MlpParams init = initial_theta(clients.front().dim(), run);
  for (std::size_t c = 0; c < clients.size(); ++c) {
    const auto& data = clients[c];
    model.single_class.push_back(!data.has_both_classes());
    WeightedSgdTrainer trainer(data.client_id, data.x, data.t, {}, OutputKind::sigmoid,
                               Rng::derive_seed(run.seed, {kClientStream, data.client_id}));
    LocalTrainer* one[] = {&trainer};
    RunOptions opts;
    opts.log_aggregate_loss = run.log_aggregate_loss;
    if (!run.validation.empty()) {
      const ClientDataset& val = run.validation[c];
      opts.validation = [&val](const MlpParams& theta, std::size_t) {
        double s = 0.0;
        for (std::size_t i = 0; i < val.size(); ++i) {
          s += bce_loss(mlp_predict(theta, val.x.row(i), 0.0, OutputKind::sigmoid), val.t[i]);
        }
        return val.size() > 0 ? s / static_cast<double>(val.size()) : 0.0;
      };
    }
    auto result = run_rounds(init, one, run.federation, opts);
    model.theta.push_back(std::move(result.best_params));
    if (c == 0) model.log = std::move(result.log);
  }
  return model;
}

PropensityModel train_propensity_centralized(std::span<const ClientDataset> clients, const PropensityRun& run) {
  check_clients(clients, run);
  PooledPropensityTrainer pooled(clients, run.options, Rng::derive_seed(run.seed, {kClientStream, 0xA11}));
  LocalTrainer* one[] = {&pooled};
  PropensityModel model;
  for (const auto& c : clients) model.single_class.push_back(!c.has_both_classes());
  std::vector<double> best_h(clients.size(), 0.0);

  RunOptions opts;
  opts.log_aggregate_loss = run.log_aggregate_loss;
  if (!run.validation.empty()) {
    opts.validation = [&](const MlpParams& theta, std::size_t) {
      PropensityModel probe;
      probe.theta = {theta};
      probe.h = pooled.h();
      return validation_bce(probe, run.validation);
    };
    opts.on_best = [&](std::size_t) { best_h = pooled.h(); };
  }
  auto result = run_rounds(initial_theta(clients.front().dim(), run), one, run.federation, opts);
  model.theta = {std::move(result.best_params)};
  model.h = run.validation.empty() ? pooled.h() : best_h;
  model.best_round = result.best_round;
  model.log = std::move(result.log);
  return model;
}

// ---- weights ---------------------------------------------------------------------------

double patient_weight(double propensity, double t, double rate, double eps_clip) {
  const double p = std::clamp(propensity, eps_clip, 1.0 - eps_clip);
  return t == 1.0 ? rate / p : (1.0 - rate) / (1.0 - p);
}

PatientWeights weights_from_propensity(std::size_t client_id, std::span<const double> propensity,
                                       std::span<const double> t, double rate, double eps_clip) {
  if (propensity.size() != t.size()) throw ShapeError("patient weights: propensity and t must align");
  if (!(eps_clip > 0.0 && eps_clip < 0.5)) throw ConfigError("patient weights: eps_clip must lie in (0, 0.5)");
  PatientWeights out{client_id, Vector(t.size())};
  for (std::size_t i = 0; i < t.size(); ++i) out.w[i] = patient_weight(propensity[i], t[i], rate, eps_clip);
  return out;
}

PatientWeights compute_patient_weights(const MlpParams& theta, double h, const ClientDataset& data,
                                       double eps_clip, std::optional<double> numerator_rate) {
  if (!data.has_both_classes() && !numerator_rate) {
    warn("patient weights: client " + std::to_string(data.client_id) +
         " has a single treatment class; using unit weights");
    return {data.client_id, Vector(data.size(), 1.0)};
  }
  Vector p(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) p[i] = mlp_predict(theta, data.x.row(i), h, OutputKind::sigmoid);
  return weights_from_propensity(data.client_id, p, data.t, numerator_rate.value_or(data.treatment_rate()), eps_clip);
}

}  // namespace fediptw
