#include "fediptw/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include <json.hpp>

#include "fediptw/error.hpp"
#include "fediptw/rng.hpp"

namespace fediptw {

PeheResult pehe(std::span<const double> e_true, std::span<const double> e_hat) {
  if (e_true.size() != e_hat.size()) throw ShapeError("pehe: length mismatch");
  if (e_true.empty()) throw ContractError("pehe: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < e_true.size(); ++i) s += (e_hat[i] - e_true[i]) * (e_hat[i] - e_true[i]);
  const double p = s / static_cast<double>(e_true.size());
  return {p, std::sqrt(p)};
}

double mae_ate(std::span<const double> e_true, std::span<const double> e_hat) {
  if (e_true.empty() || e_hat.empty()) throw ContractError("mae_ate: empty input");
  const double a = std::accumulate(e_true.begin(), e_true.end(), 0.0) / static_cast<double>(e_true.size());
  const double b = std::accumulate(e_hat.begin(), e_hat.end(), 0.0) / static_cast<double>(e_hat.size());
  return std::abs(a - b);
}

// ---- IF-PEHE ----------------------------------------------------------------------

double if_pehe_term(const IfPeheRecord& r) noexcept {
  const double e = r.mu1 - r.mu0;
  const double d = e - r.e_hat;
  const double z = r.pi * (1.0 - r.pi);
  const double w = r.t - r.pi;
  const double b = 2.0 * r.t * (r.t - r.pi) / z;
  return (1.0 - b) * r.e_hat * r.e_hat + b * r.y * d - w * d * d + r.e_hat * r.e_hat;
}

IfPeheResult if_pehe(std::span<const IfPeheRecord> records, double pi_clip) {
  if (records.empty()) throw ContractError("if_pehe: no records");
  if (!(pi_clip > 0.0 && pi_clip < 0.5)) throw ConfigError("if_pehe: pi_clip must lie in (0, 0.5)");
  IfPeheResult out;
  for (IfPeheRecord r : records) {
    r.pi = std::clamp(r.pi, pi_clip, 1.0 - pi_clip);
    const double e = r.mu1 - r.mu0;
    out.sum += (r.e_hat - e) * (r.e_hat - e) + if_pehe_term(r);
  }
  out.mean = out.sum / static_cast<double>(records.size());
  return out;
}

namespace {

MlpParams fit_pooled(const Matrix& x, Vector y, OutputKind kind, const PluginConfig& cfg, std::uint64_t stream) {
  Rng init(Rng::derive_seed(cfg.seed, {0x9106, stream}));
  MlpParams p = MlpParams::init_uniform(x.cols(), cfg.hidden, init);
  WeightedSgdTrainer trainer(0, x, std::move(y), {}, kind, Rng::derive_seed(cfg.seed, {0x9107, stream}));
  trainer.run_epochs(p, cfg.training.rounds * cfg.training.local_epochs, cfg.training.batch_size,
                     cfg.training.learning_rate);
  return p;
}

}  // namespace

std::optional<PluginModels> fit_plugins(std::span<const ClientDataset> train, const PluginConfig& cfg) {
  cfg.training.validate();
  Matrix x_all, x0, x1;
  Vector t_all, y0, y1;
  for (const auto& c : train) {
    for (std::size_t i = 0; i < c.size(); ++i) {
      x_all.append_row(c.x.row(i));
      t_all.push_back(c.t[i]);
      if (c.t[i] == 1.0) {
        x1.append_row(c.x.row(i));
        y1.push_back(c.y[i]);
      } else {
        x0.append_row(c.x.row(i));
        y0.push_back(c.y[i]);
      }
    }
  }
  if (y0.empty() || y1.empty()) return std::nullopt;
  PluginModels m{fit_pooled(x0, std::move(y0), cfg.outcome_kind, cfg, 0),
                 fit_pooled(x1, std::move(y1), cfg.outcome_kind, cfg, 1),
                 fit_pooled(x_all, std::move(t_all), OutputKind::sigmoid, cfg, 2), cfg.outcome_kind};
  return m;
}

IfPeheResult if_pehe(const PluginModels& plugins, std::span<const ClientDataset> test, std::span<const double> e_hat,
                     double pi_clip) {
  std::vector<IfPeheRecord> records;
  for (const auto& c : test) {
    for (std::size_t i = 0; i < c.size(); ++i) {
      const auto x = c.x.row(i);
      IfPeheRecord r;
      r.t = c.t[i];
      r.y = c.y[i];
      r.mu0 = mlp_predict(plugins.mu0, x, 0.0, plugins.outcome_kind);
      r.mu1 = mlp_predict(plugins.mu1, x, 0.0, plugins.outcome_kind);
      r.pi = mlp_predict(plugins.pi, x, 0.0, OutputKind::sigmoid);
      records.push_back(r);
    }
  }
  if (records.size() != e_hat.size()) throw ShapeError("if_pehe: one estimate per test record required");
  for (std::size_t i = 0; i < records.size(); ++i) records[i].e_hat = e_hat[i];
  return if_pehe(records, pi_clip);
}

// ---- classification ---------------------------------------------------------------

RankMetrics auroc_auprc(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() != labels.size()) throw ShapeError("auroc_auprc: length mismatch");
  std::size_t pos = 0;
  for (double l : labels) {
    if (l != 0.0 && l != 1.0) throw ContractError("auroc_auprc: labels must be 0 or 1");
    pos += l == 1.0;
  }
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw ContractError("auroc_auprc: both classes must be present");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  // Walk tie groups from the highest score down.
  double auc = 0.0, ap = 0.0;
  double tp = 0.0, fp = 0.0;
  for (std::size_t k = 0; k < order.size();) {
    std::size_t end = k;
    double gp = 0.0, gn = 0.0;
    while (end < order.size() && scores[order[end]] == scores[order[k]]) {
      (labels[order[end]] == 1.0 ? gp : gn) += 1.0;
      ++end;
    }
    auc += gn * (tp + 0.5 * gp);
    tp += gp;
    fp += gn;
    if (gp > 0.0) ap += (gp / static_cast<double>(pos)) * (tp / (tp + fp));
    k = end;
  }
  return {auc / (static_cast<double>(pos) * static_cast<double>(neg)), ap};
}

// ---- covariance ---------------------------------------------------------------------

Vector pooled_feature_sd(std::span<const ClientDataset> clients) {
  if (clients.empty()) return {};
  const std::size_t d = clients.front().dim();
  Vector mean(d, 0.0), sd(d, 0.0);
  double n = 0.0;
  for (const auto& c : clients) {
    for (std::size_t i = 0; i < c.size(); ++i) {
      const auto x = c.x.row(i);
      for (std::size_t j = 0; j < d; ++j) mean[j] += x[j];
    }
    n += static_cast<double>(c.size());
  }
  if (n == 0.0) return sd;
  for (double& m : mean) m /= n;
  for (const auto& c : clients) {
    for (std::size_t i = 0; i < c.size(); ++i) {
      const auto x = c.x.row(i);
      for (std::size_t j = 0; j < d; ++j) sd[j] += (x[j] - mean[j]) * (x[j] - mean[j]);
    }
  }
  for (double& s : sd) s = std::sqrt(s / n);
  return sd;
}

double cov_summary(std::span<const double> per_feature, std::span<const double> feature_sd) {
  if (feature_sd.size() != per_feature.size()) throw ShapeError("cov_summary: one sd per feature required");
  double s = 0.0;
  std::size_t k = 0;
  for (std::size_t j = 0; j < per_feature.size(); ++j) {
    if (!(feature_sd[j] > 0.0)) continue;
    s += std::abs(per_feature[j]) / feature_sd[j];
    ++k;
  }
  return k > 0 ? s / static_cast<double>(k) : 0.0;
}

namespace {

// Two-pass evaluation: weighted means first, then centred cross products.
template <typename ForEach>
CovResult weighted_cov_impl(std::size_t d, ForEach for_each, std::span<const double> feature_sd) {
  double sw = 0.0, st = 0.0;
  Vector sx(d, 0.0);
  for_each([&](std::span<const double> x, double t, double w) {
    sw += w;
    st += w * t;
    for (std::size_t j = 0; j < d; ++j) sx[j] += w * x[j];
  });
  if (!(sw > 0.0)) throw NumericError("weighted_cov: weights sum to zero");
  const double tbar = st / sw;
  for (double& v : sx) v /= sw;
  CovResult r;
  r.raw.assign(d, 0.0);
  for_each([&](std::span<const double> x, double t, double w) {
    const double dt = w * (t - tbar);
    for (std::size_t j = 0; j < d; ++j) r.raw[j] += dt * (x[j] - sx[j]);
  });
  r.weight_sum = sw;
  r.per_feature.resize(d);
  for (std::size_t j = 0; j < d; ++j) r.per_feature[j] = r.raw[j] / sw;
  r.summary = feature_sd.empty() ? 0.0 : cov_summary(r.per_feature, feature_sd);
  return r;
}

}  // namespace

CovResult weighted_cov_local(const ClientDataset& data, std::span<const double> weights,
                             std::span<const double> feature_sd) {
  if (weights.size() != data.size()) throw ContractError("weighted_cov: weights not aligned with records");
  return weighted_cov_impl(
      data.dim(),
      [&](auto&& f) {
        for (std::size_t i = 0; i < data.size(); ++i) f(data.x.row(i), data.t[i], weights[i]);
      },
      feature_sd);
}

CovResult weighted_cov_global(std::span<const ClientDataset> clients, std::span<const Vector> weights,
                              std::span<const double> hospital_weights, std::span<const double> feature_sd) {
  if (clients.empty()) throw ContractError("weighted_cov: no clients");
  if (weights.size() != clients.size()) throw ShapeError("weighted_cov: one weight vector per client required");
  if (!hospital_weights.empty() && hospital_weights.size() != clients.size()) {
    throw ShapeError("weighted_cov: one hospital weight per client required");
  }
  for (std::size_t c = 0; c < clients.size(); ++c) {
    if (weights[c].size() != clients[c].size()) throw ContractError("weighted_cov: weights not aligned with records");
  }
  return weighted_cov_impl(
      clients.front().dim(),
      [&](auto&& f) {
        for (std::size_t c = 0; c < clients.size(); ++c) {
          const double wc = hospital_weights.empty() ? 1.0 : hospital_weights[c];
          for (std::size_t i = 0; i < clients[c].size(); ++i) f(clients[c].x.row(i), clients[c].t[i], wc * weights[c][i]);
        }
      },
      feature_sd);
}

CovDiagnostics covariance_diagnostics(std::span<const ClientDataset> clients, std::span<const Vector> weights,
                                      std::span<const double> hospital_weights) {
  const Vector sd = pooled_feature_sd(clients);
  CovDiagnostics out;
  for (std::size_t c = 0; c < clients.size(); ++c) {
    out.local_summary.push_back(weighted_cov_local(clients[c], weights[c], sd).summary);
  }
  if (!out.local_summary.empty()) {
    out.local_mean = std::accumulate(out.local_summary.begin(), out.local_summary.end(), 0.0) /
                     static_cast<double>(out.local_summary.size());
  }
  out.global_summary = weighted_cov_global(clients, weights, hospital_weights, sd).summary;
  return out;
}

// ---- report -----------------------------------------------------------------------

std::string to_json(const MetricReport& r) {
  nlohmann::json j;
  j["rpehe"] = r.rpehe;
  j["mae_ate"] = r.mae_ate;
  if (r.if_pehe) {
    j["if_pehe"] = r.if_pehe->sum;
    j["if_pehe_mean"] = r.if_pehe->mean;
  }
  if (r.rank) {
    j["auroc"] = r.rank->auroc;
    j["auprc"] = r.rank->auprc;
  }
  j["cov_local"] = r.cov_local;
  j["cov_local_mean"] = r.cov_local_mean;
  j["cov_global"] = r.cov_global;
  return j.dump(2);
}

SummaryStat summarize(std::span<const double> values) {
  SummaryStat s;
  s.n = values.size();
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(s.n);
  if (s.n > 1) {
    double v = 0.0;
    for (double x : values) v += (x - s.mean) * (x - s.mean);
    s.sd = std::sqrt(v / static_cast<double>(s.n - 1));
  }
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  s.median = s.n % 2 == 1 ? sorted[s.n / 2] : 0.5 * (sorted[s.n / 2 - 1] + sorted[s.n / 2]);
  return s;
}

}  // namespace fediptw
