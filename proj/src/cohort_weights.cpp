#include "fediptw/cohort_weights.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "fediptw/error.hpp"
#include "fediptw/log.hpp"

namespace fediptw {

void ClientStats::validate() const {
  if (n < 1) throw ContractError("client stats: n must be >= 1");
  if (!(mean_t >= 0.0 && mean_t <= 1.0)) throw ContractError("client stats: mean_t must lie in [0, 1]");
  for (double v : mean_x) {
    if (!std::isfinite(v)) throw NumericError("client stats: non-finite mean_x");
  }
}

ClientStats client_stats(const ClientDataset& data) {
  if (data.size() == 0) throw ContractError("client stats: empty client " + std::to_string(data.client_id));
  ClientStats s;
  s.client_id = data.client_id;
  s.n = data.size();
  s.mean_x.assign(data.dim(), 0.0);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto row = data.x.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) s.mean_x[j] += row[j];
  }
  for (double& v : s.mean_x) v /= static_cast<double>(s.n);
  s.mean_t = data.treatment_rate();
  return s;
}

std::vector<ClientStats> client_stats(std::span<const ClientDataset> clients) {
  std::vector<ClientStats> out;
  out.reserve(clients.size());
  for (const auto& c : clients) out.push_back(client_stats(c));
  return out;
}

GaussianFit fit_t_prior(std::span<const ClientStats> stats) {
  if (stats.empty()) throw ContractError("fit_t_prior: no clients");
  double n = 0.0, m = 0.0;
  for (const auto& s : stats) {
    s.validate();
    n += static_cast<double>(s.n);
    m += static_cast<double>(s.n) * s.mean_t;
  }
  m /= n;
  double v = 0.0;
  for (const auto& s : stats) v += static_cast<double>(s.n) * (s.mean_t - m) * (s.mean_t - m);
  return {m, std::sqrt(v / n)};
}

std::optional<double> normal_pdf(double t, double mu, double sigma) noexcept {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) return std::nullopt;
  const double z = (t - mu) / sigma;
  return std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * std::numbers::pi));
}

// ---- GPR ------------------------------------------------------------------------

namespace {

double sq_dist(std::span<const double> a, std::span<const double> b) noexcept {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
  return s;
}

}  // namespace

GprModel::GprModel(std::vector<Vector> inputs, Vector targets, const GprHyper& hyper)
    : inputs_(std::move(inputs)), targets_(std::move(targets)), hyper_(hyper) {
  if (inputs_.empty()) throw ContractError("gpr: no training points");
  if (inputs_.size() != targets_.size()) throw ShapeError("gpr: one target per input required");
  for (const auto& x : inputs_) {
    if (x.size() != inputs_.front().size()) throw ShapeError("gpr: inputs differ in dimension");
  }
  if (!(hyper_.lengthscale > 0.0) || !(hyper_.signal_variance > 0.0) || !(hyper_.noise_variance >= 0.0)) {
    throw ConfigError("gpr: lengthscale and signal variance must be > 0, noise >= 0");
  }
  const auto n = static_cast<Eigen::Index>(inputs_.size());
  Eigen::MatrixXd k(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      k(i, j) = kernel(inputs_[static_cast<std::size_t>(i)], inputs_[static_cast<std::size_t>(j)]);
    }
  }
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) y(i) = targets_[static_cast<std::size_t>(i)] - hyper_.prior_mean;

  double jitter = 0.0;
  for (int attempt = 0; attempt < 8; ++attempt) {
    Eigen::MatrixXd a = k;
    a.diagonal().array() += hyper_.noise_variance + jitter;
    llt_.compute(a);
    if (llt_.info() == Eigen::Success && llt_.matrixL().toDenseMatrix().diagonal().minCoeff() > 0.0) {
      jitter_ = jitter;
      alpha_ = llt_.solve(y);
      return;
    }
    jitter = jitter == 0.0 ? 1e-10 * hyper_.signal_variance : jitter * 100.0;
  }
  throw NumericError("gpr: kernel Gram matrix is singular even after jitter");
}

double GprModel::kernel(std::span<const double> a, std::span<const double> b) const noexcept {
  const double l = hyper_.lengthscale;
  return hyper_.signal_variance * std::exp(-0.5 * sq_dist(a, b) / (l * l));
}

GprModel::Posterior GprModel::posterior(std::span<const double> x) const {
  if (x.size() != inputs_.front().size()) throw ShapeError("gpr: query dimension mismatch");
  const auto n = static_cast<Eigen::Index>(inputs_.size());
  Eigen::VectorXd ks(n);
  for (Eigen::Index i = 0; i < n; ++i) ks(i) = kernel(inputs_[static_cast<std::size_t>(i)], x);
  const double mean = hyper_.prior_mean + ks.dot(alpha_);
  const Eigen::VectorXd v = llt_.matrixL().solve(ks);
  const double var = hyper_.signal_variance + hyper_.noise_variance - v.squaredNorm();
  return {mean, std::sqrt(std::max(var, 0.0))};
}

GprHyper heuristic_hyper(std::span<const ClientStats> stats) {
  if (stats.empty()) throw ContractError("gpr: no clients");
  std::vector<double> dists;
  for (std::size_t i = 0; i < stats.size(); ++i) {
    for (std::size_t j = i + 1; j < stats.size(); ++j) {
      dists.push_back(std::sqrt(sq_dist(stats[i].mean_x, stats[j].mean_x)));
    }
  }
  GprHyper h;
  if (!dists.empty()) {
    std::sort(dists.begin(), dists.end());
    const std::size_t m = dists.size();
    const double med = m % 2 == 1 ? dists[m / 2] : 0.5 * (dists[m / 2 - 1] + dists[m / 2]);
    h.lengthscale = med > 0.0 ? med : 1.0;
  }
  double mean = 0.0;
  for (const auto& s : stats) mean += s.mean_t;
  mean /= static_cast<double>(stats.size());
  double var = 0.0;
  for (const auto& s : stats) var += (s.mean_t - mean) * (s.mean_t - mean);
  var /= static_cast<double>(stats.size());
  h.signal_variance = std::max(var, 1e-12);
  h.noise_variance = 1e-4;
  h.prior_mean = mean;
  return h;
}

GprModel fit_gpr(std::span<const ClientStats> stats) {
  const GprHyper hyper = heuristic_hyper(stats);
  std::vector<Vector> x;
  Vector y;
  for (const auto& s : stats) {
    s.validate();
    x.push_back(s.mean_x);
    y.push_back(s.mean_t);
  }
  return GprModel(std::move(x), std::move(y), hyper);
}

GprModel::Posterior gpr_posterior(const GprModel& m, std::span<const double> x) { return m.posterior(x); }

// ---- weights ---------------------------------------------------------------------

HospitalWeights unit_hospital_weights(std::span<const ClientStats> stats) {
  HospitalWeights out;
  for (const auto& s : stats) {
    out.client_id.push_back(s.client_id);
    out.w.push_back(1.0);
    out.numerator.push_back(0.0);
    out.denominator.push_back(0.0);
    out.degenerate.push_back(true);
  }
  return out;
}

HospitalWeights compute_hospital_weights(std::span<const ClientStats> stats, const GaussianFit& fit,
                                         const GprModel& gpr, const HospitalWeightOptions& opts) {
  if (!(opts.w_min > 0.0) || !(opts.w_max >= opts.w_min)) throw ConfigError("hospital weights: bad clamp range");
  HospitalWeights out;
  for (const auto& s : stats) {
    const auto post = gpr.posterior(s.mean_x);
    const auto num = gaussian_pdf(fit, s.mean_t);
    const auto den = normal_pdf(s.mean_t, post.mean, post.sd);
    out.client_id.push_back(s.client_id);
    const bool degenerate = !num || !den || !(*den > 0.0);
    out.degenerate.push_back(degenerate);
    out.numerator.push_back(num.value_or(0.0));
    out.denominator.push_back(den.value_or(0.0));
    if (degenerate) {
      warn("hospital weights: degenerate density for client " + std::to_string(s.client_id) + "; using w_c = 1");
      out.w.push_back(1.0);
    } else {
      out.w.push_back(std::clamp(*num / *den, opts.w_min, opts.w_max));
    }
  }
  return out;
}

HospitalWeights compute_hospital_weights(std::span<const ClientStats> stats, const HospitalWeightOptions& opts) {
  if (stats.size() < 2) return unit_hospital_weights(stats);
  const GaussianFit fit = fit_t_prior(stats);
  if (fit.degenerate()) {
    warn("hospital weights: all clients share one treatment rate; using w_c = 1");
    return unit_hospital_weights(stats);
  }
  return compute_hospital_weights(stats, fit, fit_gpr(stats), opts);
}

}  // namespace fediptw
