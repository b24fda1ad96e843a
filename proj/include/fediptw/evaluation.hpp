#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fediptw/datagen.hpp"
#include "fediptw/federation.hpp"
#include "fediptw/mlp.hpp"
#include "fediptw/propensity.hpp"

namespace fediptw {

struct PeheResult {
  double pehe = 0.0;
  double rpehe = 0.0;
};

PeheResult pehe(std::span<const double> e_true, std::span<const double> e_hat);
double mae_ate(std::span<const double> e_true, std::span<const double> e_hat);

// ---- IF-PEHE ----------------------------------------------------------------------

struct IfPeheRecord {
  double t = 0.0;
  double y = 0.0;
  double e_hat = 0.0;  // estimate under evaluation
  double mu0 = 0.0;    // plug-in outcome models
  double mu1 = 0.0;
  double pi = 0.5;     // plug-in propensity
};

// l(x) = (1 - B) e_hat^2 + B y (e - e_hat) - W (e - e_hat)^2 + e_hat^2,
// W = t - pi, B = 2 t (t - pi) / Z, Z = pi (1 - pi), e = mu1 - mu0.
double if_pehe_term(const IfPeheRecord& r) noexcept;

struct IfPeheResult {
  double sum = 0.0;   // sum_i [(e_hat - e)^2 + l(x_i)]
  double mean = 0.0;  // sum / n
};

// pi is clamped to [pi_clip, 1 - pi_clip] first.
IfPeheResult if_pehe(std::span<const IfPeheRecord> records, double pi_clip = 0.01);

struct PluginModels {
  MlpParams mu0;
  MlpParams mu1;
  MlpParams pi;
  OutputKind outcome_kind = OutputKind::sigmoid;
};

struct PluginConfig {
  FederationConfig training;  // rounds are passes over the pooled data
  std::size_t hidden = kDefaultHidden;
  OutputKind outcome_kind = OutputKind::sigmoid;
  std::uint64_t seed = 0;
};

// Pooled plug-in learners on the training fold: mu0 on controls, mu1 on
// treated, pi on all records. nullopt if either arm is empty.
std::optional<PluginModels> fit_plugins(std::span<const ClientDataset> train, const PluginConfig& cfg);

// IF-PEHE of e_hat over the test records, clients concatenated in order.
IfPeheResult if_pehe(const PluginModels& plugins, std::span<const ClientDataset> test,
                     std::span<const double> e_hat, double pi_clip = 0.01);

// ---- classification ---------------------------------------------------------------

struct RankMetrics {
  double auroc = 0.0;
  double auprc = 0.0;
};

// Tie-aware rank AUROC; AUPRC as average precision (step integration over
// distinct score thresholds). Throws ContractError if a class is absent.
RankMetrics auroc_auprc(std::span<const double> scores, std::span<const double> labels);

// ---- covariance diagnostics ---------------------------------------------------------

struct CovResult {
  Vector raw;          // sum_i w_i (x_i - xbar)(t_i - tbar) per feature
  Vector per_feature;  // raw / w^s
  double weight_sum = 0.0;
  double summary = 0.0;  // mean over features of |per_feature_j| / sd_j
};

// Pooled (unweighted, biased) standard deviation of every covariate.
Vector pooled_feature_sd(std::span<const ClientDataset> clients);

double cov_summary(std::span<const double> per_feature, std::span<const double> feature_sd);

// Weighted covariance of one client's covariates and treatments.
CovResult weighted_cov_local(const ClientDataset& data, std::span<const double> weights,
                             std::span<const double> feature_sd);
// Pooled covariance with record weight hospital_weights[c] * weights[c][i];
// empty hospital_weights means 1.
CovResult weighted_cov_global(std::span<const ClientDataset> clients, std::span<const Vector> weights,
                              std::span<const double> hospital_weights, std::span<const double> feature_sd);

struct CovDiagnostics {
  Vector local_summary;  // per client
  double local_mean = 0.0;
  double global_summary = 0.0;
};

CovDiagnostics covariance_diagnostics(std::span<const ClientDataset> clients, std::span<const Vector> weights,
                                      std::span<const double> hospital_weights);

// ---- report -----------------------------------------------------------------------

struct MetricReport {
  double rpehe = 0.0;
  double mae_ate = 0.0;
  std::optional<IfPeheResult> if_pehe;
  std::optional<RankMetrics> rank;
  Vector cov_local;
  double cov_local_mean = 0.0;
  double cov_global = 0.0;
};

std::string to_json(const MetricReport& r);

struct SummaryStat {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation (0 for one value)
  double median = 0.0;
  std::size_t n = 0;
};

SummaryStat summarize(std::span<const double> values);

}  // namespace fediptw
