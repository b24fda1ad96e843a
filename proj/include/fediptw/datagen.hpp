#pragma once

// Synthetic observational data with per-hospital treatment strategies,
// CSV ingestion/export, and per-client fold partitioning.
//
// Generative process for record i of client c (z one-hot over 5 latent
// categories, sp = softplus):
//
//   z     ~ Cat(rho)
//   x_j   ~ Bern(sigmoid(a0_j + z . a1_j))            j = 0..d_x-1
//   t     ~ Bern(sigmoid(b0 + z . (b1 + delta_c)))
//   y(0)  ~ N(sp(c0 + z . (c1 + delta_c)), sigma0^2)
//   y(1)  ~ N(sp(d0 + z . (d1 + delta_c)), sigma1^2)
//   y     = t ? y(1) : y(0)

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fediptw/matrix.hpp"

namespace fediptw {

inline constexpr std::size_t kCategories = 5;

struct SyntheticSettings {
  std::array<double, kCategories> rho{0.11, 0.22, 0.35, 0.25, 0.15};
  std::size_t d_x = 30;
  std::size_t n_per_client = 1000;
  std::size_t n_clients = 10;
  // Variance of the N(0, v) draws for a0, a1, b0, b1, c1, d1.
  double coef_variance = 2.0;
  // Standard deviation s of delta_c ~ N(0, s^2 I).
  double heterogeneity = 1.0;
  double c0 = 0.85;
  double d0 = 5.2;
  double sigma0 = 1.0;
  double sigma1 = 1.0;
  std::uint64_t seed = 2024;
};

// Every coefficient drawn for a synthetic population.
struct GroundTruth {
  Vector a0;                      // d_x
  Matrix a1;                      // d_x x 5
  double b0 = 0.0;
  std::array<double, kCategories> b1{};
  std::array<double, kCategories> c1{};
  std::array<double, kCategories> d1{};
  Matrix delta;                   // n_clients x 5
};

struct SyntheticConfig {
  SyntheticSettings settings;
  GroundTruth truth;

  // rho non-negative with positive sum, d_x >= 1, sigmas >= 0 and shapes
  // consistent. sigma = 0 is accepted as the noise-free limit.
  void validate() const;
  // rho scaled to sum to one.
  std::array<double, kCategories> rho_normalized() const;
};

// Draws a0, a1, b0, b1, c1, d1 and delta from settings.seed.
SyntheticConfig make_synthetic_config(const SyntheticSettings& settings);

struct ClientDataset {
  std::size_t client_id = 0;
  Matrix x;            // n x d_x
  Vector t;            // 0/1
  Vector y;
  std::optional<Vector> y0;
  std::optional<Vector> y1;
  // Latent category per record; only known for synthetic data.
  std::vector<std::size_t> z;

  std::size_t size() const noexcept { return t.size(); }
  std::size_t dim() const noexcept { return x.cols(); }
  bool has_potential_outcomes() const noexcept { return y0.has_value() && y1.has_value(); }
  double treatment_rate() const;
  bool has_both_classes() const;
  // Lengths agree, t binary, every value finite, y consistent with y0/y1.
  void validate() const;
  ClientDataset subset(std::span<const std::size_t> rows) const;
  // y1 - y0 per record; throws if potential outcomes are absent.
  Vector true_effects() const;
};

// One dataset per client; replication selects an independent record draw
// under the same ground truth. Each (seed, replication, client) triple has
// its own stream, so clients may be generated in any order.
std::vector<ClientDataset> generate_synthetic(const SyntheticConfig& cfg, std::size_t replication = 0);
ClientDataset generate_client(const SyntheticConfig& cfg, std::size_t client, std::size_t replication = 0);

// sigmoid(b0 + z . (b1 + delta_c)) for a one-hot z.
double true_propensity(const SyntheticConfig& cfg, std::size_t client, std::span<const double> z_onehot);
double true_propensity(const SyntheticConfig& cfg, std::size_t client, std::size_t category);
// P(x_j = 1 | z) for a category.
double covariate_probability(const SyntheticConfig& cfg, std::size_t feature, std::size_t category);
// Mean potential outcomes (sp(...)) for a client/category.
double expected_y0(const SyntheticConfig& cfg, std::size_t client, std::size_t category);
double expected_y1(const SyntheticConfig& cfg, std::size_t client, std::size_t category);

// ---- CSV ---------------------------------------------------------------
//
// Header: client_id,<covariate columns...>,t,y[,y0,y1]
// Covariate columns are everything between client_id and t, in order.

void write_csv(const std::filesystem::path& path, std::span<const ClientDataset> clients);
// Records grouped by client_id (ascending); row order within a client kept.
std::vector<ClientDataset> load_csv(const std::filesystem::path& path);

// JSON sidecar with settings and every drawn coefficient.
std::string ground_truth_json(const SyntheticConfig& cfg);
void write_ground_truth(const std::filesystem::path& path, const SyntheticConfig& cfg);
SyntheticConfig read_ground_truth(const std::filesystem::path& path);

// ---- folds -------------------------------------------------------------

struct FoldAssignment {
  std::size_t n_folds = 0;
  // fold_of[client][row] in [0, n_folds)
  std::vector<std::vector<std::size_t>> fold_of;
};

struct ClientSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
};

// Per-client random partition into n_folds near-equal sets.
FoldAssignment split_folds(std::span<const ClientDataset> clients, std::size_t n_folds, std::uint64_t seed);

// Number of test / validation folds for a fold count (2 / 1 for 10 folds,
// scaled proportionally otherwise).
std::size_t test_fold_count(std::size_t n_folds);
std::size_t validation_fold_count(std::size_t n_folds);

// Fold configuration k: test = folds {k, k+1, ...}, validation = the next
// fold(s), train = the rest (7 / 1 / 2 for 10 folds).
std::vector<ClientSplit> select_folds(const FoldAssignment& assignment, std::size_t fold_config);

}  // namespace fediptw
