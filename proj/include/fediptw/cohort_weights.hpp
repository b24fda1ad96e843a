#pragma once

// Hospital-specific weight w_c = P(T' = E[T_c]) / P(T' = E[T_c] | X' = E[X_c]).
// The server only sees (|D_c|, E[X_c], E[T_c]) per client. The marginal is a
// Gaussian fitted to the client treatment rates; the conditional is the
// predictive density of a GP regression of E[T_c] on E[X_c].

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "fediptw/datagen.hpp"
#include "fediptw/matrix.hpp"

namespace fediptw {

struct ClientStats {
  std::size_t client_id = 0;
  std::size_t n = 0;
  Vector mean_x;
  double mean_t = 0.0;

  void validate() const;
};

ClientStats client_stats(const ClientDataset& data);
std::vector<ClientStats> client_stats(std::span<const ClientDataset> clients);

struct GaussianFit {
  double mu0 = 0.0;
  double sigma0 = 0.0;
  bool degenerate() const noexcept { return !(sigma0 > 0.0); }
};

// mu0 = sum n_c mean_t_c / N,  sigma0^2 = sum n_c (mean_t_c - mu0)^2 / N.
GaussianFit fit_t_prior(std::span<const ClientStats> stats);

// Normal density; nullopt when sigma is not positive.
std::optional<double> normal_pdf(double t, double mu, double sigma) noexcept;
inline std::optional<double> gaussian_pdf(const GaussianFit& fit, double t) noexcept {
  return normal_pdf(t, fit.mu0, fit.sigma0);
}

struct GprHyper {
  double lengthscale = 1.0;
  double signal_variance = 1.0;
  double noise_variance = 1e-4;
  // Prior mean; the fitted model uses the mean of the targets.
  double prior_mean = 0.0;
};

class GprModel {
 public:
  // RBF-kernel GP with the given hyperparameters. Throws NumericError if
  // K + noise*I stays singular after adding jitter.
  GprModel(std::vector<Vector> inputs, Vector targets, const GprHyper& hyper);

  struct Posterior {
    double mean = 0.0;
    double sd = 0.0;  // predictive, includes the noise variance
  };
  Posterior posterior(std::span<const double> x) const;

  double kernel(std::span<const double> a, std::span<const double> b) const noexcept;
  const GprHyper& hyper() const noexcept { return hyper_; }
  std::size_t size() const noexcept { return inputs_.size(); }
  double jitter() const noexcept { return jitter_; }

 private:
  std::vector<Vector> inputs_;
  Vector targets_;
  GprHyper hyper_;
  double jitter_ = 0.0;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  Eigen::VectorXd alpha_;
};

// Hyperparameters by heuristic: lengthscale = median pairwise distance of
// mean_x (1 if that is 0), signal variance = variance of mean_t (1e-12
// floor), noise 1e-4.
GprHyper heuristic_hyper(std::span<const ClientStats> stats);
GprModel fit_gpr(std::span<const ClientStats> stats);
GprModel::Posterior gpr_posterior(const GprModel& m, std::span<const double> x);

struct HospitalWeightOptions {
  double w_min = 0.1;
  double w_max = 10.0;
};

struct HospitalWeights {
  std::vector<std::size_t> client_id;
  Vector w;
  Vector numerator;    // P(T' = E[T_c]); 0 when degenerate
  Vector denominator;  // P(T' = E[T_c] | X' = E[X_c]); 0 when degenerate
  std::vector<bool> degenerate;
};

HospitalWeights compute_hospital_weights(std::span<const ClientStats> stats, const GaussianFit& fit,
                                         const GprModel& gpr, const HospitalWeightOptions& opts = {});
// Full server-side pipeline. A single client yields w = 1.
HospitalWeights compute_hospital_weights(std::span<const ClientStats> stats, const HospitalWeightOptions& opts = {});
HospitalWeights unit_hospital_weights(std::span<const ClientStats> stats);

}  // namespace fediptw
