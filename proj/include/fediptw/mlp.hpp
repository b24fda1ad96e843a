#pragma once

// Two-layer fully connected network used for both the propensity model
// f(x, h) and the factual outcome model g(x, t):
//
//   hidden = relu(W1 * x + b1)
//   logit  = W2 . hidden + b2 + bias_offset
//   output = sigmoid(logit)   (OutputKind::sigmoid)
//          = logit            (OutputKind::linear)
//
// bias_offset carries the per-client learnable scalar h_c; it is an input
// to the forward pass rather than a parameter so that the shared weights
// never contain client-private state.
//
// Parameters live in one flat buffer in the fixed order
//   W1 (hidden x in, row-major), b1 (hidden), W2 (hidden), b2 (1)
// which is also the serialization and aggregation order.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fediptw/matrix.hpp"
#include "fediptw/rng.hpp"

namespace fediptw {

inline constexpr std::size_t kDefaultHidden = 128;

enum class OutputKind { sigmoid, linear };

class MlpParams {
 public:
  MlpParams() = default;
  // All-zero parameters.
  MlpParams(std::size_t in_dim, std::size_t hidden);
  MlpParams(std::size_t in_dim, std::size_t hidden, std::vector<double> flat);

  MlpParams(const MlpParams& other);
  MlpParams& operator=(const MlpParams& other);
  MlpParams(MlpParams&& other) noexcept;
  MlpParams& operator=(MlpParams&& other) noexcept;
  ~MlpParams() = default;

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias.
  static MlpParams init_uniform(std::size_t in_dim, std::size_t hidden, Rng& rng);
  static std::size_t flat_size(std::size_t in_dim, std::size_t hidden) noexcept {
    return hidden * in_dim + hidden + hidden + 1;
  }

  std::size_t in_dim() const noexcept { return in_dim_; }
  std::size_t hidden() const noexcept { return hidden_; }
  std::size_t size() const noexcept { return flat_.size(); }
  bool same_shape(const MlpParams& o) const noexcept {
    return in_dim_ == o.in_dim_ && hidden_ == o.hidden_;
  }

  std::span<const double> flat() const noexcept { return flat_; }
  std::span<const double> w1_row(std::size_t j) const noexcept {
    return {flat_.data() + j * in_dim_, in_dim_};
  }
  std::span<const double> w1() const noexcept { return {flat_.data(), hidden_ * in_dim_}; }
  std::span<const double> b1() const noexcept { return {flat_.data() + b1_off(), hidden_}; }
  std::span<const double> w2() const noexcept { return {flat_.data() + w2_off(), hidden_}; }
  double b2() const noexcept { return flat_[b2_off()]; }

  // Mutable views. Acquiring one invalidates outstanding forward caches.
  std::span<double> flat_mut() noexcept { touch(); return flat_; }
  std::span<double> w1_row_mut(std::size_t j) noexcept {
    touch();
    return {flat_.data() + j * in_dim_, in_dim_};
  }
  std::span<double> b1_mut() noexcept { touch(); return {flat_.data() + b1_off(), hidden_}; }
  std::span<double> w2_mut() noexcept { touch(); return {flat_.data() + w2_off(), hidden_}; }
  double& b2_mut() noexcept { touch(); return flat_[b2_off()]; }

  // Changes every time the parameters may have been modified.
  std::uint64_t generation() const noexcept { return generation_; }

  bool operator==(const MlpParams& o) const noexcept {
    return in_dim_ == o.in_dim_ && hidden_ == o.hidden_ && flat_ == o.flat_;
  }

 private:
  std::size_t b1_off() const noexcept { return hidden_ * in_dim_; }
  std::size_t w2_off() const noexcept { return hidden_ * in_dim_ + hidden_; }
  std::size_t b2_off() const noexcept { return hidden_ * in_dim_ + 2 * hidden_; }
  void touch() noexcept;

  std::size_t in_dim_ = 0;
  std::size_t hidden_ = 0;
  std::vector<double> flat_;
  std::uint64_t generation_ = 0;
};

// Activations retained by a forward pass for the matching backward pass.
struct ForwardCache {
  const MlpParams* params = nullptr;
  std::uint64_t generation = 0;
  OutputKind kind = OutputKind::sigmoid;
  std::vector<double> input;
  std::vector<double> pre;  // W1 x + b1
  std::vector<double> act;  // relu(pre)
  double logit = 0.0;
  double output = 0.0;
};

struct ForwardResult {
  double output;
  ForwardCache cache;
};

// Gradient of a scalar loss w.r.t. every parameter and the bias offset.
struct Gradient {
  MlpParams params;
  double bias_offset = 0.0;

  static Gradient zeros_like(const MlpParams& p) { return {MlpParams(p.in_dim(), p.hidden()), 0.0}; }
};

ForwardResult mlp_forward(const MlpParams& p, std::span<const double> input, double bias_offset,
                          OutputKind kind);
// Buffer-reusing variant for training loops; returns the output.
double mlp_forward_into(const MlpParams& p, std::span<const double> input, double bias_offset,
                        OutputKind kind, ForwardCache& cache);
// Output only, no cache.
double mlp_predict(const MlpParams& p, std::span<const double> input, double bias_offset,
                   OutputKind kind);
// Pre-sigmoid logit without the bias offset.
double mlp_logit(const MlpParams& p, std::span<const double> input);

// upstream = dLoss/dOutput. Throws ContractError when the cache does not
// come from a forward pass on these exact parameters.
Gradient mlp_backward(const MlpParams& p, const ForwardCache& cache, double upstream);
// grad += gradient of (upstream * output).
void mlp_backward_accumulate(const MlpParams& p, const ForwardCache& cache, double upstream,
                             Gradient& grad);

inline constexpr double kProbClamp = 1e-7;

double sigmoid(double z) noexcept;
double softplus(double z) noexcept;

// Binary cross entropy with p clamped to [1e-7, 1 - 1e-7].
double bce_loss(double p, double y) noexcept;
// d bce / dp evaluated at the clamped probability.
double bce_grad(double p, double y) noexcept;
// Squared error (pred - y)^2.
double mse_loss(double pred, double y) noexcept;
double mse_grad(double pred, double y) noexcept;

// Loss / dLoss/dOutput by output kind: BCE for sigmoid, squared error for linear.
double output_loss(OutputKind kind, double output, double target) noexcept;
double output_loss_grad(OutputKind kind, double output, double target) noexcept;

// p - lr * g. Throws NumericError naming the first non-finite gradient index.
MlpParams sgd_step(const MlpParams& p, const MlpParams& g, double lr);
void sgd_step_inplace(MlpParams& p, const MlpParams& g, double lr);

}  // namespace fediptw
