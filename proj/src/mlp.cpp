#include "fediptw/mlp.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <string>

#include "fediptw/error.hpp"
#include "fediptw/simd/kernels.hpp"

namespace fediptw {
namespace {

std::uint64_t next_generation() noexcept {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

void check_input(const MlpParams& p, std::span<const double> input) {
  if (input.size() != p.in_dim()) {
    throw ShapeError("mlp_forward: input has " + std::to_string(input.size()) +
                     " features, network expects " + std::to_string(p.in_dim()));
  }
}

double finish(OutputKind kind, double logit) noexcept {
  return kind == OutputKind::sigmoid ? sigmoid(logit) : logit;
}

}  // namespace

MlpParams::MlpParams(std::size_t in_dim, std::size_t hidden)
    : in_dim_(in_dim), hidden_(hidden), flat_(flat_size(in_dim, hidden), 0.0),
      generation_(next_generation()) {}

MlpParams::MlpParams(std::size_t in_dim, std::size_t hidden, std::vector<double> flat)
    : in_dim_(in_dim), hidden_(hidden), flat_(std::move(flat)), generation_(next_generation()) {
  if (flat_.size() != flat_size(in_dim, hidden)) {
    throw ShapeError("MlpParams: flat vector has " + std::to_string(flat_.size()) +
                     " entries, expected " + std::to_string(flat_size(in_dim, hidden)));
  }
}

MlpParams::MlpParams(const MlpParams& other)
    : in_dim_(other.in_dim_), hidden_(other.hidden_), flat_(other.flat_),
      generation_(next_generation()) {}

MlpParams& MlpParams::operator=(const MlpParams& other) {
  if (this != &other) {
    in_dim_ = other.in_dim_;
    hidden_ = other.hidden_;
    flat_ = other.flat_;
    touch();
  }
  return *this;
}

MlpParams::MlpParams(MlpParams&& other) noexcept
    : in_dim_(other.in_dim_), hidden_(other.hidden_), flat_(std::move(other.flat_)),
      generation_(next_generation()) {
  other.touch();
}

MlpParams& MlpParams::operator=(MlpParams&& other) noexcept {
  if (this != &other) {
    in_dim_ = other.in_dim_;
    hidden_ = other.hidden_;
    flat_ = std::move(other.flat_);
    touch();
    other.touch();
  }
  return *this;
}

void MlpParams::touch() noexcept { generation_ = next_generation(); }

MlpParams MlpParams::init_uniform(std::size_t in_dim, std::size_t hidden, Rng& rng) {
  MlpParams p(in_dim, hidden);
  const double bound1 = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(in_dim, 1)));
  const double bound2 = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(hidden, 1)));
  auto flat = p.flat_mut();
  const std::size_t layer1 = hidden * in_dim + hidden;
  for (std::size_t i = 0; i < flat.size(); ++i) {
    const double b = i < layer1 ? bound1 : bound2;
    flat[i] = rng.uniform(-b, b);
  }
  return p;
}

double mlp_forward_into(const MlpParams& p, std::span<const double> input, double bias_offset,
                        OutputKind kind, ForwardCache& cache) {
  check_input(p, input);
  const std::size_t h = p.hidden();
  cache.params = &p;
  cache.generation = p.generation();
  cache.kind = kind;
  cache.input.assign(input.begin(), input.end());
  cache.pre.resize(h);
  cache.act.resize(h);
  const auto b1 = p.b1();
  const auto& k = simd::active();
  for (std::size_t j = 0; j < h; ++j) {
    cache.pre[j] = k.dot(p.w1_row(j).data(), input.data(), input.size()) + b1[j];
  }
  k.relu(cache.pre.data(), cache.act.data(), h);
  cache.logit = k.dot(p.w2().data(), cache.act.data(), h) + p.b2() + bias_offset;
  cache.output = finish(kind, cache.logit);
  return cache.output;
}

ForwardResult mlp_forward(const MlpParams& p, std::span<const double> input, double bias_offset,
                          OutputKind kind) {
  ForwardResult r{0.0, {}};
  r.output = mlp_forward_into(p, input, bias_offset, kind, r.cache);
  return r;
}

double mlp_logit(const MlpParams& p, std::span<const double> input) {
  check_input(p, input);
  const std::size_t h = p.hidden();
  const auto b1 = p.b1();
  const auto& k = simd::active();
  thread_local std::vector<double> act;
  act.resize(h);
  for (std::size_t j = 0; j < h; ++j) {
    act[j] = k.dot(p.w1_row(j).data(), input.data(), input.size()) + b1[j];
  }
  k.relu(act.data(), act.data(), h);
  return k.dot(p.w2().data(), act.data(), h) + p.b2();
}

double mlp_predict(const MlpParams& p, std::span<const double> input, double bias_offset,
                   OutputKind kind) {
  return finish(kind, mlp_logit(p, input) + bias_offset);
}

void mlp_backward_accumulate(const MlpParams& p, const ForwardCache& cache, double upstream,
                             Gradient& grad) {
  if (cache.params != &p || cache.generation != p.generation()) {
    throw ContractError("mlp_backward: forward cache does not match the current parameters");
  }
  if (!grad.params.same_shape(p)) throw ShapeError("mlp_backward: gradient shape mismatch");
  if (upstream == 0.0) return;

  double dlogit = upstream;
  if (cache.kind == OutputKind::sigmoid) dlogit *= cache.output * (1.0 - cache.output);

  const std::size_t h = p.hidden();
  const std::size_t in = p.in_dim();
  const auto& k = simd::active();
  auto gflat = grad.params.flat_mut();
  double* gw1 = gflat.data();
  double* gb1 = gw1 + h * in;
  double* gw2 = gb1 + h;
  double* gb2 = gw2 + h;

  gb2[0] += dlogit;
  grad.bias_offset += dlogit;
  k.axpy(dlogit, cache.act.data(), gw2, h);

  // dpre = dlogit * W2 masked by relu'
  thread_local std::vector<double> dpre;
  dpre.assign(p.w2().begin(), p.w2().end());
  k.scale(dlogit, dpre.data(), h);
  k.relu_mask(cache.pre.data(), dpre.data(), h);

  for (std::size_t j = 0; j < h; ++j) {
    const double d = dpre[j];
    if (d == 0.0) continue;
    gb1[j] += d;
    k.axpy(d, cache.input.data(), gw1 + j * in, in);
  }
}

Gradient mlp_backward(const MlpParams& p, const ForwardCache& cache, double upstream) {
  Gradient g = Gradient::zeros_like(p);
  mlp_backward_accumulate(p, cache, upstream, g);
  return g;
}

double sigmoid(double z) noexcept {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double softplus(double z) noexcept { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

double bce_loss(double p, double y) noexcept {
  const double pc = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
  return -y * std::log(pc) - (1.0 - y) * std::log(1.0 - pc);
}

double bce_grad(double p, double y) noexcept {
  const double pc = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
  return -y / pc + (1.0 - y) / (1.0 - pc);
}

double mse_loss(double pred, double y) noexcept { return (pred - y) * (pred - y); }
double mse_grad(double pred, double y) noexcept { return 2.0 * (pred - y); }

double output_loss(OutputKind kind, double output, double target) noexcept {
  return kind == OutputKind::sigmoid ? bce_loss(output, target) : mse_loss(output, target);
}

double output_loss_grad(OutputKind kind, double output, double target) noexcept {
  return kind == OutputKind::sigmoid ? bce_grad(output, target) : mse_grad(output, target);
}

void sgd_step_inplace(MlpParams& p, const MlpParams& g, double lr) {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("sgd_step: learning rate must be > 0");
  if (!p.same_shape(g)) throw ShapeError("sgd_step: gradient shape mismatch");
  const auto gf = g.flat();
  for (std::size_t i = 0; i < gf.size(); ++i) {
    if (!std::isfinite(gf[i])) {
      throw NumericError("sgd_step: non-finite gradient at flat index " + std::to_string(i));
    }
  }
  simd::axpy(-lr, gf, p.flat_mut());
}

MlpParams sgd_step(const MlpParams& p, const MlpParams& g, double lr) {
  MlpParams out = p;
  sgd_step_inplace(out, g, lr);
  return out;
}

}  // namespace fediptw
