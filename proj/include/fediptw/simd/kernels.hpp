#pragma once

// Data-parallel inner loops used by the MLP, SGD and aggregation code.
//
// Every kernel has a scalar reference implementation plus optional AVX2
// (x86-64) and NEON (aarch64) variants. The variant is chosen once at
// startup from CPU capabilities and may be overridden with the
// FEDIPTW_SIMD environment variable (scalar | avx2 | neon | auto) or
// set_backend(). Results are deterministic for a fixed backend; across
// backends reductions may differ in the last few ulps because the
// summation order changes.

#include <cstddef>
#include <span>
#include <string_view>

namespace fediptw::simd {

enum class Backend { scalar, avx2, neon };

struct KernelTable {
  // sum_i a[i] * b[i]
  double (*dot)(const double* a, const double* b, std::size_t n);
  // y[i] += alpha * x[i]
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // x[i] *= alpha
  void (*scale)(double alpha, double* x, std::size_t n);
  // sum_i x[i]
  double (*sum)(const double* x, std::size_t n);
  // out[i] = max(in[i], 0)
  void (*relu)(const double* in, double* out, std::size_t n);
  // g[i] *= (pre[i] > 0)
  void (*relu_mask)(const double* pre, double* g, std::size_t n);
};

const KernelTable& scalar_kernels();
// Null when the variant was not compiled in.
const KernelTable* avx2_kernels();
const KernelTable* neon_kernels();

bool backend_supported(Backend b);
Backend active_backend();
// Throws ConfigError if the backend is not compiled in or the CPU lacks it.
void set_backend(Backend b);
std::string_view backend_name(Backend b);
Backend parse_backend(std::string_view name);

const KernelTable& active();
const KernelTable& table(Backend b);

inline double dot(std::span<const double> a, std::span<const double> b) {
  return active().dot(a.data(), b.data(), a.size());
}
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  active().axpy(alpha, x.data(), y.data(), x.size());
}
inline void scale(double alpha, std::span<double> x) {
  active().scale(alpha, x.data(), x.size());
}
inline double sum(std::span<const double> x) { return active().sum(x.data(), x.size()); }
inline void relu(std::span<const double> in, std::span<double> out) {
  active().relu(in.data(), out.data(), in.size());
}
inline void relu_mask(std::span<const double> pre, std::span<double> g) {
  active().relu_mask(pre.data(), g.data(), pre.size());
}

}  // namespace fediptw::simd
