#include <atomic>
#include <cstdlib>
#include <string>

#include "fediptw/error.hpp"
#include "fediptw/simd/kernels.hpp"

namespace fediptw::simd {

#ifndef FEDIPTW_HAVE_AVX2
const KernelTable* avx2_kernels() { return nullptr; }
#endif
#ifndef FEDIPTW_HAVE_NEON
const KernelTable* neon_kernels() { return nullptr; }
#endif

namespace {

bool cpu_has_avx2() {
#if defined(FEDIPTW_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Backend detect() {
  if (const char* env = std::getenv("FEDIPTW_SIMD"); env != nullptr && *env != '\0') {
    const std::string_view name(env);
    if (name != "auto") {
      const Backend requested = parse_backend(name);
      if (!backend_supported(requested)) {
        throw ConfigError("FEDIPTW_SIMD=" + std::string(name) + " is not supported on this CPU/build");
      }
      return requested;
    }
  }
  if (backend_supported(Backend::avx2)) return Backend::avx2;
  if (backend_supported(Backend::neon)) return Backend::neon;
  return Backend::scalar;
}

std::atomic<Backend>& current() {
  static std::atomic<Backend> backend{detect()};
  return backend;
}

std::atomic<const KernelTable*>& current_table() {
  static std::atomic<const KernelTable*> t{&table(current().load())};
  return t;
}

}  // namespace

bool backend_supported(Backend b) {
  switch (b) {
    case Backend::scalar:
      return true;
    case Backend::avx2:
      return avx2_kernels() != nullptr && cpu_has_avx2();
    case Backend::neon:
      return neon_kernels() != nullptr;
  }
  return false;
}

Backend active_backend() { return current().load(std::memory_order_relaxed); }

void set_backend(Backend b) {
  if (!backend_supported(b)) {
    throw ConfigError("SIMD backend '" + std::string(backend_name(b)) + "' is not available");
  }
  current().store(b, std::memory_order_relaxed);
  current_table().store(&table(b), std::memory_order_relaxed);
}

std::string_view backend_name(Backend b) {
  switch (b) {
    case Backend::scalar:
      return "scalar";
    case Backend::avx2:
      return "avx2";
    case Backend::neon:
      return "neon";
  }
  return "unknown";
}

Backend parse_backend(std::string_view name) {
  if (name == "scalar") return Backend::scalar;
  if (name == "avx2") return Backend::avx2;
  if (name == "neon") return Backend::neon;
  throw ConfigError("unknown SIMD backend '" + std::string(name) + "'");
}

const KernelTable& table(Backend b) {
  switch (b) {
    case Backend::avx2:
      if (const auto* t = avx2_kernels()) return *t;
      break;
    case Backend::neon:
      if (const auto* t = neon_kernels()) return *t;
      break;
    case Backend::scalar:
      return scalar_kernels();
  }
  throw ConfigError("SIMD backend '" + std::string(backend_name(b)) + "' is not compiled in");
}

const KernelTable& active() { return *current_table().load(std::memory_order_relaxed); }

}  // namespace fediptw::simd
