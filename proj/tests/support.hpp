#pragma once

// Shared fixtures: exactly enumerated populations and small random datasets.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "fediptw/datagen.hpp"
#include "fediptw/mlp.hpp"
#include "fediptw/propensity.hpp"
#include "fediptw/rng.hpp"

namespace fediptw::testing {

// A population given as weighted atoms: each record carries a probability
// mass (in units of records) instead of being sampled.
struct Enumerated {
  ClientDataset data;
  Vector mass;        // record multiplicity; sums to n
  Vector propensity;  // oracle P(t = 1 | record) for the client
};

// The generator's finite (z, t) support for one client: x is replaced by
// E[x | z], which leaves every first and second moment with t unchanged
// because x and t are independent given z.
inline Enumerated enumerate_generator_client(const SyntheticConfig& cfg, std::size_t client, double n) {
  Enumerated e;
  e.data.client_id = client;
  const auto rho = cfg.rho_normalized();
  std::vector<double> x(cfg.settings.d_x);
  for (std::size_t z = 0; z < kCategories; ++z) {
    const double p = true_propensity(cfg, client, z);
    for (std::size_t j = 0; j < x.size(); ++j) x[j] = covariate_probability(cfg, j, z);
    for (int t = 0; t <= 1; ++t) {
      e.data.x.append_row(x);
      e.data.t.push_back(t);
      e.data.y.push_back(0.0);
      e.mass.push_back(n * rho[z] * (t == 1 ? p : 1.0 - p));
      e.propensity.push_back(p);
    }
  }
  return e;
}

inline double mass_rate(const Enumerated& e) {
  double n = 0.0, s = 0.0;
  for (std::size_t i = 0; i < e.mass.size(); ++i) {
    n += e.mass[i];
    s += e.mass[i] * e.data.t[i];
  }
  return s / n;
}

// Patient weights of an enumerated client times the atom masses.
inline Vector massed_weights(const Enumerated& e, std::span<const double> propensity, double rate) {
  Vector w(e.mass.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = e.mass[i] * patient_weight(propensity[i], e.data.t[i], rate, 1e-9);
  return w;
}

// Multi-client population whose client-level pairs (E[X_c], E[T_c]) live
// on a 2 x 2 grid with known counts, so P(T') and P(T' | X') are exact.
// Clients share the covariate map z -> x but differ in covariate profile
// P_i(z) (row i of the grid) and treatment strategy (column j fixes the
// client treatment rate t_j).
struct GridPopulation {
  std::vector<Enumerated> clients;
  std::vector<std::size_t> profile;  // i per client
  std::vector<std::size_t> rate_level;  // j per client
  std::array<std::array<std::size_t, 2>, 2> counts{};
  std::array<double, 2> rates{};
  double n_per_client = 0.0;

  // w_c = P(T' = t_j) / P(T' = t_j | X' = x_i) from the grid counts.
  Vector analytic_hospital_weights() const {
    double total = 0.0;
    std::array<double, 2> row{}, col{};
    for (std::size_t i = 0; i < 2; ++i) {
      for (std::size_t j = 0; j < 2; ++j) {
        row[i] += static_cast<double>(counts[i][j]);
        col[j] += static_cast<double>(counts[i][j]);
        total += static_cast<double>(counts[i][j]);
      }
    }
    Vector w;
    for (std::size_t c = 0; c < clients.size(); ++c) {
      const std::size_t i = profile[c], j = rate_level[c];
      w.push_back((col[j] / total) / (static_cast<double>(counts[i][j]) / row[i]));
    }
    return w;
  }
};

inline GridPopulation make_grid_population() {
  GridPopulation g;
  g.counts = {{{3, 1}, {1, 2}}};
  g.rates = {0.3, 0.6};
  g.n_per_client = 100.0;
  const std::array<std::array<double, 3>, 2> profiles{{{0.6, 0.3, 0.1}, {0.2, 0.3, 0.5}}};
  const std::array<double, 3> b{-1.0, 0.0, 1.0};
  const std::array<std::array<double, 2>, 3> xmap{{{0.0, 0.0}, {1.0, 0.0}, {0.0, 1.0}}};
  auto rate_for = [&](std::size_t i, double delta) {
    double r = 0.0;
    for (std::size_t z = 0; z < 3; ++z) r += profiles[i][z] * sigmoid(b[z] + delta);
    return r;
  };
  std::size_t id = 0;
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      // Strategy shift that hits the target rate for this profile.
      double lo = -20.0, hi = 20.0;
      for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (rate_for(i, mid) < g.rates[j] ? lo : hi) = mid;
      }
      const double delta = 0.5 * (lo + hi);
      for (std::size_t k = 0; k < g.counts[i][j]; ++k) {
        Enumerated e;
        e.data.client_id = id++;
        for (std::size_t z = 0; z < 3; ++z) {
          const double p = sigmoid(b[z] + delta);
          for (int t = 0; t <= 1; ++t) {
            e.data.x.append_row(xmap[z]);
            e.data.t.push_back(t);
            e.data.y.push_back(0.0);
            e.mass.push_back(g.n_per_client * profiles[i][z] * (t == 1 ? p : 1.0 - p));
            e.propensity.push_back(p);
          }
        }
        g.clients.push_back(std::move(e));
        g.profile.push_back(i);
        g.rate_level.push_back(j);
      }
    }
  }
  return g;
}

// Oracle P(t = 1 | record) of the pooled population, per client record.
inline std::vector<Vector> pooled_propensity(const std::vector<Enumerated>& clients) {
  // Records with equal covariates share the pooled propensity.
  std::vector<std::pair<Vector, std::array<double, 2>>> cells;
  auto cell_of = [&](std::span<const double> x) -> std::array<double, 2>& {
    for (auto& [key, m] : cells) {
      if (std::equal(key.begin(), key.end(), x.begin(), x.end())) return m;
    }
    cells.push_back({Vector(x.begin(), x.end()), {0.0, 0.0}});
    return cells.back().second;
  };
  for (const auto& e : clients) {
    for (std::size_t i = 0; i < e.mass.size(); ++i) cell_of(e.data.x.row(i))[e.data.t[i] == 1.0 ? 1 : 0] += e.mass[i];
  }
  std::vector<Vector> out;
  for (const auto& e : clients) {
    Vector p;
    for (std::size_t i = 0; i < e.mass.size(); ++i) {
      const auto& m = cell_of(e.data.x.row(i));
      p.push_back(m[1] / (m[0] + m[1]));
    }
    out.push_back(std::move(p));
  }
  return out;
}

inline double pooled_mass_rate(const std::vector<Enumerated>& clients) {
  double n = 0.0, s = 0.0;
  for (const auto& e : clients) {
    for (std::size_t i = 0; i < e.mass.size(); ++i) {
      n += e.mass[i];
      s += e.mass[i] * e.data.t[i];
    }
  }
  return s / n;
}

inline ClientDataset random_client(std::size_t id, std::size_t n, std::size_t d, Rng& rng, bool binary_y = false) {
  ClientDataset c;
  c.client_id = id;
  std::vector<double> x(d);
  for (std::size_t i = 0; i < n; ++i) {
    for (double& v : x) v = rng.normal();
    c.x.append_row(x);
    const double t = rng.bernoulli(sigmoid(x[0])) ? 1.0 : 0.0;
    c.t.push_back(t);
    const double mu = x[0] + 0.5 * t;
    c.y.push_back(binary_y ? (rng.bernoulli(sigmoid(mu)) ? 1.0 : 0.0) : mu + 0.1 * rng.normal());
  }
  if (!c.has_both_classes()) {
    c.t[0] = 1.0 - c.t[0];
  }
  return c;
}

inline MlpParams random_params(std::size_t in, std::size_t hidden, Rng& rng, double scale = 1.0) {
  MlpParams p(in, hidden);
  for (double& v : p.flat_mut()) v = scale * rng.normal();
  return p;
}

// Dense Gaussian elimination with partial pivoting, solving A z = b.
inline std::vector<double> solve_dense(std::vector<std::vector<double>> a, std::vector<double> b) {
  const std::size_t n = b.size();
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    for (std::size_t i = k + 1; i < n; ++i) {
      if (std::abs(a[i][k]) > std::abs(a[piv][k])) piv = i;
    }
    std::swap(a[k], a[piv]);
    std::swap(b[k], b[piv]);
    for (std::size_t i = k + 1; i < n; ++i) {
      const double f = a[i][k] / a[k][k];
      for (std::size_t j = k; j < n; ++j) a[i][j] -= f * a[k][j];
      b[i] -= f * b[k];
    }
  }
  std::vector<double> z(n);
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t j = i + 1; j < n; ++j) s -= a[i][j] * z[j];
    z[i] = s / a[i][i];
  }
  return z;
}

// 1-D RBF GP posterior (mean, predictive variance) by explicit solves.
struct DenseGp {
  std::vector<double> x, y;
  double ell, s2, noise, m;
  double k(double a, double b) const { return s2 * std::exp(-0.5 * (a - b) * (a - b) / (ell * ell)); }
  std::pair<double, double> at(double q) const {
    const std::size_t n = x.size();
    std::vector<std::vector<double>> a(n, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) a[i][j] = k(x[i], x[j]) + (i == j ? noise : 0.0);
    }
    std::vector<double> ks(n), yc(n);
    for (std::size_t i = 0; i < n; ++i) {
      ks[i] = k(x[i], q);
      yc[i] = y[i] - m;
    }
    const auto alpha = solve_dense(a, yc);
    const auto v = solve_dense(a, ks);
    double mean = m, var = s2 + noise;
    for (std::size_t i = 0; i < n; ++i) {
      mean += ks[i] * alpha[i];
      var -= ks[i] * v[i];
    }
    return {mean, var};
  }
};

}  // namespace fediptw::testing
