// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "fediptw/cohort_weights.hpp"
#include "fediptw/evaluation.hpp"
#include "fediptw/experiment.hpp"
#include "fediptw/federation.hpp"
#include "fediptw/io.hpp"
#include "support.hpp"

using namespace fediptw;
using namespace fediptw::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

// Mass-weighted feature sd of enumerated clients.
Vector massed_sd(const std::vector<Enumerated>& clients) {
  const std::size_t d = clients.front().data.dim();
  Vector mean(d, 0.0), var(d, 0.0);
  double n = 0.0;
  for (const auto& e : clients) {
    for (std::size_t i = 0; i < e.mass.size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) mean[j] += e.mass[i] * e.data.x.row(i)[j];
      n += e.mass[i];
    }
  }
  for (double& m : mean) m /= n;
  for (const auto& e : clients) {
    for (std::size_t i = 0; i < e.mass.size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        const double dx = e.data.x.row(i)[j] - mean[j];
        var[j] += e.mass[i] * dx * dx;
      }
    }
  }
  for (double& v : var) v = std::sqrt(v / n);
  return var;
}

Outcome local_decorrelation() {
  SyntheticSettings s;
  const auto cfg = make_synthetic_config(s);
  double worst_cov = 0.0, worst_sum = 0.0;
  for (std::size_t c = 0; c < s.n_clients; ++c) {
    const double n = static_cast<double>(s.n_per_client);
    const auto e = enumerate_generator_client(cfg, c, n);
    const auto w = massed_weights(e, e.propensity, mass_rate(e));
    double total = 0.0;
    for (double v : w) total += v;
    worst_sum = std::max(worst_sum, std::abs(total - n));
    const auto cov = weighted_cov_local(e.data, w, {});
    worst_cov = std::max({worst_cov, max_abs(cov.raw), max_abs(cov.per_feature)});
  }
  return {worst_cov <= 1e-10 && worst_sum <= 1e-10,
          "max|cov| " + num(worst_cov) + ", max|sum w - n| " + num(worst_sum)};
}

Outcome global_decorrelation() {
  const auto g = make_grid_population();
  std::vector<ClientDataset> data;
  std::vector<Vector> w;
  for (const auto& e : g.clients) {
    data.push_back(e.data);
    w.push_back(massed_weights(e, e.propensity, mass_rate(e)));
  }
  const auto cov = weighted_cov_global(data, w, g.analytic_hospital_weights(), {});
  const double worst = std::max(max_abs(cov.raw), max_abs(cov.per_feature));
  return {worst <= 1e-10, "max|cov| " + num(worst) + " over " + std::to_string(data.size()) + " clients"};
}

// Mean weighted loss of one network over a batch, by direct evaluation.
double batch_loss(const MlpParams& p, const Matrix& x, const Vector& y, const Vector& w, double offset,
                  OutputKind kind) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) s += w[i] * output_loss(kind, mlp_predict(p, x.row(i), offset, kind), y[i]);
  return s / static_cast<double>(x.rows());
}

Outcome gradients() {
  Rng rng(301);
  const double step = 1e-6, floor = 1e-5;
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    // Even trials: propensity net f(x, h); odd trials: outcome net g([x, t]).
    const bool propensity = trial % 2 == 0;
    const std::size_t d = 1 + rng.below(6);
    const std::size_t in = propensity ? d : d + 1;
    const std::size_t hidden = 1 + rng.below(10);
    const auto kind = propensity || rng.bernoulli(0.5) ? OutputKind::sigmoid : OutputKind::linear;
    const auto p = random_params(in, hidden, rng, 0.7);
    const double offset = propensity ? rng.normal() : 0.0;
    const std::size_t n = 1 + rng.below(5);
    Matrix x;
    Vector y, w;
    std::vector<double> row(in);
    while (x.rows() < n) {
      for (double& v : row) v = rng.normal();
      if (!propensity) row.back() = double(rng.below(2));
      // Keep every pre-activation clear of the relu kink.
      const auto f = mlp_forward(p, row, offset, kind);
      if (std::any_of(f.cache.pre.begin(), f.cache.pre.end(), [](double v) { return std::abs(v) < 1e-3; })) continue;
      x.append_row(row);
      y.push_back(kind == OutputKind::sigmoid ? double(rng.below(2)) : rng.normal());
      w.push_back(rng.uniform(0.2, 3.0));
    }
    const auto g = weighted_loss_gradient(p, x, y, w, offset, kind);
    auto rel = [&](double fd, double an) { return std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), floor}); };
    for (std::size_t k = 0; k < p.size(); ++k) {
      MlpParams a = p, b = p;
      a.flat_mut()[k] += step;
      b.flat_mut()[k] -= step;
      const double fd = (batch_loss(a, x, y, w, offset, kind) - batch_loss(b, x, y, w, offset, kind)) / (2 * step);
      worst = std::max(worst, rel(fd, g.params.flat()[k]));
    }
    if (propensity) {
      const double fd =
          (batch_loss(p, x, y, w, offset + step, kind) - batch_loss(p, x, y, w, offset - step, kind)) / (2 * step);
      worst = std::max(worst, rel(fd, g.bias_offset));
    }
  }
  return {worst < 1e-4, "max relative error " + num(worst)};
}

Outcome fedavg_equivalence() {
  Rng rng(401);
  double worst = 0.0;
  for (int setup = 0; setup < 20; ++setup) {
    const std::size_t d = 1 + rng.below(5), hidden = 2 + rng.below(6), clients = 2 + rng.below(4);
    const auto kind = setup % 2 ? OutputKind::sigmoid : OutputKind::linear;
    std::vector<std::unique_ptr<WeightedSgdTrainer>> trainers;
    std::vector<LocalTrainer*> ptrs;
    Matrix px;
    Vector py, pw;
    std::vector<double> row(d);
    for (std::size_t c = 0; c < clients; ++c) {
      const std::size_t n = 3 + rng.below(30);
      Matrix x;
      Vector y, w;
      for (std::size_t i = 0; i < n; ++i) {
        for (double& v : row) v = rng.normal();
        x.append_row(row);
        px.append_row(row);
        y.push_back(kind == OutputKind::sigmoid ? double(rng.below(2)) : rng.normal());
        w.push_back(rng.uniform(0.1, 4.0));
      }
      py.insert(py.end(), y.begin(), y.end());
      pw.insert(pw.end(), w.begin(), w.end());
      trainers.push_back(std::make_unique<WeightedSgdTrainer>(c, x, y, w, kind, 7 + c));
      ptrs.push_back(trainers.back().get());
    }
    const auto init = random_params(d, hidden, rng, 0.5);
    FederationConfig cfg;
    cfg.rounds = 4;
    cfg.local_epochs = 1;
    cfg.batch_size = 1 << 20;
    cfg.learning_rate = 0.05;
    cfg.mode = AggregationMode::by_size;
    const auto fed = run_rounds(init, ptrs, cfg);
    MlpParams central = init;
    for (std::size_t r = 0; r < cfg.rounds; ++r) {
      central = sgd_step(central, weighted_loss_gradient(central, px, py, pw, 0.0, kind).params, cfg.learning_rate);
    }
    for (std::size_t k = 0; k < central.size(); ++k) {
      worst = std::max(worst, std::abs(central.flat()[k] - fed.final_params.flat()[k]));
    }
  }
  return {worst <= 1e-12, "max |fed - central| " + num(worst) + " over 20 setups"};
}

Outcome gpr_correctness() {
  const std::vector<double> xs{-0.8, 0.3, 1.9}, ys{0.25, 0.6, 0.4};
  const GprHyper hyper{0.9, 0.03, 1e-4, 0.4};
  const GprModel gp({{xs[0]}, {xs[1]}, {xs[2]}}, Vector(ys), hyper);
  const DenseGp oracle{xs, ys, hyper.lengthscale, hyper.signal_variance, hyper.noise_variance, hyper.prior_mean};
  double worst = 0.0;
  for (double q : {-2.5, -0.8, 0.0, 1.2, 4.0}) {
    const auto [m, v] = oracle.at(q);
    const auto p = gp.posterior(std::vector<double>{q});
    worst = std::max({worst, std::abs(p.mean - m), std::abs(p.sd * p.sd - v)});
  }
  return {worst <= 1e-8, "max |posterior - dense solve| " + num(worst)};
}

Outcome metric_oracles() {
  Rng rng(601);
  bool ok = true;
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = 2 + rng.below(9);
    Vector e(n), h(n), s(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      e[i] = rng.normal();
      h[i] = rng.normal();
      s[i] = double(rng.below(4)) / 4.0;
      y[i] = double(rng.below(2));
    }
    y[0] = 1.0;
    y[n - 1] = 0.0;
    double sq = 0.0, me = 0.0, mh = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      sq += (h[i] - e[i]) * (h[i] - e[i]);
      me += e[i];
      mh += h[i];
    }
    ok = ok && pehe(e, h).pehe == sq / double(n);
    ok = ok && mae_ate(e, h) == std::abs(me / double(n) - mh / double(n));
    // AUROC by pair enumeration.
    double num_pairs = 0.0, den = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (y[i] == 1.0 && y[j] == 0.0) {
          den += 1.0;
          num_pairs += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
        }
      }
    }
    // AUPRC as average precision over distinct thresholds.
    Vector th = s;
    std::sort(th.begin(), th.end(), std::greater<>());
    th.erase(std::unique(th.begin(), th.end()), th.end());
    double pos = 0.0;
    for (double v : y) pos += v;
    double ap = 0.0, prev = 0.0;
    for (double c : th) {
      double tp = 0.0, k = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (s[i] >= c) {
          k += 1.0;
          tp += y[i];
        }
      }
      ap += (tp - prev) / pos * (tp / k);
      prev = tp;
    }
    const auto r = auroc_auprc(s, y);
    ok = ok && r.auroc == num_pairs / den && r.auprc == ap;
  }

  // Fixed five-record instance for the influence-function estimate.
  const std::vector<IfPeheRecord> recs{{1.0, 2.1, 0.8, 1.0, 2.0, 0.6},
                                       {0.0, 0.4, 1.2, 0.5, 1.4, 0.3},
                                       {1.0, 1.7, 0.2, 0.9, 1.1, 0.85},
                                       {0.0, -0.3, -0.5, 0.0, -0.2, 0.5},
                                       {1.0, 0.9, 1.0, 0.1, 1.3, 0.2}};
  double sum = 0.0;
  for (const auto& r : recs) {
    const double e = r.mu1 - r.mu0, pi = r.pi;
    const double z = pi * (1.0 - pi), w = r.t - pi, b = 2.0 * r.t * (r.t - pi) / z;
    const double l =
        (1.0 - b) * r.e_hat * r.e_hat + b * r.y * (e - r.e_hat) - w * (e - r.e_hat) * (e - r.e_hat) + r.e_hat * r.e_hat;
    sum += (r.e_hat - e) * (r.e_hat - e) + l;
  }
  const double got = if_pehe(recs, 0.01).sum;
  const double diff = std::abs(got - sum);
  return {ok && diff <= 1e-10,
          std::string(ok ? "exact" : "MISMATCH") + " on 200 small instances, IF-PEHE diff " + num(diff)};
}

Outcome covariance_pattern() {
  const auto g = make_grid_population();
  const auto pooled = pooled_propensity(g.clients);
  const double pooled_rate = pooled_mass_rate(g.clients);
  const Vector wc = g.analytic_hospital_weights();
  const Vector sd = massed_sd(g.clients);
  std::vector<ClientDataset> data;
  for (const auto& e : g.clients) data.push_back(e.data);

  struct Summary {
    double local = 0.0, global = 0.0;
  };
  auto summarize_weights = [&](const std::vector<Vector>& w, std::span<const double> hospital) {
    Summary s;
    for (std::size_t c = 0; c < data.size(); ++c) s.local += weighted_cov_local(data[c], w[c], sd).summary;
    s.local /= static_cast<double>(data.size());
    s.global = weighted_cov_global(data, w, hospital, sd).summary;
    return s;
  };
  std::vector<Vector> patient, global_only;
  for (std::size_t c = 0; c < g.clients.size(); ++c) {
    const auto& e = g.clients[c];
    patient.push_back(massed_weights(e, e.propensity, mass_rate(e)));
    global_only.push_back(massed_weights(e, pooled[c], pooled_rate));
  }
  const Summary p = summarize_weights(patient, {});
  const Summary q = summarize_weights(global_only, {});
  const Summary f = summarize_weights(patient, wc);
  // "much smaller" is read as at most a tenth; both sides of the Fed-IPTW
  // check get a 1e-12 floor since the single-level minima are exact zeros.
  const bool a = p.local <= 0.1 * p.global;
  const bool b = q.global <= 0.1 * q.local;
  const bool c = f.local <= std::max(2.0 * std::min(p.local, q.local), 1e-12) &&
                 f.global <= std::max(2.0 * std::min(p.global, q.global), 1e-12);
  return {a && b && c, "patient-only " + num(p.local) + "/" + num(p.global) + ", global-only " + num(q.local) + "/" +
                           num(q.global) + ", combined " + num(f.local) + "/" + num(f.global) + " (local/global)"};
}

Outcome method_ordering(const fs::path& scratch) {
  ExperimentConfig cfg;
  cfg.methods = {Method::fed_iptw, Method::fed_iptw_noh, Method::iptw_l, Method::iptw_g};
  cfg.n_replications = 10;
  cfg.n_repeats = 10;
  cfg.if_pehe = false;
  cfg.jobs = std::max(1u, std::thread::hardware_concurrency());
  const auto units = run_experiment({cfg, scratch / "desk", RunStage::all});
  auto median_of = [&](Method m) {
    Vector v;
    for (const auto& u : units) {
      if (u.method == m) v.push_back(u.metrics->rpehe);
    }
    return summarize(v).median;
  };
  const double fed = median_of(Method::fed_iptw), noh = median_of(Method::fed_iptw_noh);
  const double loc = median_of(Method::iptw_l), glob = median_of(Method::iptw_g);
  const bool ok = fed < noh && noh < std::min(loc, glob) && fed <= 0.9 * noh;
  return {ok, "median sqrt(PEHE): fed-iptw " + num(fed) + ", fed-iptw-noh " + num(noh) + ", iptw-l " + num(loc) +
                  ", iptw-g " + num(glob)};
}

Outcome determinism(const fs::path& scratch) {
  const char* cli = std::getenv("FEDIPTW_CLI_PATH");
#ifdef FEDIPTW_CLI_PATH
  if (cli == nullptr) cli = FEDIPTW_CLI_PATH;
#endif
  if (cli == nullptr) return {false, "FEDIPTW_CLI_PATH is not set"};
  const fs::path dir = scratch / "determinism";
  fs::create_directories(dir);
  const nlohmann::json cfg = nlohmann::json::parse(R"({
    "seed": 11,
    "methods": ["fed-iptw", "iptw-l", "global"],
    "dataset": {"n_replications": 2, "synthetic": {"d_x": 6, "n_per_client": 80, "n_clients": 4}},
    "protocol": {"n_folds": 10, "n_repeats": 3},
    "propensity": {"rounds": 4, "hidden": 8, "learning_rate": 0.01},
    "factual": {"rounds": 4, "hidden": 8, "learning_rate": 0.01}
  })");
  write_file(dir / "config.json", cfg.dump(2));
  auto run = [&](const fs::path& config, const fs::path& out, int jobs) {
    const std::string cmd = std::string("\"") + cli + "\" run --config \"" + config.string() + "\" --out \"" +
                            out.string() + "\" --jobs " + std::to_string(jobs) + " > /dev/null 2>&1";
    return std::system(cmd.c_str()) == 0;
  };
  if (!run(dir / "config.json", dir / "a", 1)) return {false, "first run failed"};
  // The second run is driven by the first run's manifest.
  const auto manifest = nlohmann::json::parse(read_file(dir / "a" / "manifest.json"));
  write_file(dir / "manifest_config.json", manifest.at("config").dump(2));
  if (!run(dir / "manifest_config.json", dir / "b", 4)) return {false, "second run failed"};
  std::size_t compared = 0;
  for (const char* m : {"fed-iptw", "iptw-l", "global"}) {
    for (const char* f : {"metrics.csv", "summary.csv"}) {
      if (read_file(dir / "a" / m / f) != read_file(dir / "b" / m / f)) {
        return {false, std::string(m) + "/" + f + " differs between --jobs 1 and --jobs 4"};
      }
      ++compared;
    }
  }
  return {true, std::to_string(compared) + " metric CSVs byte-identical across --jobs 1 and 4"};
}

}  // namespace

int main() {
  const fs::path scratch = fs::temp_directory_path() / "fediptw_acceptance";
  fs::remove_all(scratch);
  fs::create_directories(scratch);

  struct Criterion {
    int id;
    const char* name;
    double limit_s;  // 0 = no runtime bound
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "oracle local decorrelation", 1.0, local_decorrelation},
      {2, "oracle global decorrelation", 1.0, global_decorrelation},
      {3, "gradient correctness", 10.0, gradients},
      {4, "fedavg equivalence", 0.0, fedavg_equivalence},
      {5, "gpr correctness", 0.0, gpr_correctness},
      {6, "metric oracles", 0.0, metric_oracles},
      {7, "method ordering at desk scale", 900.0, [&] { return method_ordering(scratch); }},
      {8, "covariance pattern", 0.0, covariance_pattern},
      {9, "determinism across --jobs", 0.0, [&] { return determinism(scratch); }},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.limit_s > 0.0 && secs >= c.limit_s) {
      o.pass = false;
      o.detail += "; over the " + num(c.limit_s) + " s budget";
    }
    std::printf("[%s] %d %s: %s (%.2f s)\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  fs::remove_all(scratch);
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
