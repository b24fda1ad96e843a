#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "fediptw/datagen.hpp"
#include "fediptw/error.hpp"
#include "fediptw/io.hpp"
#include "fediptw/mlp.hpp"

using namespace fediptw;
namespace fs = std::filesystem;

namespace {

SyntheticConfig small_config(std::size_t clients = 3, std::size_t n = 200) {
  SyntheticSettings s;
  s.n_clients = clients;
  s.n_per_client = n;
  s.d_x = 6;
  s.seed = 99;
  return make_synthetic_config(s);
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("fediptw_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("generated datasets have the configured shape") {
  const auto cfg = small_config();
  const auto clients = generate_synthetic(cfg);
  REQUIRE(clients.size() == 3);
  for (std::size_t c = 0; c < clients.size(); ++c) {
    CHECK(clients[c].client_id == c);
    CHECK(clients[c].size() == 200);
    CHECK(clients[c].dim() == 6);
    CHECK(clients[c].has_potential_outcomes());
    for (std::size_t i = 0; i < clients[c].size(); ++i) {
      CHECK(clients[c].y[i] == (clients[c].t[i] == 1.0 ? (*clients[c].y1)[i] : (*clients[c].y0)[i]));
      for (double v : clients[c].x.row(i)) CHECK((v == 0.0 || v == 1.0));
    }
  }
}

TEST_CASE("generation is deterministic per seed and replication") {
  const auto cfg = small_config();
  const auto a = generate_synthetic(cfg, 2);
  const auto b = generate_synthetic(cfg, 2);
  const auto c = generate_synthetic(cfg, 3);
  CHECK(a[1].x == b[1].x);
  CHECK(a[1].y == b[1].y);
  CHECK(a[1].y != c[1].y);
  // Clients can be drawn independently.
  const auto one = generate_client(cfg, 1, 2);
  CHECK(one.y == a[1].y);
}

TEST_CASE("noise-free limit gives outcomes equal to their expectation") {
  SyntheticSettings s;
  s.n_clients = 2;
  s.n_per_client = 50;
  s.d_x = 3;
  s.sigma0 = s.sigma1 = 0.0;
  const auto cfg = make_synthetic_config(s);
  const auto c = generate_client(cfg, 1);
  for (std::size_t i = 0; i < c.size(); ++i) {
    CHECK((*c.y0)[i] == expected_y0(cfg, 1, c.z[i]));
    CHECK((*c.y1)[i] == expected_y1(cfg, 1, c.z[i]));
  }
}

TEST_CASE("empirical treatment rate per category matches the true propensity") {
  SyntheticSettings s;
  s.n_clients = 2;
  s.n_per_client = 40000;
  s.d_x = 2;
  const auto cfg = make_synthetic_config(s);
  const auto c = generate_client(cfg, 0);
  std::array<double, kCategories> n{}, treated{};
  for (std::size_t i = 0; i < c.size(); ++i) {
    n[c.z[i]] += 1;
    treated[c.z[i]] += c.t[i];
  }
  for (std::size_t z = 0; z < kCategories; ++z) {
    const double p = true_propensity(cfg, 0, z);
    CHECK(std::abs(treated[z] / n[z] - p) < 4.0 * std::sqrt(p * (1 - p) / n[z]) + 1e-3);
  }
  const auto rho = cfg.rho_normalized();
  CHECK(std::abs(n[2] / 40000.0 - rho[2]) < 0.01);
}

TEST_CASE("category propensities follow the logistic form") {
  const auto cfg = small_config();
  for (std::size_t z = 0; z < kCategories; ++z) {
    const double lin = cfg.truth.b0 + cfg.truth.b1[z] + cfg.truth.delta(2, z);
    CHECK(true_propensity(cfg, 2, z) == doctest::Approx(sigmoid(lin)).epsilon(1e-15));
    CHECK(expected_y1(cfg, 2, z) ==
          doctest::Approx(softplus(cfg.settings.d0 + cfg.truth.d1[z] + cfg.truth.delta(2, z))).epsilon(1e-15));
  }
}

TEST_CASE("csv round trip is exact and byte-stable") {
  const auto dir = temp_dir("csv");
  const auto clients = generate_synthetic(small_config(2, 30));
  write_csv(dir / "a.csv", clients);
  const auto back = load_csv(dir / "a.csv");
  REQUIRE(back.size() == 2);
  CHECK(back[1].x == clients[1].x);
  CHECK(back[1].y == clients[1].y);
  CHECK(*back[1].y1 == *clients[1].y1);
  write_csv(dir / "b.csv", back);
  CHECK(read_file(dir / "a.csv") == read_file(dir / "b.csv"));
}

TEST_CASE("csv ingestion reports the offending cell") {
  const auto dir = temp_dir("csv_bad");
  write_file(dir / "nan.csv", "client_id,x_0,t,y\n0,1,1,2.5\n0,nan,0,1\n");
  try {
    load_csv(dir / "nan.csv");
    FAIL("expected IngestError");
  } catch (const IngestError& e) {
    CHECK(std::string(e.what()).find("x_0") != std::string::npos);
  }
  write_file(dir / "t.csv", "client_id,x_0,t,y\n0,1,2,2.5\n");
  CHECK_THROWS_AS(load_csv(dir / "t.csv"), IngestError);
  write_file(dir / "cols.csv", "client_id,x_0,y,t\n0,1,2,1\n");
  CHECK_THROWS_AS(load_csv(dir / "cols.csv"), IngestError);
  write_file(dir / "mismatch.csv", "client_id,x_0,t,y,y0,y1\n0,1,1,2.5,0,3\n");
  CHECK_THROWS_AS(load_csv(dir / "mismatch.csv"), IngestError);
  CHECK_THROWS_AS(load_csv(dir / "missing.csv"), IngestError);
  write_file(dir / "groups.csv", "client_id,x_0,t,y\n3,1,1,2\n1,0,0,1\n3,0,0,5\n");
  const auto g = load_csv(dir / "groups.csv");
  REQUIRE(g.size() == 2);
  CHECK(g[0].client_id == 1);
  CHECK(g[1].y == Vector{2, 5});
}

TEST_CASE("ground truth sidecar round-trips") {
  const auto dir = temp_dir("gt");
  const auto cfg = small_config();
  write_ground_truth(dir / "gt.json", cfg);
  const auto back = read_ground_truth(dir / "gt.json");
  CHECK(back.truth.a1 == cfg.truth.a1);
  CHECK(back.truth.delta == cfg.truth.delta);
  CHECK(back.truth.b1 == cfg.truth.b1);
  CHECK(back.settings.seed == cfg.settings.seed);
}

TEST_CASE("fold split is a 7/1/2 partition of every client") {
  const auto clients = generate_synthetic(small_config(3, 1000));
  const auto a = split_folds(clients, 10, 5);
  CHECK(test_fold_count(10) == 2);
  CHECK(validation_fold_count(10) == 1);
  for (std::size_t k = 0; k < 10; ++k) {
    const auto split = select_folds(a, k);
    for (std::size_t c = 0; c < clients.size(); ++c) {
      CHECK(split[c].train.size() == 700);
      CHECK(split[c].validation.size() == 100);
      CHECK(split[c].test.size() == 200);
      std::set<std::size_t> all(split[c].train.begin(), split[c].train.end());
      all.insert(split[c].validation.begin(), split[c].validation.end());
      all.insert(split[c].test.begin(), split[c].test.end());
      CHECK(all.size() == 1000);
    }
  }
  CHECK_THROWS_AS(split_folds(clients, 2, 5), ConfigError);
}

TEST_CASE("a single-client population is accepted") {
  SyntheticSettings s;
  s.n_clients = 1;
  s.n_per_client = 20;
  s.d_x = 2;
  const auto clients = generate_synthetic(make_synthetic_config(s));
  CHECK(clients.size() == 1);
}

TEST_CASE("invalid settings are rejected") {
  SyntheticSettings s;
  s.rho = {0, 0, 0, 0, 0};
  CHECK_THROWS_AS(make_synthetic_config(s), ConfigError);
  s = {};
  s.sigma0 = -1;
  CHECK_THROWS_AS(make_synthetic_config(s), ConfigError);
}
