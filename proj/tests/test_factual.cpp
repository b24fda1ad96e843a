#include <doctest.h>

#include <cmath>
#include <vector>

#include "fediptw/error.hpp"
#include "fediptw/factual.hpp"
#include "support.hpp"

using namespace fediptw;
using namespace fediptw::testing;

namespace {

FederationConfig small_fed(std::size_t rounds = 3) {
  FederationConfig f;
  f.rounds = rounds;
  f.batch_size = 4;
  f.learning_rate = 0.05;
  return f;
}

}  // namespace

TEST_CASE("predicted effect is the difference of two evaluations") {
  Rng rng(11);
  FactualModel m{random_params(4, 6, rng, 0.5), OutputKind::linear, 0, {}};
  Matrix x;
  for (int i = 0; i < 7; ++i) x.append_row(std::vector<double>{rng.normal(), rng.normal(), rng.normal()});
  const auto ite = predict_ite(m, x);
  double ate = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    std::vector<double> a(x.row(i).begin(), x.row(i).end());
    a.push_back(1.0);
    const double y1 = mlp_predict(m.phi, a, 0.0, OutputKind::linear);
    a.back() = 0.0;
    const double y0 = mlp_predict(m.phi, a, 0.0, OutputKind::linear);
    CHECK(ite.e_hat[i] == doctest::Approx(y1 - y0).epsilon(1e-14));
    CHECK(predict_outcome(m, x.row(i), 1.0) - predict_outcome(m, x.row(i), 0.0) ==
          doctest::Approx(y1 - y0).epsilon(1e-14));
    ate += y1 - y0;
  }
  CHECK(ite.ate == doctest::Approx(ate / 7.0).epsilon(1e-13));
}

TEST_CASE("a network blind to t predicts no effect") {
  Rng rng(12);
  MlpParams p = random_params(3, 5, rng);
  for (std::size_t j = 0; j < p.hidden(); ++j) p.w1_row_mut(j)[2] = 0.0;
  const FactualModel m{p, OutputKind::sigmoid, 0, {}};
  Matrix x;
  for (int i = 0; i < 5; ++i) x.append_row(std::vector<double>{rng.normal(), rng.normal()});
  for (double e : predict_ite(m, x).e_hat) CHECK(e == 0.0);
}

TEST_CASE("an always-active unit on t gives a constant effect") {
  const double beta = -0.75;
  MlpParams p(3, 2);
  p.w1_row_mut(0)[2] = 1.0;
  p.b1_mut()[0] = 1.0;
  p.w2_mut()[0] = beta;
  const FactualModel m{p, OutputKind::linear, 0, {}};
  Matrix x;
  Rng rng(13);
  for (int i = 0; i < 6; ++i) x.append_row(std::vector<double>{rng.normal(), rng.normal()});
  for (double e : predict_ite(m, x).e_hat) CHECK(e == doctest::Approx(beta).epsilon(1e-15));
}

TEST_CASE("zero weights leave the model unchanged") {
  Rng rng(14);
  const auto c = random_client(0, 20, 3, rng);
  const MlpParams init = random_params(4, 5, rng, 0.3);
  const auto out = local_weighted_train(init, c, Vector(20, 0.0), small_fed(), OutputKind::linear, 1, 3);
  CHECK(out == init);
}

TEST_CASE("unit weights match unweighted training") {
  Rng rng(15);
  const auto c = random_client(0, 17, 3, rng);
  const MlpParams init = random_params(4, 5, rng, 0.3);
  const auto weighted = local_weighted_train(init, c, Vector(17, 1.0), small_fed(), OutputKind::linear, 9, 2);
  WeightedSgdTrainer plain(0, factual_inputs(c), c.y, {}, OutputKind::linear, 9);
  MlpParams p = init;
  plain.run_epochs(p, 2, 4, 0.05);
  CHECK(weighted == p);
}

TEST_CASE("an integer weight acts like record duplication under a full-batch step") {
  Rng rng(16);
  const auto c = random_client(0, 12, 2, rng);
  Vector w(12, 1.0);
  w[0] = 2.0;
  w[1] = 0.0;
  std::vector<std::size_t> rows{0, 0};
  for (std::size_t i = 2; i < 12; ++i) rows.push_back(i);
  const auto dup = c.subset(rows);
  FederationConfig f = small_fed();
  f.batch_size = 12;
  const MlpParams init = random_params(3, 4, rng, 0.5);
  const auto a = local_weighted_train(init, c, w, f, OutputKind::linear, 1, 1);
  const auto b = local_weighted_train(init, dup, Vector(12, 1.0), f, OutputKind::linear, 2, 1);
  for (std::size_t k = 0; k < a.size(); ++k) CHECK(std::abs(a.flat()[k] - b.flat()[k]) <= 1e-12);
}

TEST_CASE("misaligned weights are rejected") {
  Rng rng(17);
  const auto c = random_client(0, 10, 2, rng);
  CHECK_THROWS_AS(local_weighted_train(MlpParams(3, 2), c, Vector(9, 1.0), small_fed(), OutputKind::linear, 1),
                  ContractError);
}

TEST_CASE("unit hospital weights equal plain size aggregation") {
  Rng rng(18);
  std::vector<ClientDataset> clients{random_client(0, 15, 3, rng), random_client(1, 25, 3, rng)};
  std::vector<PatientWeights> pw;
  for (const auto& c : clients) {
    Vector w(c.size());
    for (double& v : w) v = 0.5 + rng.uniform();
    pw.push_back({c.client_id, w});
  }
  FactualRun run;
  run.federation = small_fed(4);
  run.hidden = 6;
  run.seed = 77;
  const auto a = train_factual_federated(clients, pw, {}, run);
  const std::vector<double> ones{1.0, 1.0};
  const auto b = train_factual_federated(clients, pw, ones, run);
  CHECK(a.phi == b.phi);
  const std::vector<double> scaled{3.0, 3.0};
  const auto s = train_factual_federated(clients, pw, scaled, run);
  for (std::size_t k = 0; k < a.phi.size(); ++k) CHECK(std::abs(a.phi.flat()[k] - s.phi.flat()[k]) <= 1e-12);
}

TEST_CASE("hospital weights change the result") {
  Rng rng(19);
  std::vector<ClientDataset> clients{random_client(0, 15, 3, rng), random_client(1, 25, 3, rng)};
  std::vector<PatientWeights> pw;
  for (const auto& c : clients) pw.push_back({c.client_id, Vector(c.size(), 1.0)});
  FactualRun run;
  run.federation = small_fed(2);
  run.hidden = 4;
  const std::vector<double> skew{0.2, 5.0};
  CHECK_FALSE(train_factual_federated(clients, pw, {}, run).phi == train_factual_federated(clients, pw, skew, run).phi);
}

TEST_CASE("validation picks a logged round") {
  Rng rng(20);
  std::vector<ClientDataset> clients{random_client(0, 30, 2, rng), random_client(1, 30, 2, rng)};
  std::vector<ClientDataset> val{random_client(0, 10, 2, rng), random_client(1, 10, 2, rng)};
  std::vector<PatientWeights> pw;
  for (const auto& c : clients) pw.push_back({c.client_id, Vector(c.size(), 1.0)});
  FactualRun run;
  run.federation = small_fed(5);
  run.hidden = 4;
  run.validation = val;
  const auto m = train_factual_federated(clients, pw, {}, run);
  CHECK(m.log.size() == 5);
  CHECK(m.best_round <= 5);
  const std::vector<Vector> unit{Vector(30, 1.0), Vector(30, 1.0)};
  const auto central = train_factual_centralized(clients, unit, run);
  CHECK(central.log.size() == 5);
}
