#include "fediptw/datagen.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "fediptw/error.hpp"
#include "fediptw/io.hpp"
#include "fediptw/mlp.hpp"
#include "fediptw/rng.hpp"

namespace fediptw {
namespace {

using nlohmann::json;

// Stream tags keep coefficient and record draws apart.
constexpr std::uint64_t kCoefficientStream = 0xC0EF;
constexpr std::uint64_t kRecordStream = 0xDA7A;

double category_sum(const std::array<double, kCategories>& base, const Matrix& delta,
                    std::size_t client, std::size_t category) {
  return base[category] + delta(client, category);
}

}  // namespace

// ---- config ----------------------------------------------------------------

std::array<double, kCategories> SyntheticConfig::rho_normalized() const {
  double total = 0.0;
  for (double r : settings.rho) total += r;
  std::array<double, kCategories> out{};
  for (std::size_t k = 0; k < kCategories; ++k) out[k] = settings.rho[k] / total;
  return out;
}

void SyntheticConfig::validate() const {
  const auto& s = settings;
  double total = 0.0;
  for (double r : s.rho) {
    if (!(r >= 0.0) || !std::isfinite(r)) throw ConfigError("synthetic: rho entries must be finite and >= 0");
    total += r;
  }
  if (!(total > 0.0)) throw ConfigError("synthetic: rho must have a positive sum");
  if (s.d_x < 1) throw ConfigError("synthetic: d_x must be >= 1");
  if (s.n_clients < 1) throw ConfigError("synthetic: n_clients must be >= 1");
  if (s.n_per_client < 1) throw ConfigError("synthetic: n_per_client must be >= 1");
  if (!(s.sigma0 >= 0.0) || !(s.sigma1 >= 0.0)) throw ConfigError("synthetic: sigma0/sigma1 must be >= 0");
  if (!(s.coef_variance >= 0.0) || !(s.heterogeneity >= 0.0)) {
    throw ConfigError("synthetic: coef_variance and heterogeneity must be >= 0");
  }
  if (truth.a0.size() != s.d_x || truth.a1.rows() != s.d_x || truth.a1.cols() != kCategories) {
    throw ConfigError("synthetic: covariate coefficients do not match d_x");
  }
  if (truth.delta.rows() != s.n_clients || truth.delta.cols() != kCategories) {
    throw ConfigError("synthetic: delta must be n_clients x 5");
  }
}

SyntheticConfig make_synthetic_config(const SyntheticSettings& settings) {
  SyntheticConfig cfg;
  cfg.settings = settings;
  Rng rng(Rng::derive_seed(settings.seed, {kCoefficientStream}));
  const double sd = std::sqrt(settings.coef_variance);
  auto& g = cfg.truth;
  g.a0.resize(settings.d_x);
  g.a1 = Matrix(settings.d_x, kCategories);
  for (std::size_t j = 0; j < settings.d_x; ++j) {
    g.a0[j] = rng.normal(0.0, sd);
    for (std::size_t k = 0; k < kCategories; ++k) g.a1(j, k) = rng.normal(0.0, sd);
  }
  g.b0 = rng.normal(0.0, sd);
  for (auto& v : g.b1) v = rng.normal(0.0, sd);
  for (auto& v : g.c1) v = rng.normal(0.0, sd);
  for (auto& v : g.d1) v = rng.normal(0.0, sd);
  g.delta = Matrix(settings.n_clients, kCategories);
  for (std::size_t c = 0; c < settings.n_clients; ++c) {
    for (std::size_t k = 0; k < kCategories; ++k) g.delta(c, k) = rng.normal(0.0, settings.heterogeneity);
  }
  cfg.validate();
  return cfg;
}

// ---- ground-truth accessors -------------------------------------------------

double true_propensity(const SyntheticConfig& cfg, std::size_t client, std::size_t category) {
  if (client >= cfg.settings.n_clients || category >= kCategories) {
    throw ContractError("true_propensity: client or category out of range");
  }
  return sigmoid(cfg.truth.b0 + category_sum(cfg.truth.b1, cfg.truth.delta, client, category));
}

double true_propensity(const SyntheticConfig& cfg, std::size_t client, std::span<const double> z_onehot) {
  if (z_onehot.size() != kCategories) throw ShapeError("true_propensity: z must be 5-dimensional");
  if (client >= cfg.settings.n_clients) throw ContractError("true_propensity: client out of range");
  double logit = cfg.truth.b0;
  for (std::size_t k = 0; k < kCategories; ++k) {
    logit += z_onehot[k] * category_sum(cfg.truth.b1, cfg.truth.delta, client, k);
  }
  return sigmoid(logit);
}

double covariate_probability(const SyntheticConfig& cfg, std::size_t feature, std::size_t category) {
  return sigmoid(cfg.truth.a0[feature] + cfg.truth.a1(feature, category));
}

double expected_y0(const SyntheticConfig& cfg, std::size_t client, std::size_t category) {
  return softplus(cfg.settings.c0 + category_sum(cfg.truth.c1, cfg.truth.delta, client, category));
}

double expected_y1(const SyntheticConfig& cfg, std::size_t client, std::size_t category) {
  return softplus(cfg.settings.d0 + category_sum(cfg.truth.d1, cfg.truth.delta, client, category));
}

// ---- generation ---------------------------------------------------------------

ClientDataset generate_client(const SyntheticConfig& cfg, std::size_t client, std::size_t replication) {
  cfg.validate();
  if (client >= cfg.settings.n_clients) throw ContractError("generate_client: client out of range");
  const auto& s = cfg.settings;
  const auto rho = cfg.rho_normalized();
  Rng rng(Rng::derive_seed(s.seed, {kRecordStream, replication, client}));

  // Per-category covariate probabilities are shared by every record.
  Matrix px(kCategories, s.d_x);
  for (std::size_t k = 0; k < kCategories; ++k) {
    for (std::size_t j = 0; j < s.d_x; ++j) px(k, j) = covariate_probability(cfg, j, k);
  }

  ClientDataset d;
  d.client_id = client;
  d.x = Matrix(s.n_per_client, s.d_x);
  d.t.resize(s.n_per_client);
  d.y.resize(s.n_per_client);
  d.y0 = Vector(s.n_per_client);
  d.y1 = Vector(s.n_per_client);
  d.z.resize(s.n_per_client);
  for (std::size_t i = 0; i < s.n_per_client; ++i) {
    const std::size_t z = rng.categorical(rho);
    d.z[i] = z;
    auto row = d.x.row(i);
    for (std::size_t j = 0; j < s.d_x; ++j) row[j] = rng.bernoulli(px(z, j)) ? 1.0 : 0.0;
    d.t[i] = rng.bernoulli(true_propensity(cfg, client, z)) ? 1.0 : 0.0;
    (*d.y0)[i] = rng.normal(expected_y0(cfg, client, z), s.sigma0);
    (*d.y1)[i] = rng.normal(expected_y1(cfg, client, z), s.sigma1);
    d.y[i] = d.t[i] == 1.0 ? (*d.y1)[i] : (*d.y0)[i];
  }
  return d;
}

std::vector<ClientDataset> generate_synthetic(const SyntheticConfig& cfg, std::size_t replication) {
  std::vector<ClientDataset> out;
  out.reserve(cfg.settings.n_clients);
  for (std::size_t c = 0; c < cfg.settings.n_clients; ++c) out.push_back(generate_client(cfg, c, replication));
  return out;
}

// ---- ClientDataset ----------------------------------------------------------------

double ClientDataset::treatment_rate() const {
  if (t.empty()) throw ContractError("treatment_rate: empty dataset");
  double s = 0.0;
  for (double v : t) s += v;
  return s / static_cast<double>(t.size());
}

bool ClientDataset::has_both_classes() const {
  bool one = false, zero = false;
  for (double v : t) (v == 1.0 ? one : zero) = true;
  return one && zero;
}

void ClientDataset::validate() const {
  const std::size_t n = t.size();
  if (x.rows() != n || y.size() != n) throw ShapeError("ClientDataset: X, t, y lengths differ");
  if (y0.has_value() != y1.has_value()) throw ShapeError("ClientDataset: y0 and y1 must be both present or absent");
  if (y0 && (y0->size() != n || y1->size() != n)) throw ShapeError("ClientDataset: potential outcome length mismatch");
  if (!z.empty() && z.size() != n) throw ShapeError("ClientDataset: latent category length mismatch");
  for (double v : x.data()) {
    if (!std::isfinite(v)) throw NumericError("ClientDataset: non-finite covariate");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (t[i] != 0.0 && t[i] != 1.0) throw IngestError("ClientDataset: t must be 0 or 1");
    if (!std::isfinite(y[i])) throw NumericError("ClientDataset: non-finite outcome");
    if (y0) {
      const double expect = t[i] == 1.0 ? (*y1)[i] : (*y0)[i];
      if (expect != y[i]) throw ContractError("ClientDataset: observed y disagrees with potential outcome");
    }
  }
}

ClientDataset ClientDataset::subset(std::span<const std::size_t> rows) const {
  ClientDataset out;
  out.client_id = client_id;
  out.x = Matrix(rows.size(), x.cols());
  out.t.reserve(rows.size());
  out.y.reserve(rows.size());
  if (y0) {
    out.y0 = Vector();
    out.y1 = Vector();
  }
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const std::size_t r = rows[k];
    if (r >= size()) throw ContractError("ClientDataset::subset: row index out of range");
    std::copy(x.row(r).begin(), x.row(r).end(), out.x.row(k).begin());
    out.t.push_back(t[r]);
    out.y.push_back(y[r]);
    if (y0) {
      out.y0->push_back((*y0)[r]);
      out.y1->push_back((*y1)[r]);
    }
    if (!z.empty()) out.z.push_back(z[r]);
  }
  return out;
}

Vector ClientDataset::true_effects() const {
  if (!has_potential_outcomes()) throw ContractError("true_effects: potential outcomes unavailable");
  Vector e(size());
  for (std::size_t i = 0; i < size(); ++i) e[i] = (*y1)[i] - (*y0)[i];
  return e;
}

// ---- CSV -------------------------------------------------------------------------------

void write_csv(const std::filesystem::path& path, std::span<const ClientDataset> clients) {
  if (clients.empty()) throw ContractError("write_csv: no clients");
  const std::size_t d = clients.front().dim();
  const bool po = clients.front().has_potential_outcomes();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("write_csv: cannot open " + path.string() + " for writing");
  out << "client_id";
  for (std::size_t j = 0; j < d; ++j) out << ",x_" << j;
  out << ",t,y";
  if (po) out << ",y0,y1";
  out << '\n';
  for (const auto& c : clients) {
    if (c.dim() != d || c.has_potential_outcomes() != po) {
      throw ShapeError("write_csv: clients disagree on column layout");
    }
    for (std::size_t i = 0; i < c.size(); ++i) {
      out << c.client_id;
      for (double v : c.x.row(i)) out << ',' << format_double(v);
      out << ',' << (c.t[i] == 1.0 ? '1' : '0') << ',' << format_double(c.y[i]);
      if (po) out << ',' << format_double((*c.y0)[i]) << ',' << format_double((*c.y1)[i]);
      out << '\n';
    }
  }
  if (!out) throw ConfigError("write_csv: write failed for " + path.string());
}

namespace {

double parse_cell(std::string_view cell, std::size_t row, std::string_view column) {
  while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\t')) cell.remove_prefix(1);
  while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\t')) cell.remove_suffix(1);
  if (!cell.empty() && cell.front() == '+') cell.remove_prefix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (ec != std::errc() || ptr != cell.data() + cell.size() || !std::isfinite(v)) {
    throw IngestError("CSV row " + std::to_string(row) + ", column '" + std::string(column) +
                      "': invalid or non-finite value '" + std::string(cell) + "'");
  }
  return v;
}

}  // namespace

std::vector<ClientDataset> load_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("load_csv: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw IngestError("load_csv: empty file " + path.string());
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // BOM

  std::vector<std::string> header;
  for (auto h : split_csv_line(line)) header.emplace_back(h);
  const auto find = [&](std::string_view name) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    return std::nullopt;
  };
  if (header.empty() || header[0] != "client_id") throw IngestError("load_csv: missing column 'client_id' (must be first)");
  const auto t_col = find("t");
  if (!t_col) throw IngestError("load_csv: missing column 't'");
  const auto y_col = find("y");
  if (!y_col || *y_col != *t_col + 1) throw IngestError("load_csv: missing column 'y' (must follow 't')");
  const auto y0_col = find("y0");
  const auto y1_col = find("y1");
  if (y0_col.has_value() != y1_col.has_value()) throw IngestError("load_csv: columns 'y0' and 'y1' must appear together");
  const bool po = y0_col.has_value();
  const std::size_t d = *t_col - 1;
  if (d == 0) throw IngestError("load_csv: no covariate columns between 'client_id' and 't'");
  const std::size_t expected_cols = po ? *y_col + 3 : *y_col + 1;
  if (header.size() != expected_cols) throw IngestError("load_csv: unexpected trailing columns in header");

  std::map<std::size_t, ClientDataset> by_client;
  std::size_t row = 0;
  std::vector<double> xrow(d);
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw IngestError("CSV row " + std::to_string(row) + ": expected " + std::to_string(header.size()) +
                        " cells, found " + std::to_string(cells.size()));
    }
    const double cid = parse_cell(cells[0], row, "client_id");
    if (cid < 0 || cid != std::floor(cid)) {
      throw IngestError("CSV row " + std::to_string(row) + ", column 'client_id': must be a non-negative integer");
    }
    for (std::size_t j = 0; j < d; ++j) xrow[j] = parse_cell(cells[1 + j], row, header[1 + j]);
    const double t = parse_cell(cells[*t_col], row, "t");
    if (t != 0.0 && t != 1.0) {
      throw IngestError("CSV row " + std::to_string(row) + ", column 't': value must be 0 or 1");
    }
    auto& c = by_client[static_cast<std::size_t>(cid)];
    c.client_id = static_cast<std::size_t>(cid);
    c.x.append_row(xrow);
    c.t.push_back(t);
    c.y.push_back(parse_cell(cells[*y_col], row, "y"));
    if (po) {
      if (!c.y0) {
        c.y0 = Vector();
        c.y1 = Vector();
      }
      c.y0->push_back(parse_cell(cells[*y0_col], row, "y0"));
      c.y1->push_back(parse_cell(cells[*y1_col], row, "y1"));
    }
  }
  if (by_client.empty()) throw IngestError("load_csv: no data rows in " + path.string());
  std::vector<ClientDataset> out;
  for (auto& [id, c] : by_client) {
    try {
      c.validate();
    } catch (const Error& e) {
      throw IngestError("load_csv: client " + std::to_string(id) + " in " + path.string() + ": " + e.what());
    }
    out.push_back(std::move(c));
  }
  return out;
}

// ---- ground truth sidecar ---------------------------------------------------------------

std::string ground_truth_json(const SyntheticConfig& cfg) {
  const auto& s = cfg.settings;
  const auto& g = cfg.truth;
  json j;
  j["settings"] = {{"rho", s.rho},
                   {"d_x", s.d_x},
                   {"n_per_client", s.n_per_client},
                   {"n_clients", s.n_clients},
                   {"coef_variance", s.coef_variance},
                   {"heterogeneity", s.heterogeneity},
                   {"c0", s.c0},
                   {"d0", s.d0},
                   {"sigma0", s.sigma0},
                   {"sigma1", s.sigma1},
                   {"seed", s.seed}};
  j["rho_normalized"] = cfg.rho_normalized();
  json a1 = json::array();
  for (std::size_t r = 0; r < g.a1.rows(); ++r) a1.push_back(std::vector<double>(g.a1.row(r).begin(), g.a1.row(r).end()));
  json delta = json::array();
  for (std::size_t r = 0; r < g.delta.rows(); ++r) {
    delta.push_back(std::vector<double>(g.delta.row(r).begin(), g.delta.row(r).end()));
  }
  j["truth"] = {{"a0", g.a0}, {"a1", a1}, {"b0", g.b0}, {"b1", g.b1},
                {"c1", g.c1}, {"d1", g.d1}, {"delta", delta}};
  return j.dump(2);
}

void write_ground_truth(const std::filesystem::path& path, const SyntheticConfig& cfg) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("write_ground_truth: cannot open " + path.string());
  out << ground_truth_json(cfg) << '\n';
}

SyntheticConfig read_ground_truth(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("read_ground_truth: cannot open " + path.string());
  const json j = json::parse(in);
  SyntheticConfig cfg;
  auto& s = cfg.settings;
  const auto& js = j.at("settings");
  s.rho = js.at("rho").get<std::array<double, kCategories>>();
  s.d_x = js.at("d_x").get<std::size_t>();
  s.n_per_client = js.at("n_per_client").get<std::size_t>();
  s.n_clients = js.at("n_clients").get<std::size_t>();
  s.coef_variance = js.at("coef_variance").get<double>();
  s.heterogeneity = js.at("heterogeneity").get<double>();
  s.c0 = js.at("c0").get<double>();
  s.d0 = js.at("d0").get<double>();
  s.sigma0 = js.at("sigma0").get<double>();
  s.sigma1 = js.at("sigma1").get<double>();
  s.seed = js.at("seed").get<std::uint64_t>();
  const auto& jt = j.at("truth");
  auto& g = cfg.truth;
  g.a0 = jt.at("a0").get<Vector>();
  g.a1 = Matrix(s.d_x, kCategories);
  const auto a1 = jt.at("a1").get<std::vector<std::vector<double>>>();
  for (std::size_t r = 0; r < a1.size() && r < s.d_x; ++r) {
    for (std::size_t k = 0; k < kCategories && k < a1[r].size(); ++k) g.a1(r, k) = a1[r][k];
  }
  g.b0 = jt.at("b0").get<double>();
  g.b1 = jt.at("b1").get<std::array<double, kCategories>>();
  g.c1 = jt.at("c1").get<std::array<double, kCategories>>();
  g.d1 = jt.at("d1").get<std::array<double, kCategories>>();
  const auto delta = jt.at("delta").get<std::vector<std::vector<double>>>();
  g.delta = Matrix(s.n_clients, kCategories);
  for (std::size_t r = 0; r < delta.size() && r < s.n_clients; ++r) {
    for (std::size_t k = 0; k < kCategories && k < delta[r].size(); ++k) g.delta(r, k) = delta[r][k];
  }
  cfg.validate();
  return cfg;
}

// ---- folds ----------------------------------------------------------------------------------

FoldAssignment split_folds(std::span<const ClientDataset> clients, std::size_t n_folds, std::uint64_t seed) {
  if (n_folds < 3) throw ConfigError("split_folds: need at least 3 folds for a train/validation/test split");
  FoldAssignment a;
  a.n_folds = n_folds;
  a.fold_of.reserve(clients.size());
  for (const auto& c : clients) {
    if (c.size() < n_folds) {
      throw ConfigError("split_folds: client " + std::to_string(c.client_id) + " has " +
                        std::to_string(c.size()) + " records, fewer than " + std::to_string(n_folds) + " folds");
    }
    Rng rng(Rng::derive_seed(seed, {0xF01D, c.client_id}));
    std::vector<std::size_t> order(c.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(std::span<std::size_t>(order));
    std::vector<std::size_t> fold(c.size());
    for (std::size_t pos = 0; pos < order.size(); ++pos) fold[order[pos]] = pos % n_folds;
    a.fold_of.push_back(std::move(fold));
  }
  return a;
}

std::size_t test_fold_count(std::size_t n_folds) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(0.2 * static_cast<double>(n_folds))));
}

std::size_t validation_fold_count(std::size_t n_folds) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(0.1 * static_cast<double>(n_folds))));
}

std::vector<ClientSplit> select_folds(const FoldAssignment& assignment, std::size_t fold_config) {
  const std::size_t n = assignment.n_folds;
  const std::size_t n_test = test_fold_count(n);
  const std::size_t n_val = validation_fold_count(n);
  if (n_test + n_val >= n) throw ConfigError("select_folds: no folds left for training");
  const std::size_t base = fold_config % n;
  // role[f]: 0 train, 1 validation, 2 test
  std::vector<int> role(n, 0);
  for (std::size_t k = 0; k < n_test; ++k) role[(base + k) % n] = 2;
  for (std::size_t k = 0; k < n_val; ++k) role[(base + n_test + k) % n] = 1;
  std::vector<ClientSplit> out;
  out.reserve(assignment.fold_of.size());
  for (const auto& folds : assignment.fold_of) {
    ClientSplit s;
    for (std::size_t i = 0; i < folds.size(); ++i) {
      switch (role[folds[i]]) {
        case 0: s.train.push_back(i); break;
        case 1: s.validation.push_back(i); break;
        default: s.test.push_back(i); break;
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace fediptw
