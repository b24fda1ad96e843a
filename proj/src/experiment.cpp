#include "fediptw/experiment.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <set>
#include <sstream>

#include "fediptw/io.hpp"
#include "fediptw/log.hpp"
#include "fediptw/parallel.hpp"
#include "fediptw/rng.hpp"

namespace fediptw {

using nlohmann::json;

namespace {

constexpr std::uint64_t kSplitStream = 0x5B17;
constexpr std::uint64_t kFoldStream = 0xF01D5;
constexpr std::uint64_t kPropensitySeed = 1;
constexpr std::uint64_t kFactualSeed = 2;
constexpr std::uint64_t kPluginSeed = 3;

constexpr std::array<std::string_view, 7> kMethodNames{"fed-iptw",     "fed-iptw-noh", "iptw-l",    "iptw-g",
                                                       "fedavg-plain", "global",       "global-noh"};

}  // namespace

// ---- methods ----------------------------------------------------------------------

std::string_view method_name(Method m) noexcept { return kMethodNames[static_cast<std::size_t>(m)]; }

Method parse_method(std::string_view name) {
  for (std::size_t i = 0; i < kMethodNames.size(); ++i) {
    if (kMethodNames[i] == name) return static_cast<Method>(i);
  }
  std::string known;
  for (auto n : kMethodNames) known += (known.empty() ? "" : ", ") + std::string(n);
  throw ConfigError("unknown method '" + std::string(name) + "' (expected one of: " + known + ")");
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> all{Method::fed_iptw,     Method::fed_iptw_noh, Method::iptw_l,   Method::iptw_g,
                                       Method::fedavg_plain, Method::global,       Method::global_noh};
  return all;
}

MethodSpec method_spec(Method m) noexcept {
  switch (m) {
    case Method::fed_iptw:
      return {PropensityKind::federated, true, Numerator::own_rate, true, false};
    case Method::fed_iptw_noh:
      return {PropensityKind::federated, false, Numerator::own_rate, true, false};
    case Method::iptw_l:
      return {PropensityKind::local, false, Numerator::own_rate, false, false};
    case Method::iptw_g:
      return {PropensityKind::federated, false, Numerator::pooled_rate, false, false};
    case Method::fedavg_plain:
      return {PropensityKind::none, false, Numerator::own_rate, false, false};
    case Method::global:
      return {PropensityKind::centralized, true, Numerator::own_rate, true, true};
    case Method::global_noh:
      return {PropensityKind::centralized, false, Numerator::pooled_rate, false, true};
  }
  return {};
}

// ---- config -----------------------------------------------------------------------

namespace {

class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("config: '" + name_ + "' must be an object");
  }
  ~Section() = default;

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config: " + name_ + "." + key + ": " + e.what());
    }
  }
  bool has(const char* key) const { return j_.contains(key); }
  const json& at(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("config: unknown key '" + name_ + "." + it.key() + "'");
    }
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

void read_federation(Section& s, FederationConfig& f) {
  s.get("rounds", f.rounds);
  s.get("local_epochs", f.local_epochs);
  s.get("batch_size", f.batch_size);
  s.get("learning_rate", f.learning_rate);
}

json federation_json(const FederationConfig& f) {
  return {{"rounds", f.rounds}, {"local_epochs", f.local_epochs}, {"batch_size", f.batch_size},
          {"learning_rate", f.learning_rate}};
}

std::string_view outcome_name(OutcomeKind k) {
  switch (k) {
    case OutcomeKind::binary:
      return "binary";
    case OutcomeKind::continuous:
      return "continuous";
    case OutcomeKind::automatic:
      break;
  }
  return "auto";
}

}  // namespace

void ExperimentConfig::validate() const {
  if (source != "synthetic" && source != "csv") throw ConfigError("config: dataset.source must be synthetic or csv");
  if (source == "csv" && csv_path.empty()) throw ConfigError("config: dataset.csv_path is required for csv source");
  if (source == "synthetic") {
    if (synthetic.n_clients < 1) throw ConfigError("config: n_clients must be >= 1");
    if (synthetic.n_per_client < 1) throw ConfigError("config: n_per_client must be >= 1");
    if (n_replications < 1) throw ConfigError("config: n_replications must be >= 1");
  }
  if (methods.empty()) throw ConfigError("config: no methods selected");
  if (n_folds < 3) throw ConfigError("config: n_folds must be >= 3");
  if (n_repeats < 1) throw ConfigError("config: n_repeats must be >= 1");
  if (rotations < 1 || rotations > n_folds) throw ConfigError("config: rotations must lie in [1, n_folds]");
  propensity_federation.validate();
  factual_federation.validate();
  if (propensity.hidden < 1 || factual_hidden < 1) throw ConfigError("config: hidden width must be >= 1");
  if (!(propensity.hc_lr > 0.0)) throw ConfigError("config: propensity.hc_lr must be > 0");
  if (!(propensity.h_limit > 0.0)) throw ConfigError("config: propensity.h_limit must be > 0");
  if (!(eps_clip > 0.0 && eps_clip < 0.5)) throw ConfigError("config: weights.eps_clip must lie in (0, 0.5)");
  if (!(clamp.w_min > 0.0 && clamp.w_max >= clamp.w_min)) throw ConfigError("config: need 0 < w_min <= w_max");
  if (!(pi_clip > 0.0 && pi_clip < 0.5)) throw ConfigError("config: evaluation.pi_clip must lie in (0, 0.5)");
  if (jobs < 1) throw ConfigError("config: jobs must be >= 1");
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig cfg;
  Section top(j, "config");
  top.get("seed", cfg.seed);
  top.get("jobs", cfg.jobs);
  cfg.synthetic.seed = cfg.seed;
  if (top.has("methods")) {
    std::vector<std::string> names;
    top.get("methods", names);
    cfg.methods.clear();
    for (const auto& n : names) cfg.methods.push_back(parse_method(n));
  }
  if (top.has("dataset")) {
    Section d(top.at("dataset"), "dataset");
    d.get("source", cfg.source);
    d.get("n_replications", cfg.n_replications);
    d.get("csv_path", cfg.csv_path);
    std::string outcome = "auto";
    d.get("outcome", outcome);
    if (outcome == "auto") {
      cfg.outcome = OutcomeKind::automatic;
    } else if (outcome == "binary") {
      cfg.outcome = OutcomeKind::binary;
    } else if (outcome == "continuous") {
      cfg.outcome = OutcomeKind::continuous;
    } else {
      throw ConfigError("config: dataset.outcome must be auto, binary or continuous");
    }
    if (d.has("synthetic")) {
      Section s(d.at("synthetic"), "dataset.synthetic");
      auto& st = cfg.synthetic;
      std::vector<double> rho(st.rho.begin(), st.rho.end());
      s.get("rho", rho);
      if (rho.size() != kCategories) throw ConfigError("config: dataset.synthetic.rho needs 5 entries");
      std::copy(rho.begin(), rho.end(), st.rho.begin());
      s.get("d_x", st.d_x);
      s.get("n_per_client", st.n_per_client);
      s.get("n_clients", st.n_clients);
      s.get("coef_variance", st.coef_variance);
      s.get("heterogeneity", st.heterogeneity);
      s.get("c0", st.c0);
      s.get("d0", st.d0);
      s.get("sigma0", st.sigma0);
      s.get("sigma1", st.sigma1);
      s.get("seed", st.seed);
      s.finish();
    }
    d.finish();
  }
  if (top.has("protocol")) {
    Section p(top.at("protocol"), "protocol");
    p.get("n_folds", cfg.n_folds);
    p.get("n_repeats", cfg.n_repeats);
    p.get("rotations", cfg.rotations);
    p.finish();
  }
  if (top.has("propensity")) {
    Section p(top.at("propensity"), "propensity");
    read_federation(p, cfg.propensity_federation);
    p.get("hidden", cfg.propensity.hidden);
    p.get("hc_epochs", cfg.propensity.hc_epochs);
    p.get("hc_lr", cfg.propensity.hc_lr);
    p.get("h_limit", cfg.propensity.h_limit);
    p.finish();
  }
  if (top.has("factual")) {
    Section f(top.at("factual"), "factual");
    read_federation(f, cfg.factual_federation);
    f.get("hidden", cfg.factual_hidden);
    f.finish();
  }
  if (top.has("weights")) {
    Section w(top.at("weights"), "weights");
    w.get("eps_clip", cfg.eps_clip);
    w.get("w_min", cfg.clamp.w_min);
    w.get("w_max", cfg.clamp.w_max);
    w.finish();
  }
  if (top.has("evaluation")) {
    Section e(top.at("evaluation"), "evaluation");
    e.get("if_pehe", cfg.if_pehe);
    e.get("pi_clip", cfg.pi_clip);
    e.finish();
  }
  top.finish();
  cfg.validate();
  return cfg;
}

json config_to_json(const ExperimentConfig& cfg) {
  const auto& st = cfg.synthetic;
  json methods = json::array();
  for (auto m : cfg.methods) methods.push_back(method_name(m));
  json prop = federation_json(cfg.propensity_federation);
  prop["hidden"] = cfg.propensity.hidden;
  prop["hc_epochs"] = cfg.propensity.hc_epochs;
  prop["hc_lr"] = cfg.propensity.hc_lr;
  prop["h_limit"] = cfg.propensity.h_limit;
  json fact = federation_json(cfg.factual_federation);
  fact["hidden"] = cfg.factual_hidden;
  return {
      {"seed", cfg.seed},
      {"jobs", cfg.jobs},
      {"methods", methods},
      {"dataset",
       {{"source", cfg.source},
        {"n_replications", cfg.n_replications},
        {"csv_path", cfg.csv_path},
        {"outcome", outcome_name(cfg.outcome)},
        {"synthetic",
         {{"rho", st.rho},
          {"d_x", st.d_x},
          {"n_per_client", st.n_per_client},
          {"n_clients", st.n_clients},
          {"coef_variance", st.coef_variance},
          {"heterogeneity", st.heterogeneity},
          {"c0", st.c0},
          {"d0", st.d0},
          {"sigma0", st.sigma0},
          {"sigma1", st.sigma1},
          {"seed", st.seed}}}}},
      {"protocol", {{"n_folds", cfg.n_folds}, {"n_repeats", cfg.n_repeats}, {"rotations", cfg.rotations}}},
      {"propensity", prop},
      {"factual", fact},
      {"weights", {{"eps_clip", cfg.eps_clip}, {"w_min", cfg.clamp.w_min}, {"w_max", cfg.clamp.w_max}}},
      {"evaluation", {{"if_pehe", cfg.if_pehe}, {"pi_clip", cfg.pi_clip}}},
  };
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("config: cannot parse " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

// ---- data -------------------------------------------------------------------------

DataSource::DataSource(const ExperimentConfig& cfg) {
  if (cfg.source == "synthetic") {
    synthetic_ = make_synthetic_config(cfg.synthetic);
    for (std::size_t r = 0; r < cfg.n_replications; ++r) data_.push_back(generate_synthetic(*synthetic_, r));
  } else {
    data_.push_back(load_csv(cfg.csv_path));
  }
  bool binary = true;
  for (const auto& c : data_.front()) {
    for (double y : c.y) binary = binary && (y == 0.0 || y == 1.0);
  }
  switch (cfg.outcome) {
    case OutcomeKind::automatic:
      kind_ = binary ? OutputKind::sigmoid : OutputKind::linear;
      break;
    case OutcomeKind::binary:
      if (!binary) throw ConfigError("dataset: outcome declared binary but y is not 0/1");
      kind_ = OutputKind::sigmoid;
      break;
    case OutcomeKind::continuous:
      kind_ = OutputKind::linear;
      break;
  }
}

std::uint64_t fold_seed(const ExperimentConfig& cfg, std::size_t repeat, std::size_t rotation) {
  return Rng::derive_seed(cfg.seed, {kFoldStream, repeat, rotation});
}

FoldData make_fold(const ExperimentConfig& cfg, const DataSource& data, std::size_t repeat, std::size_t rotation) {
  FoldData f;
  f.repeat = repeat;
  f.rotation = rotation;
  f.replication = repeat % data.replications();
  const auto& clients = data.replication(f.replication);
  const auto assignment = split_folds(clients, cfg.n_folds, Rng::derive_seed(cfg.seed, {kSplitStream, repeat}));
  f.split = select_folds(assignment, rotation);
  for (std::size_t c = 0; c < clients.size(); ++c) {
    f.train.push_back(clients[c].subset(f.split[c].train));
    f.validation.push_back(clients[c].subset(f.split[c].validation));
    f.test.push_back(clients[c].subset(f.split[c].test));
  }
  return f;
}

// ---- stages -----------------------------------------------------------------------

WeightArtifacts run_weight_stage(const ExperimentConfig& cfg, Method method, const FoldData& fold, std::uint64_t seed,
                                 std::size_t threads) {
  const MethodSpec spec = method_spec(method);
  WeightArtifacts out;
  out.stats = client_stats(fold.train);

  PropensityRun run;
  run.federation = cfg.propensity_federation;
  run.options = cfg.propensity;
  run.options.use_h = spec.use_h;
  run.seed = Rng::derive_seed(seed, {kPropensitySeed});
  run.threads = threads;
  run.validation = fold.validation;
  switch (spec.propensity) {
    case PropensityKind::none:
      break;
    case PropensityKind::federated:
      out.propensity = train_propensity_federated(fold.train, run);
      break;
    case PropensityKind::local:
      out.propensity = train_propensity_local(fold.train, run);
      break;
    case PropensityKind::centralized:
      out.propensity = train_propensity_centralized(fold.train, run);
      break;
  }

  double n = 0.0, treated = 0.0;
  for (const auto& s : out.stats) {
    n += static_cast<double>(s.n);
    treated += static_cast<double>(s.n) * s.mean_t;
  }
  const double pooled_rate = treated / n;

  for (std::size_t c = 0; c < fold.train.size(); ++c) {
    const auto& train = fold.train[c];
    const auto& val = fold.validation[c];
    if (!out.propensity) {
      out.train.push_back({train.client_id, Vector(train.size(), 1.0)});
      out.validation.push_back({val.client_id, Vector(val.size(), 1.0)});
      continue;
    }
    const auto& theta = out.propensity->theta_for(c);
    const double h = out.propensity->h.empty() ? 0.0 : out.propensity->h[c];
    const bool own = spec.numerator == Numerator::own_rate;
    const std::optional<double> numerator = own ? std::nullopt : std::optional<double>(pooled_rate);
    out.train.push_back(compute_patient_weights(theta, h, train, cfg.eps_clip, numerator));
    if (own && !train.has_both_classes()) {
      out.validation.push_back({val.client_id, Vector(val.size(), 1.0)});
    } else {
      out.validation.push_back(
          compute_patient_weights(theta, h, val, cfg.eps_clip, own ? train.treatment_rate() : pooled_rate));
    }
  }
  out.hospital = spec.hospital_weights ? compute_hospital_weights(out.stats, cfg.clamp)
                                       : unit_hospital_weights(out.stats);
  return out;
}

std::vector<Vector> combined_record_weights(std::span<const PatientWeights> patient, const HospitalWeights& hospital) {
  if (hospital.w.size() != patient.size()) throw ShapeError("combined weights: one hospital weight per client");
  std::vector<Vector> out;
  for (std::size_t c = 0; c < patient.size(); ++c) {
    Vector w = patient[c].w;
    for (double& v : w) v *= hospital.w[c];
    out.push_back(std::move(w));
  }
  return out;
}

FactualModel run_factual_stage(const ExperimentConfig& cfg, Method method, const FoldData& fold,
                               const WeightArtifacts& weights, OutputKind kind, std::uint64_t seed,
                               std::size_t threads) {
  const MethodSpec spec = method_spec(method);
  const std::vector<Vector> val_weights = combined_record_weights(weights.validation, weights.hospital);
  FactualRun run;
  run.federation = cfg.factual_federation;
  run.kind = kind;
  run.hidden = cfg.factual_hidden;
  run.seed = Rng::derive_seed(seed, {kFactualSeed});
  run.threads = threads;
  run.validation = fold.validation;
  run.validation_weights = val_weights;
  if (spec.centralized_factual) {
    const std::vector<Vector> record = combined_record_weights(weights.train, weights.hospital);
    return train_factual_centralized(fold.train, record, run);
  }
  return train_factual_federated(fold.train, weights.train, weights.hospital.w, run);
}

FoldEvaluation evaluate_fold(const ExperimentConfig& cfg, Method /*method*/, const FoldData& fold,
                             const WeightArtifacts& weights, const FactualModel& model, std::uint64_t seed) {
  FoldEvaluation out;
  bool have_truth = true;
  Vector scores, labels;
  for (const auto& c : fold.test) {
    const auto ite = predict_ite(model, c.x);
    out.e_hat.insert(out.e_hat.end(), ite.e_hat.begin(), ite.e_hat.end());
    if (c.has_potential_outcomes()) {
      const Vector e = c.true_effects();
      out.e_true.insert(out.e_true.end(), e.begin(), e.end());
    } else {
      have_truth = false;
    }
    if (model.kind == OutputKind::sigmoid) {
      for (std::size_t i = 0; i < c.size(); ++i) {
        scores.push_back(predict_outcome(model, c.x.row(i), c.t[i]));
        labels.push_back(c.y[i]);
      }
    }
  }
  auto& m = out.metrics;
  if (have_truth && !out.e_true.empty()) {
    m.rpehe = pehe(out.e_true, out.e_hat).rpehe;
    m.mae_ate = mae_ate(out.e_true, out.e_hat);
  } else {
    out.e_true.clear();
    m.rpehe = m.mae_ate = std::numeric_limits<double>::quiet_NaN();
  }
  if (!labels.empty()) {
    const auto pos = std::count(labels.begin(), labels.end(), 1.0);
    if (pos > 0 && static_cast<std::size_t>(pos) < labels.size()) m.rank = auroc_auprc(scores, labels);
  }
  if (cfg.if_pehe) {
    PluginConfig pc;
    pc.training = cfg.factual_federation;
    pc.hidden = cfg.factual_hidden;
    pc.outcome_kind = model.kind;
    pc.seed = Rng::derive_seed(seed, {kPluginSeed});
    const auto plugins = fit_plugins(fold.train, pc);
    if (plugins) {
      m.if_pehe = if_pehe(*plugins, fold.test, out.e_hat, cfg.pi_clip);
    } else {
      warn("evaluation: a treatment arm is empty in the training fold; IF-PEHE unavailable");
    }
  }
  std::vector<Vector> w;
  for (const auto& p : weights.train) w.push_back(p.w);
  const auto cov = covariance_diagnostics(fold.train, w, weights.hospital.w);
  m.cov_local = cov.local_summary;
  m.cov_local_mean = cov.local_mean;
  m.cov_global = cov.global_summary;
  return out;
}

// ---- artifacts ----------------------------------------------------------------------

namespace {

std::string fmt_opt(double v) { return std::isfinite(v) ? format_double(v) : std::string(); }

json params_json(const MlpParams& p) {
  return {{"in_dim", p.in_dim()}, {"hidden", p.hidden()}, {"params", std::vector<double>(p.flat().begin(), p.flat().end())}};
}

std::string round_log_lines(const std::vector<RoundLog>& log, std::string_view stage) {
  std::string s;
  for (const auto& r : log) s += to_json_line(r, stage) + "\n";
  return s;
}

std::string patient_weights_csv(const WeightArtifacts& w) {
  std::string s = "client_id,split,row,w\n";
  auto emit = [&](const std::vector<PatientWeights>& all, std::string_view split) {
    for (const auto& p : all) {
      for (std::size_t i = 0; i < p.w.size(); ++i) {
        s += std::to_string(p.client_id) + "," + std::string(split) + "," + std::to_string(i) + "," +
             format_double(p.w[i]) + "\n";
      }
    }
  };
  emit(w.train, "train");
  emit(w.validation, "validation");
  return s;
}

std::string hospital_weights_csv(const WeightArtifacts& w) {
  std::string s = "client_id,n,mean_t,numerator,denominator,degenerate,w\n";
  for (std::size_t c = 0; c < w.stats.size(); ++c) {
    s += std::to_string(w.stats[c].client_id) + "," + std::to_string(w.stats[c].n) + "," +
         format_double(w.stats[c].mean_t) + "," + format_double(w.hospital.numerator[c]) + "," +
         format_double(w.hospital.denominator[c]) + "," + (w.hospital.degenerate[c] ? "1" : "0") + "," +
         format_double(w.hospital.w[c]) + "\n";
  }
  return s;
}

double parse_num(const std::string& s, const std::filesystem::path& file) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw IngestError(file.string() + ": invalid number '" + s + "'");
  }
}

// Restores the weights written by a propensity-only run.
WeightArtifacts read_weight_artifacts(const std::filesystem::path& dir, const FoldData& fold) {
  WeightArtifacts w;
  w.stats = client_stats(fold.train);
  std::map<std::size_t, std::size_t> index;
  for (std::size_t c = 0; c < fold.train.size(); ++c) {
    index[fold.train[c].client_id] = c;
    w.train.push_back({fold.train[c].client_id, Vector(fold.train[c].size(), 0.0)});
    w.validation.push_back({fold.validation[c].client_id, Vector(fold.validation[c].size(), 0.0)});
  }
  const auto pw_path = dir / "patient_weights.csv";
  const CsvTable pw = read_csv_table(pw_path);
  const std::size_t cc = pw.column("client_id"), cs = pw.column("split"), cr = pw.column("row"), cw = pw.column("w");
  std::size_t filled = 0;
  for (const auto& row : pw.rows) {
    const auto it = index.find(static_cast<std::size_t>(parse_num(row[cc], pw_path)));
    if (it == index.end()) throw IngestError(pw_path.string() + ": unknown client " + row[cc]);
    auto& target = row[cs] == "train" ? w.train[it->second].w : w.validation[it->second].w;
    const auto r = static_cast<std::size_t>(parse_num(row[cr], pw_path));
    if (r >= target.size()) throw IngestError(pw_path.string() + ": row index out of range");
    target[r] = parse_num(row[cw], pw_path);
    ++filled;
  }
  std::size_t expected = 0;
  for (std::size_t c = 0; c < fold.train.size(); ++c) expected += fold.train[c].size() + fold.validation[c].size();
  if (filled != expected) throw IngestError(pw_path.string() + ": weights do not cover the fold");

  const auto hw_path = dir / "hospital_weights.csv";
  const CsvTable hw = read_csv_table(hw_path);
  w.hospital = unit_hospital_weights(w.stats);
  const std::size_t hc = hw.column("client_id"), hn = hw.column("numerator"), hd = hw.column("denominator"),
                    hg = hw.column("degenerate"), hv = hw.column("w");
  for (const auto& row : hw.rows) {
    const auto it = index.find(static_cast<std::size_t>(parse_num(row[hc], hw_path)));
    if (it == index.end()) throw IngestError(hw_path.string() + ": unknown client " + row[hc]);
    w.hospital.numerator[it->second] = parse_num(row[hn], hw_path);
    w.hospital.denominator[it->second] = parse_num(row[hd], hw_path);
    w.hospital.degenerate[it->second] = row[hg] == "1";
    w.hospital.w[it->second] = parse_num(row[hv], hw_path);
  }
  return w;
}

void write_weight_artifacts(const std::filesystem::path& dir, const WeightArtifacts& w, const FoldData& fold) {
  if (w.propensity) {
    json theta = json::array();
    for (const auto& t : w.propensity->theta) theta.push_back(params_json(t));
    write_file(dir / "theta.json", json{{"best_round", w.propensity->best_round}, {"theta", theta}}.dump() + "\n");
    for (std::size_t c = 0; c < fold.train.size(); ++c) {
      const std::size_t id = fold.train[c].client_id;
      const double h = w.propensity->h.empty() ? 0.0 : w.propensity->h[c];
      write_file(dir / "h" / ("client_" + std::to_string(id) + ".json"), json{{"client_id", id}, {"h", h}}.dump() + "\n");
    }
    write_file(dir / "propensity_log.jsonl", round_log_lines(w.propensity->log, "propensity"));
  }
  write_file(dir / "patient_weights.csv", patient_weights_csv(w));
  write_file(dir / "hospital_weights.csv", hospital_weights_csv(w));
}

std::string metrics_row(const UnitResult& u) {
  const auto& m = *u.metrics;
  std::string s = std::to_string(u.repeat) + "," + std::to_string(u.rotation) + "," + std::to_string(u.replication) +
                  "," + std::to_string(u.seed) + "," + std::to_string(u.propensity_best_round) + "," +
                  std::to_string(u.factual_best_round) + "," + fmt_opt(m.rpehe) + "," + fmt_opt(m.mae_ate) + ",";
  s += (m.if_pehe ? format_double(m.if_pehe->sum) : "") + "," + (m.if_pehe ? format_double(m.if_pehe->mean) : "") +
       ",";
  s += (m.rank ? format_double(m.rank->auroc) : "") + "," + (m.rank ? format_double(m.rank->auprc) : "") + ",";
  s += format_double(m.cov_local_mean) + "," + format_double(m.cov_global) + "\n";
  return s;
}

std::string summary_csv(const std::vector<UnitResult>& units) {
  std::string s = "metric,mean,sd,median,n\n";
  for (const auto& col : metric_columns()) {
    Vector v;
    for (const auto& u : units) {
      const auto& m = *u.metrics;
      double x = std::numeric_limits<double>::quiet_NaN();
      if (col == "rpehe") x = m.rpehe;
      if (col == "mae_ate") x = m.mae_ate;
      if (col == "if_pehe" && m.if_pehe) x = m.if_pehe->sum;
      if (col == "if_pehe_mean" && m.if_pehe) x = m.if_pehe->mean;
      if (col == "auroc" && m.rank) x = m.rank->auroc;
      if (col == "auprc" && m.rank) x = m.rank->auprc;
      if (col == "cov_local") x = m.cov_local_mean;
      if (col == "cov_global") x = m.cov_global;
      if (std::isfinite(x)) v.push_back(x);
    }
    const auto st = summarize(v);
    if (st.n == 0) continue;
    s += col + "," + format_double(st.mean) + "," + format_double(st.sd) + "," + format_double(st.median) + "," +
         std::to_string(st.n) + "\n";
  }
  return s;
}

bool checksummed(const std::filesystem::path& p) {
  const auto ext = p.extension().string();
  return ext != ".jsonl" && p.filename() != "manifest.json";
}

}  // namespace

const std::vector<std::string>& metric_columns() {
  static const std::vector<std::string> cols{"rpehe", "mae_ate", "if_pehe",   "if_pehe_mean",
                                             "auroc", "auprc",   "cov_local", "cov_global"};
  return cols;
}

RunStage parse_stage(std::string_view s) {
  if (s == "all") return RunStage::all;
  if (s == "propensity") return RunStage::propensity;
  if (s == "factual") return RunStage::factual;
  throw ConfigError("unknown stage '" + std::string(s) + "' (expected all, propensity or factual)");
}

std::filesystem::path unit_dir(const std::filesystem::path& out, Method m, std::size_t repeat, std::size_t rotation) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "rep_%02zu_fold_%02zu", repeat, rotation);
  return out / std::string(method_name(m)) / buf;
}

std::vector<UnitResult> run_experiment(const RunRequest& req) {
  const auto& cfg = req.cfg;
  cfg.validate();
  std::optional<DataSource> data;
  try {
    data.emplace(cfg);
  } catch (const Error& e) {
    throw StageError("data", e.what());
  }

  std::vector<UnitResult> units;
  for (auto m : cfg.methods) {
    for (std::size_t r = 0; r < cfg.n_repeats; ++r) {
      for (std::size_t k = 0; k < cfg.rotations; ++k) {
        UnitResult u;
        u.method = m;
        u.repeat = r;
        u.rotation = k;
        u.replication = r % data->replications();
        u.seed = fold_seed(cfg, r, k);
        units.push_back(u);
      }
    }
  }
  const std::size_t inner = units.size() == 1 ? cfg.jobs : 1;
  std::mutex log_mu;
  std::ofstream run_log;
  std::filesystem::create_directories(req.out);
  run_log.open(req.out / "run_log.jsonl", std::ios::app);

  parallel_for(units.size(), cfg.jobs, [&](std::size_t i) {
    auto& u = units[i];
    const auto t0 = std::chrono::steady_clock::now();
    const auto dir = unit_dir(req.out, u.method, u.repeat, u.rotation);
    const std::string where =
        std::string(method_name(u.method)) + " repeat " + std::to_string(u.repeat) + " fold " + std::to_string(u.rotation);
    auto staged = [&](const char* stage, auto&& fn) {
      try {
        return fn();
      } catch (const StageError&) {
        throw;
      } catch (const std::exception& e) {
        throw StageError(stage, where + ": " + e.what());
      }
    };
    const FoldData fold = staged("split", [&] { return make_fold(cfg, *data, u.repeat, u.rotation); });
    WeightArtifacts w;
    if (req.stage == RunStage::factual) {
      w = staged("load", [&] { return read_weight_artifacts(dir, fold); });
      if (std::filesystem::exists(dir / "theta.json")) {
        u.propensity_best_round = staged("load", [&] {
          return json::parse(read_file(dir / "theta.json")).at("best_round").get<std::size_t>();
        });
      }
    } else {
      w = staged("propensity", [&] { return run_weight_stage(cfg, u.method, fold, u.seed, inner); });
      staged("write", [&] {
        write_weight_artifacts(dir, w, fold);
        return 0;
      });
      if (w.propensity) u.propensity_best_round = w.propensity->best_round;
    }
    if (req.stage != RunStage::propensity) {
      const FactualModel model = staged(
          "factual", [&] { return run_factual_stage(cfg, u.method, fold, w, data->outcome_kind(), u.seed, inner); });
      u.factual_best_round = model.best_round;
      const FoldEvaluation ev =
          staged("evaluate", [&] { return evaluate_fold(cfg, u.method, fold, w, model, u.seed); });
      u.metrics = ev.metrics;
      staged("write", [&] {
        write_file(dir / "phi.json",
                   json{{"best_round", model.best_round}, {"phi", params_json(model.phi)}}.dump() + "\n");
        write_file(dir / "factual_log.jsonl", round_log_lines(model.log, "factual"));
        std::string e = "client_id,row,e_hat" + std::string(ev.e_true.empty() ? "" : ",e_true") + "\n";
        std::size_t k = 0;
        for (const auto& c : fold.test) {
          for (std::size_t r = 0; r < c.size(); ++r, ++k) {
            e += std::to_string(c.client_id) + "," + std::to_string(r) + "," + format_double(ev.e_hat[k]);
            if (!ev.e_true.empty()) e += "," + format_double(ev.e_true[k]);
            e += "\n";
          }
        }
        write_file(dir / "e_hat.csv", e);
        write_file(dir / "metrics.json", to_json(ev.metrics) + "\n");
        return 0;
      });
    }
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    json line{{"event", "unit_done"}, {"method", method_name(u.method)}, {"repeat", u.repeat},
              {"fold", u.rotation},   {"wall_ms", ms}};
    if (u.metrics) line["rpehe"] = u.metrics->rpehe;
    std::lock_guard lock(log_mu);
    run_log << line.dump() << '\n' << std::flush;
  });

  if (req.stage != RunStage::propensity) {
    for (auto m : cfg.methods) {
      std::vector<UnitResult> mine;
      std::string csv = "repeat,fold,replication,seed,propensity_best_round,factual_best_round";
      for (const auto& c : metric_columns()) csv += "," + c;
      csv += "\n";
      for (const auto& u : units) {
        if (u.method != m) continue;
        csv += metrics_row(u);
        mine.push_back(u);
      }
      write_file(req.out / std::string(method_name(m)) / "metrics.csv", csv);
      write_file(req.out / std::string(method_name(m)) / "summary.csv", summary_csv(mine));
    }
  }

  // Manifest: resolved config, per-unit seeds, checksums of deterministic files.
  json manifest;
  manifest["version"] = "0.1.0";
  manifest["config"] = config_to_json(cfg);
  manifest["stage"] = req.stage == RunStage::all ? "all" : req.stage == RunStage::propensity ? "propensity" : "factual";
  json ulist = json::array();
  for (const auto& u : units) {
    ulist.push_back({{"method", method_name(u.method)}, {"repeat", u.repeat}, {"fold", u.rotation},
                     {"replication", u.replication}, {"seed", u.seed}});
  }
  manifest["units"] = ulist;
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(req.out)) {
    if (e.is_regular_file() && checksummed(e.path())) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  json sums = json::object();
  for (const auto& f : files) sums[std::filesystem::relative(f, req.out).generic_string()] = sha256_file(f);
  manifest["files"] = sums;
  write_file(req.out / "manifest.json", manifest.dump(2) + "\n");
  return units;
}

// ---- report / diagnose ------------------------------------------------------------

std::string build_report(const std::filesystem::path& out) {
  std::string csv = "method";
  for (const auto& c : metric_columns()) csv += "," + c + "_mean," + c + "_sd";
  csv += ",rpehe_median,n\n";
  bool any = false;
  for (auto m : all_methods()) {
    const auto path = out / std::string(method_name(m)) / "metrics.csv";
    if (!std::filesystem::exists(path)) continue;
    any = true;
    const CsvTable t = read_csv_table(path);
    csv += std::string(method_name(m));
    SummaryStat rp;
    for (const auto& c : metric_columns()) {
      const std::size_t col = t.column(c);
      Vector v;
      for (const auto& row : t.rows) {
        if (!row[col].empty()) v.push_back(parse_num(row[col], path));
      }
      const auto st = summarize(v);
      if (c == "rpehe") rp = st;
      csv += st.n ? "," + format_double(st.mean) + "," + format_double(st.sd) : std::string(",,");
    }
    csv += (rp.n ? "," + format_double(rp.median) : std::string(",")) + "," + std::to_string(t.rows.size()) + "\n";
  }
  if (!any) throw IngestError("report: no <method>/metrics.csv under " + out.string());
  return csv;
}

std::string build_covariance_table(const std::filesystem::path& out) {
  const auto manifest_path = out / "manifest.json";
  json manifest;
  try {
    manifest = json::parse(read_file(manifest_path));
  } catch (const json::exception& e) {
    throw IngestError("diagnose: cannot parse " + manifest_path.string() + ": " + e.what());
  }
  const ExperimentConfig cfg = config_from_json(manifest.at("config"));
  const DataSource data(cfg);
  std::string units_csv = "method,repeat,fold,cov_local,cov_global\n";
  std::map<std::string, std::pair<Vector, Vector>> by_method;
  for (const auto& u : manifest.at("units")) {
    const Method m = parse_method(u.at("method").get<std::string>());
    const auto repeat = u.at("repeat").get<std::size_t>();
    const auto fold_k = u.at("fold").get<std::size_t>();
    const FoldData fold = make_fold(cfg, data, repeat, fold_k);
    const WeightArtifacts w = read_weight_artifacts(unit_dir(out, m, repeat, fold_k), fold);
    std::vector<Vector> pw;
    for (const auto& p : w.train) pw.push_back(p.w);
    const auto cov = covariance_diagnostics(fold.train, pw, w.hospital.w);
    units_csv += std::string(method_name(m)) + "," + std::to_string(repeat) + "," + std::to_string(fold_k) + "," +
                 format_double(cov.local_mean) + "," + format_double(cov.global_summary) + "\n";
    auto& acc = by_method[std::string(method_name(m))];
    acc.first.push_back(cov.local_mean);
    acc.second.push_back(cov.global_summary);
  }
  write_file(out / "covariance_units.csv", units_csv);
  std::string csv = "method,cov_local_mean,cov_local_sd,cov_global_mean,cov_global_sd,n\n";
  for (auto m : all_methods()) {
    const auto it = by_method.find(std::string(method_name(m)));
    if (it == by_method.end()) continue;
    const auto l = summarize(it->second.first);
    const auto g = summarize(it->second.second);
    csv += it->first + "," + format_double(l.mean) + "," + format_double(l.sd) + "," + format_double(g.mean) + "," +
           format_double(g.sd) + "," + std::to_string(l.n) + "\n";
  }
  return csv;
}

std::vector<std::filesystem::path> generate_datasets(const ExperimentConfig& cfg, const std::filesystem::path& out) {
  if (cfg.source != "synthetic") throw ConfigError("generate: dataset.source must be synthetic");
  const SyntheticConfig sc = make_synthetic_config(cfg.synthetic);
  std::filesystem::create_directories(out);
  std::vector<std::filesystem::path> files;
  for (std::size_t r = 0; r < cfg.n_replications; ++r) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "replication_%02zu.csv", r);
    const auto path = out / buf;
    write_csv(path, generate_synthetic(sc, r));
    files.push_back(path);
  }
  write_ground_truth(out / "ground_truth.json", sc);
  files.push_back(out / "ground_truth.json");
  return files;
}

}  // namespace fediptw
