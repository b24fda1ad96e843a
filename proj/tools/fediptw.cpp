// Command-line front end: generate | run | diagnose | report.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "fediptw/experiment.hpp"
#include "fediptw/io.hpp"
#include "fediptw/log.hpp"

namespace {

using namespace fediptw;

struct Common {
  std::string config;
  std::string method;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> jobs;
};

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? config_from_json(nlohmann::json::object()) : load_config(c.config);
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.synthetic.seed = *c.seed;
  }
  if (c.jobs) cfg.jobs = *c.jobs;
  if (!c.method.empty()) {
    cfg.methods.clear();
    if (c.method == "all") {
      cfg.methods = all_methods();
    } else {
      std::size_t start = 0;
      while (start <= c.method.size()) {
        const auto comma = c.method.find(',', start);
        const auto name = c.method.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
        cfg.methods.push_back(parse_method(name));
        if (comma == std::string::npos) break;
        start = comma + 1;
      }
    }
  }
  cfg.validate();
  return cfg;
}

void add_common(CLI::App* app, Common& c, bool with_method) {
  app->add_option("--config", c.config, "JSON experiment config")->check(CLI::ExistingFile);
  if (with_method) app->add_option("--method", c.method, "method name, comma list, or 'all'");
  app->add_option("--seed", c.seed, "base seed (training, splits and generator)");
  app->add_option("--out", c.out, "output directory")->required();
  app->add_option("--jobs", c.jobs, "parallel workers")->check(CLI::PositiveNumber);
}

int fail(std::string_view stage, std::string_view what) {
  std::cerr << "error [" << stage << "]: " << what << '\n';
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated ITE estimation with two-level inverse propensity weighting"};
  app.require_subcommand(1);

  Common gen, run, diag, rep;
  std::string stage = "all";
  auto* g = app.add_subcommand("generate", "write synthetic replications and the ground-truth sidecar");
  add_common(g, gen, false);
  auto* r = app.add_subcommand("run", "train and evaluate methods over the fold protocol");
  add_common(r, run, true);
  r->add_option("--stage", stage, "all | propensity | factual")->check(CLI::IsMember({"all", "propensity", "factual"}));
  auto* d = app.add_subcommand("diagnose", "covariance diagnostics from persisted weights of a run");
  d->add_option("--out", diag.out, "run directory")->required()->check(CLI::ExistingDirectory);
  auto* p = app.add_subcommand("report", "aggregate metric table of a run");
  p->add_option("--out", rep.out, "run directory")->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  set_warning_sink([](std::string_view m) {
    std::cerr << nlohmann::json{{"level", "warning"}, {"message", std::string(m)}}.dump() << '\n';
  });

  std::string current = "config";
  try {
    if (*g) {
      const auto cfg = resolve(gen);
      current = "generate";
      for (const auto& f : generate_datasets(cfg, gen.out)) {
        std::cout << nlohmann::json{{"event", "wrote"}, {"path", f.string()}, {"sha256", sha256_file(f)}}.dump()
                  << '\n';
      }
      write_file(std::filesystem::path(gen.out) / "config.json", config_to_json(cfg).dump(2) + "\n");
    } else if (*r) {
      RunRequest req{resolve(run), run.out, parse_stage(stage)};
      current = "run";
      const auto units = run_experiment(req);
      std::cout << nlohmann::json{{"event", "run_done"}, {"units", units.size()}, {"out", run.out}}.dump() << '\n';
      if (req.stage != RunStage::propensity) std::cout << build_report(run.out);
    } else if (*d) {
      current = "diagnose";
      const std::string csv = build_covariance_table(diag.out);
      write_file(std::filesystem::path(diag.out) / "covariance.csv", csv);
      std::cout << csv;
    } else if (*p) {
      current = "report";
      const std::string csv = build_report(rep.out);
      write_file(std::filesystem::path(rep.out) / "report.csv", csv);
      std::cout << csv;
    }
  } catch (const StageError& e) {
    return fail(e.stage(), e.what());
  } catch (const std::exception& e) {
    return fail(current, e.what());
  }
  return 0;
}
