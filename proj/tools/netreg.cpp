// netreg: fit, tune, predict and simulate network-regularized count regressions.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "netreg/pipeline.hpp"

namespace {

using nlohmann::json;

/// Config file, then --set overrides, then NETREG_THREADS, then explicit flags.
struct ConfigFlags {
  std::string config;
  std::vector<std::string> sets;
  json flags = json::object();

  void attach(CLI::App* app) {
    app->add_option("-c,--config", config, "JSON configuration file")->check(CLI::ExistingFile);
    app->add_option("--set", sets, "override a config key, e.g. --set simulation.replicates=5")
        ->take_all();
  }

  template <class T>
  void flag(CLI::App* app, const std::string& name, const std::string& key, const std::string& help) {
    auto* opt = app->add_option(name, help);
    opt->type_name(std::is_arithmetic_v<T> ? "NUM" : "TEXT");
    opt->each([this, key](const std::string& text) {
      T value{};
      std::istringstream in(text);
      if constexpr (std::is_same_v<T, std::string>) {
        value = text;
      } else if (!(in >> value) || !in.eof()) {
        throw CLI::ValidationError(key, "'" + text + "' is not a number");
      }
      set(key, value);
    });
  }

  void toggle(CLI::App* app, const std::string& name, const std::string& key, bool value,
              const std::string& help) {
    app->add_flag_callback(name, [this, key, value] { set(key, value); }, help);
  }

  void set(const std::string& key, json value) {
    json* node = &flags;
    std::size_t start = 0;
    for (auto dot = key.find('.'); dot != std::string::npos; dot = key.find('.', start)) {
      node = &(*node)[key.substr(start, dot - start)];
      start = dot + 1;
    }
    (*node)[key.substr(start)] = std::move(value);
  }

  netreg::RunConfig load() const {
    json j = config.empty() ? json::object() : netreg::read_json(config);
    j = netreg::apply_overrides(std::move(j), sets);
    if (std::getenv(netreg::kThreadsEnv)) {
      const unsigned env = netreg::thread_count(0);
      j["threads"] = env;
    }
    j.merge_patch(flags);
    return netreg::config_from_json(j);
  }
};

void add_data_flags(CLI::App* app, ConfigFlags& f) {
  f.flag<std::string>(app, "-e,--edges", "edges", "edge list CSV (src,dst,distance)");
  f.flag<std::string>(app, "-v,--vertices", "vertices", "vertex table CSV");
  f.flag<std::string>(app, "-o,--output", "output", "output directory");
  f.flag<std::string>(app, "--response", "response", "response column");
  f.flag<std::string>(app, "--id-column", "id_column", "vertex id column");
  f.flag<double>(app, "--range", "range", "range parameter; calibrated when absent");
  f.flag<long long>(app, "-K,--basis-rank", "basis_rank", "number of Laplacian eigenvectors");
  f.flag<unsigned long long>(app, "--seed", "seed", "random seed");
  f.flag<unsigned>(app, "-j,--threads", "threads", "worker threads (overrides NETREG_THREADS)");
}

void print_summary(const netreg::ComparisonSummary& s) {
  std::cout << "replicates: " << s.replicates << "\n";
  std::cout << "mean relative error by model and stratum:\n";
  for (const auto& [model, strata] : s.mean_error) {
    std::cout << "  " << model;
    for (const auto& [stratum, value] : strata) std::cout << "  " << stratum << "=" << value;
    std::cout << "\n";
  }
  std::cout << "Mod4 best in BG: " << s.background_wins << ", in HZ: " << s.hot_wins << "\n";
}

int report_model(const std::string& path) {
  const auto a = netreg::load_artifact(path);
  std::cout << "vertices: " << a.labels.size() << "\n"
            << "range: " << a.range << "\n"
            << "basis rank: " << a.basis_rank << " (key " << a.basis_key << ")\n"
            << "v0: " << a.v0 << "  lambda: " << a.lambda_theta << "  loop: " << a.loop << "\n"
            << "ranks:\n";
  for (std::size_t j = 0; j < a.predictors.size(); ++j)
    std::cout << "  " << a.predictors[j] << ": " << a.ranks[j] << "\n";
  if (a.hotzone)
    std::cout << "hot-zone model: zeta " << a.zeta << ", lambda_omega " << a.lambda_omega << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Network-regularized count regression with spectral bases and hot zones", "netreg"};
  app.set_version_flag("--version", netreg::kVersion);
  app.require_subcommand(1);

  ConfigFlags fit_flags, tune_flags, sim_flags;

  auto* fit = app.add_subcommand("fit", "tune, select ranks and fit the hot-zone model");
  fit_flags.attach(fit);
  add_data_flags(fit, fit_flags);
  fit_flags.toggle(fit, "--no-hotzone", "hotzone", false, "fit the single-state smoothed model only");

  auto* tune = app.add_subcommand("tune", "tune V0 and lambda and report the LOOP surface");
  tune_flags.attach(tune);
  add_data_flags(tune, tune_flags);

  auto* sim = app.add_subcommand("simulate", "generate replicates and compare the four models");
  sim_flags.attach(sim);
  sim_flags.flag<std::string>(sim, "-o,--output", "output", "output directory");
  sim_flags.flag<unsigned long long>(sim, "--seed", "seed", "random seed");
  sim_flags.flag<unsigned>(sim, "-j,--threads", "threads", "worker threads (overrides NETREG_THREADS)");
  sim_flags.flag<long long>(sim, "-r,--replicates", "simulation.replicates", "number of replicates");
  sim_flags.flag<long long>(sim, "--subgraph-size", "simulation.subgraph_size", "vertices per scenario");
  sim_flags.toggle(sim, "--check", "simulation.check", true,
                   "exit 1 unless Mod4 wins often enough in BG and HZ");
  sim_flags.toggle(sim, "--no-compare", "simulation.compare", false, "only generate scenarios");

  std::string model_path, pred_edges, pred_vertices, pred_output = "predictions.csv";
  auto* predict = app.add_subcommand("predict", "apply a fitted model to a graph and vertex table");
  predict->add_option("-m,--model", model_path, "model.json from fit")->required()->check(CLI::ExistingFile);
  predict->add_option("-e,--edges", pred_edges, "edge list CSV")->required()->check(CLI::ExistingFile);
  predict->add_option("-v,--vertices", pred_vertices, "vertex table CSV")->required()->check(CLI::ExistingFile);
  predict->add_option("-o,--output", pred_output, "prediction CSV")->capture_default_str();

  std::string report_comparison, report_artifact;
  bool report_check = false;
  double win_fraction = 0.8;
  auto* report = app.add_subcommand("report", "summarize a comparison table or a fitted model");
  auto* cmp = report->add_option("--comparison", report_comparison, "comparison.csv from simulate")
                  ->check(CLI::ExistingFile);
  auto* mdl = report->add_option("--model", report_artifact, "model.json from fit")->check(CLI::ExistingFile);
  cmp->excludes(mdl);
  report->add_flag("--check", report_check, "exit 1 unless Mod4 wins often enough")->needs(cmp);
  report->add_option("--win-fraction", win_fraction, "required win fraction for --check")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (fit->parsed()) {
      const auto c = fit_flags.load();
      const auto r = netreg::run_fit(c);
      std::cout << "fit: " << r.predictions.mu.size() << " vertices, lambda " << r.artifact.lambda_theta
                << ", v0 " << r.artifact.v0 << ", ranks " << netreg::join_ranks(r.artifact.ranks);
      if (r.artifact.hotzone)
        std::cout << ", zeta " << r.artifact.zeta << " after " << r.hotzone_iterations << " EM iterations";
      std::cout << "\nwrote " << r.output.string() << "\n";
    } else if (tune->parsed()) {
      const auto c = tune_flags.load();
      const auto r = netreg::run_tune(c);
      std::cout << "tune: v0 " << r.v0 << ", lambda " << r.lambda << ", loop " << r.loop << ", ranks "
                << netreg::join_ranks(r.ranks) << "\nwrote " << c.output << "\n";
    } else if (sim->parsed()) {
      const auto c = sim_flags.load();
      const auto r = netreg::run_simulate(c);
      std::cout << "simulate: " << r.replicates.size() << " replicate(s) written to " << c.output << "\n";
      if (c.simulation.compare) print_summary(r.summary);
      if (c.simulation.check && !r.check_passed) {
        std::cerr << "netreg: check failed: Mod4 wins below " << c.simulation.win_fraction << "\n";
        return 1;
      }
    } else if (predict->parsed()) {
      const auto p = netreg::run_predict(model_path, pred_edges, pred_vertices, pred_output);
      std::cout << "predict: " << p.mu.size() << " vertices written to " << pred_output << "\n";
    } else if (report->parsed()) {
      if (report_artifact.empty() && report_comparison.empty()) {
        std::cerr << "netreg: report needs --comparison or --model\n";
        return 2;
      }
      if (!report_artifact.empty()) return report_model(report_artifact);
      const auto s = netreg::summarize_comparison(netreg::read_comparison(report_comparison));
      print_summary(s);
      if (report_check && (s.background_wins < win_fraction || s.hot_wins < win_fraction)) {
        std::cerr << "netreg: check failed: Mod4 wins below " << win_fraction << "\n";
        return 1;
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "netreg: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
