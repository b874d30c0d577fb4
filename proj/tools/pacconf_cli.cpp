// pacconf: command-line front end for the conformal experiments.
//
//   pacconf run     --config cfg.json [--set key=value]...
//   pacconf sweep   --config cfg.json [--workers 4] [--set key=value]...
//   pacconf budget  [--alpha 0.1] [--delta 0.05] [--n 1000,10000] [--grid 0.01:0.1:0.005]
//   pacconf report  results.csv [more.csv...] [--out summary]
//   pacconf certify predictor.pred
//
// Outputs go under --output, else $PACCONF_OUTPUT_ROOT, else the config's
// output_dir.

#include <CLI11.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "pacconf/pacconf.hpp"

namespace fs = std::filesystem;
using pacconf::json;

namespace {

pacconf::ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides,
                                      const std::string& output) {
  json j = pacconf::read_json_file(path);
  for (const auto& o : overrides) pacconf::apply_override(j, o);
  if (!output.empty()) {
    j["output_dir"] = output;
  } else if (const char* root = std::getenv("PACCONF_OUTPUT_ROOT"); root && *root) {
    const std::string leaf = j.value("output_dir", std::string("results"));
    j["output_dir"] = (fs::path(root) / fs::path(leaf).filename()).string();
  }
  return pacconf::parse_config(j);
}

std::vector<double> parse_grid(const std::string& spec) {
  // "a:b:step" or a comma list
  std::vector<double> out;
  if (spec.find(':') != std::string::npos) {
    double a = 0, b = 0, step = 0;
    char c1 = 0, c2 = 0;
    std::istringstream is(spec);
    if (!(is >> a >> c1 >> b >> c2 >> step) || c1 != ':' || c2 != ':' || step <= 0 || b < a) {
      throw pacconf::ParseError("grid must look like start:stop:step");
    }
    const long n = static_cast<long>(std::floor((b - a) / step + 1e-9));
    for (long i = 0; i <= n; ++i) out.push_back(a + static_cast<double>(i) * step);
    return out;
  }
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(pacconf::detail::parse_double(item));
  return out;
}

int run_sweep_command(const std::string& config, const std::vector<std::string>& overrides, const std::string& output,
                      unsigned workers, bool single) {
  const pacconf::ExperimentConfig cfg = load_config(config, overrides, output);
  if (single && (cfg.n_cal.size() != 1 || cfg.data_splits.size() != 1)) {
    throw pacconf::ParseError("run takes a single n_cal and data_split; use 'sweep' for grids");
  }
  std::cerr << "config " << pacconf::config_hash(cfg) << " -> " << cfg.output_dir << "\n";
  const auto summary = pacconf::run_sweep(cfg, workers, &std::cerr);
  std::cerr << summary.executed << " run(s) executed, " << summary.skipped << " reused, " << summary.failed
            << " failed\n";
  std::cout << (fs::path(cfg.output_dir) / "results.csv").string() << "\n";
  return summary.failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PAC-Bayes conformal prediction experiments"};
  app.require_subcommand(1);

  std::string config;
  std::vector<std::string> overrides;
  std::string output;
  unsigned workers = 1;

  auto* run = app.add_subcommand("run", "Run one experiment (all methods and seeds in the config)");
  run->add_option("-c,--config", config, "JSON config file")->required()->check(CLI::ExistingFile);
  run->add_option("--set", overrides, "Override a config value, e.g. --set inner_steps=500");
  run->add_option("-o,--output", output, "Output directory");

  auto* sweep = app.add_subcommand("sweep", "Run the full grid of methods x n_cal x data_split x seeds");
  sweep->add_option("-c,--config", config, "JSON config file")->required()->check(CLI::ExistingFile);
  sweep->add_option("--set", overrides, "Override a config value");
  sweep->add_option("-o,--output", output, "Output directory");
  sweep->add_option("-j,--workers", workers, "Parallel runs")->check(CLI::PositiveNumber);

  double alpha = 0.1;
  double delta = 0.05;
  std::string n_spec = "100,1000,10000,100000";
  std::string grid_spec = "0.005:0.1:0.0025";
  std::string budget_out;
  auto* budget = app.add_subcommand("budget", "KL budget table over (N, alpha_hat)");
  budget->add_option("--alpha", alpha, "Target miscoverage");
  budget->add_option("--delta", delta, "Failure probability");
  budget->add_option("--n", n_spec, "Comma-separated calibration sizes");
  budget->add_option("--grid", grid_spec, "alpha_hat grid as start:stop:step or a comma list");
  budget->add_option("-o,--output", budget_out, "CSV path (default: stdout)");

  std::vector<std::string> result_files;
  std::string report_out = "summary";
  auto* report = app.add_subcommand("report", "Aggregate results CSV files into a summary");
  report->add_option("results", result_files, "results.csv files")->required()->check(CLI::ExistingFile);
  report->add_option("-o,--out", report_out, "Output prefix (writes <prefix>.csv and <prefix>.json)");

  std::string predictor_path;
  auto* certify = app.add_subcommand("certify", "Recompute certificates from a saved predictor");
  certify->add_option("predictor", predictor_path, "Predictor file")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return run_sweep_command(config, overrides, output, 1, true);
    if (sweep->parsed()) return run_sweep_command(config, overrides, output, workers, false);
    if (budget->parsed()) {
      std::vector<long> ns;
      for (double v : parse_grid(n_spec)) ns.push_back(static_cast<long>(v));
      const auto rows = pacconf::budget_table(alpha, delta, ns, parse_grid(grid_spec));
      const std::string csv = pacconf::budget_csv(rows);
      if (budget_out.empty()) {
        std::cout << csv;
      } else {
        pacconf::detail::write_atomic(budget_out, csv);
      }
      return 0;
    }
    if (report->parsed()) {
      std::vector<pacconf::RunRecord> runs;
      for (const auto& f : result_files) {
        auto part = pacconf::read_results_csv(f);
        runs.insert(runs.end(), part.begin(), part.end());
      }
      const auto cells = pacconf::build_report(runs);
      pacconf::detail::write_atomic(report_out + ".csv", pacconf::report_csv(cells));
      pacconf::detail::write_atomic(report_out + ".json", pacconf::report_json(cells).dump(2) + "\n");
      std::cout << pacconf::report_csv(cells);
      return 0;
    }
    if (certify->parsed()) {
      const auto pred = pacconf::load_predictor(predictor_path);
      if (!pred.certificate) {
        std::cerr << "predictor carries no certificate inputs (only PAC-Bayes predictors do)\n";
        return 2;
      }
      const auto rep = pacconf::certify(*pred.certificate);
      std::cout << pacconf::certificate_json(*pred.certificate, rep).dump(2) << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
