// Command-line runner for the interior point and spectral experiments.
//
//   mgipm run <config>...       solve one or more control problems
//   mgipm spectral <config>     spectral-distance table
//
// Exit status: 0 when every run converged, 2 when a solve did not converge,
// 1 on configuration or I/O errors.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <future>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "mgipm/mgipm.hpp"

namespace {

struct Overrides {
  std::optional<std::string> output_dir;
  std::optional<int> levels;
  std::optional<int> finest_n;
  std::optional<double> beta;
};

int worker_cap() {
  int cap = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("MGIPM_THREADS")) {
    try {
      const int v = std::stoi(env);
      if (v >= 1) cap = v;
    } catch (const std::exception&) {
      throw mgipm::ConfigError(std::string("MGIPM_THREADS must be a positive integer, got '") + env + "'");
    }
  }
  return cap;
}

mgipm::ExperimentConfig load(const std::string& path, const Overrides& o, std::size_t index, std::size_t count) {
  mgipm::ExperimentConfig c = mgipm::load_config(path);
  if (o.output_dir) c.output_dir = count > 1 ? *o.output_dir + "/run" + std::to_string(index) : *o.output_dir;
  if (o.levels) c.levels = *o.levels;
  if (o.finest_n) c.finest_n = *o.finest_n;
  if (o.beta) c.beta = *o.beta;
  mgipm::validate_config(c);
  return c;
}

void report(const std::string& path, const mgipm::RunArtifacts& art, const mgipm::ExperimentConfig& c) {
  if (c.experiment == mgipm::ExperimentKind::SpectralTable) {
    std::printf("%s: %zu spectral cells -> %s\n", path.c_str(), art.spectral.size(), art.summary_csv.c_str());
    return;
  }
  const auto& r = art.result;
  std::printf("%s: %s after %zu outer iterations, %ld fine mat-vecs -> %s\n", path.c_str(),
              r.converged ? "converged" : "NOT converged", r.records.size(), r.total_fine_matvecs,
              c.output_dir.c_str());
}

// Runs every config; independent configs run concurrently, capped by MGIPM_THREADS.
int run_all(const std::vector<std::string>& paths, const Overrides& o, bool spectral) {
  std::vector<mgipm::ExperimentConfig> cfgs;
  for (std::size_t i = 0; i < paths.size(); ++i) {
    cfgs.push_back(load(paths[i], o, i, paths.size()));
    const bool is_spectral = cfgs.back().experiment == mgipm::ExperimentKind::SpectralTable;
    if (is_spectral != spectral)
      throw mgipm::ConfigError(paths[i] + ": use '" + (is_spectral ? "spectral" : "run") + "' for this experiment");
  }
  const int cap = worker_cap();
  const int inner_workers = spectral ? std::max(1, cap / static_cast<int>(cfgs.size())) : 1;
  int status = 0;
  for (std::size_t start = 0; start < cfgs.size(); start += cap) {
    std::vector<std::future<mgipm::RunArtifacts>> batch;
    const std::size_t stop = std::min(cfgs.size(), start + static_cast<std::size_t>(cap));
    for (std::size_t i = start; i < stop; ++i)
      batch.push_back(std::async(stop - start > 1 ? std::launch::async : std::launch::deferred,
                                 [&, i] { return mgipm::run_experiment(cfgs[i], inner_workers); }));
    for (std::size_t i = start; i < stop; ++i) {
      try {
        const mgipm::RunArtifacts art = batch[i - start].get();
        report(paths[i], art, cfgs[i]);
        if (!art.converged) status = std::max(status, 2);
      } catch (const mgipm::SolverError& e) {
        std::fprintf(stderr, "%s: solver failure: %s\n", paths[i].c_str(), e.what());
        status = std::max(status, 2);
      }
    }
  }
  return status;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multigrid-preconditioned interior point solver for box-constrained control problems"};
  app.require_subcommand(1);
  Overrides o;
  std::vector<std::string> run_paths;
  std::string spectral_path;

  const auto add_overrides = [&](CLI::App* sub) {
    sub->add_option_function<std::string>("--output-dir", [&](const std::string& v) { o.output_dir = v; },
                                           "Directory for the CSV outputs");
    sub->add_option_function<int>("--levels", [&](const int& v) { o.levels = v; }, "Number of grid levels");
    sub->add_option_function<int>("--finest-n", [&](const int& v) { o.finest_n = v; }, "Cells per side, finest level");
    sub->add_option_function<double>("--beta", [&](const double& v) { o.beta = v; }, "Regularization parameter");
  };
  CLI::App* run = app.add_subcommand("run", "Solve the control problem(s) described by config files");
  run->add_option("config", run_paths, "Config file(s)")->required()->check(CLI::ExistingFile);
  add_overrides(run);
  CLI::App* spectral = app.add_subcommand("spectral", "Compute the spectral-distance table");
  spectral->add_option("config", spectral_path, "Config file")->required()->check(CLI::ExistingFile);
  add_overrides(spectral);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*run) return run_all(run_paths, o, false);
    return run_all({spectral_path}, o, true);
  } catch (const mgipm::SolverError& e) {
    std::fprintf(stderr, "solver failure: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
