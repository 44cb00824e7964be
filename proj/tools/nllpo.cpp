// Command-line front end: parses flags, layers them over an optional config
// file, and hands the result to run_experiment.
#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nllpo/error.hpp"
#include "nllpo/harness.hpp"

namespace {

constexpr int kExitConfig = 2;

int run(int argc, char** argv) {
  CLI::App app{"Reward-parameterised policy-gradient training and experiments"};
  app.require_subcommand(1, 1);

  std::optional<std::string> loss, config_file, out_dir;
  std::optional<double> lambda;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> seeds;
  std::vector<std::string> overrides;

  const std::vector<std::pair<const char*, const char*>> kinds = {
      {"synth", "linear-Gaussian synthetic regression"},
      {"classify", "classification (bundled generator or --set csv_path=...)"},
      {"landscape", "outer NLL as a function of the isotropic reward u"},
      {"closed-form-check", "numerical check of the linear-Gaussian closed forms"},
      {"regress", "dynamics-style multivariate regression"},
  };
  for (const auto& [name, help] : kinds) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--loss", loss, "nll, mse, pg-identity, pg-heuristic or pg-implicit")
        ->check(CLI::IsMember({"nll", "mse", "pg-identity", "pg-heuristic", "pg-implicit"}));
    sub->add_option("--lambda", lambda, "entropy weight (> 0)");
    sub->add_option("--seed", seed, "first seed");
    sub->add_option("--seeds", seeds, "number of consecutive seeds");
    sub->add_option("--config", config_file, "flat key = value file")->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--set", overrides, "extra key=value settings, applied last")->take_all();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  nllpo::RunConfig cfg;
  if (config_file) cfg = nllpo::load_config(*config_file, cfg);
  cfg.experiment = nllpo::parse_experiment(app.get_subcommands().front()->get_name());
  if (loss) cfg.loss = nllpo::parse_loss(*loss);
  if (lambda) cfg.lambda = *lambda;
  if (seed) cfg.seed = *seed;
  if (seeds) cfg.seeds = *seeds;
  if (out_dir) cfg.out_dir = *out_dir;
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw nllpo::Error(nllpo::ErrorCode::kConfigError, "--set expects key=value");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }

  const nllpo::ExperimentOutcome out = nllpo::run_experiment(cfg, std::cout);
  if (out.status != 0) std::cerr << "nllpo: " << out.message << '\n';
  return out.status;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const nllpo::Error& e) {
    std::cerr << "nllpo: " << e.what() << '\n';
    return nllpo::exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "nllpo: internal error: " << e.what() << '\n';
    return 1;
  }
}
