#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "deelbo/cli.hpp"
#include "deelbo/errors.hpp"

namespace {

struct FlagOverrides {
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out;
  std::string prior;
  std::string prior_kind;
  std::string method;
  double kappa = 1.0;
  std::string kappa_mode;
  int swag = 0;
  int workers = 1;
  int threads = 1;
};

void add_common_flags(CLI::App* cmd, FlagOverrides& flags) {
  cmd->add_option("--config", flags.config_path, "Experiment config file (key = value)");
  cmd->add_option("--seed", flags.seed, "Experiment seed");
  cmd->add_option("--out", flags.out, "Output path (file for pretrain, directory otherwise)");
  cmd->add_option("--prior", flags.prior, "Prior checkpoint path");
  cmd->add_option("--prior-kind", flags.prior_kind, "Prior family: l2zero | l2sp | ptyl");
  cmd->add_option("--method", flags.method, "Method tag: de-elbo | map-gs");
  cmd->add_option("--kappa", flags.kappa, "Fixed likelihood weight (kappa >= 1)");
  cmd->add_option("--kappa-mode", flags.kappa_mode, "fixed | d-over-n");
  cmd->add_option("--swag", flags.swag, "Collect a rank-K SWAG prior during pretraining");
  cmd->add_option("--workers", flags.workers, "Concurrent grid workers");
  cmd->add_option("--threads", flags.threads, "Concurrent training runs cap");
}

deelbo::ExperimentConfig assemble(const CLI::App* cmd, const FlagOverrides& flags) {
  deelbo::ExperimentConfig cfg;
  if (cmd->count("--config")) cfg = deelbo::load_config_file(flags.config_path);
  if (cmd->count("--seed")) cfg.seed = flags.seed;
  if (cmd->count("--out")) cfg.out = flags.out;
  if (cmd->count("--prior")) cfg.prior_path = flags.prior;
  if (cmd->count("--prior-kind")) cfg.prior_kind = deelbo::parse_prior_kind(flags.prior_kind);
  if (cmd->count("--method")) cfg.method = flags.method;
  if (cmd->count("--kappa")) {
    cfg.train.kappa = flags.kappa;
    cfg.train.kappa_mode = deelbo::KappaMode::Fixed;
  }
  if (cmd->count("--kappa-mode")) {
    if (flags.kappa_mode == "fixed") cfg.train.kappa_mode = deelbo::KappaMode::Fixed;
    else if (flags.kappa_mode == "d-over-n") cfg.train.kappa_mode = deelbo::KappaMode::DOverN;
    else throw deelbo::ConfigError("--kappa-mode must be fixed or d-over-n");
  }
  if (cmd->count("--swag")) cfg.swag_rank = flags.swag;
  if (cmd->count("--workers")) cfg.workers = flags.workers;
  if (cmd->count("--threads")) cfg.threads = flags.threads;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Data-emphasized ELBo transfer learning"};
  app.require_subcommand(1);

  FlagOverrides flags;
  auto* pretrain = app.add_subcommand("pretrain", "MAP-pretrain on the source task");
  auto* finetune = app.add_subcommand("finetune", "Fine-tune with the data-emphasized ELBo");
  auto* gridsearch = app.add_subcommand("gridsearch", "MAP + grid search baseline");
  auto* compare = app.add_subcommand("compare", "Summarize result files");
  auto* verify = app.add_subcommand("verify", "Run the oracle suites");
  add_common_flags(pretrain, flags);
  add_common_flags(finetune, flags);
  add_common_flags(gridsearch, flags);

  std::vector<std::string> result_files;
  compare->add_option("files", result_files, "RunResult JSONL files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (pretrain->parsed()) return deelbo::cmd_pretrain(assemble(pretrain, flags), std::cout);
    if (finetune->parsed()) return deelbo::cmd_finetune(assemble(finetune, flags), std::cout);
    if (gridsearch->parsed())
      return deelbo::cmd_gridsearch(assemble(gridsearch, flags), std::cout);
    if (compare->parsed()) return deelbo::cmd_compare(result_files, std::cout);
    if (verify->parsed()) return deelbo::cmd_verify(std::cout);
  } catch (const deelbo::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const deelbo::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
