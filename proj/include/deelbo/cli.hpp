#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "deelbo/gridsearch.hpp"
#include "deelbo/trainer.hpp"

namespace deelbo {

struct SyntheticDataConfig {
  bool enabled = true;
  int features = 8;
  int n_source = 400;
  int n_target = 100;
  int n_test = 400;
  double separation = 3.0;
  double shift = 1.0;
};

/// One experiment, assembled from a key = value config file (sections per
/// module) with every field overridable by command-line flags.
struct ExperimentConfig {
  // [model]
  std::vector<int> hidden = {32, 32};
  int repr_dim = 16;
  int num_classes = 4;

  // [data]
  std::string train_csv;
  std::string test_csv;
  SyntheticDataConfig synthetic;
  bool normalize = true;
  // Pins the task (class means, shift directions, test draw); the run seed
  // only resamples the target training set and drives SGD.
  std::uint64_t data_seed = 42;

  // [run]
  PriorKind prior_kind = PriorKind::L2SP;
  std::string method = "de-elbo";
  std::string prior_path;
  std::string out;
  std::uint64_t seed = 0;
  int workers = 1;
  int threads = 1;
  int swag_rank = 0;  // 0 disables SWAG collection
  int swag_interval = 25;

  // [train] and grids
  TrainConfig train;
  std::vector<double> lr_grid = {0.1, 0.01, 0.001, 0.0001};
  GridSpec grid;  // empty fields fall back to the per-family defaults
};

ExperimentConfig load_config_file(const std::string& path);
void apply_config_entry(ExperimentConfig& cfg, const std::string& key,
                        const std::string& value);

PriorKind parse_prior_kind(const std::string& name);

/// Output root when --out is not given: $DEELBO_RESULTS_DIR or ".".
std::string default_results_dir();

int cmd_pretrain(const ExperimentConfig& cfg, std::ostream& out);
int cmd_finetune(const ExperimentConfig& cfg, std::ostream& out);
int cmd_gridsearch(const ExperimentConfig& cfg, std::ostream& out);
int cmd_compare(const std::vector<std::string>& result_files, std::ostream& out);
int cmd_verify(std::ostream& out);

}  // namespace deelbo
