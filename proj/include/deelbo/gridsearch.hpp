#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "deelbo/dataio.hpp"
#include "deelbo/trainer.hpp"
#include "deelbo/variational.hpp"

namespace deelbo {

/// Candidate values for the MAP baseline. `alpha_grid` holds alpha/N values
/// shared by both penalties for the identity-prior variants; `beta_grid`
/// holds the 1/(tau N) head values and `lambda_grid` the backbone scales
/// for the low-rank prior.
struct GridSpec {
  std::vector<double> lr_grid;
  std::vector<double> alpha_grid;
  std::vector<double> beta_grid;
  std::vector<double> lambda_grid;

  static GridSpec defaults_l2();    // 4 lr x 6 penalty values
  static GridSpec defaults_ptyl();  // 4 lr x 10 lambda x 6 head values

  void validate(PriorKind kind) const;
};

struct GridRow {
  double lr = 0;
  double alpha_over_n = 0;  // backbone penalty / N (identity-prior variants)
  double beta_over_n = 0;   // head penalty / N
  double lambda = 0;        // backbone prior scale (low-rank variant)
  double val_nll = 0;
  double val_acc = 0;
  double seconds = 0;
  bool diverged = false;
};

struct GridResult {
  std::vector<GridRow> rows;
  std::size_t selected = 0;
  RunResult retrained;
  std::size_t total_runs = 0;  // grid rows + 1 retrain
  double total_seconds = 0;
};

/// Class-stratified holdout: per class, round(count * val_fraction) examples
/// go to the validation split; the rest stay in train. Deterministic given
/// the seed; the two splits partition the input.
std::pair<Dataset, Dataset> split_train_val(const Dataset& data, double val_fraction,
                                            std::uint64_t seed);

/// MAP-trains one model per grid point on the 4/5 split, selects the lowest
/// validation NLL (ties prefer stronger regularization, then the smaller
/// learning rate), and retrains the winner on the full set.
GridResult run_grid(const ModelSpec& spec, const Dataset& train, const Dataset* test,
                    const BackbonePrior<double>& prior,
                    const Eigen::VectorXd& init_backbone, const GridSpec& grid,
                    const TrainConfig& cfg, int workers = 1);

}  // namespace deelbo
