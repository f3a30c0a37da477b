#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "deelbo/dataio.hpp"
#include "deelbo/lowrank.hpp"
#include "deelbo/nnet.hpp"
#include "deelbo/variational.hpp"

namespace deelbo {

enum class KappaMode { Fixed, DOverN };

struct TrainConfig {
  int steps = 2000;
  int batch_size = 64;
  double lr_init = 0.01;
  double momentum = 0.9;  // Nesterov
  KappaMode kappa_mode = KappaMode::DOverN;
  double kappa = 1.0;  // used when kappa_mode == Fixed
  bool kappa_counts_head = false;
  bool learn_rho = true;  // false keeps sigma_bar at its initialization
  int mc_train = 1;
  int mc_final = 10;
  std::uint64_t seed = 0;

  /// Full-scale preset: 6000 steps at batch 128.
  static TrainConfig full_scale() {
    TrainConfig cfg;
    cfg.steps = 6000;
    cfg.batch_size = 128;
    return cfg;
  }

  void validate() const {
    if (steps < 1) throw ConfigError("train: steps must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(lr_init > 0)) throw ConfigError("train: lr_init must be > 0");
    if (!(momentum >= 0 && momentum < 1))
      throw ConfigError("train: momentum must be in [0, 1)");
    if (mc_train < 1 || mc_final < 1)
      throw ConfigError("train: mc sample counts must be >= 1");
    if (kappa_mode == KappaMode::Fixed && !(kappa >= 1))
      throw ConfigError("train: fixed kappa must be >= 1");
  }
};

double resolve_kappa(const ModelSpec& spec, Eigen::Index train_size,
                     const TrainConfig& cfg);

struct RunResult {
  std::string method;
  double lr_init = 0;
  double lambda = 1, tau = 1, kappa = 1;
  std::vector<double> objective_trace;
  double final_objective = std::numeric_limits<double>::quiet_NaN();
  double test_accuracy = std::numeric_limits<double>::quiet_NaN();
  double test_nll = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0;
  std::uint64_t seed = 0;
  std::string data_fingerprint;  // training data of this run
  std::string task_fingerprint;  // test data when present; keys comparability
  bool is_variational = false;
  PosteriorParams<double> posterior;  // variational runs
  FlatParams<double> point;           // MAP runs
};

nlohmann::json run_result_to_json(const RunResult& result);

struct EvalMetrics {
  double accuracy = 0;
  double nll = 0;
};

EvalMetrics evaluate_point(const ModelSpec& spec, const FlatParams<double>& params,
                           const Dataset& data);
/// Posterior-predictive metrics: probabilities averaged over `mc_samples`
/// reparameterized draws.
EvalMetrics evaluate_posterior(const ModelSpec& spec, const PosteriorParams<double>& post,
                               const Dataset& data, int mc_samples, Rng& rng);

/// lr(t) = lr_init * (1 + cos(pi t / T)) / 2; exactly lr_init at t=0 and 0 at t=T.
double cosine_lr(double lr_init, int step, int total_steps);

/// One DE-ELBo fit: each step first sets lambda and tau to their closed-form
/// optima, then takes one Nesterov SGD step on (means, rho) using a
/// reparameterized gradient of the data-emphasized ELBo under the cosine
/// schedule. The final objective for model selection is re-estimated on the
/// full training set with mc_final samples.
RunResult train_de_elbo(const ModelSpec& spec, const Dataset& train, const Dataset* test,
                        BackbonePrior<double> prior, const Eigen::VectorXd& init_backbone,
                        const TrainConfig& cfg);

/// MAP fit of the penalized loss with absolute penalty weights alpha, beta.
RunResult train_map(const ModelSpec& spec, const Dataset& train, const Dataset* test,
                    const BackbonePrior<double>& prior, double alpha, double beta,
                    const FlatParams<double>& init, const TrainConfig& cfg);

struct LrSelection {
  std::vector<double> lr_grid;
  std::vector<std::optional<RunResult>> runs;  // by grid index; empty if diverged
  std::vector<std::string> diagnostics;        // per grid index
  std::size_t best_index = 0;

  const RunResult& best() const { return *runs[best_index]; }
};

/// Trains once per candidate initial learning rate (stream seeds derived
/// from (seed, index)) and keeps the run with the highest final training
/// DE-ELBo; exact ties go to the smaller rate.
LrSelection select_lr(const ModelSpec& spec, const Dataset& train, const Dataset* test,
                      const BackbonePrior<double>& prior,
                      const Eigen::VectorXd& init_backbone, const TrainConfig& cfg,
                      const std::vector<double>& lr_grid, int threads = 1);

struct PretrainResult {
  FlatParams<double> params;  // backbone holds the source-task weights mu
  RunResult run;
};

/// Source-task MAP fit from a seeded random initialization with a small
/// fixed weight decay; the returned backbone is the prior mean / fine-tune
/// initialization.
PretrainResult pretrain_source(const ModelSpec& spec, const Dataset& source,
                               const TrainConfig& cfg);

struct SwagPosterior {
  Eigen::VectorXd mean;
  LowRankCov<double> cov;
};

/// Continues constant-rate SGD from `init`, snapshotting the backbone every
/// `snapshot_interval` steps; keeps a running mean and second moment plus
/// the last `rank` deviation columns. The diagonal is floored at 1e-8.
/// `snapshots_out`, when given, receives every snapshot vector.
SwagPosterior swag_collect(const ModelSpec& spec, const Dataset& source,
                           const FlatParams<double>& init, const TrainConfig& cfg,
                           int rank, int snapshot_interval,
                           std::vector<Eigen::VectorXd>* snapshots_out = nullptr);

/// Deterministic parallel map: fn(i) for i in [0, n) on up to `workers`
/// threads; exceptions are rethrown from the first failing index.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

}  // namespace deelbo
