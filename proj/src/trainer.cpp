#include "deelbo/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <deque>
#include <numeric>
#include <thread>

#include "deelbo/objective.hpp"
#include "deelbo/rng.hpp"

namespace deelbo {

namespace {

constexpr double kInitialSigmaBar = 0.01;
constexpr double kPretrainDecayOverN = 1e-4;

using Clock = std::chrono::steady_clock;

double elapsed_seconds(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

/// Distinct random row indices (all rows when batch_size >= N).
std::vector<Eigen::Index> sample_rows(Eigen::Index n, int batch_size, Rng& rng) {
  std::vector<Eigen::Index> rows(static_cast<std::size_t>(n));
  std::iota(rows.begin(), rows.end(), Eigen::Index(0));
  if (batch_size >= n) return rows;
  for (int i = 0; i < batch_size; ++i) {
    const std::size_t j = i + rng.index(rows.size() - static_cast<std::size_t>(i));
    std::swap(rows[static_cast<std::size_t>(i)], rows[j]);
  }
  rows.resize(static_cast<std::size_t>(batch_size));
  return rows;
}

struct DivergenceGuard {
  int consecutive = 0;

  void check(double objective, int step, double lr) {
    if (std::isfinite(objective)) {
      consecutive = 0;
      return;
    }
    if (++consecutive >= 2)
      throw DivergenceError("non-finite objective at step " + std::to_string(step) +
                            " (lr " + std::to_string(lr) + ")");
  }
};

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

Eigen::VectorXd glorot_backbone(const ModelSpec& spec, Rng& rng) {
  Eigen::VectorXd w(spec.backbone_dim);
  const auto sizes = spec.layer_sizes();
  Eigen::Index offset = 0;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const Eigen::Index fan_in = sizes[l];
    const Eigen::Index fan_out = sizes[l + 1];
    const double scale = std::sqrt(2.0 / double(fan_in + fan_out));
    for (Eigen::Index k = 0; k < fan_in * fan_out; ++k)
      w[offset + k] = scale * rng.normal();
    offset += fan_in * fan_out;
    w.segment(offset, fan_out).setZero();
    offset += fan_out;
  }
  return w;
}

}  // namespace

double resolve_kappa(const ModelSpec& spec, Eigen::Index train_size,
                     const TrainConfig& cfg) {
  if (cfg.kappa_mode == KappaMode::Fixed) return cfg.kappa;
  const double dim = double(spec.backbone_dim) +
                     (cfg.kappa_counts_head ? double(spec.head_dim) : 0.0);
  return std::max(1.0, dim / double(train_size));
}

double cosine_lr(double lr_init, int step, int total_steps) {
  if (step < 0 || step > total_steps)
    throw RangeError("cosine_lr: step outside [0, total_steps]");
  if (step == total_steps) return 0.0;
  return lr_init * 0.5 * (1.0 + std::cos(M_PI * double(step) / double(total_steps)));
}

EvalMetrics evaluate_point(const ModelSpec& spec, const FlatParams<double>& params,
                           const Dataset& data) {
  const Eigen::MatrixXd probs = forward(spec, params, data.features);
  EvalMetrics metrics;
  double correct = 0, nll = 0;
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    Eigen::Index argmax;
    probs.row(i).maxCoeff(&argmax);
    correct += (argmax == data.labels[i]) ? 1.0 : 0.0;
    nll -= std::log(std::max(probs(i, data.labels[i]), 1e-300));
  }
  metrics.accuracy = correct / double(data.size());
  metrics.nll = nll / double(data.size());
  return metrics;
}

EvalMetrics evaluate_posterior(const ModelSpec& spec, const PosteriorParams<double>& post,
                               const Dataset& data, int mc_samples, Rng& rng) {
  Eigen::MatrixXd probs = Eigen::MatrixXd::Zero(data.size(), spec.num_classes);
  for (int s = 0; s < mc_samples; ++s)
    probs += forward(spec, sample(post, rng), data.features);
  probs /= double(mc_samples);

  EvalMetrics metrics;
  double correct = 0, nll = 0;
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    Eigen::Index argmax;
    probs.row(i).maxCoeff(&argmax);
    correct += (argmax == data.labels[i]) ? 1.0 : 0.0;
    nll -= std::log(std::max(probs(i, data.labels[i]), 1e-300));
  }
  metrics.accuracy = correct / double(data.size());
  metrics.nll = nll / double(data.size());
  return metrics;
}

RunResult train_de_elbo(const ModelSpec& spec, const Dataset& train, const Dataset* test,
                        BackbonePrior<double> prior, const Eigen::VectorXd& init_backbone,
                        const TrainConfig& cfg) {
  cfg.validate();
  if (train.size() == 0) throw ConfigError("train_de_elbo: empty training set");
  if (init_backbone.size() != spec.backbone_dim)
    throw ShapeError("train_de_elbo: init backbone length does not match spec");
  if (prior.dim() != spec.backbone_dim)
    throw ShapeError("train_de_elbo: prior dimension does not match spec");

  const auto start = Clock::now();
  Rng rng(cfg.seed);

  PosteriorParams<double> post;
  post.backbone_mean = init_backbone;
  post.head_mean = Eigen::MatrixXd::Zero(spec.num_classes, spec.repr_dim);
  post.rho = softplus_inv(kInitialSigmaBar);

  HeadPrior<double> head_prior{1.0};
  prior.lambda = 1.0;

  const Eigen::Index n = train.size();
  ObjectiveConfig obj;
  obj.kappa = resolve_kappa(spec, n, cfg);
  obj.mc_samples = cfg.mc_train;
  // Gradient steps are taken on the per-example scale J/(kappa N), so the
  // usual SGD learning-rate range applies for any kappa and N; the trace and
  // the selection objective keep the unscaled bound.
  const double grad_scale = 1.0 / (obj.kappa * double(n));

  RunResult result;
  result.method = "de-elbo";
  result.lr_init = cfg.lr_init;
  result.kappa = obj.kappa;
  result.seed = cfg.seed;
  result.is_variational = true;
  result.data_fingerprint = fingerprint_hex(train);
  result.task_fingerprint = test ? fingerprint_hex(*test) : result.data_fingerprint;
  result.objective_trace.reserve(static_cast<std::size_t>(cfg.steps));

  PosteriorGrad<double> grad;
  PosteriorGrad<double> velocity;
  velocity.backbone_mean = Eigen::VectorXd::Zero(spec.backbone_dim);
  velocity.head_mean = Eigen::MatrixXd::Zero(spec.num_classes, spec.repr_dim);
  velocity.rho = 0.0;

  DivergenceGuard guard;
  for (int step = 0; step < cfg.steps; ++step) {
    // Closed-form hyperparameter updates before the gradient step; these
    // do not depend on kappa.
    prior.lambda = lambda_star(post, prior);
    head_prior.tau = tau_star(post);

    const auto rows = sample_rows(n, cfg.batch_size, rng);
    const Batch<double> batch = make_batch(train, rows);
    obj.minibatch_scale = double(n) / double(rows.size());

    const double lr = cosine_lr(cfg.lr_init, step, cfg.steps);
    double value = kNaN;
    bool have_grad = std::isfinite(prior.lambda) && prior.lambda > 0 &&
                     std::isfinite(head_prior.tau) && head_prior.tau > 0;
    if (have_grad) {
      try {
        value = elbo_value_and_grad(spec, post, prior, head_prior, batch, obj, rng, grad);
      } catch (const NumericalError&) {
        have_grad = false;
      }
    }
    result.objective_trace.push_back(value);
    guard.check(value, step, lr);
    if (!have_grad) continue;

    grad.backbone_mean *= grad_scale;
    grad.head_mean *= grad_scale;
    grad.rho = cfg.learn_rho ? grad.rho * grad_scale : 0.0;

    // Descent on the negative objective with Nesterov momentum.
    if (cfg.momentum > 0) {
      velocity.backbone_mean = cfg.momentum * velocity.backbone_mean - grad.backbone_mean;
      velocity.head_mean = cfg.momentum * velocity.head_mean - grad.head_mean;
      velocity.rho = cfg.momentum * velocity.rho - grad.rho;
      post.backbone_mean -=
          lr * (-grad.backbone_mean + cfg.momentum * velocity.backbone_mean);
      post.head_mean -= lr * (-grad.head_mean + cfg.momentum * velocity.head_mean);
      post.rho -= lr * (-grad.rho + cfg.momentum * velocity.rho);
    } else {
      post.backbone_mean += lr * grad.backbone_mean;
      post.head_mean += lr * grad.head_mean;
      post.rho += lr * grad.rho;
    }
  }

  // Hyperparameters consistent with the returned posterior, then the
  // model-selection objective on the full training set.
  prior.lambda = lambda_star(post, prior);
  head_prior.tau = tau_star(post);
  ObjectiveConfig final_obj;
  final_obj.kappa = obj.kappa;
  final_obj.mc_samples = cfg.mc_final;
  final_obj.minibatch_scale = 1.0;
  result.final_objective =
      elbo(spec, post, prior, head_prior, full_batch(train), final_obj, rng);

  result.lambda = prior.lambda;
  result.tau = head_prior.tau;
  result.posterior = post;
  if (test) {
    const auto metrics = evaluate_posterior(spec, post, *test, cfg.mc_final, rng);
    result.test_accuracy = metrics.accuracy;
    result.test_nll = metrics.nll;
  }
  result.seconds = elapsed_seconds(start);
  return result;
}

RunResult train_map(const ModelSpec& spec, const Dataset& train, const Dataset* test,
                    const BackbonePrior<double>& prior, double alpha, double beta,
                    const FlatParams<double>& init, const TrainConfig& cfg) {
  cfg.validate();
  if (train.size() == 0) throw ConfigError("train_map: empty training set");
  if (init.backbone.size() != spec.backbone_dim)
    throw ShapeError("train_map: init backbone length does not match spec");

  const auto start = Clock::now();
  Rng rng(cfg.seed);
  FlatParams<double> params = init;
  const MapHyperparams<double> hp{alpha, beta};
  const Eigen::Index n = train.size();

  RunResult result;
  result.method = "map";
  result.lr_init = cfg.lr_init;
  result.lambda = alpha > 0 ? 1.0 / alpha : std::numeric_limits<double>::infinity();
  result.tau = beta > 0 ? 1.0 / beta : std::numeric_limits<double>::infinity();
  result.kappa = 1.0;
  result.seed = cfg.seed;
  result.data_fingerprint = fingerprint_hex(train);
  result.task_fingerprint = test ? fingerprint_hex(*test) : result.data_fingerprint;
  result.objective_trace.reserve(static_cast<std::size_t>(cfg.steps));

  FlatParams<double> grad, velocity;
  velocity.backbone = Eigen::VectorXd::Zero(spec.backbone_dim);
  velocity.head = Eigen::MatrixXd::Zero(spec.num_classes, spec.repr_dim);

  DivergenceGuard guard;
  for (int step = 0; step < cfg.steps; ++step) {
    const auto rows = sample_rows(n, cfg.batch_size, rng);
    const Batch<double> batch = make_batch(train, rows);
    const double lr = cosine_lr(cfg.lr_init, step, cfg.steps);
    double loss = kNaN;
    bool have_grad = true;
    try {
      loss = map_loss_and_grad(spec, params, batch, hp, prior, grad, n);
    } catch (const NumericalError&) {
      have_grad = false;
    }
    result.objective_trace.push_back(loss);
    guard.check(loss, step, lr);
    if (!have_grad) continue;

    if (cfg.momentum > 0) {
      velocity.backbone = cfg.momentum * velocity.backbone + grad.backbone;
      velocity.head = cfg.momentum * velocity.head + grad.head;
      params.backbone -= lr * (grad.backbone + cfg.momentum * velocity.backbone);
      params.head -= lr * (grad.head + cfg.momentum * velocity.head);
    } else {
      params.backbone -= lr * grad.backbone;
      params.head -= lr * grad.head;
    }
  }

  result.final_objective = map_loss(spec, params, full_batch(train), hp, prior, n);
  result.point = params;
  if (test) {
    const auto metrics = evaluate_point(spec, params, *test);
    result.test_accuracy = metrics.accuracy;
    result.test_nll = metrics.nll;
  }
  result.seconds = elapsed_seconds(start);
  return result;
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  const int thread_count = std::max(1, std::min<int>(workers, static_cast<int>(n)));
  if (thread_count == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> first_error{n};
  std::vector<std::exception_ptr> errors(n);
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
        std::size_t expected = n;
        while (!first_error.compare_exchange_weak(expected, std::min(expected, i)))
          ;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(thread_count));
  for (int t = 0; t < thread_count; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  const std::size_t bad = first_error.load();
  if (bad < n && errors[bad]) std::rethrow_exception(errors[bad]);
}

LrSelection select_lr(const ModelSpec& spec, const Dataset& train, const Dataset* test,
                      const BackbonePrior<double>& prior,
                      const Eigen::VectorXd& init_backbone, const TrainConfig& cfg,
                      const std::vector<double>& lr_grid, int threads) {
  if (lr_grid.empty()) throw ConfigError("select_lr: empty learning-rate grid");

  LrSelection sel;
  sel.lr_grid = lr_grid;
  sel.runs.resize(lr_grid.size());
  sel.diagnostics.resize(lr_grid.size());

  parallel_for(lr_grid.size(), threads, [&](std::size_t i) {
    TrainConfig run_cfg = cfg;
    run_cfg.lr_init = lr_grid[i];
    run_cfg.seed = derive_seed(cfg.seed, i);
    try {
      sel.runs[i] = train_de_elbo(spec, train, test, prior, init_backbone, run_cfg);
    } catch (const DivergenceError& e) {
      sel.diagnostics[i] = e.what();
    }
  });

  bool any = false;
  std::size_t best = 0;
  for (std::size_t i = 0; i < sel.runs.size(); ++i) {
    if (!sel.runs[i]) continue;
    if (!any) {
      any = true;
      best = i;
      continue;
    }
    const double candidate = sel.runs[i]->final_objective;
    const double incumbent = sel.runs[best]->final_objective;
    if (candidate > incumbent ||
        (candidate == incumbent && lr_grid[i] < lr_grid[best]))
      best = i;
  }
  if (!any) {
    std::string detail = "select_lr: every learning rate diverged:";
    for (std::size_t i = 0; i < lr_grid.size(); ++i)
      detail += "\n  lr " + std::to_string(lr_grid[i]) + ": " + sel.diagnostics[i];
    throw DivergenceError(detail);
  }
  sel.best_index = best;
  return sel;
}

PretrainResult pretrain_source(const ModelSpec& spec, const Dataset& source,
                               const TrainConfig& cfg) {
  if (source.size() == 0) throw ConfigError("pretrain_source: empty source set");
  Rng init_rng(derive_seed(cfg.seed, 0x9D0EULL));
  FlatParams<double> init;
  init.backbone = glorot_backbone(spec, init_rng);
  init.head = Eigen::MatrixXd::Zero(spec.num_classes, spec.repr_dim);

  const auto prior = BackbonePrior<double>::l2zero(spec.backbone_dim);
  const double decay = kPretrainDecayOverN * double(source.size());
  PretrainResult out{{}, train_map(spec, source, nullptr, prior, decay, decay, init, cfg)};
  out.params = out.run.point;
  out.run.method = "pretrain";
  return out;
}

SwagPosterior swag_collect(const ModelSpec& spec, const Dataset& source,
                           const FlatParams<double>& init, const TrainConfig& cfg,
                           int rank, int snapshot_interval,
                           std::vector<Eigen::VectorXd>* snapshots_out) {
  cfg.validate();
  if (rank < 2) throw ConfigError("swag_collect: rank must be >= 2");
  if (snapshot_interval < 1)
    throw ConfigError("swag_collect: snapshot interval must be >= 1");
  if (cfg.steps / snapshot_interval < rank)
    throw ConfigError("swag_collect: " + std::to_string(cfg.steps) + " steps at interval " +
                      std::to_string(snapshot_interval) + " yield fewer than " +
                      std::to_string(rank) + " snapshots");
  if (init.backbone.size() != spec.backbone_dim)
    throw ShapeError("swag_collect: init backbone length does not match spec");

  Rng rng(cfg.seed);
  FlatParams<double> params = init;
  const auto prior = BackbonePrior<double>::l2zero(spec.backbone_dim);
  const double decay = kPretrainDecayOverN * double(source.size());
  const MapHyperparams<double> hp{decay, decay};
  const Eigen::Index n = source.size();

  FlatParams<double> grad, velocity;
  velocity.backbone = Eigen::VectorXd::Zero(spec.backbone_dim);
  velocity.head = Eigen::MatrixXd::Zero(spec.num_classes, spec.repr_dim);

  Eigen::VectorXd mean = Eigen::VectorXd::Zero(spec.backbone_dim);
  Eigen::VectorXd second_moment = Eigen::VectorXd::Zero(spec.backbone_dim);
  std::deque<Eigen::VectorXd> deviations;
  int snapshots = 0;

  DivergenceGuard guard;
  for (int step = 0; step < cfg.steps; ++step) {
    const auto rows = sample_rows(n, cfg.batch_size, rng);
    const Batch<double> batch = make_batch(source, rows);
    double loss = kNaN;
    try {
      loss = map_loss_and_grad(spec, params, batch, hp, prior, grad, n);
    } catch (const NumericalError&) {
      guard.check(loss, step, cfg.lr_init);
      continue;
    }
    guard.check(loss, step, cfg.lr_init);

    // Constant learning rate while collecting iterate statistics.
    if (cfg.momentum > 0) {
      velocity.backbone = cfg.momentum * velocity.backbone + grad.backbone;
      velocity.head = cfg.momentum * velocity.head + grad.head;
      params.backbone -= cfg.lr_init * (grad.backbone + cfg.momentum * velocity.backbone);
      params.head -= cfg.lr_init * (grad.head + cfg.momentum * velocity.head);
    } else {
      params.backbone -= cfg.lr_init * grad.backbone;
      params.head -= cfg.lr_init * grad.head;
    }

    if ((step + 1) % snapshot_interval == 0) {
      ++snapshots;
      mean += (params.backbone - mean) / double(snapshots);
      second_moment +=
          (params.backbone.cwiseProduct(params.backbone) - second_moment) /
          double(snapshots);
      deviations.push_back(params.backbone - mean);
      if (static_cast<int>(deviations.size()) > rank) deviations.pop_front();
      if (snapshots_out) snapshots_out->push_back(params.backbone);
    }
  }
  if (snapshots < rank)
    throw ConfigError("swag_collect: collected " + std::to_string(snapshots) +
                      " snapshots, need " + std::to_string(rank));

  Eigen::VectorXd diag =
      (second_moment - mean.cwiseProduct(mean)).cwiseMax(1e-8);
  Eigen::MatrixXd dev_cols(spec.backbone_dim, rank);
  for (int k = 0; k < rank; ++k) dev_cols.col(k) = deviations[static_cast<std::size_t>(k)];
  return SwagPosterior{mean, LowRankCov<double>(std::move(diag), std::move(dev_cols))};
}

nlohmann::json run_result_to_json(const RunResult& result) {
  nlohmann::json j;
  j["method"] = result.method;
  j["lr_init"] = result.lr_init;
  j["lambda"] = result.lambda;
  j["tau"] = result.tau;
  j["kappa"] = result.kappa;
  j["objective_trace"] = result.objective_trace;
  j["final_objective"] = result.final_objective;
  j["test_accuracy"] = result.test_accuracy;
  j["test_nll"] = result.test_nll;
  j["seconds"] = result.seconds;
  j["seed"] = result.seed;
  j["data_fingerprint"] = result.data_fingerprint;
  j["task_fingerprint"] = result.task_fingerprint;
  j["is_variational"] = result.is_variational;
  if (result.is_variational) {
    j["w_bar"] = std::vector<double>(result.posterior.backbone_mean.data(),
                                     result.posterior.backbone_mean.data() +
                                         result.posterior.backbone_mean.size());
    std::vector<double> head;
    head.reserve(static_cast<std::size_t>(result.posterior.head_mean.size()));
    for (Eigen::Index i = 0; i < result.posterior.head_mean.rows(); ++i)
      for (Eigen::Index k = 0; k < result.posterior.head_mean.cols(); ++k)
        head.push_back(result.posterior.head_mean(i, k));
    j["V_bar"] = head;
    j["rho"] = result.posterior.rho;
  } else if (result.point.backbone.size() > 0) {
    j["w"] = std::vector<double>(result.point.backbone.data(),
                                 result.point.backbone.data() +
                                     result.point.backbone.size());
    std::vector<double> head;
    head.reserve(static_cast<std::size_t>(result.point.head.size()));
    for (Eigen::Index i = 0; i < result.point.head.rows(); ++i)
      for (Eigen::Index k = 0; k < result.point.head.cols(); ++k)
        head.push_back(result.point.head(i, k));
    j["V"] = head;
  }
  return j;
}

}  // namespace deelbo
