#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "deelbo/objective.hpp"
#include "deelbo/trainer.hpp"

using deelbo::BackbonePrior;
using deelbo::Dataset;
using deelbo::HeadPrior;
using deelbo::ModelSpec;
using deelbo::PosteriorParams;
using deelbo::Rng;
using deelbo::RunResult;
using deelbo::TrainConfig;

namespace {

struct Task {
  ModelSpec spec;
  Dataset train;
  Dataset test;

  static Task separable() {
    Task task;
    task.spec = deelbo::make_model_spec(10, {24, 24}, 12, 2);
    deelbo::SyntheticSpec data_spec{2, 10, 200, 4.0};
    task.train = deelbo::make_synthetic(data_spec, 100);
    data_spec.num_examples = 400;
    task.test = deelbo::make_synthetic(data_spec, 101);
    const auto stats = deelbo::normalize_fit(task.train);
    deelbo::apply_normalization(task.test, stats);
    return task;
  }
};

PosteriorParams<double> initial_posterior(const ModelSpec& spec,
                                          const Eigen::VectorXd& init) {
  PosteriorParams<double> post;
  post.backbone_mean = init;
  post.head_mean = Eigen::MatrixXd::Zero(spec.num_classes, spec.repr_dim);
  post.rho = deelbo::softplus_inv(0.01);
  return post;
}

}  // namespace

TEST_CASE("cosine schedule endpoints and midpoint") {
  CHECK(deelbo::cosine_lr(0.1, 0, 100) == 0.1);
  CHECK(deelbo::cosine_lr(0.1, 100, 100) == 0.0);
  CHECK(deelbo::cosine_lr(0.1, 50, 100) == doctest::Approx(0.05).epsilon(1e-14));
  CHECK_THROWS_AS(deelbo::cosine_lr(0.1, 101, 100), deelbo::RangeError);
  CHECK_THROWS_AS(deelbo::cosine_lr(0.1, -1, 100), deelbo::RangeError);
}

TEST_CASE("full-scale preset pins the published schedule") {
  const TrainConfig cfg = TrainConfig::full_scale();
  CHECK(cfg.steps == 6000);
  CHECK(cfg.batch_size == 128);
  CHECK(cfg.momentum == 0.9);
  CHECK(cfg.mc_train == 1);
  CHECK(cfg.mc_final == 10);
}

TEST_CASE("kappa resolution") {
  const auto spec = deelbo::make_model_spec(10, {24, 24}, 12, 2);
  TrainConfig cfg;
  cfg.kappa_mode = deelbo::KappaMode::DOverN;
  CHECK(deelbo::resolve_kappa(spec, 200, cfg) ==
        doctest::Approx(double(spec.backbone_dim) / 200.0));
  // Clamped at 1 when N exceeds D.
  CHECK(deelbo::resolve_kappa(spec, 10 * spec.backbone_dim, cfg) == 1.0);
  cfg.kappa_mode = deelbo::KappaMode::Fixed;
  cfg.kappa = 7.5;
  CHECK(deelbo::resolve_kappa(spec, 200, cfg) == 7.5);
  cfg.kappa_counts_head = true;
  cfg.kappa_mode = deelbo::KappaMode::DOverN;
  CHECK(deelbo::resolve_kappa(spec, 200, cfg) ==
        doctest::Approx(double(spec.backbone_dim + spec.head_dim) / 200.0));
}

TEST_CASE("training runs are bit-reproducible given the seed") {
  const Task task = Task::separable();
  const auto prior = BackbonePrior<double>::l2zero(task.spec.backbone_dim);
  const Eigen::VectorXd init = Eigen::VectorXd::Constant(task.spec.backbone_dim, 0.01);

  TrainConfig cfg;
  cfg.steps = 40;
  cfg.batch_size = 64;
  cfg.lr_init = 0.05;
  cfg.seed = 7;
  const RunResult a = deelbo::train_de_elbo(task.spec, task.train, &task.test, prior, init, cfg);
  const RunResult b = deelbo::train_de_elbo(task.spec, task.train, &task.test, prior, init, cfg);

  CHECK(a.lambda == b.lambda);
  CHECK(a.tau == b.tau);
  CHECK(a.final_objective == b.final_objective);
  CHECK(a.test_accuracy == b.test_accuracy);
  CHECK(a.test_nll == b.test_nll);
  CHECK(a.objective_trace == b.objective_trace);
  CHECK((a.posterior.backbone_mean.array() == b.posterior.backbone_mean.array()).all());
  CHECK((a.posterior.head_mean.array() == b.posterior.head_mean.array()).all());
  CHECK(a.posterior.rho == b.posterior.rho);
  CHECK(a.objective_trace.size() == std::size_t(cfg.steps));
}

TEST_CASE("first step uses closed-form hyperparameters of the initialization") {
  const Task task = Task::separable();
  Eigen::VectorXd mu(task.spec.backbone_dim);
  Rng mu_rng(55);
  for (Eigen::Index i = 0; i < mu.size(); ++i) mu[i] = 0.1 * mu_rng.normal();
  const auto prior = BackbonePrior<double>::l2sp(mu);

  TrainConfig cfg;
  cfg.steps = 1;
  cfg.batch_size = 10000;  // full batch: no row-sampling draws
  cfg.lr_init = 0.01;
  cfg.seed = 3;
  const RunResult run = deelbo::train_de_elbo(task.spec, task.train, nullptr, prior, mu, cfg);

  // Reproduce step 0 directly: lambda*, tau* at the initialization, then the
  // one-sample estimate with the same stream.
  const auto post0 = initial_posterior(task.spec, mu);
  auto prior0 = prior;
  prior0.lambda = deelbo::lambda_star(post0, prior0);
  const HeadPrior<double> head0{deelbo::tau_star(post0)};
  deelbo::ObjectiveConfig obj;
  obj.kappa = deelbo::resolve_kappa(task.spec, task.train.size(), cfg);
  obj.minibatch_scale = 1.0;
  Rng rng(cfg.seed);
  const double expected = deelbo::elbo(task.spec, post0, prior0, head0,
                                       deelbo::full_batch(task.train), obj, rng);
  CHECK(run.objective_trace[0] == expected);

  // The closed-form update ignores kappa: the KL part of the first step is
  // identical under kappa = 1 and kappa = D/N.
  TrainConfig cfg_k1 = cfg;
  cfg_k1.kappa_mode = deelbo::KappaMode::Fixed;
  cfg_k1.kappa = 1.0;
  const RunResult run_k1 =
      deelbo::train_de_elbo(task.spec, task.train, nullptr, prior, mu, cfg_k1);
  Rng rng2(cfg.seed);
  deelbo::ObjectiveConfig obj1 = obj;
  obj1.kappa = 1.0;
  const double lik1 = deelbo::elbo(task.spec, post0, prior0, head0,
                                   deelbo::full_batch(task.train), obj1, rng2) +
                      deelbo::kl_backbone(post0, prior0) + deelbo::kl_head(post0, head0);
  CHECK(run.objective_trace[0] - obj.kappa * lik1 ==
        doctest::Approx(run_k1.objective_trace[0] - 1.0 * lik1).epsilon(1e-9));
}

TEST_CASE("momentum-free single step moves by lr times the gradient") {
  const Task task = Task::separable();
  const auto prior = BackbonePrior<double>::l2zero(task.spec.backbone_dim);
  const Eigen::VectorXd init = Eigen::VectorXd::Constant(task.spec.backbone_dim, 0.05);

  TrainConfig cfg;
  cfg.steps = 1;
  cfg.batch_size = 10000;
  cfg.lr_init = 1e-6;
  cfg.momentum = 0.0;
  cfg.seed = 11;
  const RunResult run = deelbo::train_de_elbo(task.spec, task.train, nullptr, prior, init, cfg);

  const auto post0 = initial_posterior(task.spec, init);
  auto prior0 = prior;
  prior0.lambda = deelbo::lambda_star(post0, prior0);
  const HeadPrior<double> head0{deelbo::tau_star(post0)};
  deelbo::ObjectiveConfig obj;
  obj.kappa = deelbo::resolve_kappa(task.spec, task.train.size(), cfg);
  Rng rng(cfg.seed);
  deelbo::PosteriorGrad<double> grad;
  deelbo::elbo_value_and_grad(task.spec, post0, prior0, head0,
                              deelbo::full_batch(task.train), obj, rng, grad);

  // The step is lr times the gradient of the per-example objective
  // J/(kappa N).
  const double lr = deelbo::cosine_lr(cfg.lr_init, 0, 1);
  const double scale = 1.0 / (obj.kappa * double(task.train.size()));
  CHECK((run.posterior.backbone_mean - (init + lr * scale * grad.backbone_mean))
            .lpNorm<Eigen::Infinity>() < 1e-10);
  CHECK(std::abs(run.posterior.rho - (post0.rho + lr * scale * grad.rho)) < 1e-10);
}

TEST_CASE("separable task trains to high accuracy with kappa = D/N") {
  const Task task = Task::separable();
  const auto prior = BackbonePrior<double>::l2zero(task.spec.backbone_dim);
  Rng init_rng(1);
  Eigen::VectorXd init(task.spec.backbone_dim);
  for (Eigen::Index i = 0; i < init.size(); ++i) init[i] = 0.05 * init_rng.normal();

  TrainConfig cfg;
  cfg.steps = 500;
  cfg.batch_size = 64;
  cfg.lr_init = 0.1;
  cfg.seed = 5;
  const RunResult run =
      deelbo::train_de_elbo(task.spec, task.train, &task.train, prior, init, cfg);
  CHECK(run.kappa == doctest::Approx(double(task.spec.backbone_dim) / 200.0));
  CHECK(run.test_accuracy >= 0.95);  // evaluated on the training set here
  CHECK(run.lambda > 0.0);
  CHECK(run.tau > 0.0);
  CHECK(std::isfinite(run.final_objective));
}

TEST_CASE("training aborts with step and rate context when it diverges") {
  const Task task = Task::separable();
  const auto prior = BackbonePrior<double>::l2zero(task.spec.backbone_dim);
  const Eigen::VectorXd init = Eigen::VectorXd::Constant(task.spec.backbone_dim, 0.01);
  deelbo::FlatParams<double> map_init;
  map_init.backbone = init;
  map_init.head = Eigen::MatrixXd::Zero(task.spec.num_classes, task.spec.repr_dim);

  TrainConfig cfg;
  cfg.steps = 50;
  cfg.batch_size = 64;
  cfg.lr_init = 1e200;
  cfg.seed = 2;
  CHECK_THROWS_WITH_AS(
      deelbo::train_map(task.spec, task.train, nullptr, prior, 0.1, 0.1, map_init, cfg),
      doctest::Contains("step"), deelbo::DivergenceError);
  CHECK_THROWS_AS(
      deelbo::train_de_elbo(task.spec, task.train, nullptr, prior, init, cfg),
      deelbo::DivergenceError);
}

TEST_CASE("select_lr picks the best final objective, small rate on ties") {
  const Task task = Task::separable();
  const auto prior = BackbonePrior<double>::l2zero(task.spec.backbone_dim);
  Rng init_rng(4);
  Eigen::VectorXd init(task.spec.backbone_dim);
  for (Eigen::Index i = 0; i < init.size(); ++i) init[i] = 0.05 * init_rng.normal();

  TrainConfig cfg;
  cfg.steps = 60;
  cfg.batch_size = 64;
  cfg.seed = 9;

  // Grid of one returns that run.
  const auto single = deelbo::select_lr(task.spec, task.train, nullptr, prior, init, cfg,
                                        {0.05});
  CHECK(single.best_index == 0);
  CHECK(single.runs[0].has_value());

  const std::vector<double> grid = {0.1, 0.01, 0.001, 0.0001};
  const auto sel =
      deelbo::select_lr(task.spec, task.train, nullptr, prior, init, cfg, grid, 2);
  CHECK(sel.runs.size() == 4);
  for (const auto& run : sel.runs) CHECK(run.has_value());

  // Argmax contract, ties toward the smaller rate.
  std::size_t expected = 0;
  bool first = true;
  for (std::size_t i = 0; i < sel.runs.size(); ++i) {
    if (first) {
      expected = i;
      first = false;
      continue;
    }
    const double cand = sel.runs[i]->final_objective;
    const double inc = sel.runs[expected]->final_objective;
    if (cand > inc || (cand == inc && grid[i] < grid[expected])) expected = i;
  }
  CHECK(sel.best_index == expected);

  // Threaded selection matches sequential selection exactly.
  const auto sel_seq =
      deelbo::select_lr(task.spec, task.train, nullptr, prior, init, cfg, grid, 1);
  CHECK(sel_seq.best_index == sel.best_index);
  for (std::size_t i = 0; i < grid.size(); ++i)
    CHECK(sel_seq.runs[i]->final_objective == sel.runs[i]->final_objective);

  // Every rate diverging is reported with per-rate diagnostics.
  CHECK_THROWS_WITH_AS(deelbo::select_lr(task.spec, task.train, nullptr, prior, init, cfg,
                                         {1e200, 1e210}),
                       doctest::Contains("diverged"), deelbo::DivergenceError);
}

TEST_CASE("pretraining fits a synthetic four-class source task") {
  const auto spec = deelbo::make_model_spec(8, {16}, 8, 4);
  Dataset source = deelbo::make_synthetic({4, 8, 400, 3.0}, 40);
  deelbo::normalize_fit(source);

  TrainConfig cfg;
  cfg.steps = 400;
  cfg.batch_size = 64;
  cfg.lr_init = 0.1;
  cfg.seed = 6;
  const auto pre = deelbo::pretrain_source(spec, source, cfg);
  CHECK(pre.params.backbone.size() == spec.backbone_dim);
  CHECK(deelbo::evaluate_point(spec, pre.params, source).accuracy >= 0.9);

  const auto again = deelbo::pretrain_source(spec, source, cfg);
  CHECK((again.params.backbone.array() == pre.params.backbone.array()).all());
  CHECK((again.params.head.array() == pre.params.head.array()).all());
}

TEST_CASE("swag collection statistics") {
  const auto spec = deelbo::make_model_spec(6, {10}, 6, 3);
  Dataset source = deelbo::make_synthetic({3, 6, 200, 2.5}, 50);
  deelbo::normalize_fit(source);

  TrainConfig cfg;
  cfg.steps = 200;
  cfg.batch_size = 32;
  cfg.lr_init = 0.05;
  cfg.seed = 8;
  const auto pre = deelbo::pretrain_source(spec, source, cfg);

  TrainConfig swag_cfg = cfg;
  swag_cfg.steps = 120;
  std::vector<Eigen::VectorXd> snapshots;
  const auto swag = deelbo::swag_collect(spec, source, pre.params, swag_cfg, 3, 10,
                                         &snapshots);
  CHECK(snapshots.size() == 12);

  // Running mean equals the arithmetic mean of the snapshots.
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(spec.backbone_dim);
  for (const auto& snap : snapshots) mean += snap;
  mean /= double(snapshots.size());
  CHECK((swag.mean - mean).lpNorm<Eigen::Infinity>() < 1e-12);

  // The resulting covariance is usable: positive trace-inverse, finite logdet.
  CHECK(swag.cov.trace_inverse() > 0.0);
  CHECK(std::isfinite(swag.cov.logdet()));
  CHECK(swag.cov.rank() == 3);

  // Constant weights (vanishing rate): floored diagonal, vanishing columns.
  TrainConfig frozen_cfg = swag_cfg;
  frozen_cfg.lr_init = 1e-300;
  frozen_cfg.momentum = 0.0;
  const auto frozen = deelbo::swag_collect(spec, source, pre.params, frozen_cfg, 3, 10);
  CHECK((frozen.cov.diag().array() == 1e-8).all());
  CHECK(frozen.cov.deviations().lpNorm<Eigen::Infinity>() < 1e-100);
  CHECK((frozen.mean - pre.params.backbone).lpNorm<Eigen::Infinity>() < 1e-12);

  // Configuration errors.
  CHECK_THROWS_AS(deelbo::swag_collect(spec, source, pre.params, swag_cfg, 1, 10),
                  deelbo::ConfigError);
  TrainConfig short_cfg = swag_cfg;
  short_cfg.steps = 15;
  CHECK_THROWS_AS(deelbo::swag_collect(spec, source, pre.params, short_cfg, 3, 10),
                  deelbo::ConfigError);
}

TEST_CASE("no-signal data trains to chance accuracy") {
  const auto spec = deelbo::make_model_spec(5, {8}, 6, 4);
  Dataset train = deelbo::make_synthetic({4, 5, 200, 0.0}, 70);
  Dataset test = deelbo::make_synthetic({4, 5, 400, 0.0}, 71);
  const auto stats = deelbo::normalize_fit(train);
  deelbo::apply_normalization(test, stats);

  deelbo::FlatParams<double> init;
  init.backbone = Eigen::VectorXd::Constant(spec.backbone_dim, 0.01);
  init.head = Eigen::MatrixXd::Zero(4, 6);
  TrainConfig cfg;
  cfg.steps = 150;
  cfg.batch_size = 32;
  cfg.lr_init = 0.05;
  cfg.seed = 14;
  const RunResult run =
      deelbo::train_map(spec, train, &test, BackbonePrior<double>::l2zero(spec.backbone_dim),
                        0.2, 0.2, init, cfg);
  CHECK(run.test_accuracy > 0.25 - 0.1);
  CHECK(run.test_accuracy < 0.25 + 0.1);
}

TEST_CASE("posterior evaluation is a proper average over samples") {
  const Task task = Task::separable();
  PosteriorParams<double> post = initial_posterior(
      task.spec, Eigen::VectorXd::Zero(task.spec.backbone_dim));
  post.rho = -40.0;  // effectively deterministic at the means
  Rng rng(0);
  const auto metrics = deelbo::evaluate_posterior(task.spec, post, task.test, 5, rng);
  deelbo::FlatParams<double> at_means{post.backbone_mean, post.head_mean};
  const auto point = deelbo::evaluate_point(task.spec, at_means, task.test);
  CHECK(metrics.accuracy == doctest::Approx(point.accuracy));
  CHECK(metrics.nll == doctest::Approx(point.nll).epsilon(1e-9));
}
