#include "deelbo/verify.hpp"

#include <cmath>

#include <Eigen/Cholesky>
#include <Eigen/LU>

#include "deelbo/objective.hpp"

namespace deelbo::verify {

Eigen::MatrixXd dense_covariance(const LowRankCov<double>& cov) {
  const double scale = 1.0 / (2.0 * double(cov.rank()) - 2.0);
  Eigen::MatrixXd sigma = (0.5 * cov.diag()).asDiagonal();
  sigma.noalias() += scale * cov.deviations() * cov.deviations().transpose();
  return sigma;
}

double dense_trace_inverse(const Eigen::MatrixXd& sigma) {
  return sigma.inverse().trace();
}

double dense_logdet(const Eigen::MatrixXd& sigma) {
  const Eigen::LLT<Eigen::MatrixXd> llt(sigma);
  return 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
}

double dense_mahalanobis_sq(const Eigen::MatrixXd& sigma, const Eigen::VectorXd& delta) {
  return delta.dot(sigma.ldlt().solve(delta));
}

double dense_gaussian_kl(const Eigen::VectorXd& mean0, const Eigen::MatrixXd& cov0,
                         const Eigen::VectorXd& mean1, const Eigen::MatrixXd& cov1) {
  const Eigen::Index dim = mean0.size();
  const Eigen::LDLT<Eigen::MatrixXd> chol1(cov1);
  const double trace_term = chol1.solve(cov0).trace();
  const Eigen::VectorXd diff = mean1 - mean0;
  const double maha = diff.dot(chol1.solve(diff));
  const double logdet0 = dense_logdet(cov0);
  const double logdet1 = dense_logdet(cov1);
  return 0.5 * (trace_term + maha - double(dim) + logdet1 - logdet0);
}

Eigen::MatrixXd dense_prior_covariance(const BackbonePrior<double>& prior) {
  if (prior.cov) return prior.lambda * dense_covariance(*prior.cov);
  return prior.lambda *
         Eigen::MatrixXd::Identity(prior.dim(), prior.dim());
}

double central_difference(const std::function<double(double)>& f, double x, double step) {
  return (f(x + step) - f(x - step)) / (2.0 * step);
}

double second_central_difference(const std::function<double(double)>& f, double x,
                                 double step) {
  return (f(x + step) - 2.0 * f(x) + f(x - step)) / (step * step);
}

LowRankCov<double> random_cov(Eigen::Index dim, Eigen::Index rank, Rng& rng) {
  Eigen::VectorXd diag(dim);
  for (Eigen::Index i = 0; i < dim; ++i)
    diag[i] = 0.05 + std::abs(rng.normal());  // strictly positive, mixed scales
  Eigen::MatrixXd dev(dim, rank);
  for (Eigen::Index j = 0; j < rank; ++j)
    for (Eigen::Index i = 0; i < dim; ++i) dev(i, j) = rng.normal();
  return LowRankCov<double>(std::move(diag), std::move(dev));
}

PosteriorParams<double> random_posterior(Eigen::Index backbone_dim, Eigen::Index head_rows,
                                         Eigen::Index head_cols, Rng& rng) {
  PosteriorParams<double> post;
  post.backbone_mean.resize(backbone_dim);
  for (Eigen::Index i = 0; i < backbone_dim; ++i) post.backbone_mean[i] = rng.normal();
  post.head_mean.resize(head_rows, head_cols);
  for (Eigen::Index j = 0; j < head_cols; ++j)
    for (Eigen::Index i = 0; i < head_rows; ++i) post.head_mean(i, j) = rng.normal();
  post.rho = -3.0 + 2.0 * rng.uniform();  // sigma_bar roughly in [0.05, 0.3]
  return post;
}

void SuiteResult::check(bool condition, const std::string& message) {
  if (condition) {
    ++passed;
  } else {
    ++failed;
    failures.push_back(message);
  }
}

namespace {

bool close_rel(double a, double b, double tol) {
  return std::abs(a - b) <= tol * std::max({1.0, std::abs(a), std::abs(b)});
}

}  // namespace

SuiteResult run_woodbury_suite(std::uint64_t seed, int instances, double tol) {
  SuiteResult suite;
  suite.name = "woodbury";
  Rng rng(seed);
  const Eigen::Index ranks[3] = {2, 3, 5};
  for (int inst = 0; inst < instances; ++inst) {
    const Eigen::Index dim = 5 + Eigen::Index(rng.index(46));  // up to 50
    const Eigen::Index rank = ranks[rng.index(3)];
    const auto cov = random_cov(dim, rank, rng);
    const Eigen::MatrixXd dense = dense_covariance(cov);

    suite.check(close_rel(cov.trace_inverse(), dense_trace_inverse(dense), tol),
                "trace_inverse mismatch at instance " + std::to_string(inst));
    suite.check(close_rel(cov.logdet(), dense_logdet(dense), tol),
                "logdet mismatch at instance " + std::to_string(inst));
    bool maha_ok = true;
    for (int t = 0; t < 100; ++t) {
      Eigen::VectorXd delta(dim);
      for (Eigen::Index i = 0; i < dim; ++i) delta[i] = rng.normal();
      if (!close_rel(cov.mahalanobis_sq(delta), dense_mahalanobis_sq(dense, delta), tol))
        maha_ok = false;
    }
    suite.check(maha_ok, "mahalanobis mismatch at instance " + std::to_string(inst));
  }
  return suite;
}

SuiteResult run_kl_suite(std::uint64_t seed, KlBackboneFn backbone_fn, KlHeadFn head_fn) {
  if (!backbone_fn)
    backbone_fn = [](const PosteriorParams<double>& q, const BackbonePrior<double>& p) {
      return kl_backbone(q, p);
    };
  if (!head_fn)
    head_fn = [](const PosteriorParams<double>& q, const HeadPrior<double>& p) {
      return kl_head(q, p);
    };

  SuiteResult suite;
  suite.name = "kl";
  Rng rng(seed);
  constexpr int kMcSamples = 100000;

  for (int inst = 0; inst < 6; ++inst) {
    const Eigen::Index dim = 4 + Eigen::Index(rng.index(17));  // D <= 20
    const Eigen::Index head_rows = 2 + Eigen::Index(rng.index(3));
    const Eigen::Index head_cols = 2 + Eigen::Index(rng.index(3));
    auto post = random_posterior(dim, head_rows, head_cols, rng);

    BackbonePrior<double> prior =
        inst % 2 == 0
            ? BackbonePrior<double>::l2sp(Eigen::VectorXd::NullaryExpr(
                                              dim, [&](Eigen::Index) { return rng.normal(); }),
                                          0.3 + rng.uniform())
            : BackbonePrior<double>::ptyl(
                  Eigen::VectorXd::NullaryExpr(dim,
                                               [&](Eigen::Index) { return rng.normal(); }),
                  random_cov(dim, 3, rng), 0.3 + rng.uniform());
    HeadPrior<double> head_prior{0.3 + rng.uniform()};

    // (a) dense multivariate-Gaussian oracle
    const double s2 = post.sigma_bar() * post.sigma_bar();
    const Eigen::MatrixXd q_cov = s2 * Eigen::MatrixXd::Identity(dim, dim);
    const double kl_b = backbone_fn(post, prior);
    const double kl_b_dense = dense_gaussian_kl(post.backbone_mean, q_cov, prior.mean,
                                                dense_prior_covariance(prior));
    suite.check(close_rel(kl_b, kl_b_dense, 1e-8),
                "backbone KL vs dense oracle at instance " + std::to_string(inst));

    const Eigen::Index dv = post.head_dim();
    Eigen::VectorXd head_vec(dv);
    Eigen::Index k = 0;
    for (Eigen::Index j = 0; j < head_cols; ++j)
      for (Eigen::Index i = 0; i < head_rows; ++i) head_vec[k++] = post.head_mean(i, j);
    const double kl_h = head_fn(post, head_prior);
    const double kl_h_dense = dense_gaussian_kl(
        head_vec, s2 * Eigen::MatrixXd::Identity(dv, dv), Eigen::VectorXd::Zero(dv),
        head_prior.tau * Eigen::MatrixXd::Identity(dv, dv));
    suite.check(close_rel(kl_h, kl_h_dense, 1e-8),
                "head KL vs dense oracle at instance " + std::to_string(inst));

    // (b) Monte Carlo estimate of E_q[log q - log p]
    const Eigen::MatrixXd prior_cov = dense_prior_covariance(prior);
    const Eigen::LLT<Eigen::MatrixXd> prior_chol(prior_cov);
    const double prior_logdet = dense_logdet(prior_cov);
    constexpr double kLog2Pi = 1.8378770664093454835606594728112353;

    double sum = 0, sum_sq = 0;
    for (int s = 0; s < kMcSamples; ++s) {
      Eigen::VectorXd eps(dim);
      for (Eigen::Index i = 0; i < dim; ++i) eps[i] = rng.normal();
      const Eigen::VectorXd w = post.backbone_mean + post.sigma_bar() * eps;
      const double log_q =
          -0.5 * (eps.squaredNorm() + dim * kLog2Pi + dim * std::log(s2));
      const Eigen::VectorXd diff = w - prior.mean;
      const double log_p =
          -0.5 * (diff.dot(prior_chol.solve(diff)) + dim * kLog2Pi + prior_logdet);
      const double term = log_q - log_p;
      sum += term;
      sum_sq += term * term;
    }
    const double mc_mean = sum / kMcSamples;
    const double mc_var = (sum_sq / kMcSamples - mc_mean * mc_mean) / kMcSamples;
    const double mc_se = std::sqrt(std::max(mc_var, 0.0));
    suite.check(std::abs(kl_b - mc_mean) <= 4.0 * mc_se + 1e-9,
                "backbone KL vs MC estimate at instance " + std::to_string(inst));

    // Same Monte Carlo route for the head term (diagonal covariances).
    double h_sum = 0, h_sum_sq = 0;
    for (int s = 0; s < kMcSamples; ++s) {
      double log_q = 0, log_p = 0;
      for (Eigen::Index i = 0; i < dv; ++i) {
        const double eps = rng.normal();
        const double v = head_vec[i] + post.sigma_bar() * eps;
        log_q += -0.5 * (eps * eps + kLog2Pi + std::log(s2));
        log_p += -0.5 * (v * v / head_prior.tau + kLog2Pi + std::log(head_prior.tau));
      }
      const double term = log_q - log_p;
      h_sum += term;
      h_sum_sq += term * term;
    }
    const double h_mean = h_sum / kMcSamples;
    const double h_var = (h_sum_sq / kMcSamples - h_mean * h_mean) / kMcSamples;
    suite.check(std::abs(kl_h - h_mean) <= 4.0 * std::sqrt(std::max(h_var, 0.0)) + 1e-9,
                "head KL vs MC estimate at instance " + std::to_string(inst));
  }
  return suite;
}

SuiteResult run_update_suite(std::uint64_t seed, int instances) {
  SuiteResult suite;
  suite.name = "updates";
  Rng rng(seed);
  for (int inst = 0; inst < instances; ++inst) {
    const Eigen::Index dim = 3 + Eigen::Index(rng.index(20));
    auto post = random_posterior(dim, 3, 4, rng);
    BackbonePrior<double> prior =
        inst % 3 == 2
            ? BackbonePrior<double>::ptyl(
                  Eigen::VectorXd::NullaryExpr(dim,
                                               [&](Eigen::Index) { return rng.normal(); }),
                  random_cov(dim, 3, rng))
            : BackbonePrior<double>::l2sp(Eigen::VectorXd::NullaryExpr(
                  dim, [&](Eigen::Index) { return rng.normal(); }));

    const double ls = lambda_star(post, prior);
    auto kl_of_lambda = [&](double lambda) {
      BackbonePrior<double> p = prior;
      p.lambda = lambda;
      return kl_backbone(post, p);
    };
    prior.lambda = ls;
    const double kl_at_star = kl_backbone(post, prior);
    const double fd = central_difference(kl_of_lambda, ls, 1e-5 * ls);
    suite.check(std::abs(fd) < 1e-6 * std::max(1.0, kl_at_star),
                "lambda* stationarity at instance " + std::to_string(inst));

    bool minimal = true;
    for (int t = 0; t < 100; ++t) {
      const double lambda = std::pow(10.0, -6.0 + 12.0 * rng.uniform());
      if (kl_of_lambda(lambda) < kl_at_star - 1e-9 * std::max(1.0, kl_at_star))
        minimal = false;
    }
    suite.check(minimal, "lambda* minimality at instance " + std::to_string(inst));
    suite.check(second_derivative_lambda(post, prior) < 0,
                "lambda* second derivative sign at instance " + std::to_string(inst));

    const double ts = tau_star(post);
    HeadPrior<double> head_prior{ts};
    auto kl_of_tau = [&](double tau) { return kl_head(post, HeadPrior<double>{tau}); };
    const double kl_h_star = kl_head(post, head_prior);
    const double fd_tau = central_difference(kl_of_tau, ts, 1e-5 * ts);
    suite.check(std::abs(fd_tau) < 1e-6 * std::max(1.0, kl_h_star),
                "tau* stationarity at instance " + std::to_string(inst));

    bool tau_minimal = true;
    for (int t = 0; t < 100; ++t) {
      const double tau = std::pow(10.0, -6.0 + 12.0 * rng.uniform());
      if (kl_of_tau(tau) < kl_h_star - 1e-9 * std::max(1.0, kl_h_star))
        tau_minimal = false;
    }
    suite.check(tau_minimal, "tau* minimality at instance " + std::to_string(inst));
    suite.check(second_derivative_tau(post) < 0,
                "tau* second derivative sign at instance " + std::to_string(inst));
  }
  return suite;
}

SuiteResult run_gradient_suite(std::uint64_t seed) {
  SuiteResult suite;
  suite.name = "gradients";
  Rng rng(seed);

  const ModelSpec spec = make_model_spec(4, {6}, 5, 3);
  for (int inst = 0; inst < 5; ++inst) {
    auto post = random_posterior(spec.backbone_dim, spec.num_classes, spec.repr_dim, rng);
    post.backbone_mean *= 0.3;
    const auto prior =
        BackbonePrior<double>::l2sp(Eigen::VectorXd::NullaryExpr(
                                        spec.backbone_dim,
                                        [&](Eigen::Index) { return 0.3 * rng.normal(); }),
                                    0.5);
    const HeadPrior<double> head_prior{0.5};

    Batch<double> batch;
    batch.features.resize(8, spec.input_dim);
    batch.labels.resize(8);
    for (Eigen::Index i = 0; i < 8; ++i) {
      for (Eigen::Index j = 0; j < spec.input_dim; ++j)
        batch.features(i, j) = rng.normal();
      batch.labels[i] = int(rng.index(std::size_t(spec.num_classes)));
    }

    ObjectiveConfig cfg;
    cfg.kappa = 1.0 + 3.0 * rng.uniform();
    cfg.mc_samples = 2;
    const std::uint64_t noise_seed = rng.raw();

    auto eval = [&](const PosteriorParams<double>& p) {
      Rng noise(noise_seed);
      return elbo(spec, p, prior, head_prior, batch, cfg, noise);
    };
    Rng noise(noise_seed);
    PosteriorGrad<double> grad;
    elbo_value_and_grad(spec, post, prior, head_prior, batch, cfg, noise, grad);

    bool ok = true;
    const double step = 1e-5;
    for (int t = 0; t < 10; ++t) {
      const Eigen::Index i = Eigen::Index(rng.index(std::size_t(spec.backbone_dim)));
      auto p = post;
      p.backbone_mean[i] += step;
      auto m = post;
      m.backbone_mean[i] -= step;
      const double fd = (eval(p) - eval(m)) / (2 * step);
      if (!close_rel(fd, grad.backbone_mean[i], 1e-4)) ok = false;
    }
    {
      auto p = post;
      p.rho += step;
      auto m = post;
      m.rho -= step;
      const double fd = (eval(p) - eval(m)) / (2 * step);
      if (!close_rel(fd, grad.rho, 1e-4)) ok = false;
    }
    suite.check(ok, "elbo gradient finite differences at instance " + std::to_string(inst));

    // MAP gradient vs finite differences of the loss.
    FlatParams<double> params;
    params.backbone = 0.3 * post.backbone_mean;
    params.head = post.head_mean;
    const MapHyperparams<double> hp{0.7, 0.4};
    FlatParams<double> map_grad;
    map_loss_and_grad(spec, params, batch, hp, prior, map_grad);
    bool map_ok = true;
    for (int t = 0; t < 10; ++t) {
      const Eigen::Index i = Eigen::Index(rng.index(std::size_t(spec.backbone_dim)));
      auto p = params;
      p.backbone[i] += step;
      auto m = params;
      m.backbone[i] -= step;
      const double fd =
          (map_loss(spec, p, batch, hp, prior) - map_loss(spec, m, batch, hp, prior)) /
          (2 * step);
      if (!close_rel(fd, map_grad.backbone[i], 1e-4)) map_ok = false;
    }
    suite.check(map_ok, "map gradient finite differences at instance " + std::to_string(inst));
  }
  return suite;
}

std::vector<SuiteResult> run_all_suites(std::uint64_t seed) {
  return {run_woodbury_suite(seed), run_kl_suite(seed), run_update_suite(seed),
          run_gradient_suite(seed)};
}

}  // namespace deelbo::verify
