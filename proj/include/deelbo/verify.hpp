#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "deelbo/lowrank.hpp"
#include "deelbo/nnet.hpp"
#include "deelbo/variational.hpp"

namespace deelbo::verify {

// Dense reference implementations. These materialize the full D x D matrix
// and use plain dense factorizations, so they share no code path with the
// Woodbury routines they are checked against.

Eigen::MatrixXd dense_covariance(const LowRankCov<double>& cov);
double dense_trace_inverse(const Eigen::MatrixXd& sigma);
double dense_logdet(const Eigen::MatrixXd& sigma);
double dense_mahalanobis_sq(const Eigen::MatrixXd& sigma, const Eigen::VectorXd& delta);

/// KL( N(mean0, cov0) || N(mean1, cov1) ) from the dense matrices.
double dense_gaussian_kl(const Eigen::VectorXd& mean0, const Eigen::MatrixXd& cov0,
                         const Eigen::VectorXd& mean1, const Eigen::MatrixXd& cov1);

/// Dense prior covariance lambda * Sigma_p of a backbone prior.
Eigen::MatrixXd dense_prior_covariance(const BackbonePrior<double>& prior);

double central_difference(const std::function<double(double)>& f, double x,
                          double step);
double second_central_difference(const std::function<double(double)>& f, double x,
                                 double step);

/// Random valid test instances.
LowRankCov<double> random_cov(Eigen::Index dim, Eigen::Index rank, Rng& rng);
PosteriorParams<double> random_posterior(Eigen::Index backbone_dim,
                                         Eigen::Index head_rows, Eigen::Index head_cols,
                                         Rng& rng);

struct SuiteResult {
  std::string name;
  int passed = 0;
  int failed = 0;
  std::vector<std::string> failures;

  bool ok() const { return failed == 0; }
  void check(bool condition, const std::string& message);
};

using KlBackboneFn =
    std::function<double(const PosteriorParams<double>&, const BackbonePrior<double>&)>;
using KlHeadFn =
    std::function<double(const PosteriorParams<double>&, const HeadPrior<double>&)>;

/// Woodbury trace/logdet/Mahalanobis against the dense oracle.
SuiteResult run_woodbury_suite(std::uint64_t seed = 0, int instances = 50,
                               double tol = 1e-8);

/// Closed-form KLs against the dense oracle and a Monte Carlo estimate.
/// The KL implementations are injectable so a deliberately corrupted
/// closed form can be shown to fail.
SuiteResult run_kl_suite(std::uint64_t seed = 0,
                         KlBackboneFn backbone_fn = nullptr,
                         KlHeadFn head_fn = nullptr);

/// lambda*/tau* stationarity, minimality, and second-derivative signs.
SuiteResult run_update_suite(std::uint64_t seed = 0, int instances = 100);

/// Reparameterized-gradient and MAP-gradient finite-difference checks.
SuiteResult run_gradient_suite(std::uint64_t seed = 0);

std::vector<SuiteResult> run_all_suites(std::uint64_t seed = 0);

}  // namespace deelbo::verify
