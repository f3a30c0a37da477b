#pragma once

#include <cmath>
#include <optional>
#include <utility>

#include <Eigen/Core>

#include "deelbo/errors.hpp"
#include "deelbo/lowrank.hpp"
#include "deelbo/nnet.hpp"
#include "deelbo/rng.hpp"
#include "deelbo/types.hpp"

namespace deelbo {

template <typename Scalar>
Scalar softplus(Scalar x) {
  return x > Scalar(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

/// Inverse of softplus on (0, inf).
template <typename Scalar>
Scalar softplus_inv(Scalar y) {
  return y > Scalar(30) ? y : std::log(std::expm1(y));
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

/// Mean-field posterior: backbone and head means plus one shared standard
/// deviation sigma_bar = softplus(rho).
template <typename Scalar>
struct PosteriorParams {
  VectorX<Scalar> backbone_mean;  // length D
  MatrixX<Scalar> head_mean;      // C x H
  Scalar rho = Scalar(0);

  Scalar sigma_bar() const { return softplus(rho); }
  Eigen::Index head_dim() const { return head_mean.size(); }
};

enum class PriorKind { L2Zero, L2SP, PTYL };

inline const char* prior_kind_name(PriorKind kind) {
  switch (kind) {
    case PriorKind::L2Zero: return "l2zero";
    case PriorKind::L2SP: return "l2sp";
    case PriorKind::PTYL: return "ptyl";
  }
  return "?";
}

/// Backbone prior N(mean, lambda * Sigma_p); Sigma_p is the identity unless
/// a low-rank covariance is attached (PTYL).
template <typename Scalar>
struct BackbonePrior {
  PriorKind kind = PriorKind::L2Zero;
  VectorX<Scalar> mean;
  std::optional<LowRankCov<Scalar>> cov;
  Scalar lambda = Scalar(1);

  static BackbonePrior l2zero(Eigen::Index dim, Scalar lambda = Scalar(1)) {
    return {PriorKind::L2Zero, VectorX<Scalar>::Zero(dim), std::nullopt, lambda};
  }
  static BackbonePrior l2sp(VectorX<Scalar> mean, Scalar lambda = Scalar(1)) {
    return {PriorKind::L2SP, std::move(mean), std::nullopt, lambda};
  }
  static BackbonePrior ptyl(VectorX<Scalar> mean, LowRankCov<Scalar> cov,
                            Scalar lambda = Scalar(1)) {
    if (cov.dim() != mean.size())
      throw ShapeError("BackbonePrior: covariance dim does not match mean");
    return {PriorKind::PTYL, std::move(mean), std::move(cov), lambda};
  }

  Eigen::Index dim() const { return mean.size(); }

  Scalar trace_inverse() const {
    return cov ? cov->trace_inverse() : Scalar(dim());
  }
  Scalar logdet() const { return cov ? cov->logdet() : Scalar(0); }

  template <typename Derived>
  Scalar mahalanobis_sq(const Eigen::MatrixBase<Derived>& delta) const {
    return cov ? cov->mahalanobis_sq(delta) : delta.derived().squaredNorm();
  }
  template <typename Derived>
  VectorX<Scalar> apply_inverse(const Eigen::MatrixBase<Derived>& v) const {
    return cov ? cov->solve(v) : VectorX<Scalar>(v.derived());
  }
};

template <typename Scalar>
struct HeadPrior {
  Scalar tau = Scalar(1);  // p(vec(V)) = N(0, tau * I)
};

/// IID standard-normal noise shaped like the parameters; the draw order is
/// backbone first, then the head column-major.
template <typename Scalar>
struct GaussianNoise {
  VectorX<Scalar> backbone;
  MatrixX<Scalar> head;
};

template <typename Scalar>
GaussianNoise<Scalar> draw_noise(Eigen::Index backbone_dim, Eigen::Index head_rows,
                                 Eigen::Index head_cols, Rng& rng) {
  GaussianNoise<Scalar> noise;
  noise.backbone.resize(backbone_dim);
  for (Eigen::Index i = 0; i < backbone_dim; ++i)
    noise.backbone[i] = Scalar(rng.normal());
  noise.head.resize(head_rows, head_cols);
  for (Eigen::Index j = 0; j < head_cols; ++j)
    for (Eigen::Index i = 0; i < head_rows; ++i)
      noise.head(i, j) = Scalar(rng.normal());
  return noise;
}

template <typename Scalar>
FlatParams<Scalar> sample_with_noise(const PosteriorParams<Scalar>& post,
                                     const GaussianNoise<Scalar>& noise) {
  const Scalar sigma = post.sigma_bar();
  FlatParams<Scalar> params;
  params.backbone = post.backbone_mean + sigma * noise.backbone;
  params.head = post.head_mean + sigma * noise.head;
  return params;
}

/// Reparameterized draw: w = w_mean + sigma_bar * eps, same for the head.
template <typename Scalar>
FlatParams<Scalar> sample(const PosteriorParams<Scalar>& post, Rng& rng) {
  const auto noise = draw_noise<Scalar>(post.backbone_mean.size(),
                                        post.head_mean.rows(),
                                        post.head_mean.cols(), rng);
  return sample_with_noise(post, noise);
}

/// KL(q(w) || p(w)) for q = N(mean, sigma_bar^2 I), p = N(mu_p, lambda Sigma_p):
///
///   1/2 [ sigma^2/lambda tr(Sigma_p^{-1}) + 1/lambda d^T Sigma_p^{-1} d - D
///         + D log lambda + logdet(Sigma_p) - D log sigma^2 ]
///
/// with the log term kept additive so lambda^D is never exponentiated.
template <typename Scalar>
Scalar kl_backbone(const PosteriorParams<Scalar>& post, const BackbonePrior<Scalar>& prior) {
  if (!(prior.lambda > Scalar(0)))
    throw InvalidHyperparam("kl_backbone: lambda must be > 0");
  if (post.backbone_mean.size() != prior.dim())
    throw ShapeError("kl_backbone: posterior/prior dimension mismatch");
  const Scalar dim = Scalar(prior.dim());
  const Scalar s2 = post.sigma_bar() * post.sigma_bar();
  const Scalar trace_term = prior.trace_inverse();
  const Scalar maha = prior.mahalanobis_sq(prior.mean - post.backbone_mean);
  return Scalar(0.5) * (s2 / prior.lambda * trace_term + maha / prior.lambda - dim +
                        dim * std::log(prior.lambda) + prior.logdet() -
                        dim * std::log(s2));
}

/// KL(q(V) || p(V)) with p = N(0, tau I) over the d_V = C*H head entries.
template <typename Scalar>
Scalar kl_head(const PosteriorParams<Scalar>& post, const HeadPrior<Scalar>& prior) {
  if (!(prior.tau > Scalar(0)))
    throw InvalidHyperparam("kl_head: tau must be > 0");
  const Scalar dv = Scalar(post.head_dim());
  const Scalar s2 = post.sigma_bar() * post.sigma_bar();
  return Scalar(0.5) * (s2 / prior.tau * dv + post.head_mean.squaredNorm() / prior.tau -
                        dv + dv * std::log(prior.tau) - dv * std::log(s2));
}

/// Stationary point of the backbone KL in lambda:
///   lambda* = 1/D [ sigma^2 tr(Sigma_p^{-1}) + d^T Sigma_p^{-1} d ].
template <typename Scalar>
Scalar lambda_star(const PosteriorParams<Scalar>& post, const BackbonePrior<Scalar>& prior) {
  if (post.backbone_mean.size() != prior.dim())
    throw ShapeError("lambda_star: posterior/prior dimension mismatch");
  const Scalar s2 = post.sigma_bar() * post.sigma_bar();
  const Scalar maha = prior.mahalanobis_sq(prior.mean - post.backbone_mean);
  return (s2 * prior.trace_inverse() + maha) / Scalar(prior.dim());
}

/// Stationary point of the head KL in tau: tau* = sigma^2 + |V|^2 / d_V.
template <typename Scalar>
Scalar tau_star(const PosteriorParams<Scalar>& post) {
  const Scalar s2 = post.sigma_bar() * post.sigma_bar();
  return s2 + post.head_mean.squaredNorm() / Scalar(post.head_dim());
}

/// Second derivative of -KL(q(w)||p(w)) at lambda*: -(D/2) / lambda*^2 < 0.
template <typename Scalar>
Scalar second_derivative_lambda(const PosteriorParams<Scalar>& post,
                                const BackbonePrior<Scalar>& prior) {
  const Scalar ls = lambda_star(post, prior);
  return -(Scalar(prior.dim()) / Scalar(2)) / (ls * ls);
}

/// Second derivative of -KL(q(V)||p(V)) at tau*: -(d_V/2) / tau*^2 < 0.
template <typename Scalar>
Scalar second_derivative_tau(const PosteriorParams<Scalar>& post) {
  const Scalar ts = tau_star(post);
  return -(Scalar(post.head_dim()) / Scalar(2)) / (ts * ts);
}

/// Closed-form KL gradients in the variational parameters, used by the
/// objective's reparameterized gradient.
template <typename Scalar>
struct KlBackboneGrads {
  VectorX<Scalar> d_mean;
  Scalar d_sigma;
};

template <typename Scalar>
KlBackboneGrads<Scalar> kl_backbone_grads(const PosteriorParams<Scalar>& post,
                                          const BackbonePrior<Scalar>& prior) {
  if (!(prior.lambda > Scalar(0)))
    throw InvalidHyperparam("kl_backbone_grads: lambda must be > 0");
  const Scalar dim = Scalar(prior.dim());
  const Scalar sigma = post.sigma_bar();
  KlBackboneGrads<Scalar> grads;
  grads.d_mean = prior.apply_inverse(post.backbone_mean - prior.mean) / prior.lambda;
  grads.d_sigma = sigma * prior.trace_inverse() / prior.lambda - dim / sigma;
  return grads;
}

template <typename Scalar>
struct KlHeadGrads {
  MatrixX<Scalar> d_mean;
  Scalar d_sigma;
};

template <typename Scalar>
KlHeadGrads<Scalar> kl_head_grads(const PosteriorParams<Scalar>& post,
                                  const HeadPrior<Scalar>& prior) {
  if (!(prior.tau > Scalar(0)))
    throw InvalidHyperparam("kl_head_grads: tau must be > 0");
  const Scalar dv = Scalar(post.head_dim());
  const Scalar sigma = post.sigma_bar();
  KlHeadGrads<Scalar> grads;
  grads.d_mean = post.head_mean / prior.tau;
  grads.d_sigma = sigma * dv / prior.tau - dv / sigma;
  return grads;
}

}  // namespace deelbo
