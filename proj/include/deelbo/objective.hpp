#pragma once

#include <cmath>

#include <Eigen/Core>

#include "deelbo/errors.hpp"
#include "deelbo/nnet.hpp"
#include "deelbo/rng.hpp"
#include "deelbo/types.hpp"
#include "deelbo/variational.hpp"

namespace deelbo {

/// Weights of the Monte Carlo objective. `likelihood_weight` (kappa) >= 1
/// keeps the bound on the evidence valid; `minibatch_scale` is N/B so a
/// batch estimate targets the full-data objective in expectation.
struct ObjectiveConfig {
  double kappa = 1.0;
  int mc_samples = 1;
  double minibatch_scale = 1.0;

  void validate() const {
    if (!(kappa >= 1.0))
      throw InvalidHyperparam("objective: kappa must be >= 1");
    if (mc_samples < 1)
      throw InvalidHyperparam("objective: mc_samples must be >= 1");
    if (!(minibatch_scale > 0.0))
      throw InvalidHyperparam("objective: minibatch_scale must be > 0");
  }
};

template <typename Scalar>
struct MapHyperparams {
  Scalar alpha = Scalar(0);
  Scalar beta = Scalar(0);
};

template <typename Scalar>
struct PosteriorGrad {
  VectorX<Scalar> backbone_mean;
  MatrixX<Scalar> head_mean;
  Scalar rho = Scalar(0);
};

/// Monte Carlo (DE-)ELBo estimate:
///
///   kappa * (N/B) * 1/S sum_s log_likelihood(sample_s) - KL_backbone - KL_head.
///
/// kappa = 1 is the standard bound. Given the same generator state the value
/// is deterministic, which also freezes the noise for finite differences.
template <typename Scalar>
Scalar elbo(const ModelSpec& spec, const PosteriorParams<Scalar>& post,
            const BackbonePrior<Scalar>& backbone_prior, const HeadPrior<Scalar>& head_prior,
            const Batch<Scalar>& batch, const ObjectiveConfig& cfg, Rng& rng) {
  cfg.validate();
  Scalar lik = Scalar(0);
  for (int s = 0; s < cfg.mc_samples; ++s) {
    const FlatParams<Scalar> params = sample(post, rng);
    lik += log_likelihood(spec, params, batch);
  }
  lik *= Scalar(cfg.kappa) * Scalar(cfg.minibatch_scale) / Scalar(cfg.mc_samples);
  return lik - kl_backbone(post, backbone_prior) - kl_head(post, head_prior);
}

/// One-pass value and exact gradient of the Monte Carlo estimator for the
/// drawn noise. The sigma path is d/d sigma = sum g . eps, chained through
/// softplus'(rho) = sigmoid(rho).
template <typename Scalar>
Scalar elbo_value_and_grad(const ModelSpec& spec, const PosteriorParams<Scalar>& post,
                           const BackbonePrior<Scalar>& backbone_prior,
                           const HeadPrior<Scalar>& head_prior, const Batch<Scalar>& batch,
                           const ObjectiveConfig& cfg, Rng& rng,
                           PosteriorGrad<Scalar>& grad) {
  cfg.validate();
  Scalar lik = Scalar(0);
  VectorX<Scalar> g_backbone = VectorX<Scalar>::Zero(post.backbone_mean.size());
  MatrixX<Scalar> g_head =
      MatrixX<Scalar>::Zero(post.head_mean.rows(), post.head_mean.cols());
  Scalar g_sigma = Scalar(0);

  FlatParams<Scalar> sample_grad;
  for (int s = 0; s < cfg.mc_samples; ++s) {
    const auto noise = draw_noise<Scalar>(post.backbone_mean.size(),
                                          post.head_mean.rows(),
                                          post.head_mean.cols(), rng);
    const FlatParams<Scalar> params = sample_with_noise(post, noise);
    lik += log_likelihood_and_grad(spec, params, batch, sample_grad);
    g_backbone += sample_grad.backbone;
    g_head += sample_grad.head;
    g_sigma += sample_grad.backbone.dot(noise.backbone) +
               sample_grad.head.cwiseProduct(noise.head).sum();
  }
  const Scalar scale =
      Scalar(cfg.kappa) * Scalar(cfg.minibatch_scale) / Scalar(cfg.mc_samples);

  const auto bg = kl_backbone_grads(post, backbone_prior);
  const auto hg = kl_head_grads(post, head_prior);
  grad.backbone_mean = scale * g_backbone - bg.d_mean;
  grad.head_mean = scale * g_head - hg.d_mean;
  grad.rho = (scale * g_sigma - bg.d_sigma - hg.d_sigma) * sigmoid(post.rho);

  return scale * lik - kl_backbone(post, backbone_prior) - kl_head(post, head_prior);
}

template <typename Scalar>
PosteriorGrad<Scalar> elbo_grad(const ModelSpec& spec, const PosteriorParams<Scalar>& post,
                                const BackbonePrior<Scalar>& backbone_prior,
                                const HeadPrior<Scalar>& head_prior,
                                const Batch<Scalar>& batch, const ObjectiveConfig& cfg,
                                Rng& rng) {
  PosteriorGrad<Scalar> grad;
  elbo_value_and_grad(spec, post, backbone_prior, head_prior, batch, cfg, rng, grad);
  return grad;
}

/// L2-penalized risk:
///
///   1/N [ sum_i -log p(y_i) + alpha/2 (w-mu_p)^T Sigma_p^{-1} (w-mu_p)
///         + beta/2 |vec(V)|^2 ].
///
/// The prior supplies the penalty mean and metric only; its scale enters
/// through alpha. `dataset_size` (N) defaults to the batch size, so a batch
/// smaller than N yields the minibatch estimate of the full-data loss.
template <typename Scalar>
Scalar map_loss(const ModelSpec& spec, const FlatParams<Scalar>& params,
                const Batch<Scalar>& batch, const MapHyperparams<Scalar>& hp,
                const BackbonePrior<Scalar>& prior, Eigen::Index dataset_size = 0) {
  if (hp.alpha < Scalar(0) || hp.beta < Scalar(0))
    throw InvalidHyperparam("map_loss: penalties must be >= 0");
  const Scalar batch_size = Scalar(batch.features.rows());
  const Scalar n = dataset_size > 0 ? Scalar(dataset_size) : batch_size;
  Scalar loss = -log_likelihood(spec, params, batch) / batch_size;
  if (hp.alpha > Scalar(0))
    loss += hp.alpha / (Scalar(2) * n) *
            prior.mahalanobis_sq(params.backbone - prior.mean);
  if (hp.beta > Scalar(0))
    loss += hp.beta / (Scalar(2) * n) * params.head.squaredNorm();
  return loss;
}

template <typename Scalar>
Scalar map_loss_and_grad(const ModelSpec& spec, const FlatParams<Scalar>& params,
                         const Batch<Scalar>& batch, const MapHyperparams<Scalar>& hp,
                         const BackbonePrior<Scalar>& prior, FlatParams<Scalar>& grad,
                         Eigen::Index dataset_size = 0) {
  if (hp.alpha < Scalar(0) || hp.beta < Scalar(0))
    throw InvalidHyperparam("map_loss_and_grad: penalties must be >= 0");
  const Scalar batch_size = Scalar(batch.features.rows());
  const Scalar n = dataset_size > 0 ? Scalar(dataset_size) : batch_size;

  FlatParams<Scalar> g_lik;
  Scalar loss = -log_likelihood_and_grad(spec, params, batch, g_lik) / batch_size;
  grad.backbone = -g_lik.backbone / batch_size;
  grad.head = -g_lik.head / batch_size;
  if (hp.alpha > Scalar(0)) {
    loss += hp.alpha / (Scalar(2) * n) *
            prior.mahalanobis_sq(params.backbone - prior.mean);
    grad.backbone += hp.alpha / n * prior.apply_inverse(params.backbone - prior.mean);
  }
  if (hp.beta > Scalar(0)) {
    loss += hp.beta / (Scalar(2) * n) * params.head.squaredNorm();
    grad.head += hp.beta / n * params.head;
  }
  return loss;
}

/// log p(y, w, V) = sum_i log p(y_i | w, V) + log N(w | mu_p, lambda Sigma_p)
///                + log N(vec(V) | 0, tau I).
template <typename Scalar>
Scalar log_joint(const ModelSpec& spec, const FlatParams<Scalar>& params,
                 const Batch<Scalar>& batch, const BackbonePrior<Scalar>& backbone_prior,
                 const HeadPrior<Scalar>& head_prior) {
  if (!(backbone_prior.lambda > Scalar(0)))
    throw InvalidHyperparam("log_joint: lambda must be > 0");
  if (!(head_prior.tau > Scalar(0)))
    throw InvalidHyperparam("log_joint: tau must be > 0");
  constexpr Scalar kLog2Pi = Scalar(1.8378770664093454835606594728112353);
  const Scalar dim = Scalar(backbone_prior.dim());
  const Scalar dv = Scalar(params.head.size());
  const Scalar maha =
      backbone_prior.mahalanobis_sq(params.backbone - backbone_prior.mean);
  Scalar lp = log_likelihood(spec, params, batch);
  lp += Scalar(-0.5) * (maha / backbone_prior.lambda + dim * kLog2Pi +
                        dim * std::log(backbone_prior.lambda) + backbone_prior.logdet());
  lp += Scalar(-0.5) * (params.head.squaredNorm() / head_prior.tau + dv * kLog2Pi +
                        dv * std::log(head_prior.tau));
  return lp;
}

template <typename Scalar>
FlatParams<Scalar> log_joint_grad(const ModelSpec& spec, const FlatParams<Scalar>& params,
                                  const Batch<Scalar>& batch,
                                  const BackbonePrior<Scalar>& backbone_prior,
                                  const HeadPrior<Scalar>& head_prior) {
  FlatParams<Scalar> grad = grad_log_likelihood(spec, params, batch);
  grad.backbone -=
      backbone_prior.apply_inverse(params.backbone - backbone_prior.mean) /
      backbone_prior.lambda;
  grad.head -= params.head / head_prior.tau;
  return grad;
}

}  // namespace deelbo
