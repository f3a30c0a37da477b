#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "deelbo/errors.hpp"
#include "deelbo/types.hpp"

namespace deelbo {

/// Layer bookkeeping for the tanh MLP backbone plus linear head. The last
/// representation unit is forced to 1 after the final activation, so the
/// head needs no separate bias column.
struct ModelSpec {
  int input_dim = 0;               // P
  std::vector<int> hidden_sizes;
  int repr_dim = 0;                // H, includes the always-one slot
  int num_classes = 0;             // C
  Eigen::Index backbone_dim = 0;   // D = sum over layers of fan_in*fan_out + fan_out
  Eigen::Index head_dim = 0;       // C*H

  std::vector<int> layer_sizes() const {
    std::vector<int> sizes;
    sizes.reserve(hidden_sizes.size() + 2);
    sizes.push_back(input_dim);
    sizes.insert(sizes.end(), hidden_sizes.begin(), hidden_sizes.end());
    sizes.push_back(repr_dim);
    return sizes;
  }
};

inline ModelSpec make_model_spec(int input_dim, std::vector<int> hidden_sizes,
                                 int repr_dim, int num_classes) {
  if (input_dim < 1) throw ConfigError("model: input_dim must be >= 1");
  if (repr_dim < 2) throw ConfigError("model: repr_dim must be >= 2");
  if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
  for (int h : hidden_sizes)
    if (h < 1) throw ConfigError("model: hidden sizes must be >= 1");

  ModelSpec spec;
  spec.input_dim = input_dim;
  spec.hidden_sizes = std::move(hidden_sizes);
  spec.repr_dim = repr_dim;
  spec.num_classes = num_classes;
  const auto sizes = spec.layer_sizes();
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    spec.backbone_dim += Eigen::Index(sizes[l]) * sizes[l + 1] + sizes[l + 1];
  }
  spec.head_dim = Eigen::Index(num_classes) * repr_dim;
  return spec;
}

/// Backbone weight vector plus head matrix; the flat backbone layout is,
/// per layer, the (fan_out x fan_in) weight matrix column-major followed by
/// the bias, which round-trips losslessly through the per-layer maps below.
template <typename Scalar>
struct FlatParams {
  VectorX<Scalar> backbone;  // length D
  MatrixX<Scalar> head;      // C x H
};

template <typename Scalar>
struct Batch {
  MatrixX<Scalar> features;  // B x P
  IndexVector labels;        // B, values in {0..C-1}
};

namespace detail {

template <typename Scalar>
void check_shapes(const ModelSpec& spec, const FlatParams<Scalar>& params,
                  const MatrixX<Scalar>& features) {
  if (params.backbone.size() != spec.backbone_dim)
    throw ShapeError("nnet: backbone vector has length " +
                     std::to_string(params.backbone.size()) + ", expected " +
                     std::to_string(spec.backbone_dim));
  if (params.head.rows() != spec.num_classes || params.head.cols() != spec.repr_dim)
    throw ShapeError("nnet: head matrix has wrong shape");
  if (features.cols() != spec.input_dim)
    throw ShapeError("nnet: feature columns do not match input_dim");
}

/// Runs the backbone; returns the B x H representation (ones column set).
/// When `activations` is given it receives [A_0 = X, A_1, ..., A_L].
template <typename Scalar>
MatrixX<Scalar> backbone_forward(const ModelSpec& spec, const VectorX<Scalar>& w,
                                 const MatrixX<Scalar>& features,
                                 std::vector<MatrixX<Scalar>>* activations) {
  const auto sizes = spec.layer_sizes();
  if (activations) {
    activations->clear();
    activations->push_back(features);
  }
  MatrixX<Scalar> a = features;
  Eigen::Index offset = 0;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const Eigen::Index fan_in = sizes[l];
    const Eigen::Index fan_out = sizes[l + 1];
    Eigen::Map<const MatrixX<Scalar>> weight(w.data() + offset, fan_out, fan_in);
    offset += fan_in * fan_out;
    Eigen::Map<const VectorX<Scalar>> bias(w.data() + offset, fan_out);
    offset += fan_out;
    a = (((a * weight.transpose()).rowwise() + bias.transpose()).array().tanh()).matrix();
    if (l + 2 == sizes.size()) a.col(spec.repr_dim - 1).setOnes();
    if (activations) activations->push_back(a);
  }
  return a;
}

template <typename Scalar>
MatrixX<Scalar> logits_of(const MatrixX<Scalar>& repr, const MatrixX<Scalar>& head) {
  MatrixX<Scalar> logits = repr * head.transpose();
  if (!logits.allFinite()) throw NumericalError("nnet: non-finite activation");
  return logits;
}

template <typename Scalar>
void check_labels(const ModelSpec& spec, const IndexVector& labels) {
  for (Eigen::Index i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || labels[i] >= spec.num_classes)
      throw RangeError("nnet: label out of range at row " + std::to_string(i));
}

}  // namespace detail

/// Class probabilities, one row per example; softmax with max subtraction.
template <typename Scalar>
MatrixX<Scalar> forward(const ModelSpec& spec, const FlatParams<Scalar>& params,
                        const MatrixX<Scalar>& features) {
  detail::check_shapes(spec, params, features);
  const MatrixX<Scalar> repr = detail::backbone_forward<Scalar>(spec, params.backbone,
                                                                features, nullptr);
  MatrixX<Scalar> logits = detail::logits_of<Scalar>(repr, params.head);
  const VectorX<Scalar> row_max = logits.rowwise().maxCoeff();
  logits.colwise() -= row_max;
  MatrixX<Scalar> probs = logits.array().exp().matrix();
  probs.array().colwise() /= probs.rowwise().sum().array();
  return probs;
}

/// Sum over the batch of log p(y_i | params), via log-sum-exp.
template <typename Scalar>
Scalar log_likelihood(const ModelSpec& spec, const FlatParams<Scalar>& params,
                      const Batch<Scalar>& batch) {
  detail::check_shapes(spec, params, batch.features);
  detail::check_labels<Scalar>(spec, batch.labels);
  if (batch.labels.size() != batch.features.rows())
    throw ShapeError("nnet: label count does not match feature rows");
  const MatrixX<Scalar> repr = detail::backbone_forward<Scalar>(spec, params.backbone,
                                                                batch.features, nullptr);
  const MatrixX<Scalar> logits = detail::logits_of<Scalar>(repr, params.head);
  const VectorX<Scalar> row_max = logits.rowwise().maxCoeff();
  const VectorX<Scalar> lse =
      row_max.array() +
      (logits.colwise() - row_max).array().exp().rowwise().sum().log();
  Scalar total = Scalar(0);
  for (Eigen::Index i = 0; i < batch.labels.size(); ++i)
    total += logits(i, batch.labels[i]) - lse[i];
  return total;
}

/// log_likelihood plus its gradient with respect to every backbone and head
/// entry, in one reverse pass.
template <typename Scalar>
Scalar log_likelihood_and_grad(const ModelSpec& spec, const FlatParams<Scalar>& params,
                               const Batch<Scalar>& batch, FlatParams<Scalar>& grad) {
  detail::check_shapes(spec, params, batch.features);
  detail::check_labels<Scalar>(spec, batch.labels);
  if (batch.labels.size() != batch.features.rows())
    throw ShapeError("nnet: label count does not match feature rows");

  std::vector<MatrixX<Scalar>> acts;
  const MatrixX<Scalar> repr =
      detail::backbone_forward<Scalar>(spec, params.backbone, batch.features, &acts);
  const MatrixX<Scalar> logits = detail::logits_of<Scalar>(repr, params.head);
  const VectorX<Scalar> row_max = logits.rowwise().maxCoeff();
  const VectorX<Scalar> lse =
      row_max.array() +
      (logits.colwise() - row_max).array().exp().rowwise().sum().log();

  Scalar total = Scalar(0);
  for (Eigen::Index i = 0; i < batch.labels.size(); ++i)
    total += logits(i, batch.labels[i]) - lse[i];

  // d log_likelihood / d logits = onehot - softmax
  MatrixX<Scalar> dlogits =
      (-((logits.colwise() - lse).array().exp())).matrix();
  for (Eigen::Index i = 0; i < batch.labels.size(); ++i)
    dlogits(i, batch.labels[i]) += Scalar(1);

  grad.head.noalias() = dlogits.transpose() * repr;
  grad.backbone.resize(spec.backbone_dim);

  // Backward through the layers. The ones column carries zero gradient:
  // its cached activation is exactly 1, so 1 - a^2 vanishes there.
  MatrixX<Scalar> da = dlogits * params.head;
  const auto sizes = spec.layer_sizes();
  Eigen::Index offset = spec.backbone_dim;
  for (std::size_t l = sizes.size() - 1; l-- > 0;) {
    const Eigen::Index fan_in = sizes[l];
    const Eigen::Index fan_out = sizes[l + 1];
    const MatrixX<Scalar>& a_cur = acts[l + 1];
    const MatrixX<Scalar>& a_prev = acts[l];
    const MatrixX<Scalar> dz =
        (da.array() * (Scalar(1) - a_cur.array().square())).matrix();

    offset -= fan_out;
    Eigen::Map<VectorX<Scalar>> gbias(grad.backbone.data() + offset, fan_out);
    gbias = dz.colwise().sum();
    offset -= fan_in * fan_out;
    Eigen::Map<MatrixX<Scalar>> gweight(grad.backbone.data() + offset, fan_out, fan_in);
    gweight.noalias() = dz.transpose() * a_prev;

    if (l > 0) {
      Eigen::Map<const MatrixX<Scalar>> weight(params.backbone.data() + offset,
                                               fan_out, fan_in);
      da = dz * weight;
    }
  }
  return total;
}

template <typename Scalar>
FlatParams<Scalar> grad_log_likelihood(const ModelSpec& spec,
                                       const FlatParams<Scalar>& params,
                                       const Batch<Scalar>& batch) {
  FlatParams<Scalar> grad;
  log_likelihood_and_grad(spec, params, batch, grad);
  return grad;
}

}  // namespace deelbo
