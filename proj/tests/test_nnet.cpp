#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "deelbo/nnet.hpp"
#include "deelbo/rng.hpp"

using deelbo::Batch;
using deelbo::FlatParams;
using deelbo::ModelSpec;
using deelbo::Rng;
using deelbo::make_model_spec;

namespace {

// Independent scalar-loop forward pass used as the oracle. Reads the same
// flat layout (per layer: column-major weights, then bias) with plain loops
// and no shared code with the Eigen implementation.
std::vector<double> oracle_forward_row(const ModelSpec& spec,
                                       const std::vector<double>& w,
                                       const std::vector<std::vector<double>>& head,
                                       const std::vector<double>& x) {
  const auto sizes = spec.layer_sizes();
  std::vector<double> act = x;
  std::size_t offset = 0;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const std::size_t fan_in = std::size_t(sizes[l]);
    const std::size_t fan_out = std::size_t(sizes[l + 1]);
    std::vector<double> next(fan_out, 0.0);
    for (std::size_t o = 0; o < fan_out; ++o) {
      double z = w[offset + fan_in * fan_out + o];  // bias
      for (std::size_t i = 0; i < fan_in; ++i)
        z += w[offset + i * fan_out + o] * act[i];  // column-major weight
      next[o] = std::tanh(z);
    }
    offset += fan_in * fan_out + fan_out;
    act = next;
  }
  act.back() = 1.0;  // always-one representation feature

  std::vector<double> logits(std::size_t(spec.num_classes), 0.0);
  for (std::size_t c = 0; c < logits.size(); ++c)
    for (std::size_t h = 0; h < act.size(); ++h) logits[c] += head[c][h] * act[h];
  double max_logit = logits[0];
  for (double v : logits) max_logit = std::max(max_logit, v);
  double denom = 0.0;
  for (double& v : logits) {
    v = std::exp(v - max_logit);
    denom += v;
  }
  for (double& v : logits) v /= denom;
  return logits;
}

FlatParams<double> random_params(const ModelSpec& spec, Rng& rng, double scale = 0.5) {
  FlatParams<double> params;
  params.backbone.resize(spec.backbone_dim);
  for (Eigen::Index i = 0; i < spec.backbone_dim; ++i)
    params.backbone[i] = scale * rng.normal();
  params.head.resize(spec.num_classes, spec.repr_dim);
  for (Eigen::Index i = 0; i < params.head.size(); ++i)
    params.head.data()[i] = scale * rng.normal();
  return params;
}

Batch<double> random_batch(const ModelSpec& spec, Eigen::Index rows, Rng& rng) {
  Batch<double> batch;
  batch.features.resize(rows, spec.input_dim);
  for (Eigen::Index i = 0; i < batch.features.size(); ++i)
    batch.features.data()[i] = rng.normal();
  batch.labels.resize(rows);
  for (Eigen::Index i = 0; i < rows; ++i)
    batch.labels[i] = int(rng.index(std::size_t(spec.num_classes)));
  return batch;
}

}  // namespace

TEST_CASE("zero parameters give uniform probabilities") {
  const auto spec = make_model_spec(4, {5}, 6, 3);
  FlatParams<double> params;
  params.backbone = Eigen::VectorXd::Zero(spec.backbone_dim);
  params.head = Eigen::MatrixXd::Zero(3, 6);
  Eigen::MatrixXd features = Eigen::MatrixXd::Random(5, 4);
  const Eigen::MatrixXd probs = deelbo::forward(spec, params, features);
  CHECK(probs.rows() == 5);
  for (Eigen::Index i = 0; i < probs.size(); ++i)
    CHECK(probs.data()[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("rows are probability vectors") {
  const auto spec = make_model_spec(4, {7, 5}, 6, 4);
  Rng rng(1);
  for (int t = 0; t < 5; ++t) {
    const auto params = random_params(spec, rng, 1.5);
    const auto batch = random_batch(spec, 6, rng);
    const Eigen::MatrixXd probs = deelbo::forward(spec, params, batch.features);
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
      CHECK(probs.row(i).minCoeff() >= 0.0);
      CHECK(probs.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("forward matches the independent oracle") {
  const auto spec = make_model_spec(4, {5}, 6, 3);
  Rng rng(0);
  const auto params = random_params(spec, rng);
  Eigen::MatrixXd features(3, 4);
  features << 0.3, -1.2, 0.8, 0.1, -0.5, 0.9, 1.7, -0.2, 0.0, 0.4, -0.6, 2.1;

  const Eigen::MatrixXd probs = deelbo::forward(spec, params, features);

  const std::vector<double> w(params.backbone.data(),
                              params.backbone.data() + params.backbone.size());
  std::vector<std::vector<double>> head(3, std::vector<double>(6));
  for (int c = 0; c < 3; ++c)
    for (int h = 0; h < 6; ++h) head[std::size_t(c)][std::size_t(h)] = params.head(c, h);

  for (Eigen::Index i = 0; i < 3; ++i) {
    std::vector<double> x(4);
    for (int j = 0; j < 4; ++j) x[std::size_t(j)] = features(i, j);
    const auto expected = oracle_forward_row(spec, w, head, x);
    for (int c = 0; c < 3; ++c)
      CHECK(probs(i, c) == doctest::Approx(expected[std::size_t(c)]).epsilon(1e-12));
  }
}

TEST_CASE("representation keeps the always-one feature") {
  const auto spec = make_model_spec(3, {4}, 5, 2);
  Rng rng(5);
  const auto params = random_params(spec, rng);
  const auto batch = random_batch(spec, 4, rng);
  const Eigen::MatrixXd repr =
      deelbo::detail::backbone_forward<double>(spec, params.backbone, batch.features, nullptr);
  for (Eigen::Index i = 0; i < repr.rows(); ++i)
    CHECK(repr(i, spec.repr_dim - 1) == 1.0);
}

TEST_CASE("log-likelihood closed values") {
  {
    const auto spec = make_model_spec(2, {}, 2, 2);
    FlatParams<double> params;
    params.backbone = Eigen::VectorXd::Zero(spec.backbone_dim);
    params.head = Eigen::MatrixXd::Zero(2, 2);
    Batch<double> batch;
    batch.features = Eigen::MatrixXd::Random(1, 2);
    batch.labels = deelbo::IndexVector::Zero(1);
    CHECK(deelbo::log_likelihood(spec, params, batch) ==
          doctest::Approx(std::log(0.5)).epsilon(1e-12));
  }
  {
    const auto spec = make_model_spec(3, {}, 4, 10);
    FlatParams<double> params;
    params.backbone = Eigen::VectorXd::Zero(spec.backbone_dim);
    params.head = Eigen::MatrixXd::Zero(10, 4);
    Batch<double> batch;
    batch.features = Eigen::MatrixXd::Random(10, 3);
    batch.labels.resize(10);
    for (int i = 0; i < 10; ++i) batch.labels[i] = i;
    CHECK(deelbo::log_likelihood(spec, params, batch) ==
          doctest::Approx(10.0 * std::log(0.1)).epsilon(1e-12));
  }
}

TEST_CASE("log-likelihood equals oracle forward plus log-indexing") {
  const auto spec = make_model_spec(4, {5}, 6, 3);
  Rng rng(0);
  const auto params = random_params(spec, rng);
  const auto batch = random_batch(spec, 5, rng);
  const Eigen::MatrixXd probs = deelbo::forward(spec, params, batch.features);
  double expected = 0.0;
  for (Eigen::Index i = 0; i < 5; ++i) expected += std::log(probs(i, batch.labels[i]));
  CHECK(deelbo::log_likelihood(spec, params, batch) ==
        doctest::Approx(expected).epsilon(1e-10));
}

TEST_CASE("gradient agrees with central finite differences") {
  const auto spec = make_model_spec(4, {5}, 6, 3);
  Rng rng(123);
  const double step = 1e-5;
  for (int inst = 0; inst < 20; ++inst) {
    auto params = random_params(spec, rng);
    const auto batch = random_batch(spec, 6, rng);
    FlatParams<double> grad;
    deelbo::log_likelihood_and_grad(spec, params, batch, grad);

    for (Eigen::Index i = 0; i < spec.backbone_dim; ++i) {
      auto plus = params, minus = params;
      plus.backbone[i] += step;
      minus.backbone[i] -= step;
      const double fd = (deelbo::log_likelihood(spec, plus, batch) -
                         deelbo::log_likelihood(spec, minus, batch)) /
                        (2 * step);
      CHECK(std::abs(fd - grad.backbone[i]) <=
            1e-4 * std::max({1.0, std::abs(fd), std::abs(grad.backbone[i])}));
    }
    for (Eigen::Index i = 0; i < params.head.size(); ++i) {
      auto plus = params, minus = params;
      plus.head.data()[i] += step;
      minus.head.data()[i] -= step;
      const double fd = (deelbo::log_likelihood(spec, plus, batch) -
                         deelbo::log_likelihood(spec, minus, batch)) /
                        (2 * step);
      CHECK(std::abs(fd - grad.head.data()[i]) <=
            1e-4 * std::max({1.0, std::abs(fd), std::abs(grad.head.data()[i])}));
    }
  }
}

TEST_CASE("duplicated batch doubles the gradient") {
  const auto spec = make_model_spec(4, {5}, 6, 3);
  Rng rng(9);
  const auto params = random_params(spec, rng);
  const auto batch = random_batch(spec, 4, rng);
  Batch<double> doubled;
  doubled.features.resize(8, spec.input_dim);
  doubled.features << batch.features, batch.features;
  doubled.labels.resize(8);
  doubled.labels << batch.labels, batch.labels;

  FlatParams<double> g1, g2;
  deelbo::log_likelihood_and_grad(spec, params, batch, g1);
  deelbo::log_likelihood_and_grad(spec, params, doubled, g2);
  CHECK((g2.backbone - 2.0 * g1.backbone).norm() < 1e-12 * std::max(1.0, g1.backbone.norm()));
  CHECK((g2.head - 2.0 * g1.head).norm() < 1e-12 * std::max(1.0, g1.head.norm()));
}

TEST_CASE("gradient vanishes as the correct-class margin saturates") {
  const auto spec = make_model_spec(3, {4}, 5, 2);
  Rng rng(17);
  auto params = random_params(spec, rng, 0.2);
  Batch<double> batch = random_batch(spec, 6, rng);
  batch.labels.setZero();  // all label 0; drive its logit up via the ones slot

  double previous_norm = std::numeric_limits<double>::infinity();
  for (double margin : {5.0, 15.0, 30.0, 60.0}) {
    params.head.setZero();
    params.head(0, spec.repr_dim - 1) = margin;
    FlatParams<double> grad;
    deelbo::log_likelihood_and_grad(spec, params, batch, grad);
    const double norm = std::sqrt(grad.backbone.squaredNorm() + grad.head.squaredNorm());
    CHECK(norm < previous_norm);
    previous_norm = norm;
  }
  CHECK(previous_norm < 1e-12);
}

TEST_CASE("forward is deterministic") {
  const auto spec = make_model_spec(5, {8, 7}, 6, 4);
  Rng rng(31);
  const auto params = random_params(spec, rng);
  const auto batch = random_batch(spec, 9, rng);
  const Eigen::MatrixXd a = deelbo::forward(spec, params, batch.features);
  const Eigen::MatrixXd b = deelbo::forward(spec, params, batch.features);
  CHECK((a.array() == b.array()).all());
}

TEST_CASE("softmax survives logits of magnitude 1e4") {
  const auto spec = make_model_spec(2, {}, 2, 3);
  FlatParams<double> params;
  params.backbone = Eigen::VectorXd::Zero(spec.backbone_dim);
  params.head.resize(3, 2);
  params.head << 1e4, 1e4, -1e4, -1e4, 0.0, 5e3;
  Eigen::MatrixXd features = Eigen::MatrixXd::Random(4, 2);
  const Eigen::MatrixXd probs = deelbo::forward(spec, params, features);
  CHECK(probs.allFinite());
  for (Eigen::Index i = 0; i < probs.rows(); ++i)
    CHECK(probs.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));

  Batch<double> batch{features, deelbo::IndexVector::Zero(4)};
  CHECK(std::isfinite(deelbo::log_likelihood(spec, params, batch)));
}

TEST_CASE("shape and label errors") {
  const auto spec = make_model_spec(4, {5}, 6, 3);
  Rng rng(2);
  const auto params = random_params(spec, rng);
  auto batch = random_batch(spec, 3, rng);

  Eigen::MatrixXd wrong_features = Eigen::MatrixXd::Zero(3, 5);
  CHECK_THROWS_AS(deelbo::forward(spec, params, wrong_features), deelbo::ShapeError);

  auto bad_params = params;
  bad_params.backbone.conservativeResize(spec.backbone_dim - 1);
  CHECK_THROWS_AS(deelbo::forward(spec, bad_params, batch.features), deelbo::ShapeError);

  batch.labels[1] = 3;
  CHECK_THROWS_AS(deelbo::log_likelihood(spec, params, batch), deelbo::RangeError);

  CHECK_THROWS_AS(make_model_spec(4, {5}, 1, 3), deelbo::ConfigError);
  CHECK_THROWS_AS(make_model_spec(4, {5}, 6, 1), deelbo::ConfigError);
}

TEST_CASE("spec parameter counts") {
  const auto spec = make_model_spec(4, {5}, 6, 3);
  CHECK(spec.backbone_dim == 4 * 5 + 5 + 5 * 6 + 6);
  CHECK(spec.head_dim == 18);

  // Flatten round-trip: random backbone vector -> per-layer maps -> rebuilt
  // vector is bit-identical.
  Rng rng(4);
  Eigen::VectorXd w(spec.backbone_dim);
  for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = rng.normal();
  const auto sizes = spec.layer_sizes();
  Eigen::VectorXd rebuilt(spec.backbone_dim);
  Eigen::Index offset = 0;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const Eigen::Index fan_in = sizes[l], fan_out = sizes[l + 1];
    Eigen::Map<const Eigen::MatrixXd> weight(w.data() + offset, fan_out, fan_in);
    Eigen::Map<Eigen::MatrixXd>(rebuilt.data() + offset, fan_out, fan_in) = weight;
    offset += fan_in * fan_out;
    Eigen::Map<const Eigen::VectorXd> bias(w.data() + offset, fan_out);
    Eigen::Map<Eigen::VectorXd>(rebuilt.data() + offset, fan_out) = bias;
    offset += fan_out;
  }
  CHECK((rebuilt.array() == w.array()).all());
}
