#pragma once

#include <Eigen/Core>

namespace deelbo {

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using IndexVector = Eigen::VectorXi;

}  // namespace deelbo
