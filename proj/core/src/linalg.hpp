#pragma once

// Internal: Eigen views over Tensor buffers. Not installed.

#include <Eigen/Core>

#include "hardaware/tensor.hpp"

namespace hardaware::detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixView = Eigen::Map<RowMatrix>;
using ConstMatrixView = Eigen::Map<const RowMatrix>;

inline MatrixView view(double* data, std::size_t rows, std::size_t cols) {
  return MatrixView(data, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline ConstMatrixView view(const double* data, std::size_t rows, std::size_t cols) {
  return ConstMatrixView(data, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

}  // namespace hardaware::detail
