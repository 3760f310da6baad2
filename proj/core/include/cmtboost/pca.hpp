#pragma once

#include <cstddef>
#include <vector>

namespace cmtboost {

struct PcaResult {
  std::vector<std::vector<double>> projections;  // [n][k]
  std::vector<std::vector<double>> components;   // [k][d], unit norm
  std::vector<double> explained_ratio;           // eigenvalue / total variance
};

/// Mean-centers the rows, then extracts the top-k eigenvectors of the
/// covariance by power iteration with deflation. Components are unit-norm and
/// mutually orthogonal; the sign convention makes each component's
/// largest-magnitude entry positive. Throws DegeneracyError for n < 2 or
/// zero-variance input.
PcaResult pca_project(const std::vector<std::vector<double>>& features, std::size_t k = 2);

}  // namespace cmtboost
