#include "cmtboost/pca.hpp"

#include <cmath>

#include "cmtboost/errors.hpp"
#include "cmtboost/rng.hpp"

namespace cmtboost {

PcaResult pca_project(const std::vector<std::vector<double>>& features, std::size_t k) {
  const std::size_t n = features.size();
  if (n < 2) throw DegeneracyError("pca_project: need at least 2 rows");
  const std::size_t d = features[0].size();
  if (d < 1) throw DegeneracyError("pca_project: empty feature rows");
  for (const auto& row : features) {
    if (row.size() != d) throw DegeneracyError("pca_project: ragged feature rows");
    for (double v : row) {
      if (!std::isfinite(v)) throw DegeneracyError("pca_project: non-finite feature value");
    }
  }
  if (k > d) k = d;

  std::vector<double> mean(d, 0.0);
  for (const auto& row : features) {
    for (std::size_t j = 0; j < d; ++j) mean[j] += row[j];
  }
  for (auto& m : mean) m /= static_cast<double>(n);

  std::vector<std::vector<double>> centered(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) centered[i][j] = features[i][j] - mean[j];
  }

  // Covariance, d x d.
  std::vector<double> cov(d * d, 0.0);
  const double denom = static_cast<double>(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < d; ++a) {
      const double va = centered[i][a];
      if (va == 0.0) continue;
      for (std::size_t bcol = a; bcol < d; ++bcol) cov[a * d + bcol] += va * centered[i][bcol];
    }
  }
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t bcol = a; bcol < d; ++bcol) {
      cov[a * d + bcol] /= denom;
      cov[bcol * d + a] = cov[a * d + bcol];
    }
  }

  double total_var = 0.0;
  for (std::size_t a = 0; a < d; ++a) total_var += cov[a * d + a];
  if (total_var <= 0.0) throw DegeneracyError("pca_project: zero-variance input");

  PcaResult result;
  auto rng = make_rng(0x9CA0F17);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  std::vector<double> work(d);
  for (std::size_t comp = 0; comp < k; ++comp) {
    std::vector<double> v(d);
    for (auto& x : v) x = uni(rng);
    double lambda = 0.0;
    for (int iter = 0; iter < 10000; ++iter) {
      for (std::size_t a = 0; a < d; ++a) {
        double acc = 0.0;
        const double* row = cov.data() + a * d;
        for (std::size_t bcol = 0; bcol < d; ++bcol) acc += row[bcol] * v[bcol];
        work[a] = acc;
      }
      double norm = 0.0;
      for (double x : work) norm += x * x;
      norm = std::sqrt(norm);
      if (norm == 0.0) break;  // component lies in the null space
      double new_lambda = 0.0;
      for (std::size_t a = 0; a < d; ++a) {
        const double nv = work[a] / norm;
        new_lambda += nv * work[a];
        v[a] = nv;
      }
      if (std::abs(new_lambda - lambda) <= 1e-14 * std::max(1.0, std::abs(new_lambda)) &&
          iter > 2) {
        lambda = new_lambda;
        break;
      }
      lambda = new_lambda;
    }
    // Sign convention: largest-magnitude entry positive.
    std::size_t arg = 0;
    for (std::size_t a = 1; a < d; ++a) {
      if (std::abs(v[a]) > std::abs(v[arg])) arg = a;
    }
    if (v[arg] < 0.0) {
      for (auto& x : v) x = -x;
    }
    // Deflate.
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t bcol = 0; bcol < d; ++bcol) cov[a * d + bcol] -= lambda * v[a] * v[bcol];
    }
    result.components.push_back(v);
    result.explained_ratio.push_back(std::max(0.0, lambda) / total_var);
  }

  result.projections.assign(n, std::vector<double>(k, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t comp = 0; comp < k; ++comp) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += centered[i][j] * result.components[comp][j];
      result.projections[i][comp] = acc;
    }
  }
  return result;
}

}  // namespace cmtboost
