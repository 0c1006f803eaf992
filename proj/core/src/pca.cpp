#include "mome/pca.hpp"

#include <cmath>
#include <cstddef>

#include "mome/tensor.hpp"

namespace mome {

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

PcaResult pca_project(const std::vector<std::vector<double>>& rows, int dims) {
  if (dims < 1) throw ConfigError("pca_project: dims must be >= 1");
  if (rows.size() < static_cast<std::size_t>(dims) + 1) {
    throw ContractError("pca_project: need at least dims+1 samples");
  }
  const std::size_t n = rows.size();
  const std::size_t d = rows.front().size();

  PcaResult res;
  res.mean.assign(d, 0.0);
  for (const auto& r : rows) {
    if (r.size() != d) throw DimensionError("pca_project: ragged rows");
    for (std::size_t j = 0; j < d; ++j) res.mean[j] += r[j];
  }
  for (double& m : res.mean) m /= static_cast<double>(n);

  std::vector<std::vector<double>> centered(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      centered[i][j] = rows[i][j] - res.mean[j];

  // Covariance, divisor n-1.
  std::vector<std::vector<double>> cov(d, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a) {
      const double va = centered[i][a];
      if (va == 0.0) continue;
      for (std::size_t b = 0; b < d; ++b) cov[a][b] += va * centered[i][b];
    }
  for (auto& row : cov)
    for (double& v : row) v /= static_cast<double>(n - 1);

  constexpr double kTol = 1e-9;
  constexpr int kMaxIters = 1000;
  double total_scale = 0.0;
  for (std::size_t a = 0; a < d; ++a) total_scale += cov[a][a];

  for (int comp = 0; comp < dims; ++comp) {
    // Deterministic start vector, orthogonalized against found components.
    std::vector<double> v(d, 0.0);
    v[static_cast<std::size_t>(comp) % d] = 1.0;
    for (std::size_t j = 0; j < d; ++j) {
      v[j] += 1e-3 * std::cos(static_cast<double>(j + 1) * (comp + 1));
    }
    double lambda = 0.0;
    for (int it = 0; it < kMaxIters; ++it) {
      for (const auto& c : res.components) {
        const double p = dot(v, c);
        for (std::size_t j = 0; j < d; ++j) v[j] -= p * c[j];
      }
      std::vector<double> w(d, 0.0);
      for (std::size_t a = 0; a < d; ++a) {
        const double va = v[a];
        if (va == 0.0) continue;
        for (std::size_t b = 0; b < d; ++b) w[b] += cov[a][b] * va;
      }
      for (const auto& c : res.components) {
        const double p = dot(w, c);
        for (std::size_t j = 0; j < d; ++j) w[j] -= p * c[j];
      }
      const double norm = std::sqrt(dot(w, w));
      if (norm <= kTol * std::max(total_scale, 1.0)) {
        lambda = 0.0;
        break;
      }
      double diff = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        w[j] /= norm;
        diff += std::abs(w[j] - v[j]);
      }
      lambda = norm;
      v.swap(w);
      if (diff < kTol) break;
    }
    if (lambda <= kTol * std::max(total_scale, 1.0)) {
      res.rank_deficient = true;
      break;
    }
    res.components.push_back(v);
    res.eigenvalues.push_back(lambda);
  }
  if (static_cast<int>(res.components.size()) < dims) {
    res.rank_deficient = true;
  }

  res.projected.assign(n, std::vector<double>(res.components.size(), 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < res.components.size(); ++c)
      res.projected[i][c] = dot(centered[i], res.components[c]);
  return res;
}

}  // namespace mome
