#pragma once

#include <vector>

namespace mome {

struct PcaResult {
  // components[d] is a unit vector of length dim; eigenvalues descending.
  std::vector<std::vector<double>> components;
  std::vector<double> eigenvalues;
  // projected[i] has one coordinate per emitted component
  std::vector<std::vector<double>> projected;
  std::vector<double> mean;
  bool rank_deficient = false;  // fewer components than requested
};

// Centers the rows and projects onto the top principal components, computed
// by orthogonal power iteration with deflation (tolerance 1e-9, max 1000
// iterations per component). Rows are samples.
PcaResult pca_project(const std::vector<std::vector<double>>& rows,
                      int dims = 2);

}  // namespace mome
