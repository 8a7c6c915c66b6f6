#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "gapfill/embedding.hpp"

namespace gapfill {

/// Two-component PCA basis. Rows of `components` are orthonormal principal
/// axes ordered by decreasing explained variance.
struct PcaModel {
  std::vector<float> mean;
  std::array<std::vector<float>, 2> components;
  std::array<float, 2> explained_variance{};
  std::string fitted_on;

  std::size_t dim() const { return mean.size(); }
  friend bool operator==(const PcaModel&, const PcaModel&) = default;
};

struct ProjectedPoint {
  std::string id;
  float x = 0.0f;
  float y = 0.0f;

  friend bool operator==(const ProjectedPoint&, const ProjectedPoint&) = default;
};

enum class PcaMethod { automatic, exact, iterative };

struct PcaOptions {
  PcaMethod method = PcaMethod::automatic;
  std::size_t exact_max_dim = 1024;  // automatic: exact at or below, iterative above
  double tolerance = 1e-9;           // relative eigen-residual for the iterative path
  std::size_t max_iterations = 20000;
};

/// Fits on n row-major rows of width `dim`. Throws PreconditionError for
/// n < 3, dim < 2 or zero-variance data.
PcaModel pca_fit(std::span<const float> rows, std::size_t dim, const PcaOptions& opts = {},
                 std::string fitted_on = {});
PcaModel pca_fit(const EmbeddingMatrix& m, const PcaOptions& opts = {});

/// Fits a shared basis on the row union of several matrices.
PcaModel pca_fit_union(std::span<const EmbeddingMatrix* const> parts, const PcaOptions& opts = {});

std::array<float, 2> pca_project(const PcaModel& model, std::span<const float> row);
std::vector<ProjectedPoint> pca_transform(const PcaModel& model, const EmbeddingMatrix& m);

void save_pca_model(const PcaModel& model, const std::filesystem::path& path);
PcaModel load_pca_model(const std::filesystem::path& path);

void save_points(std::span<const ProjectedPoint> points, const std::filesystem::path& path);
std::vector<ProjectedPoint> load_points(const std::filesystem::path& path);

}  // namespace gapfill
