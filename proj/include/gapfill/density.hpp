#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "gapfill/projection.hpp"

namespace gapfill {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point2&, const Point2&) = default;
};

std::vector<Point2> to_points(std::span<const ProjectedPoint> projected);

/// Per-axis bandwidths and the kernel width applied to the bandwidth-scaled
/// offset.
struct KdeParams {
  float h_x = 1.0f;
  float h_y = 1.0f;
  float sigma = 1.0f;

  void validate() const;  // all strictly positive and finite
  friend bool operator==(const KdeParams&, const KdeParams&) = default;
};

/// Divisor used by the leave-one-out estimate: the full point count m (as
/// printed in the method) or the number of summed terms m - 1.
enum class SelfExcludedDivisor { m, m_minus_1 };

/// exp(-|a - b|^2 / (2 sigma^2)). Unnormalized; equals 1 at zero distance.
double kernel(Point2 a, Point2 b, double sigma);

/// (1 / (n h_x h_y)) * sum_j K((q - r_j) scaled by (1/h_x, 1/h_y)).
double kde_at(Point2 query, std::span<const Point2> reference, const KdeParams& params);

/// Density of points[i] from all other points of the same set.
double kde_self_excluded(std::size_t i, std::span<const Point2> points, const KdeParams& params,
                         SelfExcludedDivisor divisor = SelfExcludedDivisor::m);

/// Scott's rule per axis (h = n^(-1/6) * sample std), sigma = 1. A zero-variance
/// axis falls back to 1e-3 * (range of the other axis + 1e-9).
KdeParams default_bandwidth(std::span<const Point2> points);

enum class KdeMode { exact, truncated };

/// Truncation threshold: reference points whose kernel value is below this are skipped.
inline constexpr double kTruncationEpsilon = 1e-9;

/// Evaluates kde_at for every query. Truncated mode drops reference points
/// beyond sigma * sqrt(2 ln(1/eps)) in bandwidth-scaled distance, found
/// through a uniform grid over the reference set. `workers` = 0 picks the
/// hardware concurrency; output order is query order either way.
std::vector<double> kde_batch(std::span<const Point2> queries, std::span<const Point2> reference,
                              const KdeParams& params, KdeMode mode = KdeMode::exact,
                              std::size_t workers = 0);

/// Leave-one-out densities for every point, batched like kde_batch.
std::vector<double> kde_self_excluded_batch(std::span<const Point2> points, const KdeParams& params,
                                            SelfExcludedDivisor divisor = SelfExcludedDivisor::m,
                                            KdeMode mode = KdeMode::exact, std::size_t workers = 0);

struct GridSpec {
  double x_min = 0.0;
  double x_max = 1.0;
  double y_min = 0.0;
  double y_max = 1.0;
  std::size_t nx = 2;
  std::size_t ny = 2;

  Point2 node(std::size_t ix, std::size_t iy) const;
  void validate() const;
  friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

/// Bounding box of `points` padded by `padding_fraction` of its extent on each
/// side. A zero-extent axis becomes a unit interval centered on the points.
GridSpec grid_for(std::span<const Point2> points, std::size_t nx, std::size_t ny,
                  double padding_fraction);

/// Densities on grid nodes; values are stored row-major with y as the row
/// index: values[iy * nx + ix].
struct DensityField {
  KdeParams params;
  GridSpec grid;
  std::vector<float> values;
  std::string source_tag;

  float at(std::size_t ix, std::size_t iy) const { return values[iy * grid.nx + ix]; }
  float max_value() const;
  friend bool operator==(const DensityField&, const DensityField&) = default;
};

DensityField kde_grid(std::span<const Point2> points, const KdeParams& params, const GridSpec& grid,
                      std::string source_tag = {});
DensityField kde_grid(std::span<const Point2> points, const KdeParams& params, std::size_t nx,
                      std::size_t ny, double padding_fraction, std::string source_tag = {});

/// Writes `<dir>/<name>.json` (header) and `<dir>/<name>.field` (f32-LE values).
void save_density_field(const DensityField& field, const std::filesystem::path& dir,
                        const std::string& name);
DensityField load_density_field(const std::filesystem::path& header_path);

}  // namespace gapfill
