#include "gapfill/density.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <functional>
#include <limits>
#include <thread>

#include <json.hpp>

#include "gapfill/corpus_io.hpp"
#include "gapfill/error.hpp"
#include "gapfill/json_float.hpp"
#include "gapfill/log.hpp"

namespace gapfill {
namespace {

struct Scaling {
  double inv_hx;
  double inv_hy;
  double inv_two_sigma2;
  double norm_hxhy;  // 1 / (h_x h_y)

  explicit Scaling(const KdeParams& p)
      : inv_hx(1.0 / p.h_x),
        inv_hy(1.0 / p.h_y),
        inv_two_sigma2(1.0 / (2.0 * static_cast<double>(p.sigma) * p.sigma)),
        norm_hxhy(1.0 / (static_cast<double>(p.h_x) * p.h_y)) {}

  double term(Point2 q, Point2 r) const {
    const double dx = (q.x - r.x) * inv_hx;
    const double dy = (q.y - r.y) * inv_hy;
    return std::exp(-(dx * dx + dy * dy) * inv_two_sigma2);
  }
};

// Reference points bucketed on a uniform grid in bandwidth-scaled
// coordinates. Cells are at least r_cut wide, so every point within r_cut of a
// query lies in the query's cell or one of its eight neighbours.
class ScaledGridIndex {
 public:
  ScaledGridIndex(std::span<const Point2> ref, const Scaling& s, double r_cut) : ref_(ref), s_(s) {
    double min_x = std::numeric_limits<double>::infinity(), min_y = min_x;
    double max_x = -min_x, max_y = -min_x;
    for (const auto& p : ref) {
      min_x = std::min(min_x, p.x * s.inv_hx);
      max_x = std::max(max_x, p.x * s.inv_hx);
      min_y = std::min(min_y, p.y * s.inv_hy);
      max_y = std::max(max_y, p.y * s.inv_hy);
    }
    constexpr double kMaxCellsPerAxis = 2048.0;
    cell_ = std::max({r_cut, (max_x - min_x) / kMaxCellsPerAxis, (max_y - min_y) / kMaxCellsPerAxis});
    origin_x_ = min_x;
    origin_y_ = min_y;
    nx_ = static_cast<std::ptrdiff_t>((max_x - min_x) / cell_) + 1;
    ny_ = static_cast<std::ptrdiff_t>((max_y - min_y) / cell_) + 1;

    // Counting sort into CSR layout; within a cell, original index order.
    start_.assign(static_cast<std::size_t>(nx_ * ny_) + 1, 0);
    std::vector<std::size_t> cell_of(ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) {
      cell_of[i] = static_cast<std::size_t>(cell_y(ref[i].y * s.inv_hy) * nx_ +
                                            cell_x(ref[i].x * s.inv_hx));
      ++start_[cell_of[i] + 1];
    }
    for (std::size_t c = 1; c < start_.size(); ++c) start_[c] += start_[c - 1];
    order_.resize(ref.size());
    std::vector<std::size_t> fill(start_.begin(), start_.end() - 1);
    for (std::size_t i = 0; i < ref.size(); ++i) order_[fill[cell_of[i]]++] = i;
  }

  // Sum of kernel terms within r_cut of q, optionally skipping one index.
  double sum_near(Point2 q, double r_cut2, std::size_t skip) const {
    const double sx = q.x * s_.inv_hx;
    const double sy = q.y * s_.inv_hy;
    const auto cx = static_cast<std::ptrdiff_t>(std::floor((sx - origin_x_) / cell_));
    const auto cy = static_cast<std::ptrdiff_t>(std::floor((sy - origin_y_) / cell_));
    double acc = 0.0;
    for (auto y = std::max<std::ptrdiff_t>(cy - 1, 0); y <= std::min(cy + 1, ny_ - 1); ++y) {
      for (auto x = std::max<std::ptrdiff_t>(cx - 1, 0); x <= std::min(cx + 1, nx_ - 1); ++x) {
        const auto c = static_cast<std::size_t>(y * nx_ + x);
        for (std::size_t k = start_[c]; k < start_[c + 1]; ++k) {
          const std::size_t j = order_[k];
          if (j == skip) continue;
          const double dx = sx - ref_[j].x * s_.inv_hx;
          const double dy = sy - ref_[j].y * s_.inv_hy;
          const double d2 = dx * dx + dy * dy;
          if (d2 > r_cut2) continue;
          acc += std::exp(-d2 * s_.inv_two_sigma2);
        }
      }
    }
    return acc;
  }

 private:
  std::ptrdiff_t cell_x(double sx) const {
    return std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>((sx - origin_x_) / cell_), 0, nx_ - 1);
  }
  std::ptrdiff_t cell_y(double sy) const {
    return std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>((sy - origin_y_) / cell_), 0, ny_ - 1);
  }

  std::span<const Point2> ref_;
  Scaling s_;
  double cell_ = 1.0;
  double origin_x_ = 0.0;
  double origin_y_ = 0.0;
  std::ptrdiff_t nx_ = 1;
  std::ptrdiff_t ny_ = 1;
  std::vector<std::size_t> start_;
  std::vector<std::size_t> order_;
};

double truncation_radius(double sigma) {
  return sigma * std::sqrt(2.0 * std::log(1.0 / kTruncationEpsilon));
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t, std::size_t)>& body) {
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, std::max<std::size_t>(1, n / 64));
  if (workers <= 1) {
    body(0, n);
    return;
  }
  std::vector<std::jthread> pool;
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t lo = w * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back(body, lo, hi);
  }
}

double self_divisor(std::size_t m, SelfExcludedDivisor divisor) {
  return static_cast<double>(divisor == SelfExcludedDivisor::m ? m : m - 1);
}

}  // namespace

std::vector<Point2> to_points(std::span<const ProjectedPoint> projected) {
  std::vector<Point2> out;
  out.reserve(projected.size());
  for (const auto& p : projected) out.push_back({p.x, p.y});
  return out;
}

void KdeParams::validate() const {
  for (float v : {h_x, h_y, sigma}) {
    if (!(std::isfinite(v) && v > 0.0f)) {
      throw PreconditionError("kde params must be strictly positive and finite");
    }
  }
}

double kernel(Point2 a, Point2 b, double sigma) {
  if (!(sigma > 0.0)) throw PreconditionError("kernel: sigma must be positive");
  const double dx = a.x - b.x;
  const double dy = a.y - b.y;
  return std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
}

double kde_at(Point2 query, std::span<const Point2> reference, const KdeParams& params) {
  params.validate();
  if (reference.empty()) throw PreconditionError("kde_at: reference set is empty");
  const Scaling s(params);
  double acc = 0.0;
  for (const auto& r : reference) acc += s.term(query, r);
  return acc * s.norm_hxhy / static_cast<double>(reference.size());
}

double kde_self_excluded(std::size_t i, std::span<const Point2> points, const KdeParams& params,
                         SelfExcludedDivisor divisor) {
  params.validate();
  if (points.size() < 2) throw PreconditionError("kde_self_excluded: need at least 2 points");
  if (i >= points.size()) throw PreconditionError("kde_self_excluded: index out of range");
  const Scaling s(params);
  double acc = 0.0;
  for (std::size_t k = 0; k < points.size(); ++k) {
    if (k != i) acc += s.term(points[i], points[k]);
  }
  return acc * s.norm_hxhy / self_divisor(points.size(), divisor);
}

KdeParams default_bandwidth(std::span<const Point2> points) {
  if (points.size() < 2) throw PreconditionError("default_bandwidth: need at least 2 points");
  const double n = static_cast<double>(points.size());
  double mx = 0.0, my = 0.0;
  double lo_x = points[0].x, hi_x = lo_x, lo_y = points[0].y, hi_y = lo_y;
  for (const auto& p : points) {
    mx += p.x;
    my += p.y;
    lo_x = std::min(lo_x, p.x);
    hi_x = std::max(hi_x, p.x);
    lo_y = std::min(lo_y, p.y);
    hi_y = std::max(hi_y, p.y);
  }
  mx /= n;
  my /= n;
  double vx = 0.0, vy = 0.0;
  for (const auto& p : points) {
    vx += (p.x - mx) * (p.x - mx);
    vy += (p.y - my) * (p.y - my);
  }
  const double factor = std::pow(n, -1.0 / 6.0);
  double hx = factor * std::sqrt(vx / (n - 1.0));
  double hy = factor * std::sqrt(vy / (n - 1.0));
  if (!(static_cast<float>(hx) > 0.0f)) {
    hx = 1e-3 * ((hi_y - lo_y) + 1e-9);
    logger()->warn("default_bandwidth: x axis has zero variance, using h_x = {}", hx);
  }
  if (!(static_cast<float>(hy) > 0.0f)) {
    hy = 1e-3 * ((hi_x - lo_x) + 1e-9);
    logger()->warn("default_bandwidth: y axis has zero variance, using h_y = {}", hy);
  }
  KdeParams p{static_cast<float>(hx), static_cast<float>(hy), 1.0f};
  p.validate();
  return p;
}

std::vector<double> kde_batch(std::span<const Point2> queries, std::span<const Point2> reference,
                              const KdeParams& params, KdeMode mode, std::size_t workers) {
  params.validate();
  if (reference.empty()) throw PreconditionError("kde_batch: reference set is empty");
  std::vector<double> out(queries.size());
  if (queries.empty()) return out;
  const Scaling s(params);
  const double norm = s.norm_hxhy / static_cast<double>(reference.size());

  if (mode == KdeMode::exact) {
    parallel_for(queries.size(), workers, [&](std::size_t lo, std::size_t hi) {
      for (std::size_t q = lo; q < hi; ++q) {
        double acc = 0.0;
        for (const auto& r : reference) acc += s.term(queries[q], r);
        out[q] = acc * norm;
      }
    });
    return out;
  }

  const double r_cut = truncation_radius(params.sigma);
  const ScaledGridIndex index(reference, s, r_cut);
  parallel_for(queries.size(), workers, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t q = lo; q < hi; ++q) {
      out[q] = index.sum_near(queries[q], r_cut * r_cut, reference.size()) * norm;
    }
  });
  return out;
}

std::vector<double> kde_self_excluded_batch(std::span<const Point2> points, const KdeParams& params,
                                            SelfExcludedDivisor divisor, KdeMode mode,
                                            std::size_t workers) {
  params.validate();
  if (points.size() < 2) throw PreconditionError("kde_self_excluded: need at least 2 points");
  const Scaling s(params);
  const double norm = s.norm_hxhy / self_divisor(points.size(), divisor);
  std::vector<double> out(points.size());

  if (mode == KdeMode::exact) {
    parallel_for(points.size(), workers, [&](std::size_t lo, std::size_t hi) {
      for (std::size_t i = lo; i < hi; ++i) {
        double acc = 0.0;
        for (std::size_t k = 0; k < points.size(); ++k) {
          if (k != i) acc += s.term(points[i], points[k]);
        }
        out[i] = acc * norm;
      }
    });
    return out;
  }

  const double r_cut = truncation_radius(params.sigma);
  const ScaledGridIndex index(points, s, r_cut);
  parallel_for(points.size(), workers, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) out[i] = index.sum_near(points[i], r_cut * r_cut, i) * norm;
  });
  return out;
}

Point2 GridSpec::node(std::size_t ix, std::size_t iy) const {
  return {x_min + static_cast<double>(ix) * (x_max - x_min) / static_cast<double>(nx - 1),
          y_min + static_cast<double>(iy) * (y_max - y_min) / static_cast<double>(ny - 1)};
}

void GridSpec::validate() const {
  if (nx < 2 || ny < 2) throw PreconditionError("density grid needs nx, ny >= 2");
  if (!(x_max > x_min) || !(y_max > y_min) || !std::isfinite(x_max - x_min) ||
      !std::isfinite(y_max - y_min)) {
    throw PreconditionError("density grid extent is empty or not finite");
  }
}

GridSpec grid_for(std::span<const Point2> points, std::size_t nx, std::size_t ny,
                  double padding_fraction) {
  if (points.empty()) throw PreconditionError("grid_for: no points");
  if (nx < 2 || ny < 2) throw PreconditionError("density grid needs nx, ny >= 2");
  double lo_x = points[0].x, hi_x = lo_x, lo_y = points[0].y, hi_y = lo_y;
  for (const auto& p : points) {
    lo_x = std::min(lo_x, p.x);
    hi_x = std::max(hi_x, p.x);
    lo_y = std::min(lo_y, p.y);
    hi_y = std::max(hi_y, p.y);
  }
  auto expand = [padding_fraction](double lo, double hi) -> std::pair<double, double> {
    if (hi == lo) return {lo - 0.5, hi + 0.5};
    const double pad = padding_fraction * (hi - lo);
    return {lo - pad, hi + pad};
  };
  GridSpec g;
  std::tie(g.x_min, g.x_max) = expand(lo_x, hi_x);
  std::tie(g.y_min, g.y_max) = expand(lo_y, hi_y);
  g.nx = nx;
  g.ny = ny;
  return g;
}

float DensityField::max_value() const {
  float m = 0.0f;
  for (float v : values) m = std::max(m, v);
  return m;
}

DensityField kde_grid(std::span<const Point2> points, const KdeParams& params, const GridSpec& grid,
                      std::string source_tag) {
  if (points.empty()) throw PreconditionError("kde_grid: no points");
  grid.validate();
  std::vector<Point2> nodes;
  nodes.reserve(grid.nx * grid.ny);
  for (std::size_t iy = 0; iy < grid.ny; ++iy) {
    for (std::size_t ix = 0; ix < grid.nx; ++ix) nodes.push_back(grid.node(ix, iy));
  }
  const auto dens = kde_batch(nodes, points, params, KdeMode::exact);
  DensityField f{params, grid, {}, std::move(source_tag)};
  f.values.reserve(dens.size());
  for (double d : dens) f.values.push_back(static_cast<float>(d));
  return f;
}

DensityField kde_grid(std::span<const Point2> points, const KdeParams& params, std::size_t nx,
                      std::size_t ny, double padding_fraction, std::string source_tag) {
  return kde_grid(points, params, grid_for(points, nx, ny, padding_fraction), std::move(source_tag));
}

void save_density_field(const DensityField& field, const std::filesystem::path& dir,
                        const std::string& name) {
  nlohmann::ordered_json j;
  j["params"] = {{"h_x", float_to_json<nlohmann::ordered_json>(field.params.h_x)},
                 {"h_y", float_to_json<nlohmann::ordered_json>(field.params.h_y)},
                 {"sigma", float_to_json<nlohmann::ordered_json>(field.params.sigma)}};
  j["grid"] = {{"x_min", field.grid.x_min}, {"x_max", field.grid.x_max},
               {"y_min", field.grid.y_min}, {"y_max", field.grid.y_max},
               {"nx", field.grid.nx},       {"ny", field.grid.ny}};
  j["source_tag"] = field.source_tag;
  j["layout"] = "row_major_y";
  j["payload"] = name + ".field";

  std::string payload;
  payload.reserve(field.values.size() * 4);
  for (float v : field.values) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    for (int s = 0; s < 32; s += 8) payload.push_back(static_cast<char>((bits >> s) & 0xff));
  }
  write_file_atomic(dir / (name + ".field"), payload);
  write_file_atomic(dir / (name + ".json"), j.dump(2) + "\n");
}

DensityField load_density_field(const std::filesystem::path& header_path) {
  auto j = nlohmann::json::parse(read_file(header_path), nullptr, false);
  if (j.is_discarded()) throw FormatError("density header is not JSON: " + header_path.string());
  DensityField f;
  try {
    const auto& p = j.at("params");
    f.params = {json_to_float(p.at("h_x")), json_to_float(p.at("h_y")), json_to_float(p.at("sigma"))};
    const auto& g = j.at("grid");
    f.grid = {g.at("x_min").get<double>(), g.at("x_max").get<double>(), g.at("y_min").get<double>(),
              g.at("y_max").get<double>(), g.at("nx").get<std::size_t>(), g.at("ny").get<std::size_t>()};
    f.source_tag = j.value("source_tag", "");
    const auto payload = read_file(header_path.parent_path() / j.at("payload").get<std::string>());
    if (payload.size() != f.grid.nx * f.grid.ny * 4) throw FormatError("density payload size mismatch");
    f.values.resize(f.grid.nx * f.grid.ny);
    for (std::size_t i = 0; i < f.values.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 3; b >= 0; --b) bits = (bits << 8) | static_cast<unsigned char>(payload[i * 4 + b]);
      f.values[i] = std::bit_cast<float>(bits);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("density header: ") + e.what());
  }
  return f;
}

}  // namespace gapfill
