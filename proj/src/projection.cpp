#include "gapfill/projection.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <Eigen/Dense>
#include <json.hpp>

#include "gapfill/corpus_io.hpp"
#include "gapfill/error.hpp"
#include "gapfill/json_float.hpp"
#include "gapfill/log.hpp"
#include "gapfill/rng.hpp"

namespace gapfill {
namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using ordered_json = nlohmann::ordered_json;

struct Centered {
  std::span<const float> rows;
  std::size_t n;
  std::size_t dim;
  VectorXd mean;

  // out = C * v with C the (n-1)-denominator sample covariance, never formed.
  MatrixXd apply(const MatrixXd& v) const {
    const auto b = v.cols();
    MatrixXd out = MatrixXd::Zero(static_cast<Eigen::Index>(dim), b);
    VectorXd centered(dim);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < dim; ++c) centered[c] = rows[i * dim + c] - mean[c];
      const Eigen::RowVectorXd t = centered.transpose() * v;
      out.noalias() += centered * t;
    }
    return out / static_cast<double>(n - 1);
  }

  MatrixXd covariance() const {
    MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < dim; ++c) x(i, c) = rows[i * dim + c] - mean[c];
    }
    MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);
    return cov;
  }
};

struct TopTwo {
  std::array<VectorXd, 2> vectors;
  std::array<double, 2> values;
};

TopTwo exact_top_two(const Centered& data) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> solver(data.covariance());
  if (solver.info() != Eigen::Success) throw std::runtime_error("pca: eigendecomposition failed");
  const auto d = static_cast<Eigen::Index>(data.dim);
  // Eigenvalues come back ascending.
  return {{solver.eigenvectors().col(d - 1), solver.eigenvectors().col(d - 2)},
          {solver.eigenvalues()[d - 1], solver.eigenvalues()[d - 2]}};
}

// Block subspace iteration with Rayleigh-Ritz extraction. The block is wider
// than two to speed convergence when the second and third eigenvalues are close.
TopTwo iterative_top_two(const Centered& data, const PcaOptions& opts) {
  const auto d = static_cast<Eigen::Index>(data.dim);
  const Eigen::Index block = std::min<Eigen::Index>(d, 8);
  Rng rng(0x5eed5eedULL);
  MatrixXd v(d, block);
  for (Eigen::Index c = 0; c < block; ++c) {
    for (Eigen::Index r = 0; r < d; ++r) v(r, c) = rng.normal();
  }
  v = Eigen::HouseholderQR<MatrixXd>(v).householderQ() * MatrixXd::Identity(d, block);

  TopTwo best;
  for (std::size_t it = 0; it < opts.max_iterations; ++it) {
    MatrixXd w = data.apply(v);
    MatrixXd h = v.transpose() * w;
    h = 0.5 * (h + h.transpose());
    Eigen::SelfAdjointEigenSolver<MatrixXd> small(h);
    // Descending order.
    MatrixXd s = small.eigenvectors().rowwise().reverse();
    VectorXd theta = small.eigenvalues().reverse();
    v = v * s;
    w = w * s;
    double worst = 0.0;
    for (int k = 0; k < 2; ++k) {
      worst = std::max(worst, (w.col(k) - theta[k] * v.col(k)).norm());
    }
    best = {{v.col(0), v.col(1)}, {theta[0], theta[1]}};
    if (theta[0] <= 0.0 || worst <= opts.tolerance * theta[0]) return best;
    v = Eigen::HouseholderQR<MatrixXd>(w).householderQ() * MatrixXd::Identity(d, block);
  }
  logger()->warn("pca: subspace iteration hit {} iterations before reaching tolerance {}",
                 opts.max_iterations, opts.tolerance);
  return best;
}

std::vector<float> signed_axis(const VectorXd& v) {
  Eigen::Index arg = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (std::abs(v[i]) > std::abs(v[arg])) arg = i;
  }
  const double sign = v[arg] < 0.0 ? -1.0 : 1.0;
  const VectorXd unit = sign * v / v.norm();
  std::vector<float> out(static_cast<std::size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) out[static_cast<std::size_t>(i)] = static_cast<float>(unit[i]);
  return out;
}

}  // namespace

PcaModel pca_fit(std::span<const float> rows, std::size_t dim, const PcaOptions& opts,
                 std::string fitted_on) {
  if (dim < 2) throw PreconditionError("pca_fit: dimension must be >= 2");
  if (rows.size() % dim != 0) throw PreconditionError("pca_fit: row data not a multiple of dim");
  const std::size_t n = rows.size() / dim;
  if (n < 3) throw PreconditionError("pca_fit: need at least 3 rows, got " + std::to_string(n));

  Centered data{rows, n, dim, VectorXd::Zero(static_cast<Eigen::Index>(dim))};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < dim; ++c) data.mean[c] += rows[i * dim + c];
  }
  data.mean /= static_cast<double>(n);

  double total_variance = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < dim; ++c) {
      const double z = rows[i * dim + c] - data.mean[c];
      total_variance += z * z;
    }
  }
  if (!(total_variance > 0.0)) throw PreconditionError("pca_fit: data has zero variance");

  const bool exact = opts.method == PcaMethod::exact ||
                     (opts.method == PcaMethod::automatic && dim <= opts.exact_max_dim);
  const TopTwo top = exact ? exact_top_two(data) : iterative_top_two(data, opts);

  PcaModel model;
  model.mean.resize(dim);
  for (std::size_t c = 0; c < dim; ++c) model.mean[c] = static_cast<float>(data.mean[c]);
  for (int k = 0; k < 2; ++k) {
    model.components[k] = signed_axis(top.vectors[k]);
    model.explained_variance[k] = static_cast<float>(std::max(0.0, top.values[k]));
  }
  model.fitted_on = std::move(fitted_on);
  return model;
}

PcaModel pca_fit(const EmbeddingMatrix& m, const PcaOptions& opts) {
  return pca_fit(m.data, m.dim, opts, m.model_tag);
}

PcaModel pca_fit_union(std::span<const EmbeddingMatrix* const> parts, const PcaOptions& opts) {
  if (parts.empty()) throw PreconditionError("pca_fit_union: no inputs");
  const std::size_t dim = parts.front()->dim;
  std::vector<float> rows;
  std::string tag;
  for (const auto* p : parts) {
    if (p->dim != dim) throw PreconditionError("pca_fit_union: dimension mismatch between inputs");
    rows.insert(rows.end(), p->data.begin(), p->data.end());
    if (!tag.empty()) tag += "+";
    tag += p->model_tag + "[" + std::to_string(p->rows()) + "]";
  }
  return pca_fit(rows, dim, opts, tag);
}

std::array<float, 2> pca_project(const PcaModel& model, std::span<const float> row) {
  if (row.size() != model.dim()) {
    throw PreconditionError("pca_transform: row dimension " + std::to_string(row.size()) +
                            " does not match model dimension " + std::to_string(model.dim()));
  }
  std::array<float, 2> out{};
  for (int k = 0; k < 2; ++k) {
    double acc = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) {
      acc += static_cast<double>(model.components[k][c]) *
             (static_cast<double>(row[c]) - static_cast<double>(model.mean[c]));
    }
    out[k] = static_cast<float>(acc);
  }
  return out;
}

std::vector<ProjectedPoint> pca_transform(const PcaModel& model, const EmbeddingMatrix& m) {
  if (m.dim != model.dim()) {
    throw PreconditionError("pca_transform: matrix dimension " + std::to_string(m.dim) +
                            " does not match model dimension " + std::to_string(model.dim()));
  }
  std::vector<ProjectedPoint> out;
  out.reserve(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto p = pca_project(model, m.row(i));
    out.push_back({m.ids[i], p[0], p[1]});
  }
  return out;
}

namespace {

ordered_json float_array(std::span<const float> v) {
  ordered_json a = ordered_json::array();
  for (float x : v) a.push_back(float_to_json<ordered_json>(x));
  return a;
}

std::vector<float> read_floats(const nlohmann::json& j) {
  std::vector<float> out;
  out.reserve(j.size());
  for (const auto& x : j) out.push_back(json_to_float(x));
  return out;
}

}  // namespace

void save_pca_model(const PcaModel& model, const std::filesystem::path& path) {
  ordered_json j;
  j["mean"] = float_array(model.mean);
  j["components"] = ordered_json::array({float_array(model.components[0]),
                                         float_array(model.components[1])});
  j["explained_variance"] = float_array(model.explained_variance);
  j["fitted_on"] = model.fitted_on;
  write_file_atomic(path, j.dump() + "\n");
}

PcaModel load_pca_model(const std::filesystem::path& path) {
  auto j = nlohmann::json::parse(read_file(path), nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw FormatError("pca model is not a JSON object");
  try {
    PcaModel m;
    m.mean = read_floats(j.at("mean"));
    const auto& comps = j.at("components");
    if (comps.size() != 2) throw FormatError("pca model must have two components");
    for (int k = 0; k < 2; ++k) {
      m.components[k] = read_floats(comps.at(k));
      if (m.components[k].size() != m.mean.size()) throw FormatError("pca component width mismatch");
    }
    auto ev = read_floats(j.at("explained_variance"));
    if (ev.size() != 2) throw FormatError("pca model must have two explained variances");
    m.explained_variance = {ev[0], ev[1]};
    m.fitted_on = j.value("fitted_on", "");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("pca model: ") + e.what());
  }
}

void save_points(std::span<const ProjectedPoint> points, const std::filesystem::path& path) {
  std::string buf;
  for (const auto& p : points) {
    ordered_json j;
    j["id"] = p.id;
    j["x"] = float_to_json<ordered_json>(p.x);
    j["y"] = float_to_json<ordered_json>(p.y);
    buf += j.dump();
    buf += '\n';
  }
  write_file_atomic(path, buf);
}

std::vector<ProjectedPoint> load_points(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<ProjectedPoint> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("id") || !j.contains("x") || !j.contains("y")) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": bad point record");
    }
    out.push_back({j["id"].get<std::string>(), json_to_float(j["x"]), json_to_float(j["y"])});
  }
  return out;
}

}  // namespace gapfill
