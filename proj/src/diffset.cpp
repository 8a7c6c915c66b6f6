#include "gapfill/diffset.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <unordered_map>

#include <json.hpp>

#include "gapfill/corpus_io.hpp"
#include "gapfill/error.hpp"
#include "gapfill/json_float.hpp"

namespace gapfill {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::vector<Point2> union_points(std::span<const ProjectedPoint> a,
                                 std::span<const ProjectedPoint> b) {
  auto out = to_points(a);
  auto more = to_points(b);
  out.insert(out.end(), more.begin(), more.end());
  return out;
}

}  // namespace

std::string_view to_string(Criterion c) {
  return c == Criterion::threshold ? "threshold" : "ratio";
}

std::optional<Criterion> parse_criterion(std::string_view s) {
  if (s == "threshold") return Criterion::threshold;
  if (s == "ratio") return Criterion::ratio;
  return std::nullopt;
}

void DiffsetConfig::validate() const {
  if (!(std::isfinite(tau) && tau > 0.0f)) throw ConfigError("diffset tau must be positive");
  if (criterion == Criterion::threshold && normalize_threshold_densities && tau > 1.0f) {
    throw ConfigError("normalized threshold tau must lie in (0, 1]");
  }
  if (kde) {
    try {
      kde->validate();
    } catch (const PreconditionError& e) {
      throw ConfigError(e.what());
    }
  }
}

KdeParams resolve_kde_params(std::span<const ProjectedPoint> pre,
                             std::span<const ProjectedPoint> sft, const DiffsetConfig& cfg) {
  if (cfg.kde) return *cfg.kde;
  const auto all = union_points(pre, sft);
  return default_bandwidth(all);
}

std::vector<DiffVerdict> diff_by_threshold(std::span<const ProjectedPoint> pre,
                                           std::span<const ProjectedPoint> sft,
                                           const DiffsetConfig& cfg) {
  cfg.validate();
  if (sft.empty()) throw PreconditionError("diff_by_threshold: reference distribution empty");
  if (pre.empty()) throw PreconditionError("diff_by_threshold: no corpus points");
  const KdeParams params = resolve_kde_params(pre, sft, cfg);
  const auto pre_pts = to_points(pre);
  const auto sft_pts = to_points(sft);
  const auto f_sft = kde_batch(pre_pts, sft_pts, params, cfg.kde_mode);

  double scale = 1.0;
  if (cfg.normalize_threshold_densities) {
    double max_f = 0.0;
    for (double f : f_sft) max_f = std::max(max_f, f);
    scale = max_f > 0.0 ? 1.0 / max_f : 0.0;
  }

  std::vector<DiffVerdict> out;
  out.reserve(pre.size());
  for (std::size_t i = 0; i < pre.size(); ++i) {
    const double score = f_sft[i] * scale;
    DiffVerdict v{pre[i].id, static_cast<float>(f_sft[i]), std::nullopt,
                  static_cast<float>(score), false};
    v.selected = v.score < cfg.tau;
    out.push_back(std::move(v));
  }
  return out;
}

std::vector<DiffVerdict> diff_by_ratio(std::span<const ProjectedPoint> pre,
                                       std::span<const ProjectedPoint> sft,
                                       const DiffsetConfig& cfg) {
  cfg.validate();
  if (pre.size() < 2) throw PreconditionError("diff_by_ratio: need at least 2 corpus points");
  if (sft.empty()) throw PreconditionError("diff_by_ratio: reference distribution empty");
  const KdeParams params = resolve_kde_params(pre, sft, cfg);
  const auto pre_pts = to_points(pre);
  const auto sft_pts = to_points(sft);
  const auto f_sft = kde_batch(pre_pts, sft_pts, params, cfg.kde_mode);
  const auto f_pre = kde_self_excluded_batch(pre_pts, params, cfg.self_excluded_divisor, cfg.kde_mode);

  std::vector<DiffVerdict> out;
  out.reserve(pre.size());
  for (std::size_t i = 0; i < pre.size(); ++i) {
    const double score = f_sft[i] > 0.0 ? f_pre[i] / f_sft[i] : kInf;
    DiffVerdict v{pre[i].id, static_cast<float>(f_sft[i]), static_cast<float>(f_pre[i]),
                  static_cast<float>(score), false};
    v.selected = v.score > cfg.tau;
    out.push_back(std::move(v));
  }
  return out;
}

std::vector<DiffVerdict> extract_diffset(std::span<const ProjectedPoint> pre,
                                         std::span<const ProjectedPoint> sft,
                                         const DiffsetConfig& cfg) {
  return cfg.criterion == Criterion::threshold ? diff_by_threshold(pre, sft, cfg)
                                               : diff_by_ratio(pre, sft, cfg);
}

std::vector<DiffVerdict> invert_selection(std::vector<DiffVerdict> verdicts) {
  for (auto& v : verdicts) v.selected = !v.selected;
  return verdicts;
}

std::vector<TextRecord> materialize_diffset(std::span<const DiffVerdict> verdicts,
                                            std::span<const TextRecord> corpus) {
  std::unordered_map<std::string_view, std::size_t> position;
  for (std::size_t i = 0; i < corpus.size(); ++i) position.emplace(corpus[i].id, i);
  std::vector<bool> keep(corpus.size(), false);
  for (const auto& v : verdicts) {
    auto it = position.find(v.id);
    if (it == position.end()) {
      throw PreconditionError("materialize_diffset: verdict id " + v.id + " not in corpus");
    }
    if (v.selected) keep[it->second] = true;
  }
  std::vector<TextRecord> out;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (keep[i]) out.push_back(corpus[i]);
  }
  return out;
}

void write_verdicts(std::span<const DiffVerdict> verdicts, const std::filesystem::path& path) {
  using ordered_json = nlohmann::ordered_json;
  std::string buf;
  for (const auto& v : verdicts) {
    ordered_json j;
    j["id"] = v.id;
    j["f_sft"] = float_to_json<ordered_json>(v.f_sft);
    j["f_pre"] = v.f_pre ? float_to_json<ordered_json>(*v.f_pre) : ordered_json(nullptr);
    j["score"] = std::isinf(v.score) ? ordered_json("inf") : float_to_json<ordered_json>(v.score);
    j["selected"] = v.selected;
    buf += j.dump();
    buf += '\n';
  }
  write_file_atomic(path, buf);
}

std::vector<DiffVerdict> read_verdicts(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<DiffVerdict> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw FormatError("bad verdict line in " + path.string());
    try {
      DiffVerdict v;
      v.id = j.at("id").get<std::string>();
      v.f_sft = json_to_float(j.at("f_sft"));
      if (!j.at("f_pre").is_null()) v.f_pre = json_to_float(j["f_pre"]);
      const auto& s = j.at("score");
      v.score = s.is_string() ? std::numeric_limits<float>::infinity() : json_to_float(s);
      v.selected = j.at("selected").get<bool>();
      out.push_back(std::move(v));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("bad verdict record: ") + e.what());
    }
  }
  return out;
}

}  // namespace gapfill
