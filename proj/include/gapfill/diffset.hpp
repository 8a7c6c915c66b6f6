#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gapfill/density.hpp"
#include "gapfill/projection.hpp"
#include "gapfill/records.hpp"

namespace gapfill {

enum class Criterion {
  threshold,  // select when the SFT density at the corpus point is below tau
  ratio,      // select when corpus density / SFT density exceeds tau
};

std::string_view to_string(Criterion c);
std::optional<Criterion> parse_criterion(std::string_view s);

struct DiffsetConfig {
  Criterion criterion = Criterion::threshold;
  float tau = 0.7f;
  /// Threshold mode: divide each SFT density by the maximum over all corpus
  /// points so tau is scale-free and lies in (0, 1].
  bool normalize_threshold_densities = true;
  /// nullopt: Scott's rule on the union of both point sets.
  std::optional<KdeParams> kde;
  SelfExcludedDivisor self_excluded_divisor = SelfExcludedDivisor::m;
  KdeMode kde_mode = KdeMode::exact;

  void validate() const;
};

/// Per corpus point outcome. `score` is the normalized (or raw) SFT density in
/// threshold mode and f_pre / f_sft in ratio mode (+inf when f_sft is 0).
struct DiffVerdict {
  std::string id;
  float f_sft = 0.0f;
  std::optional<float> f_pre;
  float score = 0.0f;
  bool selected = false;

  friend bool operator==(const DiffVerdict&, const DiffVerdict&) = default;
};

/// The KDE parameters a config resolves to for the given point sets.
KdeParams resolve_kde_params(std::span<const ProjectedPoint> pre,
                             std::span<const ProjectedPoint> sft, const DiffsetConfig& cfg);

std::vector<DiffVerdict> diff_by_threshold(std::span<const ProjectedPoint> pre,
                                           std::span<const ProjectedPoint> sft,
                                           const DiffsetConfig& cfg);
std::vector<DiffVerdict> diff_by_ratio(std::span<const ProjectedPoint> pre,
                                       std::span<const ProjectedPoint> sft,
                                       const DiffsetConfig& cfg);
/// Dispatches on cfg.criterion.
std::vector<DiffVerdict> extract_diffset(std::span<const ProjectedPoint> pre,
                                         std::span<const ProjectedPoint> sft,
                                         const DiffsetConfig& cfg);

/// Flips every selection: the corpus records that the SFT set already covers.
std::vector<DiffVerdict> invert_selection(std::vector<DiffVerdict> verdicts);

/// Corpus records with a selected verdict, in corpus order. Throws
/// PreconditionError when a verdict names an id absent from the corpus.
std::vector<TextRecord> materialize_diffset(std::span<const DiffVerdict> verdicts,
                                            std::span<const TextRecord> corpus);

/// JSONL {id, f_sft, f_pre, score, selected}; +inf scores are the string "inf".
void write_verdicts(std::span<const DiffVerdict> verdicts, const std::filesystem::path& path);
std::vector<DiffVerdict> read_verdicts(const std::filesystem::path& path);

}  // namespace gapfill
