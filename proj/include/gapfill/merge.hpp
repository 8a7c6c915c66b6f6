#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "gapfill/records.hpp"

namespace gapfill {

struct MergePlan {
  float ratio = 0.05f;  // rewritten pairs per SFT pair
  std::uint64_t seed = 0;
  bool shuffle = true;

  void validate() const;
};

struct MergeManifest {
  float ratio_requested = 0.0f;
  double ratio_achieved = 0.0;
  std::size_t sft_count = 0;
  std::size_t rewritten_available = 0;
  std::size_t rewritten_target = 0;
  std::size_t rewritten_used = 0;
  std::size_t combined_count = 0;
  std::uint64_t seed = 0;
  bool shuffled = false;

  nlohmann::ordered_json to_json() const;
};

struct MergeResult {
  std::vector<InstructionPair> combined;
  MergeManifest manifest;
};

/// round(ratio * |sft|) rewritten pairs, or all of them on a shortfall, plus
/// every SFT pair. Throws PreconditionError on an empty SFT set.
MergeResult merge_datasets(std::span<const InstructionPair> sft,
                           std::span<const InstructionPair> rewritten, const MergePlan& plan);

/// `k` distinct indices drawn uniformly from [0, n), ascending.
std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, std::uint64_t seed);

/// Uniform sample of `target` pairs without replacement, in input order.
/// Throws PreconditionError for target == 0 or target > |combined|.
std::vector<InstructionPair> sample_same_size(std::span<const InstructionPair> combined,
                                              std::size_t target, std::uint64_t seed);

inline constexpr const char* kSubsetMetaKey = "subset";

/// Same-distribution pairs then difference-set pairs, tagged "same" / "diff"
/// under meta["subset"].
std::vector<InstructionPair> build_distillation_set(
    std::span<const InstructionPair> rewritten_same_distribution,
    std::span<const InstructionPair> rewritten_diff);

}  // namespace gapfill
