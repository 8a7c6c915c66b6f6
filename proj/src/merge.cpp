#include "gapfill/merge.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gapfill/error.hpp"
#include "gapfill/json_float.hpp"
#include "gapfill/rng.hpp"

namespace gapfill {

void MergePlan::validate() const {
  if (!(ratio > 0.0f) || !std::isfinite(ratio)) throw ConfigError("merge ratio must be a positive number");
}

nlohmann::ordered_json MergeManifest::to_json() const {
  nlohmann::ordered_json j;
  j["ratio_requested"] = float_to_json<nlohmann::ordered_json>(ratio_requested);
  j["ratio_achieved"] = ratio_achieved;
  j["counts"] = {{"sft", sft_count},
                 {"rewritten_available", rewritten_available},
                 {"rewritten_target", rewritten_target},
                 {"rewritten_used", rewritten_used},
                 {"combined", combined_count}};
  j["seed"] = seed;
  j["shuffled"] = shuffled;
  return j;
}

namespace {

std::vector<std::size_t> partial_shuffle(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < k; ++i) {
    std::swap(idx[i], idx[i + rng.below(n - i)]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k > n) throw PreconditionError("sample_indices: k exceeds n");
  Rng rng(seed);
  return partial_shuffle(n, k, rng);
}

MergeResult merge_datasets(std::span<const InstructionPair> sft,
                           std::span<const InstructionPair> rewritten, const MergePlan& plan) {
  if (sft.empty()) throw PreconditionError("merge_datasets: SFT set is empty");
  plan.validate();

  MergeResult out;
  auto& m = out.manifest;
  m.ratio_requested = plan.ratio;
  m.sft_count = sft.size();
  m.rewritten_available = rewritten.size();
  m.rewritten_target = static_cast<std::size_t>(
      std::llround(static_cast<double>(plan.ratio) * static_cast<double>(sft.size())));
  m.seed = plan.seed;
  m.shuffled = plan.shuffle;

  Rng rng(plan.seed);
  out.combined.assign(sft.begin(), sft.end());
  if (rewritten.size() > m.rewritten_target) {
    for (auto i : partial_shuffle(rewritten.size(), m.rewritten_target, rng)) {
      out.combined.push_back(rewritten[i]);
    }
  } else {
    out.combined.insert(out.combined.end(), rewritten.begin(), rewritten.end());
  }
  m.rewritten_used = out.combined.size() - sft.size();
  m.combined_count = out.combined.size();
  m.ratio_achieved = static_cast<double>(m.rewritten_used) / static_cast<double>(sft.size());
  if (plan.shuffle) rng.shuffle(out.combined);
  return out;
}

std::vector<InstructionPair> sample_same_size(std::span<const InstructionPair> combined,
                                              std::size_t target, std::uint64_t seed) {
  if (target == 0) throw PreconditionError("sample_same_size: target must be positive");
  if (target > combined.size()) {
    throw PreconditionError("sample_same_size: target " + std::to_string(target) +
                            " exceeds the " + std::to_string(combined.size()) + " available pairs");
  }
  std::vector<InstructionPair> out;
  out.reserve(target);
  for (auto i : sample_indices(combined.size(), target, seed)) out.push_back(combined[i]);
  return out;
}

std::vector<InstructionPair> build_distillation_set(
    std::span<const InstructionPair> rewritten_same_distribution,
    std::span<const InstructionPair> rewritten_diff) {
  std::vector<InstructionPair> out;
  out.reserve(rewritten_same_distribution.size() + rewritten_diff.size());
  for (const auto& p : rewritten_same_distribution) {
    out.push_back(p);
    out.back().meta[kSubsetMetaKey] = "same";
  }
  for (const auto& p : rewritten_diff) {
    out.push_back(p);
    out.back().meta[kSubsetMetaKey] = "diff";
  }
  return out;
}

}  // namespace gapfill
