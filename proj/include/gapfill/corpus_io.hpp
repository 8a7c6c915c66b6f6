#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "gapfill/error.hpp"
#include "gapfill/records.hpp"
#include "gapfill/rng.hpp"

namespace gapfill {

struct StreamStats {
  std::size_t lines = 0;  // non-blank lines seen
  std::size_t yielded = 0;
  std::size_t malformed = 0;      // not a JSON object
  std::size_t missing_field = 0;  // mapped field absent, wrong type or blank
  std::size_t duplicate_id = 0;

  std::size_t skipped() const { return malformed + missing_field + duplicate_id; }
};

/// Lazy reader over a JSONL file. Yields records in file order, skipping and
/// counting lines that cannot be mapped. When the end of the file is reached
/// with more than half of the lines skipped, next() throws FormatError: that
/// almost always means the SchemaMap is wrong for the file.
template <typename Record>
class RecordStream {
 public:
  RecordStream(const std::filesystem::path& path, SchemaMap schema);

  std::optional<Record> next();
  const StreamStats& stats() const { return stats_; }

 private:
  std::optional<Record> parse_line(const std::string& line);

  std::filesystem::path path_;
  std::string file_label_;
  SchemaMap schema_;
  std::ifstream in_;
  std::size_t line_no_ = 0;
  bool finished_ = false;
  StreamStats stats_;
  std::unordered_set<std::string> seen_ids_;
};

using CorpusStream = RecordStream<TextRecord>;
using SftStream = RecordStream<InstructionPair>;

std::vector<TextRecord> read_corpus(const std::filesystem::path& path,
                                    const SchemaMap& schema = {},
                                    StreamStats* stats = nullptr);
std::vector<InstructionPair> read_sft(const std::filesystem::path& path,
                                      const SchemaMap& schema = {},
                                      StreamStats* stats = nullptr);

/// Algorithm R with 1-based draws: the first k items fill the reservoir, item
/// i > k replaces slot j when j = 1 + (u64 mod i) satisfies j <= k.
template <typename T>
class ReservoirSampler {
 public:
  ReservoirSampler(std::size_t k, std::uint64_t seed) : k_(k), rng_(seed) {
    if (k_ == 0) throw PreconditionError("reservoir size k must be >= 1");
  }

  void offer(T item) {
    ++seen_;
    if (seen_ <= k_) {
      reservoir_.push_back(std::move(item));
      return;
    }
    const std::uint64_t j = 1 + rng_.below(seen_);
    if (j <= k_) reservoir_[j - 1] = std::move(item);
  }

  std::size_t seen() const { return seen_; }
  const std::vector<T>& sample() const& { return reservoir_; }
  std::vector<T> take() && { return std::move(reservoir_); }

 private:
  std::size_t k_;
  std::size_t seen_ = 0;
  Rng rng_;
  std::vector<T> reservoir_;
};

/// Samples from anything with `std::optional<T> next()`.
template <typename Stream>
auto reservoir_sample(Stream& stream, std::size_t k, std::uint64_t seed) {
  using T = typename decltype(stream.next())::value_type;
  ReservoirSampler<T> sampler(k, seed);
  while (auto item = stream.next()) sampler.offer(std::move(*item));
  return std::move(sampler).take();
}

template <typename T>
std::vector<T> reservoir_sample(std::span<const T> items, std::size_t k, std::uint64_t seed) {
  ReservoirSampler<T> sampler(k, seed);
  for (const auto& item : items) sampler.offer(item);
  return std::move(sampler).take();
}

/// Writes one JSON object per line with keys in a fixed order. The file is
/// written to a temporary sibling and renamed into place; on failure nothing
/// is left behind.
std::size_t write_records(std::span<const TextRecord> records, const std::filesystem::path& path);
std::size_t write_records(std::span<const InstructionPair> records,
                          const std::filesystem::path& path);

/// Text fed to the encoder for an SFT pair: instruction, newline, response.
std::string sft_to_text(const InstructionPair& pair);

/// Writes `content` atomically (temp file + rename). Throws IoError.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);
std::string read_file(const std::filesystem::path& path);

}  // namespace gapfill
