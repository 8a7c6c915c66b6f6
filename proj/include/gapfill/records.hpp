#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>

namespace gapfill {

/// One pre-training document.
struct TextRecord {
  std::string id;
  std::string text;
  std::map<std::string, std::string> meta;

  friend bool operator==(const TextRecord&, const TextRecord&) = default;
};

enum class PairSource { original_sft, rewritten };

std::string_view to_string(PairSource s);
std::optional<PairSource> parse_pair_source(std::string_view s);

/// An instruction-tuning example. Rewritten pairs remember the corpus record
/// they were synthesized from in `origin_id`.
struct InstructionPair {
  std::string id;
  std::string instruction;
  std::string response;
  PairSource source = PairSource::original_sft;
  std::optional<std::string> origin_id;
  std::map<std::string, std::string> meta;

  friend bool operator==(const InstructionPair&, const InstructionPair&) = default;
};

/// Field names used to pull records out of heterogeneous JSONL files.
struct SchemaMap {
  std::string id_field = "id";
  std::string text_field = "text";
  std::string instruction_field = "instruction";
  std::string response_field = "response";

  void validate() const;
};

/// Throws PreconditionError unless the record satisfies the TextRecord invariants.
void validate(const TextRecord& r);
/// Throws PreconditionError unless the pair satisfies the InstructionPair invariants.
void validate(const InstructionPair& p);

}  // namespace gapfill
