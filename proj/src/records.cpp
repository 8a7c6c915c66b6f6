#include "gapfill/records.hpp"

#include <algorithm>
#include <cctype>

#include "gapfill/error.hpp"

namespace gapfill {
namespace {

bool is_blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

}  // namespace

std::string_view to_string(PairSource s) {
  switch (s) {
    case PairSource::original_sft:
      return "original_sft";
    case PairSource::rewritten:
      return "rewritten";
  }
  return "original_sft";
}

std::optional<PairSource> parse_pair_source(std::string_view s) {
  if (s == "original_sft") return PairSource::original_sft;
  if (s == "rewritten") return PairSource::rewritten;
  return std::nullopt;
}

void SchemaMap::validate() const {
  if (id_field.empty() || text_field.empty() || instruction_field.empty() ||
      response_field.empty()) {
    throw PreconditionError("schema map fields must be non-empty");
  }
}

void validate(const TextRecord& r) {
  if (r.id.empty()) throw PreconditionError("text record has empty id");
  if (is_blank(r.text)) throw PreconditionError("text record " + r.id + " has blank text");
}

void validate(const InstructionPair& p) {
  if (p.id.empty()) throw PreconditionError("instruction pair has empty id");
  if (p.instruction.empty() || p.response.empty()) {
    throw PreconditionError("instruction pair " + p.id + " has empty instruction or response");
  }
  const bool rewritten = p.source == PairSource::rewritten;
  if (rewritten != p.origin_id.has_value()) {
    throw PreconditionError("instruction pair " + p.id +
                            ": origin_id must be present exactly for rewritten pairs");
  }
}

}  // namespace gapfill
