#include "gapfill/corpus_io.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>
#include <system_error>

#include <json.hpp>

#include "gapfill/log.hpp"

namespace gapfill {
namespace {

using nlohmann::json;
using nlohmann::ordered_json;

constexpr std::size_t kMaxLoggedSkips = 5;

bool is_blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

std::optional<std::string> string_field(const json& obj, const std::string& key) {
  auto it = obj.find(key);
  if (it == obj.end() || !it->is_string()) return std::nullopt;
  return it->get<std::string>();
}

std::optional<std::string> id_field(const json& obj, const std::string& key) {
  auto it = obj.find(key);
  if (it == obj.end()) return std::nullopt;
  if (it->is_string()) return it->get<std::string>();
  if (it->is_number_integer()) return it->dump();
  return std::nullopt;
}

std::map<std::string, std::string> meta_field(const json& obj) {
  std::map<std::string, std::string> meta;
  auto it = obj.find("meta");
  if (it == obj.end() || !it->is_object()) return meta;
  for (const auto& [k, v] : it->items()) {
    if (v.is_string()) meta.emplace(k, v.get<std::string>());
  }
  return meta;
}

void put_meta(ordered_json& out, const std::map<std::string, std::string>& meta) {
  if (meta.empty()) return;
  ordered_json m = ordered_json::object();
  for (const auto& [k, v] : meta) m[k] = v;
  out["meta"] = std::move(m);
}

std::string dump_line(const ordered_json& j) {
  return j.dump(-1, ' ', false, ordered_json::error_handler_t::replace);
}

}  // namespace

template <typename Record>
RecordStream<Record>::RecordStream(const std::filesystem::path& path, SchemaMap schema)
    : path_(path), file_label_(path.filename().string()), schema_(std::move(schema)) {
  schema_.validate();
  in_.open(path, std::ios::binary);
  if (!in_) throw IoError("cannot open record file " + path.string());
}

template <typename Record>
std::optional<Record> RecordStream<Record>::next() {
  if (finished_) return std::nullopt;
  std::string line;
  while (std::getline(in_, line)) {
    ++line_no_;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (is_blank(line)) continue;
    ++stats_.lines;
    if (auto rec = parse_line(line)) {
      ++stats_.yielded;
      return rec;
    }
    if (stats_.skipped() <= kMaxLoggedSkips) {
      logger()->warn("{}:{}: skipped unmappable line", file_label_, line_no_);
    }
  }
  if (in_.bad()) throw IoError("read failed: " + path_.string());
  finished_ = true;
  if (stats_.skipped() * 2 > stats_.lines) {
    std::ostringstream msg;
    msg << path_.string() << ": " << stats_.skipped() << " of " << stats_.lines
        << " lines skipped (malformed=" << stats_.malformed
        << ", missing_field=" << stats_.missing_field << ", duplicate_id=" << stats_.duplicate_id
        << "); check the schema field names";
    throw FormatError(msg.str());
  }
  return std::nullopt;
}

template <>
std::optional<TextRecord> RecordStream<TextRecord>::parse_line(const std::string& line) {
  json obj = json::parse(line, nullptr, false);
  if (obj.is_discarded() || !obj.is_object()) {
    ++stats_.malformed;
    return std::nullopt;
  }
  auto text = string_field(obj, schema_.text_field);
  if (!text || is_blank(*text)) {
    ++stats_.missing_field;
    return std::nullopt;
  }
  TextRecord rec;
  auto id = id_field(obj, schema_.id_field);
  rec.id = (id && !id->empty()) ? *id : file_label_ + "#" + std::to_string(line_no_);
  if (!seen_ids_.insert(rec.id).second) {
    ++stats_.duplicate_id;
    return std::nullopt;
  }
  rec.text = std::move(*text);
  rec.meta = meta_field(obj);
  return rec;
}

template <>
std::optional<InstructionPair> RecordStream<InstructionPair>::parse_line(const std::string& line) {
  json obj = json::parse(line, nullptr, false);
  if (obj.is_discarded() || !obj.is_object()) {
    ++stats_.malformed;
    return std::nullopt;
  }
  auto instruction = string_field(obj, schema_.instruction_field);
  auto response = string_field(obj, schema_.response_field);
  if (!instruction || !response || instruction->empty() || response->empty()) {
    ++stats_.missing_field;
    return std::nullopt;
  }
  InstructionPair p;
  if (auto src = string_field(obj, "source")) {
    auto parsed = parse_pair_source(*src);
    if (!parsed) {
      ++stats_.missing_field;
      return std::nullopt;
    }
    p.source = *parsed;
  }
  p.origin_id = string_field(obj, "origin_id");
  if ((p.source == PairSource::rewritten) != p.origin_id.has_value()) {
    ++stats_.missing_field;
    return std::nullopt;
  }
  auto id = id_field(obj, schema_.id_field);
  p.id = (id && !id->empty()) ? *id : file_label_ + "#" + std::to_string(line_no_);
  if (!seen_ids_.insert(p.id).second) {
    ++stats_.duplicate_id;
    return std::nullopt;
  }
  p.instruction = std::move(*instruction);
  p.response = std::move(*response);
  p.meta = meta_field(obj);
  return p;
}

template class RecordStream<TextRecord>;
template class RecordStream<InstructionPair>;

std::vector<TextRecord> read_corpus(const std::filesystem::path& path, const SchemaMap& schema,
                                    StreamStats* stats) {
  CorpusStream s(path, schema);
  std::vector<TextRecord> out;
  while (auto r = s.next()) out.push_back(std::move(*r));
  if (stats) *stats = s.stats();
  return out;
}

std::vector<InstructionPair> read_sft(const std::filesystem::path& path, const SchemaMap& schema,
                                      StreamStats* stats) {
  SftStream s(path, schema);
  std::vector<InstructionPair> out;
  while (auto r = s.next()) out.push_back(std::move(*r));
  if (stats) *stats = s.stats();
  return out;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view content) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (out) out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (out) out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw IoError("write failed: " + path.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot move " + tmp.string() + " into place");
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path.string());
  return ss.str();
}

std::size_t write_records(std::span<const TextRecord> records, const std::filesystem::path& path) {
  std::string buf;
  for (const auto& r : records) {
    ordered_json j;
    j["id"] = r.id;
    j["text"] = r.text;
    put_meta(j, r.meta);
    buf += dump_line(j);
    buf += '\n';
  }
  write_file_atomic(path, buf);
  return records.size();
}

std::size_t write_records(std::span<const InstructionPair> records,
                          const std::filesystem::path& path) {
  std::string buf;
  for (const auto& p : records) {
    ordered_json j;
    j["id"] = p.id;
    j["instruction"] = p.instruction;
    j["response"] = p.response;
    j["source"] = std::string(to_string(p.source));
    if (p.origin_id) j["origin_id"] = *p.origin_id;
    put_meta(j, p.meta);
    buf += dump_line(j);
    buf += '\n';
  }
  write_file_atomic(path, buf);
  return records.size();
}

std::string sft_to_text(const InstructionPair& pair) {
  if (pair.instruction.empty() || pair.response.empty()) {
    throw PreconditionError("sft_to_text: instruction and response must be non-empty");
  }
  std::string out;
  out.reserve(pair.instruction.size() + 1 + pair.response.size());
  out += pair.instruction;
  out += '\n';
  out += pair.response;
  return out;
}

}  // namespace gapfill
