#include "gapfill/rewrite.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <exception>
#include <thread>

#include "gapfill/corpus_io.hpp"
#include "gapfill/error.hpp"
#include "gapfill/hashing.hpp"
#include "gapfill/http.hpp"
#include "gapfill/log.hpp"

namespace gapfill {

#include "gapfill/prompt_resources.inc"

namespace {

using nlohmann::json;

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::optional<int> as_int(const json& j) {
  if (j.is_number_integer()) {
    const auto v = j.get<long long>();
    return static_cast<int>(std::clamp<long long>(v, -1000000, 1000000));
  }
  if (j.is_number_float()) {
    const double d = j.get<double>();
    if (!std::isfinite(d)) return std::nullopt;
    return static_cast<int>(std::lround(std::clamp(d, -1e6, 1e6)));
  }
  if (j.is_string()) {
    const std::string s = trim(j.get<std::string>());
    int v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec == std::errc() && ptr == s.data() + s.size()) return v;
  }
  return std::nullopt;
}

std::optional<bool> as_bool(const json& j) {
  if (j.is_boolean()) return j.get<bool>();
  if (j.is_string()) {
    std::string s = trim(j.get<std::string>());
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    if (s == "true") return true;
    if (s == "false") return false;
  }
  return std::nullopt;
}

struct Scores {
  int quality;
  int difficulty;
  bool additional_info_needed;
};

std::optional<Scores> read_scores(const json& j) {
  if (!j.is_object()) return std::nullopt;
  auto q = j.find("quality");
  auto d = j.find("difficulty");
  auto a = j.find("additional_info_needed");
  if (q == j.end() || d == j.end() || a == j.end()) return std::nullopt;
  auto qi = as_int(*q);
  auto di = as_int(*d);
  auto ab = as_bool(*a);
  if (!qi || !di || !ab) return std::nullopt;
  return Scores{*qi, *di, *ab};
}

std::vector<std::string> read_questions(const json& j) {
  std::vector<std::string> out;
  for (const auto& item : j.at("questions")) {
    std::string q;
    if (item.is_string()) {
      q = item.get<std::string>();
    } else if (item.is_object() && item.contains("question") && item["question"].is_string()) {
      q = item["question"].get<std::string>();
    }
    q = trim(q);
    if (!q.empty()) out.push_back(std::move(q));
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Templates

std::string_view to_string(TemplateName n) {
  switch (n) {
    case TemplateName::query_generation:
      return "query_generation";
    case TemplateName::query_scoring:
      return "query_scoring";
    case TemplateName::answer_generation:
      return "answer_generation";
  }
  return "query_generation";
}

const PromptTemplate& builtin_template(TemplateName name) {
  static const PromptTemplate generation{TemplateName::query_generation, k_query_generation_template};
  static const PromptTemplate scoring{TemplateName::query_scoring, k_query_scoring_template};
  static const PromptTemplate answer{TemplateName::answer_generation, k_answer_generation_template};
  switch (name) {
    case TemplateName::query_generation:
      return generation;
    case TemplateName::query_scoring:
      return scoring;
    case TemplateName::answer_generation:
      return answer;
  }
  return generation;
}

std::string_view builtin_template_sha256(TemplateName name) {
  switch (name) {
    case TemplateName::query_generation:
      return k_query_generation_sha256;
    case TemplateName::query_scoring:
      return k_query_scoring_sha256;
    case TemplateName::answer_generation:
      return k_answer_generation_sha256;
  }
  return {};
}

std::size_t count_slots(std::string_view text) {
  std::size_t n = 0;
  for (auto pos = text.find("{}"); pos != std::string_view::npos; pos = text.find("{}", pos + 2)) ++n;
  return n;
}

std::size_t expected_slots(TemplateName name) {
  return name == TemplateName::answer_generation ? 2 : 1;
}

std::string render_prompt(const PromptTemplate& t, std::span<const std::string> slots) {
  if (count_slots(t.text) != slots.size()) {
    throw PreconditionError("template " + std::string(to_string(t.name)) + " has " +
                            std::to_string(count_slots(t.text)) + " slots, got " +
                            std::to_string(slots.size()) + " values");
  }
  std::string out;
  std::size_t from = 0;
  for (const auto& value : slots) {
    const auto pos = t.text.find("{}", from);
    out.append(t.text.substr(from, pos - from));
    out.append(value);
    from = pos + 2;
  }
  out.append(t.text.substr(from));
  return out;
}

json parse_model_json(std::string_view raw) {
  std::string_view region = raw;
  if (auto fence = raw.find("```"); fence != std::string_view::npos) {
    auto body = raw.find('\n', fence);
    auto close = body == std::string_view::npos ? body : raw.find("```", body);
    if (body != std::string_view::npos && close != std::string_view::npos) {
      region = raw.substr(body + 1, close - body - 1);
    }
  }
  const auto start = region.find('{');
  if (start == std::string_view::npos) throw FormatError("model output contains no JSON object");
  int depth = 0;
  bool in_string = false;
  bool escaped = false;
  for (std::size_t i = start; i < region.size(); ++i) {
    const char c = region[i];
    if (in_string) {
      if (escaped) {
        escaped = false;
      } else if (c == '\\') {
        escaped = true;
      } else if (c == '"') {
        in_string = false;
      }
      continue;
    }
    if (c == '"') {
      in_string = true;
    } else if (c == '{') {
      ++depth;
    } else if (c == '}' && --depth == 0) {
      auto parsed = json::parse(region.substr(start, i - start + 1), nullptr, false);
      if (parsed.is_discarded()) throw FormatError("model output JSON block does not parse");
      return parsed;
    }
  }
  throw FormatError("model output has an unbalanced JSON object");
}

// ---------------------------------------------------------------------------
// Client

void GenClientConfig::validate() const {
  if (endpoint_url.empty()) throw ConfigError("generation endpoint_url is required");
  if (model_name.empty()) throw ConfigError("generation model_name is required");
  if (!(temperature >= 0.0f)) throw ConfigError("generation temperature must be >= 0");
  if (max_tokens <= 0) throw ConfigError("generation max_tokens must be positive");
  if (max_retries < 0) throw ConfigError("generation max_retries must be >= 0");
  if (parallel_requests == 0) throw ConfigError("generation parallel_requests must be positive");
}

HttpChatTransport::HttpChatTransport(GenClientConfig cfg)
    : cfg_(std::move(cfg)), api_key_(api_key_from_env(cfg_.api_key_env_var)) {
  cfg_.validate();
}

std::string HttpChatTransport::complete(const std::string& prompt) {
  const json body = {{"model", cfg_.model_name},
                     {"messages", json::array({{{"role", "user"}, {"content", prompt}}})},
                     {"temperature", cfg_.temperature},
                     {"max_tokens", cfg_.max_tokens}};
  const std::string payload = body.dump(-1, ' ', false, json::error_handler_t::replace);
  std::string last_error;
  for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(std::chrono::milliseconds(100) * (1 << std::min(attempt - 1, 6)));
    }
    try {
      auto res = post_json(cfg_.endpoint_url, payload, api_key_, cfg_.timeout);
      if (res.status / 100 != 2) {
        last_error = "HTTP status " + std::to_string(res.status);
        continue;
      }
      auto j = json::parse(res.body, nullptr, false);
      if (j.is_discarded()) {
        last_error = "response is not JSON";
        continue;
      }
      const auto& content = j.at("choices").at(0).at("message").at("content");
      return content.is_string() ? content.get<std::string>() : content.dump();
    } catch (const TransportError& e) {
      last_error = e.what();
    } catch (const json::exception& e) {
      last_error = std::string("malformed completion response: ") + e.what();
    }
  }
  throw TransportError("chat completion failed after " + std::to_string(cfg_.max_retries + 1) +
                       " attempts: " + last_error);
}

ResponseCache::ResponseCache(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
}

std::string ResponseCache::key(TemplateName name, std::string_view model, std::string_view prompt) {
  std::string material(to_string(name));
  material.push_back('\0');
  material.append(model);
  material.push_back('\0');
  material.append(prompt);
  return sha256_hex(material);
}

std::filesystem::path ResponseCache::path_for(const std::string& key) const {
  return dir_ / key.substr(0, 2) / (key + ".txt");
}

std::optional<std::string> ResponseCache::get(const std::string& key) const {
  const auto p = path_for(key);
  std::lock_guard lock(mu_);
  if (!std::filesystem::exists(p)) return std::nullopt;
  return read_file(p);
}

void ResponseCache::put(const std::string& key, std::string_view value) {
  const auto p = path_for(key);
  std::lock_guard lock(mu_);
  std::filesystem::create_directories(p.parent_path());
  write_file_atomic(p, value);
}

GenerationClient::GenerationClient(ChatTransport& transport, GenClientConfig cfg,
                                   ResponseCache* cache)
    : transport_(transport), cfg_(std::move(cfg)), cache_(cache) {}

std::optional<json> GenerationClient::request_json(TemplateName name, const std::string& prompt,
                                                   const Accept& accept, std::size_t& retries) {
  const std::string key = cache_ ? ResponseCache::key(name, cfg_.model_name, prompt) : std::string();
  if (cache_) {
    if (auto hit = cache_->get(key)) {
      try {
        auto j = parse_model_json(*hit);
        if (accept(j)) {
          ++cache_hits_;
          return j;
        }
      } catch (const FormatError&) {
      }
    }
  }
  for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
    if (attempt > 0) ++retries;
    ++network_calls_;
    std::string raw = transport_.complete(prompt);
    reached_ = true;
    try {
      auto j = parse_model_json(raw);
      if (accept(j)) {
        if (cache_) cache_->put(key, raw);
        return j;
      }
    } catch (const FormatError&) {
    }
  }
  return std::nullopt;
}

ClientCounters GenerationClient::counters() const {
  return {network_calls_.load(), cache_hits_.load(), 0};
}

// ---------------------------------------------------------------------------
// Stages

void FilterPolicy::validate() const {
  if (min_quality < 1 || min_quality > 10) throw ConfigError("min_quality must lie in [1, 10]");
  if (max_difficulty && (*max_difficulty < 1 || *max_difficulty > 10)) {
    throw ConfigError("max_difficulty must lie in [1, 10]");
  }
}

std::string_view to_string(RejectReason r) {
  switch (r) {
    case RejectReason::scoring_failed:
      return "scoring_failed";
    case RejectReason::low_quality:
      return "low_quality";
    case RejectReason::too_difficult:
      return "too_difficult";
    case RejectReason::needs_additional_info:
      return "needs_additional_info";
  }
  return "scoring_failed";
}

namespace {

// A transport failure before the endpoint ever answered is fatal; afterwards it
// only fails the item at hand.
template <typename F>
auto guarded(GenerationClient& client, F&& f) -> std::optional<decltype(f())> {
  try {
    return f();
  } catch (const TransportError& e) {
    if (!client.reached_endpoint()) throw;
    logger()->warn("rewrite: {}", e.what());
    return std::nullopt;
  }
}

}  // namespace

std::optional<std::vector<QueryCandidate>> generate_queries(const TextRecord& record,
                                                            GenerationClient& client,
                                                            StageCounters& counters) {
  validate(record);
  const std::string prompt =
      render_prompt(builtin_template(TemplateName::query_generation), std::vector{record.text});
  auto reply = guarded(client, [&] {
    return client.request_json(
        TemplateName::query_generation, prompt,
        [](const json& j) { return j.is_object() && j.contains("questions") && j["questions"].is_array(); },
        counters.retries);
  });
  if (!reply || !*reply) return std::nullopt;
  auto questions = read_questions(**reply);
  if (questions.size() != 2) {
    ++counters.question_count_warnings;
    logger()->warn("rewrite: record {} produced {} questions (expected 2)", record.id, questions.size());
  }
  std::vector<QueryCandidate> out;
  for (std::size_t i = 0; i < questions.size(); ++i) {
    QueryCandidate q;
    q.origin_id = record.id;
    q.index = i;
    q.question = std::move(questions[i]);
    out.push_back(std::move(q));
  }
  return out;
}

QueryCandidate score_query(QueryCandidate q, GenerationClient& client, StageCounters& counters) {
  if (q.question.empty()) throw PreconditionError("score_query: question is empty");
  const std::string prompt =
      render_prompt(builtin_template(TemplateName::query_scoring), std::vector{q.question});
  auto reply = guarded(client, [&] {
    return client.request_json(
        TemplateName::query_scoring, prompt, [](const json& j) { return read_scores(j).has_value(); },
        counters.retries);
  });
  if (!reply || !*reply) {
    q.failed = true;
    return q;
  }
  const Scores s = *read_scores(**reply);
  auto clamp_score = [&](int v) {
    if (v < 1 || v > 10) {
      ++counters.clamped_scores;
      logger()->warn("rewrite: score {} for a question of {} clamped into [1, 10]", v, q.origin_id);
    }
    return std::clamp(v, 1, 10);
  };
  q.quality = clamp_score(s.quality);
  q.difficulty = clamp_score(s.difficulty);
  q.additional_info_needed = s.additional_info_needed;
  q.failed = false;
  return q;
}

FilterResult filter_queries(std::span<const QueryCandidate> candidates, const FilterPolicy& policy) {
  FilterResult out;
  for (const auto& c : candidates) {
    std::optional<RejectReason> reason;
    if (!c.scored()) {
      reason = RejectReason::scoring_failed;
    } else if (*c.quality < policy.min_quality) {
      reason = RejectReason::low_quality;
    } else if (policy.max_difficulty && *c.difficulty > *policy.max_difficulty) {
      reason = RejectReason::too_difficult;
    } else if (policy.reject_if_additional_info && *c.additional_info_needed) {
      reason = RejectReason::needs_additional_info;
    }
    if (reason) {
      out.rejected.push_back({c, *reason});
    } else {
      out.kept.push_back(c);
    }
  }
  return out;
}

std::optional<InstructionPair> generate_answer(const TextRecord& record, const QueryCandidate& q,
                                               GenerationClient& client, StageCounters& counters) {
  const std::string prompt = render_prompt(builtin_template(TemplateName::answer_generation),
                                           std::vector{record.text, q.question});
  auto reply = guarded(client, [&] {
    return client.request_json(
        TemplateName::answer_generation, prompt,
        [](const json& j) { return j.is_object() && j.contains("answer") && j["answer"].is_string(); },
        counters.retries);
  });
  if (!reply || !*reply) return std::nullopt;
  std::string answer = trim((**reply)["answer"].get<std::string>());
  if (answer.empty()) {
    ++counters.empty_answers;
    logger()->warn("rewrite: empty answer for question {} of {}", q.index, record.id);
    return std::nullopt;
  }
  InstructionPair p;
  p.id = record.id + "#rw" + std::to_string(q.index);
  p.instruction = q.question;
  p.response = std::move(answer);
  p.source = PairSource::rewritten;
  p.origin_id = record.id;
  return p;
}

nlohmann::ordered_json RewriteReport::to_json() const {
  nlohmann::ordered_json j;
  j["records"] = records;
  j["queries_generated"] = queries_generated;
  j["kept"] = kept;
  j["rejected_by_reason"] = rejected_by_reason;
  j["answers"] = answers;
  j["failures"] = failures;
  j["retries"] = retries;
  j["question_count_warnings"] = question_count_warnings;
  j["clamped_scores"] = clamped_scores;
  j["empty_answers"] = empty_answers;
  j["network_calls"] = network_calls;
  j["cache_hits"] = cache_hits;
  return j;
}

namespace {

struct RecordOutcome {
  std::vector<InstructionPair> pairs;
  std::vector<std::size_t> question_index;
  std::size_t queries = 0;
  std::size_t kept = 0;
  std::map<std::string, std::size_t> rejected;
  bool generation_failed = false;
  std::size_t scoring_failures = 0;
  std::size_t answer_failures = 0;
  StageCounters counters;
};

RecordOutcome rewrite_one(const TextRecord& record, GenerationClient& client,
                          const FilterPolicy& policy) {
  RecordOutcome o;
  auto queries = generate_queries(record, client, o.counters);
  if (!queries) {
    o.generation_failed = true;
    return o;
  }
  o.queries = queries->size();
  std::vector<QueryCandidate> scored;
  for (auto& q : *queries) {
    scored.push_back(score_query(std::move(q), client, o.counters));
    if (scored.back().failed) ++o.scoring_failures;
  }
  auto filtered = filter_queries(scored, policy);
  o.kept = filtered.kept.size();
  for (const auto& r : filtered.rejected) ++o.rejected[std::string(to_string(r.reason))];
  for (const auto& q : filtered.kept) {
    auto pair = generate_answer(record, q, client, o.counters);
    if (pair) {
      o.pairs.push_back(std::move(*pair));
      o.question_index.push_back(q.index);
    } else {
      ++o.answer_failures;
    }
  }
  return o;
}

}  // namespace

RewriteResult rewrite_corpus(std::span<const TextRecord> diff, GenerationClient& client,
                             const FilterPolicy& policy) {
  if (diff.empty()) throw PreconditionError("rewrite_corpus: difference set is empty");
  policy.validate();

  std::vector<RecordOutcome> outcomes(diff.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> abort{false};
  std::exception_ptr fatal;
  std::mutex fatal_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < diff.size() && !abort; i = next++) {
      try {
        outcomes[i] = rewrite_one(diff[i], client, policy);
      } catch (...) {
        std::lock_guard lock(fatal_mu);
        if (!fatal) fatal = std::current_exception();
        abort = true;
      }
    }
  };
  const std::size_t workers = std::min(client.config().parallel_requests, diff.size());
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
    worker();
  }
  if (fatal) std::rethrow_exception(fatal);

  RewriteResult result;
  auto& rep = result.report;
  rep.records = diff.size();
  rep.failures = {{"query_generation", 0}, {"scoring", 0}, {"answer", 0}};
  struct Keyed {
    const InstructionPair* pair;
    std::size_t index;
  };
  std::vector<Keyed> keyed;
  for (const auto& o : outcomes) {
    rep.queries_generated += o.queries;
    rep.kept += o.kept;
    for (const auto& [reason, n] : o.rejected) rep.rejected_by_reason[reason] += n;
    rep.failures["query_generation"] += o.generation_failed ? 1 : 0;
    rep.failures["scoring"] += o.scoring_failures;
    rep.failures["answer"] += o.answer_failures;
    rep.retries += o.counters.retries;
    rep.question_count_warnings += o.counters.question_count_warnings;
    rep.clamped_scores += o.counters.clamped_scores;
    rep.empty_answers += o.counters.empty_answers;
    rep.answers += o.pairs.size();
    for (std::size_t k = 0; k < o.pairs.size(); ++k) keyed.push_back({&o.pairs[k], o.question_index[k]});
  }
  std::stable_sort(keyed.begin(), keyed.end(), [](const Keyed& a, const Keyed& b) {
    if (*a.pair->origin_id != *b.pair->origin_id) return *a.pair->origin_id < *b.pair->origin_id;
    return a.index < b.index;
  });
  result.pairs.reserve(keyed.size());
  for (const auto& k : keyed) result.pairs.push_back(*k.pair);
  const auto c = client.counters();
  rep.network_calls = c.network_calls;
  rep.cache_hits = c.cache_hits;
  return result;
}

}  // namespace gapfill
