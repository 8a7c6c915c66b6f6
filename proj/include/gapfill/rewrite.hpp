#pragma once

#include <atomic>
#include <chrono>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "gapfill/records.hpp"

namespace gapfill {

// ---------------------------------------------------------------------------
// Prompt templates

enum class TemplateName { query_generation, query_scoring, answer_generation };

std::string_view to_string(TemplateName n);

/// A prompt with "{}" slots filled positionally: one slot for query generation
/// and scoring, two (text, then question) for answer generation.
struct PromptTemplate {
  TemplateName name;
  std::string_view text;
};

/// The shipped templates, compiled in from resources/prompts.
const PromptTemplate& builtin_template(TemplateName name);
/// SHA-256 recorded in resources/prompts/SHA256SUMS for the template.
std::string_view builtin_template_sha256(TemplateName name);

std::size_t count_slots(std::string_view text);
std::size_t expected_slots(TemplateName name);

/// Replaces each "{}" in order. Slot contents are inserted verbatim and never
/// rescanned. Throws PreconditionError on slot-count mismatch.
std::string render_prompt(const PromptTemplate& t, std::span<const std::string> slots);

/// Pulls the first balanced {...} object out of model output (searching inside
/// the first Markdown code fence when one is present) and parses it strictly.
/// Throws FormatError when there is none or it does not parse.
nlohmann::json parse_model_json(std::string_view raw);

// ---------------------------------------------------------------------------
// Generation client

struct GenClientConfig {
  std::string endpoint_url;
  std::string model_name = "generator";
  float temperature = 0.0f;
  int max_tokens = 2048;
  int max_retries = 3;
  std::chrono::milliseconds timeout{120000};
  std::size_t parallel_requests = 4;
  std::string api_key_env_var = "GEN_API_KEY";

  void validate() const;
};

/// Returns the model's reply text for a single-user-message prompt. Throws
/// TransportError when the endpoint cannot be reached.
class ChatTransport {
 public:
  virtual ~ChatTransport() = default;
  virtual std::string complete(const std::string& prompt) = 0;
};

/// OpenAI-compatible chat completions over HTTP, retrying transport failures
/// and non-2xx statuses up to max_retries times.
class HttpChatTransport : public ChatTransport {
 public:
  explicit HttpChatTransport(GenClientConfig cfg);
  std::string complete(const std::string& prompt) override;

 private:
  GenClientConfig cfg_;
  std::string api_key_;
};

/// Accepted model replies on disk, one file per key. A key hashes the
/// template name, the model name and the rendered prompt.
class ResponseCache {
 public:
  explicit ResponseCache(std::filesystem::path dir);

  static std::string key(TemplateName name, std::string_view model, std::string_view prompt);
  std::optional<std::string> get(const std::string& key) const;
  void put(const std::string& key, std::string_view value);

 private:
  std::filesystem::path path_for(const std::string& key) const;

  std::filesystem::path dir_;
  mutable std::mutex mu_;
};

struct ClientCounters {
  std::size_t network_calls = 0;
  std::size_t cache_hits = 0;
  std::size_t retries = 0;
};

/// Sends prompts through a transport with parse-and-retry semantics. Only
/// replies that parse and pass the caller's check are cached, so a cached
/// reply never needs a retry.
class GenerationClient {
 public:
  GenerationClient(ChatTransport& transport, GenClientConfig cfg, ResponseCache* cache = nullptr);

  using Accept = std::function<bool(const nlohmann::json&)>;

  /// Parsed reply, or nullopt after 1 + max_retries unusable replies.
  /// `retries` is incremented per extra attempt.
  std::optional<nlohmann::json> request_json(TemplateName name, const std::string& prompt,
                                             const Accept& accept, std::size_t& retries);

  const GenClientConfig& config() const { return cfg_; }
  /// True once any network call has returned.
  bool reached_endpoint() const { return reached_.load(); }
  ClientCounters counters() const;

 private:
  ChatTransport& transport_;
  GenClientConfig cfg_;
  ResponseCache* cache_;
  std::atomic<bool> reached_{false};
  std::atomic<std::size_t> network_calls_{0};
  std::atomic<std::size_t> cache_hits_{0};
};

// ---------------------------------------------------------------------------
// Stages

struct QueryCandidate {
  std::string origin_id;
  std::size_t index = 0;  // position among the questions generated for origin_id
  std::string question;
  std::optional<int> quality;
  std::optional<int> difficulty;
  std::optional<bool> additional_info_needed;
  bool failed = false;  // scoring reply never parsed

  bool scored() const { return quality && difficulty && additional_info_needed && !failed; }
  friend bool operator==(const QueryCandidate&, const QueryCandidate&) = default;
};

struct FilterPolicy {
  int min_quality = 6;
  std::optional<int> max_difficulty;
  bool reject_if_additional_info = true;

  void validate() const;
};

enum class RejectReason { scoring_failed, low_quality, too_difficult, needs_additional_info };
std::string_view to_string(RejectReason r);

struct RejectedQuery {
  QueryCandidate candidate;
  RejectReason reason;
};

struct FilterResult {
  std::vector<QueryCandidate> kept;
  std::vector<RejectedQuery> rejected;
};

/// Per-call tallies; summed into the RewriteReport.
struct StageCounters {
  std::size_t retries = 0;
  std::size_t question_count_warnings = 0;  // generation returned != 2 questions
  std::size_t clamped_scores = 0;
  std::size_t empty_answers = 0;
};

/// Step 1. nullopt when the reply never parsed (the record is marked failed).
std::optional<std::vector<QueryCandidate>> generate_queries(const TextRecord& record,
                                                            GenerationClient& client,
                                                            StageCounters& counters);
/// Step 2. Out-of-range scores are clamped into [1, 10]; a reply that never
/// parses leaves the candidate `failed`.
QueryCandidate score_query(QueryCandidate q, GenerationClient& client, StageCounters& counters);

FilterResult filter_queries(std::span<const QueryCandidate> candidates, const FilterPolicy& policy);

/// Step 3. nullopt when the reply never parsed or the answer is empty.
std::optional<InstructionPair> generate_answer(const TextRecord& record, const QueryCandidate& q,
                                               GenerationClient& client, StageCounters& counters);

struct RewriteReport {
  std::size_t records = 0;
  std::size_t queries_generated = 0;
  std::size_t kept = 0;
  std::map<std::string, std::size_t> rejected_by_reason;
  std::size_t answers = 0;
  std::map<std::string, std::size_t> failures;  // query_generation, scoring, answer
  std::size_t retries = 0;
  std::size_t question_count_warnings = 0;
  std::size_t clamped_scores = 0;
  std::size_t empty_answers = 0;
  std::size_t network_calls = 0;
  std::size_t cache_hits = 0;

  nlohmann::ordered_json to_json() const;
};

struct RewriteResult {
  std::vector<InstructionPair> pairs;  // ordered by (origin_id, question index)
  RewriteReport report;
};

/// Runs generate -> score -> filter -> answer for every record, up to
/// client.config().parallel_requests records at a time. Throws TransportError
/// if the endpoint is unreachable before any call succeeds; later per-item
/// failures are only counted.
RewriteResult rewrite_corpus(std::span<const TextRecord> diff, GenerationClient& client,
                             const FilterPolicy& policy);

}  // namespace gapfill
