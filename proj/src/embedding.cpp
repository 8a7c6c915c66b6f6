#include "gapfill/embedding.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "gapfill/corpus_io.hpp"
#include "gapfill/error.hpp"
#include "gapfill/hashing.hpp"
#include "gapfill/http.hpp"
#include "gapfill/log.hpp"
#include "gapfill/rng.hpp"

namespace gapfill {
namespace {

constexpr std::string_view kMagic = "AITPEMB1";

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) out.push_back(static_cast<char>((v >> s) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::string_view take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw FormatError("embedding cache truncated");
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  std::uint16_t u16() {
    auto b = take(2);
    return static_cast<std::uint16_t>(static_cast<unsigned char>(b[0]) |
                                      (static_cast<unsigned char>(b[1]) << 8));
  }
  std::uint32_t u32() {
    auto b = take(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[i]);
    return v;
  }
  bool at_end() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

std::vector<std::vector<float>> parse_embeddings_response(const std::string& body,
                                                          std::size_t expected) {
  auto j = nlohmann::json::parse(body, nullptr, false);
  if (j.is_discarded() || !j.contains("data") || !j["data"].is_array()) {
    throw FormatError("embeddings response has no data array");
  }
  const auto& data = j["data"];
  if (data.size() != expected) {
    throw FormatError("embeddings response has " + std::to_string(data.size()) +
                      " rows, expected " + std::to_string(expected));
  }
  std::vector<std::vector<float>> rows(expected);
  std::vector<bool> filled(expected, false);
  for (std::size_t pos = 0; pos < data.size(); ++pos) {
    const auto& item = data[pos];
    std::size_t index = pos;
    if (item.contains("index")) index = item["index"].get<std::size_t>();
    if (index >= expected || filled[index]) throw FormatError("embeddings response index invalid");
    rows[index] = item.at("embedding").get<std::vector<float>>();
    filled[index] = true;
  }
  return rows;
}

EmbeddingMatrix embed_from_file(std::span<const std::string> ids,
                                const EmbeddingProviderConfig& cfg) {
  auto cached = load_embeddings(cfg.precomputed_path);
  std::unordered_map<std::string_view, std::size_t> index;
  for (std::size_t i = 0; i < cached.rows(); ++i) index.emplace(cached.ids[i], i);
  EmbeddingMatrix out;
  out.dim = cached.dim;
  out.model_tag = cached.model_tag;
  out.ids.assign(ids.begin(), ids.end());
  out.data.reserve(ids.size() * cached.dim);
  for (const auto& id : ids) {
    auto it = index.find(id);
    if (it == index.end()) {
      throw FormatError("precomputed embeddings " + cfg.precomputed_path.string() +
                        " have no row for id " + id);
    }
    auto r = cached.row(it->second);
    out.data.insert(out.data.end(), r.begin(), r.end());
  }
  return out;
}

}  // namespace

void EmbeddingMatrix::validate() const {
  if (dim == 0 && !ids.empty()) throw FormatError("embedding matrix has zero dimension");
  if (ids.size() * dim != data.size()) throw FormatError("embedding matrix shape mismatch");
  for (float v : data) {
    if (!std::isfinite(v)) throw FormatError("embedding matrix contains NaN/Inf");
  }
  std::unordered_set<std::string_view> seen;
  for (const auto& id : ids) {
    if (!seen.insert(id).second) throw FormatError("duplicate embedding id " + id);
  }
}

std::string_view to_string(ProviderKind k) {
  switch (k) {
    case ProviderKind::remote_http:
      return "remote_http";
    case ProviderKind::mock_deterministic:
      return "mock_deterministic";
    case ProviderKind::file_only:
      return "file_only";
  }
  return "mock_deterministic";
}

std::optional<ProviderKind> parse_provider_kind(std::string_view s) {
  if (s == "remote_http") return ProviderKind::remote_http;
  if (s == "mock_deterministic") return ProviderKind::mock_deterministic;
  if (s == "file_only") return ProviderKind::file_only;
  return std::nullopt;
}

void EmbeddingProviderConfig::validate() const {
  if (kind == ProviderKind::remote_http && (!endpoint_url || endpoint_url->empty())) {
    throw ConfigError("remote_http embedding provider requires endpoint_url");
  }
  if (kind == ProviderKind::file_only && precomputed_path.empty()) {
    throw ConfigError("file_only embedding provider requires precomputed_path");
  }
  if (kind == ProviderKind::mock_deterministic && dim < 2) {
    throw ConfigError("mock embedding dim must be >= 2");
  }
  if (batch_size == 0 || parallel_requests == 0) {
    throw ConfigError("embedding batch_size and parallel_requests must be positive");
  }
  if (max_retries < 0) throw ConfigError("embedding max_retries must be >= 0");
}

std::vector<float> mock_embedding(std::string_view text, std::size_t dim) {
  if (dim < 2) throw PreconditionError("mock_embedding: dim must be >= 2");
  Rng rng(fnv1a64(text));
  std::vector<double> v(dim);
  double norm2 = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    norm2 += x * x;
  }
  const double inv = 1.0 / std::sqrt(norm2);
  std::vector<float> out(dim);
  for (std::size_t i = 0; i < dim; ++i) out[i] = static_cast<float>(v[i] * inv);
  return out;
}

std::string_view truncate_utf8(std::string_view text, std::size_t max_bytes) {
  if (text.size() <= max_bytes) return text;
  std::size_t cut = max_bytes;
  while (cut > 0 && (static_cast<unsigned char>(text[cut]) & 0xC0) == 0x80) --cut;
  return text.substr(0, cut);
}

EmbeddingTransport make_http_embedding_transport(const EmbeddingProviderConfig& cfg,
                                                 EmbedStats* stats) {
  cfg.validate();
  auto counters = std::make_shared<std::mutex>();
  return [cfg, stats, counters](std::size_t batch_index, const std::vector<std::string>& inputs) {
    const std::string body =
        nlohmann::json{{"model", cfg.model_name}, {"input", inputs}}.dump();
    const std::string key = api_key_from_env(cfg.api_key_env_var);
    std::string last_error;
    for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
      if (stats) {
        std::lock_guard lock(*counters);
        ++stats->requests;
        if (attempt > 0) ++stats->retries;
      }
      try {
        auto res = post_json(*cfg.endpoint_url, body, key, cfg.timeout);
        if (res.status / 100 != 2) {
          last_error = "HTTP status " + std::to_string(res.status);
        } else {
          return parse_embeddings_response(res.body, inputs.size());
        }
      } catch (const TransportError& e) {
        last_error = e.what();
      } catch (const FormatError& e) {
        last_error = e.what();
      } catch (const nlohmann::json::exception& e) {
        last_error = e.what();
      }
      if (attempt < cfg.max_retries) {
        std::this_thread::sleep_for(std::chrono::milliseconds(50) * (1 << std::min(attempt, 6)));
      }
    }
    throw TransportError("embedding batch " + std::to_string(batch_index) + " failed after " +
                         std::to_string(cfg.max_retries + 1) + " attempts: " + last_error);
  };
}

EmbeddingMatrix embed_batched(std::span<const std::string> ids, std::span<const std::string> texts,
                              const EmbeddingProviderConfig& cfg,
                              const EmbeddingTransport& transport, EmbedStats* stats) {
  if (ids.size() != texts.size()) throw PreconditionError("embed: ids and texts differ in length");
  if (texts.empty()) throw PreconditionError("embed: no texts");

  std::vector<std::vector<std::string>> batches;
  std::size_t truncated = 0;
  for (std::size_t start = 0; start < texts.size(); start += cfg.batch_size) {
    std::vector<std::string> batch;
    for (std::size_t i = start; i < std::min(texts.size(), start + cfg.batch_size); ++i) {
      if (texts[i].empty()) throw PreconditionError("embed: text for id " + ids[i] + " is empty");
      auto t = truncate_utf8(texts[i], cfg.max_chars);
      if (t.size() != texts[i].size()) ++truncated;
      batch.emplace_back(t);
    }
    batches.push_back(std::move(batch));
  }
  if (stats) stats->truncated += truncated;
  if (truncated > 0) logger()->info("embed: truncated {} texts to {} bytes", truncated, cfg.max_chars);

  std::vector<std::vector<std::vector<float>>> results(batches.size());
  std::vector<std::exception_ptr> errors(batches.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t b = next++; b < batches.size(); b = next++) {
      try {
        results[b] = transport(b, batches[b]);
        if (results[b].size() != batches[b].size()) {
          throw FormatError("embedding batch " + std::to_string(b) + " returned wrong row count");
        }
      } catch (...) {
        errors[b] = std::current_exception();
      }
    }
  };
  const std::size_t workers = std::min(cfg.parallel_requests, batches.size());
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
    worker();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  EmbeddingMatrix m;
  m.ids.assign(ids.begin(), ids.end());
  m.model_tag = cfg.model_name;
  m.dim = results.front().front().size();
  if (m.dim == 0) throw FormatError("embedding provider returned empty vectors");
  m.data.reserve(m.dim * ids.size());
  for (std::size_t b = 0; b < results.size(); ++b) {
    for (const auto& row : results[b]) {
      if (row.size() != m.dim) {
        throw FormatError("embedding dimension mismatch in batch " + std::to_string(b) + ": " +
                          std::to_string(row.size()) + " vs " + std::to_string(m.dim));
      }
      m.data.insert(m.data.end(), row.begin(), row.end());
    }
  }
  m.validate();
  return m;
}

EmbeddingMatrix embed_records(std::span<const std::string> ids,
                              std::span<const std::string> texts,
                              const EmbeddingProviderConfig& cfg, EmbedStats* stats) {
  cfg.validate();
  switch (cfg.kind) {
    case ProviderKind::file_only:
      return embed_from_file(ids, cfg);
    case ProviderKind::mock_deterministic: {
      EmbeddingTransport mock = [dim = cfg.dim](std::size_t, const std::vector<std::string>& in) {
        std::vector<std::vector<float>> out;
        out.reserve(in.size());
        for (const auto& t : in) out.push_back(mock_embedding(t, dim));
        return out;
      };
      return embed_batched(ids, texts, cfg, mock, stats);
    }
    case ProviderKind::remote_http:
      return embed_batched(ids, texts, cfg, make_http_embedding_transport(cfg, stats), stats);
  }
  throw PreconditionError("unknown embedding provider kind");
}

std::string encode_embeddings(const EmbeddingMatrix& m) {
  m.validate();
  if (m.rows() > 0xffffffffULL || m.dim > 0xffffffffULL) {
    throw PreconditionError("embedding matrix too large for cache format");
  }
  if (m.model_tag.size() > 0xffff) throw PreconditionError("model_tag longer than 65535 bytes");
  std::string out(kMagic);
  put_u32(out, static_cast<std::uint32_t>(m.rows()));
  put_u32(out, static_cast<std::uint32_t>(m.dim));
  put_u16(out, static_cast<std::uint16_t>(m.model_tag.size()));
  out += m.model_tag;
  for (const auto& id : m.ids) {
    if (id.size() > 0xffff) throw PreconditionError("embedding id longer than 65535 bytes");
    put_u16(out, static_cast<std::uint16_t>(id.size()));
    out += id;
  }
  out.reserve(out.size() + m.data.size() * 4);
  for (float v : m.data) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

EmbeddingMatrix decode_embeddings(std::string_view bytes) {
  Reader r(bytes);
  if (bytes.size() < kMagic.size() || r.take(kMagic.size()) != kMagic) {
    throw FormatError("embedding cache has bad magic or version");
  }
  EmbeddingMatrix m;
  const std::uint32_t count = r.u32();
  m.dim = r.u32();
  m.model_tag = std::string(r.take(r.u16()));
  m.ids.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) m.ids.emplace_back(r.take(r.u16()));
  const std::size_t n = static_cast<std::size_t>(count) * m.dim;
  if (r.remaining() / 4 < n) throw FormatError("embedding cache truncated");
  m.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) m.data[i] = std::bit_cast<float>(r.u32());
  if (!r.at_end()) throw FormatError("embedding cache has trailing bytes");
  m.validate();
  return m;
}

void save_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path) {
  write_file_atomic(path, encode_embeddings(m));
}

EmbeddingMatrix load_embeddings(const std::filesystem::path& path) {
  return decode_embeddings(read_file(path));
}

}  // namespace gapfill
