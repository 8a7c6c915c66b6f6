#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace gapfill {

/// Row-major n x dim embeddings aligned with `ids`.
struct EmbeddingMatrix {
  std::vector<std::string> ids;
  std::size_t dim = 0;
  std::vector<float> data;
  std::string model_tag;

  std::size_t rows() const { return ids.size(); }
  std::span<const float> row(std::size_t i) const { return {data.data() + i * dim, dim}; }

  /// Throws FormatError if shape, finiteness or id uniqueness is violated.
  void validate() const;

  friend bool operator==(const EmbeddingMatrix&, const EmbeddingMatrix&) = default;
};

enum class ProviderKind { remote_http, mock_deterministic, file_only };

std::string_view to_string(ProviderKind k);
std::optional<ProviderKind> parse_provider_kind(std::string_view s);

struct EmbeddingProviderConfig {
  ProviderKind kind = ProviderKind::mock_deterministic;
  std::optional<std::string> endpoint_url;
  std::string model_name = "mock-deterministic";
  std::size_t dim = 64;  // mock provider only
  std::size_t batch_size = 32;
  int max_retries = 3;
  std::chrono::milliseconds timeout{60000};
  std::size_t parallel_requests = 4;
  std::string api_key_env_var = "EMBEDDING_API_KEY";
  std::size_t max_chars = 8192 * 4;
  std::filesystem::path precomputed_path;  // file_only provider only

  void validate() const;
};

struct EmbedStats {
  std::size_t truncated = 0;
  std::size_t requests = 0;
  std::size_t retries = 0;
};

/// Deterministic unit vector derived from the text bytes: a generator seeded
/// with the text's 64-bit FNV-1a hash draws `dim` normal values which are
/// then L2-normalized.
std::vector<float> mock_embedding(std::string_view text, std::size_t dim);

/// Sends one batch and returns its vectors in input order. Batches may be
/// issued concurrently.
using EmbeddingTransport =
    std::function<std::vector<std::vector<float>>(std::size_t batch_index,
                                                  const std::vector<std::string>& inputs)>;

/// OpenAI-compatible embeddings client: POST {model, input}, read
/// data[].embedding reordered by data[].index.
EmbeddingTransport make_http_embedding_transport(const EmbeddingProviderConfig& cfg,
                                                 EmbedStats* stats = nullptr);

/// Cuts `text` to at most `max_bytes` without splitting a UTF-8 sequence.
std::string_view truncate_utf8(std::string_view text, std::size_t max_bytes);

/// One row per input in input order. The file_only provider serves rows from
/// `precomputed_path` by id and never touches the network.
EmbeddingMatrix embed_records(std::span<const std::string> ids,
                              std::span<const std::string> texts,
                              const EmbeddingProviderConfig& cfg, EmbedStats* stats = nullptr);

/// Batching core of embed_records with an explicit transport.
EmbeddingMatrix embed_batched(std::span<const std::string> ids, std::span<const std::string> texts,
                              const EmbeddingProviderConfig& cfg,
                              const EmbeddingTransport& transport, EmbedStats* stats = nullptr);

/// Binary cache: "AITPEMB1", u32 count, u32 dim, u16 tag length + tag, then
/// count ids as (u16 length + bytes), then count*dim f32 values. All
/// little-endian.
void save_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path);
EmbeddingMatrix load_embeddings(const std::filesystem::path& path);

std::string encode_embeddings(const EmbeddingMatrix& m);
EmbeddingMatrix decode_embeddings(std::string_view bytes);

}  // namespace gapfill
