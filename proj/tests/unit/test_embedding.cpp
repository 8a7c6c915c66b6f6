#include <doctest.h>

#include <bit>
#include <cmath>
#include <thread>

#include "gapfill/embedding.hpp"
#include "gapfill/error.hpp"
#include "test_support.hpp"

using namespace gapfill;
using testing_support::StubServer;
using testing_support::TempDir;

namespace {

double cosine(const std::vector<float>& a, const std::vector<float>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

std::vector<float> row_of(const EmbeddingMatrix& m, std::size_t i) {
  auto r = m.row(i);
  return {r.begin(), r.end()};
}

}  // namespace

TEST_CASE("mock embedding is deterministic and unit length") {
  auto a = mock_embedding("abc", 32);
  CHECK(a == mock_embedding("abc", 32));
  double n2 = 0;
  for (float v : a) n2 += double(v) * v;
  CHECK(std::sqrt(n2) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK_THROWS_AS(mock_embedding("abc", 1), PreconditionError);
}

TEST_CASE("mock embedding separates a small vocabulary") {
  const std::vector<std::string> vocab = {"a", "b", "marble", "bridge", "carbon dioxide", "What is 2+2?\n4"};
  for (std::size_t i = 0; i < vocab.size(); ++i)
    for (std::size_t j = i + 1; j < vocab.size(); ++j)
      CHECK(cosine(mock_embedding(vocab[i], 64), mock_embedding(vocab[j], 64)) < 0.99);
}

TEST_CASE("mock provider embeds in input order across batches") {
  EmbeddingProviderConfig cfg;
  cfg.dim = 8;
  cfg.batch_size = 2;
  std::vector<std::string> ids = {"x", "y", "z", "w", "v"};
  std::vector<std::string> texts = {"abc", "abc", "b", "c", "d"};
  auto m = embed_records(ids, texts, cfg);
  CHECK(m.rows() == 5);
  CHECK(m.dim == 8);
  CHECK(m.ids == ids);
  CHECK(row_of(m, 0) == row_of(m, 1));
  CHECK(row_of(m, 2) != row_of(m, 3));
  for (std::size_t i = 0; i < 5; ++i) CHECK(row_of(m, i) == mock_embedding(texts[i], 8));
}

TEST_CASE("batches completing out of order keep input order") {
  EmbeddingProviderConfig cfg;
  cfg.batch_size = 1;
  cfg.parallel_requests = 4;
  std::vector<std::string> ids = {"0", "1", "2", "3", "4", "5", "6", "7"};
  std::vector<std::string> texts = ids;
  EmbeddingTransport slow_first = [](std::size_t b, const std::vector<std::string>& in) {
    std::this_thread::sleep_for(std::chrono::milliseconds(b == 0 ? 50 : 0));
    return std::vector<std::vector<float>>{{std::stof(in[0]), 1.0f}};
  };
  auto m = embed_batched(ids, texts, cfg, slow_first);
  for (std::size_t i = 0; i < ids.size(); ++i) CHECK(m.row(i)[0] == float(i));
}

TEST_CASE("dimension mismatch across batches is fatal") {
  EmbeddingProviderConfig cfg;
  cfg.batch_size = 1;
  std::vector<std::string> ids = {"a", "b"};
  EmbeddingTransport ragged = [](std::size_t b, const std::vector<std::string>&) {
    return std::vector<std::vector<float>>{std::vector<float>(b == 0 ? 3 : 4, 1.0f)};
  };
  CHECK_THROWS_AS(embed_batched(ids, ids, cfg, ragged), FormatError);
}

TEST_CASE("long texts are truncated on a character boundary and counted") {
  CHECK(truncate_utf8("h\xC3\xA9llo", 2) == "h");
  CHECK(truncate_utf8("abc", 5) == "abc");
  EmbeddingProviderConfig cfg;
  cfg.max_chars = 4;
  EmbedStats stats;
  std::vector<std::string> ids = {"a", "b"};
  std::vector<std::string> texts = {"abcdefgh", "abcd"};
  auto m = embed_records(ids, texts, cfg, &stats);
  CHECK(stats.truncated == 1);
  CHECK(row_of(m, 0) == row_of(m, 1));
}

TEST_CASE("remote provider returns stubbed vectors in input order") {
  StubServer server("/v1/embeddings", [](const nlohmann::json& req) {
    nlohmann::json data = nlohmann::json::array();
    const auto& input = req.at("input");
    // Reply in reverse order; the client must sort by index.
    for (std::size_t i = input.size(); i-- > 0;) {
      const auto s = input[i].get<std::string>();
      data.push_back({{"index", i}, {"embedding", {double(s.size()), double(s[0]), 0.5}}});
    }
    return nlohmann::json{{"data", data}}.dump();
  });
  EmbeddingProviderConfig cfg;
  cfg.kind = ProviderKind::remote_http;
  cfg.endpoint_url = server.url();
  cfg.model_name = "stub";
  cfg.batch_size = 2;
  cfg.max_retries = 2;
  server.fail_next(1);
  std::vector<std::string> ids = {"a", "b", "c"};
  std::vector<std::string> texts = {"x", "yy", "zzz"};
  EmbedStats stats;
  auto m = embed_records(ids, texts, cfg, &stats);
  REQUIRE(m.rows() == 3);
  CHECK(m.dim == 3);
  CHECK(m.model_tag == "stub");
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(m.row(i)[0] == float(texts[i].size()));
    CHECK(m.row(i)[1] == float(texts[i][0]));
  }
  CHECK(stats.retries == 1);
}

TEST_CASE("remote failure after retries names the batch") {
  StubServer server("/v1/embeddings", [](const nlohmann::json&) { return std::string("{}"); });
  EmbeddingProviderConfig cfg;
  cfg.kind = ProviderKind::remote_http;
  cfg.endpoint_url = server.url();
  cfg.max_retries = 1;
  std::vector<std::string> ids = {"a"};
  try {
    embed_records(ids, ids, cfg);
    FAIL("expected TransportError");
  } catch (const TransportError& e) {
    CHECK(std::string(e.what()).find("batch 0") != std::string::npos);
  }
  CHECK(server.requests() == 2);
}

TEST_CASE("remote provider requires an endpoint") {
  EmbeddingProviderConfig cfg;
  cfg.kind = ProviderKind::remote_http;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("cache round-trips bit-exact") {
  TempDir dir;
  EmbeddingMatrix m;
  m.ids = {"first", "second"};
  m.dim = 3;
  m.data = {0.0f, 1.5f, -2.25f, 1e-30f, -0.0f, 3.1415927f};
  m.model_tag = "bge-m3";
  save_embeddings(m, dir / "m.emb");
  auto back = load_embeddings(dir / "m.emb");
  CHECK(back.ids == m.ids);
  CHECK(back.dim == 3);
  CHECK(back.model_tag == "bge-m3");
  for (std::size_t i = 0; i < m.data.size(); ++i)
    CHECK(std::bit_cast<std::uint32_t>(back.data[i]) == std::bit_cast<std::uint32_t>(m.data[i]));

  EmbeddingMatrix empty;
  empty.dim = 4;
  empty.model_tag = "t";
  save_embeddings(empty, dir / "e.emb");
  auto e = load_embeddings(dir / "e.emb");
  CHECK(e.rows() == 0);
  CHECK(e.model_tag == "t");
}

TEST_CASE("cache layout is the documented little-endian format") {
  EmbeddingMatrix m;
  m.ids = {"a"};
  m.dim = 1;
  m.data = {1.0f};
  m.model_tag = "m";
  const std::string bytes = encode_embeddings(m);
  const std::string expect = std::string("AITPEMB1") + std::string("\x01\x00\x00\x00", 4) +
                             std::string("\x01\x00\x00\x00", 4) + std::string("\x01\x00", 2) + "m" +
                             std::string("\x01\x00", 2) + "a" + std::string("\x00\x00\x80\x3f", 4);
  CHECK(bytes == expect);
}

TEST_CASE("corrupt or truncated caches are rejected") {
  EmbeddingMatrix m;
  m.ids = {"a", "b"};
  m.dim = 2;
  m.data = {1, 2, 3, 4};
  std::string bytes = encode_embeddings(m);
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_embeddings(bad_magic), FormatError);
  CHECK_THROWS_AS(decode_embeddings(bytes.substr(0, bytes.size() - 1)), FormatError);
  CHECK_THROWS_AS(decode_embeddings(bytes + "x"), FormatError);
  CHECK_THROWS_AS(decode_embeddings(""), FormatError);
}

TEST_CASE("file_only provider serves rows by id without a network") {
  TempDir dir;
  EmbeddingMatrix m;
  m.ids = {"a", "b", "c"};
  m.dim = 2;
  m.data = {1, 2, 3, 4, 5, 6};
  save_embeddings(m, dir / "pre.emb");
  EmbeddingProviderConfig cfg;
  cfg.kind = ProviderKind::file_only;
  cfg.precomputed_path = dir / "pre.emb";
  std::vector<std::string> ids = {"c", "a"};
  std::vector<std::string> texts = {"unused", "unused"};
  auto out = embed_records(ids, texts, cfg);
  CHECK(out.ids == ids);
  CHECK(row_of(out, 0) == std::vector<float>{5, 6});
  CHECK(row_of(out, 1) == std::vector<float>{1, 2});
  std::vector<std::string> missing = {"zzz"};
  CHECK_THROWS(embed_records(missing, missing, cfg));
}

TEST_CASE("matrix invariants") {
  EmbeddingMatrix m;
  m.ids = {"a", "a"};
  m.dim = 1;
  m.data = {1, 2};
  CHECK_THROWS_AS(m.validate(), FormatError);
  m.ids = {"a", "b"};
  m.data = {1, NAN};
  CHECK_THROWS_AS(m.validate(), FormatError);
  m.data = {1};
  CHECK_THROWS_AS(m.validate(), FormatError);
}
