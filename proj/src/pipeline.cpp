#include "gapfill/pipeline.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <set>
#include <unordered_map>

#include "gapfill/corpus_io.hpp"
#include "gapfill/density.hpp"
#include "gapfill/error.hpp"
#include "gapfill/hashing.hpp"
#include "gapfill/log.hpp"
#include "gapfill/projection.hpp"
#include "gapfill/viz.hpp"

namespace gapfill {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Stages

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::sample:
      return "sample";
    case Stage::embed:
      return "embed";
    case Stage::project:
      return "project";
    case Stage::density:
      return "density";
    case Stage::diffset:
      return "diffset";
    case Stage::rewrite:
      return "rewrite";
    case Stage::merge:
      return "merge";
    case Stage::viz:
      return "viz";
  }
  return "sample";
}

std::optional<Stage> parse_stage(std::string_view s) {
  for (auto st : kAllStages) {
    if (to_string(st) == s) return st;
  }
  return std::nullopt;
}

std::vector<Stage> stage_dependencies(Stage s) {
  switch (s) {
    case Stage::sample:
      return {};
    case Stage::embed:
      return {Stage::sample};
    case Stage::project:
      return {Stage::embed};
    case Stage::density:
      return {Stage::project};
    case Stage::diffset:
      return {Stage::sample, Stage::project};
    case Stage::rewrite:
      return {Stage::diffset};
    case Stage::merge:
      return {Stage::sample, Stage::rewrite};
    case Stage::viz:
      return {Stage::project, Stage::density, Stage::diffset, Stage::rewrite, Stage::merge};
  }
  return {};
}

std::vector<fs::path> Layout::outputs(Stage s) const {
  switch (s) {
    case Stage::sample:
      return {corpus_sample(), sft()};
    case Stage::embed:
      return {pre_embeddings(), sft_embeddings()};
    case Stage::project:
      return {pca_model(), pre_points(), sft_points()};
    case Stage::density:
      return {pre_field(), density_dir() / "pre.field", sft_field(), density_dir() / "sft.field"};
    case Stage::diffset:
      return {verdicts(), diffset()};
    case Stage::rewrite:
      return {rewritten(), rewrite_report()};
    case Stage::merge:
      return {combined(), merge_manifest()};
    case Stage::viz:
      return {rewritten_embeddings(), overlay_svg(), panels_svg()};
  }
  return {};
}

// ---------------------------------------------------------------------------
// Config

namespace {

void check_keys(const json& j, std::string_view section, std::initializer_list<std::string_view> known) {
  if (!j.is_object()) throw ConfigError("config section '" + std::string(section) + "' must be an object");
  for (const auto& [k, v] : j.items()) {
    if (std::find(known.begin(), known.end(), k) == known.end()) {
      throw ConfigError("unknown config key '" + std::string(section) + "." + k + "'");
    }
  }
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key) && !j[key].is_null()) out = j[key].get<T>();
}

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : (base / path).lexically_normal();
}

SchemaMap read_schema(const json& j, std::string_view section) {
  SchemaMap s;
  check_keys(j, section, {"id_field", "text_field", "instruction_field", "response_field"});
  read_opt(j, "id_field", s.id_field);
  read_opt(j, "text_field", s.text_field);
  read_opt(j, "instruction_field", s.instruction_field);
  read_opt(j, "response_field", s.response_field);
  return s;
}

std::size_t read_count(const json& j, const char* key, std::size_t fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j[key];
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ConfigError(std::string("config key '") + key + "' must be a nonnegative integer");
  }
  return v.get<std::size_t>();
}

}  // namespace

PipelineConfig PipelineConfig::from_json(const json& j, const fs::path& base_dir) {
  PipelineConfig c;
  try {
    check_keys(j, "<root>",
               {"corpus_path", "sft_path", "workdir", "schema", "reservoir_k", "seed", "embedding",
                "diffset", "rewrite", "merge", "viz"});
    if (!j.contains("corpus_path")) throw ConfigError("config needs corpus_path");
    if (!j.contains("sft_path")) throw ConfigError("config needs sft_path");
    c.corpus_path = resolve(base_dir, j["corpus_path"].get<std::string>());
    c.sft_path = resolve(base_dir, j["sft_path"].get<std::string>());
    c.workdir = resolve(base_dir, j.value("workdir", std::string("work")));
    if (j.contains("schema")) {
      check_keys(j["schema"], "schema", {"corpus", "sft"});
      if (j["schema"].contains("corpus")) c.corpus_schema = read_schema(j["schema"]["corpus"], "schema.corpus");
      if (j["schema"].contains("sft")) c.sft_schema = read_schema(j["schema"]["sft"], "schema.sft");
    }
    c.reservoir_k = read_count(j, "reservoir_k", c.reservoir_k);
    if (j.contains("seed")) {
      const auto& seed = j["seed"];
      if (!seed.is_number_unsigned() && !(seed.is_number_integer() && seed.get<std::int64_t>() >= 0)) {
        throw ConfigError("seed must be an unsigned integer");
      }
      c.seed = j["seed"].get<std::uint64_t>();
    }

    if (j.contains("embedding")) {
      const auto& e = j["embedding"];
      check_keys(e, "embedding",
                 {"kind", "endpoint_url", "model_name", "dim", "batch_size", "max_retries", "timeout_ms",
                  "parallel_requests", "api_key_env_var", "max_chars", "precomputed_path"});
      auto& ec = c.embedding;
      if (e.contains("kind")) {
        auto kind = parse_provider_kind(e["kind"].get<std::string>());
        if (!kind) throw ConfigError("unknown embedding kind " + e["kind"].dump());
        ec.kind = *kind;
      }
      if (e.contains("endpoint_url")) ec.endpoint_url = e["endpoint_url"].get<std::string>();
      read_opt(e, "model_name", ec.model_name);
      ec.dim = read_count(e, "dim", ec.dim);
      ec.batch_size = read_count(e, "batch_size", ec.batch_size);
      read_opt(e, "max_retries", ec.max_retries);
      if (e.contains("timeout_ms")) ec.timeout = std::chrono::milliseconds(e["timeout_ms"].get<long long>());
      ec.parallel_requests = read_count(e, "parallel_requests", ec.parallel_requests);
      read_opt(e, "api_key_env_var", ec.api_key_env_var);
      ec.max_chars = read_count(e, "max_chars", ec.max_chars);
      if (e.contains("precomputed_path")) {
        ec.precomputed_path = resolve(base_dir, e["precomputed_path"].get<std::string>());
      }
    }

    if (j.contains("diffset")) {
      const auto& d = j["diffset"];
      check_keys(d, "diffset",
                 {"criterion", "tau", "normalize_threshold_densities", "kde", "self_excluded_divisor",
                  "kde_mode"});
      auto& dc = c.diffset;
      if (d.contains("criterion")) {
        auto crit = parse_criterion(d["criterion"].get<std::string>());
        if (!crit) throw ConfigError("unknown diffset criterion " + d["criterion"].dump());
        dc.criterion = *crit;
      }
      dc.tau = dc.criterion == Criterion::ratio ? 1.0f : 0.7f;
      if (d.contains("tau")) dc.tau = d["tau"].get<float>();
      read_opt(d, "normalize_threshold_densities", dc.normalize_threshold_densities);
      if (d.contains("kde") && !(d["kde"].is_string() && d["kde"] == "auto")) {
        const auto& k = d["kde"];
        check_keys(k, "diffset.kde", {"h_x", "h_y", "sigma"});
        KdeParams p;
        p.h_x = k.at("h_x").get<float>();
        p.h_y = k.at("h_y").get<float>();
        p.sigma = k.value("sigma", 1.0f);
        dc.kde = p;
      }
      if (d.contains("self_excluded_divisor")) {
        const auto s = d["self_excluded_divisor"].get<std::string>();
        if (s == "m") {
          dc.self_excluded_divisor = SelfExcludedDivisor::m;
        } else if (s == "m-1") {
          dc.self_excluded_divisor = SelfExcludedDivisor::m_minus_1;
        } else {
          throw ConfigError("self_excluded_divisor must be \"m\" or \"m-1\"");
        }
      }
      if (d.contains("kde_mode")) {
        const auto s = d["kde_mode"].get<std::string>();
        if (s == "exact") {
          dc.kde_mode = KdeMode::exact;
        } else if (s == "truncated") {
          dc.kde_mode = KdeMode::truncated;
        } else {
          throw ConfigError("kde_mode must be \"exact\" or \"truncated\"");
        }
      }
    }

    if (j.contains("rewrite")) {
      const auto& r = j["rewrite"];
      check_keys(r, "rewrite",
                 {"endpoint_url", "model_name", "temperature", "max_tokens", "max_retries", "timeout_ms",
                  "parallel_requests", "api_key_env_var", "min_quality", "max_difficulty",
                  "reject_if_additional_info"});
      auto& g = c.generation;
      read_opt(r, "endpoint_url", g.endpoint_url);
      read_opt(r, "model_name", g.model_name);
      read_opt(r, "temperature", g.temperature);
      read_opt(r, "max_tokens", g.max_tokens);
      read_opt(r, "max_retries", g.max_retries);
      if (r.contains("timeout_ms")) g.timeout = std::chrono::milliseconds(r["timeout_ms"].get<long long>());
      g.parallel_requests = read_count(r, "parallel_requests", g.parallel_requests);
      read_opt(r, "api_key_env_var", g.api_key_env_var);
      read_opt(r, "min_quality", c.filter.min_quality);
      if (r.contains("max_difficulty") && !r["max_difficulty"].is_null()) {
        c.filter.max_difficulty = r["max_difficulty"].get<int>();
      }
      read_opt(r, "reject_if_additional_info", c.filter.reject_if_additional_info);
    }

    if (j.contains("merge")) {
      const auto& m = j["merge"];
      check_keys(m, "merge", {"ratio", "shuffle"});
      read_opt(m, "ratio", c.merge.ratio);
      read_opt(m, "shuffle", c.merge.shuffle);
    }
    c.merge.seed = c.seed;

    if (j.contains("viz")) {
      const auto& v = j["viz"];
      check_keys(v, "viz", {"grid_nx", "grid_ny", "padding", "columns"});
      c.viz.grid_nx = read_count(v, "grid_nx", c.viz.grid_nx);
      c.viz.grid_ny = read_count(v, "grid_ny", c.viz.grid_ny);
      read_opt(v, "padding", c.viz.padding);
      c.viz.columns = read_count(v, "columns", c.viz.columns);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  auto j = json::parse(read_file(path), nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file is not valid JSON: " + path.string());
  return from_json(j, fs::absolute(path).parent_path());
}

void PipelineConfig::validate() const {
  if (!fs::is_regular_file(corpus_path)) throw ConfigError("corpus_path not found: " + corpus_path.string());
  if (!fs::is_regular_file(sft_path)) throw ConfigError("sft_path not found: " + sft_path.string());
  if (workdir.empty()) throw ConfigError("workdir is required");
  corpus_schema.validate();
  sft_schema.validate();
  if (reservoir_k == 0) throw ConfigError("reservoir_k must be positive");
  embedding.validate();
  if (embedding.kind == ProviderKind::file_only && !fs::is_regular_file(embedding.precomputed_path)) {
    throw ConfigError("precomputed_path not found: " + embedding.precomputed_path.string());
  }
  diffset.validate();
  generation.validate();
  filter.validate();
  merge.validate();
  if (viz.grid_nx < 2 || viz.grid_ny < 2) throw ConfigError("viz grid needs at least 2 nodes per axis");
  if (!(viz.padding >= 0.0)) throw ConfigError("viz padding must be >= 0");
  if (viz.columns == 0) throw ConfigError("viz columns must be positive");
}

namespace {

json schema_json(const SchemaMap& s) {
  return {{"id_field", s.id_field},
          {"text_field", s.text_field},
          {"instruction_field", s.instruction_field},
          {"response_field", s.response_field}};
}

json kde_json(const DiffsetConfig& d) {
  json j = "auto";
  if (d.kde) j = {{"h_x", d.kde->h_x}, {"h_y", d.kde->h_y}, {"sigma", d.kde->sigma}};
  return j;
}

json embedding_json(const EmbeddingProviderConfig& e) {
  return {{"kind", to_string(e.kind)},
          {"endpoint_url", e.endpoint_url.value_or("")},
          {"model_name", e.model_name},
          {"dim", e.dim},
          {"max_chars", e.max_chars},
          {"precomputed_path", e.precomputed_path.string()}};
}

}  // namespace

json PipelineConfig::stage_settings(Stage s) const {
  switch (s) {
    case Stage::sample:
      return {{"corpus_schema", schema_json(corpus_schema)},
              {"sft_schema", schema_json(sft_schema)},
              {"reservoir_k", reservoir_k},
              {"seed", seed}};
    case Stage::embed:
      return embedding_json(embedding);
    case Stage::project:
      return json::object();
    case Stage::density:
      return {{"kde", kde_json(diffset)},
              {"grid_nx", viz.grid_nx},
              {"grid_ny", viz.grid_ny},
              {"padding", viz.padding}};
    case Stage::diffset:
      return {{"criterion", to_string(diffset.criterion)},
              {"tau", diffset.tau},
              {"normalize_threshold_densities", diffset.normalize_threshold_densities},
              {"kde", kde_json(diffset)},
              {"self_excluded_divisor",
               diffset.self_excluded_divisor == SelfExcludedDivisor::m ? "m" : "m-1"},
              {"kde_mode", diffset.kde_mode == KdeMode::exact ? "exact" : "truncated"}};
    case Stage::rewrite:
      return {{"endpoint_url", generation.endpoint_url},
              {"model_name", generation.model_name},
              {"temperature", generation.temperature},
              {"max_tokens", generation.max_tokens},
              {"min_quality", filter.min_quality},
              {"max_difficulty", filter.max_difficulty ? json(*filter.max_difficulty) : json(nullptr)},
              {"reject_if_additional_info", filter.reject_if_additional_info},
              {"templates",
               {builtin_template_sha256(TemplateName::query_generation),
                builtin_template_sha256(TemplateName::query_scoring),
                builtin_template_sha256(TemplateName::answer_generation)}}};
    case Stage::merge:
      return {{"ratio", merge.ratio}, {"shuffle", merge.shuffle}, {"seed", merge.seed}};
    case Stage::viz:
      return {{"embedding", embedding_json(embedding)},
              {"columns", viz.columns}};
  }
  return json::object();
}

// ---------------------------------------------------------------------------
// Manifest

RunManifest RunManifest::load(const fs::path& path) {
  RunManifest m;
  if (!fs::exists(path)) return m;
  auto j = json::parse(read_file(path), nullptr, false);
  if (j.is_discarded() || !j.contains("stages")) {
    logger()->warn("ignoring unreadable manifest {}", path.string());
    return m;
  }
  try {
    for (const auto& [name, s] : j["stages"].items()) {
      StageRecord r;
      r.inputs = s.at("inputs").get<std::map<std::string, std::string>>();
      r.outputs = s.at("outputs").get<std::map<std::string, std::string>>();
      r.completed_at = s.value("completed_at", "");
      r.tool_version = s.value("tool_version", "");
      r.summary = s.value("summary", json::object());
      m.stages[name] = std::move(r);
    }
  } catch (const json::exception& e) {
    logger()->warn("ignoring unreadable manifest {}: {}", path.string(), e.what());
    m.stages.clear();
  }
  return m;
}

void RunManifest::save(const fs::path& path) const {
  nlohmann::ordered_json j;
  j["tool_version"] = kToolVersion;
  j["stages"] = nlohmann::ordered_json::object();
  for (auto st : kAllStages) {
    auto it = stages.find(std::string(to_string(st)));
    if (it == stages.end()) continue;
    const auto& r = it->second;
    nlohmann::ordered_json e;
    e["inputs"] = r.inputs;
    e["outputs"] = r.outputs;
    e["completed_at"] = r.completed_at;
    e["tool_version"] = r.tool_version;
    e["summary"] = r.summary;
    j["stages"][it->first] = std::move(e);
  }
  write_file_atomic(path, j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string relative_key(const fs::path& p, const fs::path& root) {
  return p.lexically_relative(root).generic_string();
}

std::unordered_map<std::string, Point2> point_index(std::span<const ProjectedPoint> pts) {
  std::unordered_map<std::string, Point2> m;
  for (const auto& p : pts) m.emplace(p.id, Point2{p.x, p.y});
  return m;
}

DensityField field_or_zero(std::span<const Point2> points, const KdeParams& params, const GridSpec& grid,
                           std::string tag) {
  if (!points.empty()) return kde_grid(points, params, grid, std::move(tag));
  DensityField f;
  f.params = params;
  f.grid = grid;
  f.values.assign(grid.nx * grid.ny, 0.0f);
  f.source_tag = std::move(tag);
  return f;
}

}  // namespace

Pipeline::Pipeline(PipelineConfig cfg) : cfg_(std::move(cfg)), layout_{cfg_.workdir} {
  std::error_code ec;
  fs::create_directories(layout_.root, ec);
  if (ec) throw ConfigError("cannot create workdir " + layout_.root.string() + ": " + ec.message());
  lock_fd_ = ::open(layout_.lock().c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (lock_fd_ < 0) throw ConfigError("workdir is not writable: " + layout_.root.string());
  if (::flock(lock_fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(lock_fd_);
    lock_fd_ = -1;
    throw ConfigError("workdir " + layout_.root.string() + " is locked by another gapfill process");
  }
  manifest_ = RunManifest::load(layout_.manifest());
}

Pipeline::~Pipeline() {
  if (lock_fd_ >= 0) {
    ::flock(lock_fd_, LOCK_UN);
    ::close(lock_fd_);
  }
}

std::map<std::string, std::string> Pipeline::input_hashes(Stage s) const {
  std::map<std::string, std::string> in;
  in["settings"] = sha256_hex(cfg_.stage_settings(s).dump());
  in["tool_version"] = std::string(kToolVersion);
  if (s == Stage::sample) {
    in["corpus"] = sha256_file(cfg_.corpus_path);
    in["sft"] = sha256_file(cfg_.sft_path);
  }
  if (s == Stage::embed && cfg_.embedding.kind == ProviderKind::file_only) {
    in["precomputed"] = sha256_file(cfg_.embedding.precomputed_path);
  }
  for (auto dep : stage_dependencies(s)) {
    for (const auto& p : layout_.outputs(dep)) {
      if (!fs::exists(p)) {
        throw MissingArtifactError("missing " + p.string() + "; run `gapfill " +
                                       std::string(to_string(dep)) + "` first",
                                   std::string(to_string(dep)));
      }
      in[relative_key(p, layout_.root)] = sha256_file(p);
    }
  }
  return in;
}

bool Pipeline::is_fresh(Stage s, const std::map<std::string, std::string>& inputs) const {
  auto it = manifest_.stages.find(std::string(to_string(s)));
  if (it == manifest_.stages.end() || it->second.inputs != inputs) return false;
  for (const auto& p : layout_.outputs(s)) {
    auto out = it->second.outputs.find(relative_key(p, layout_.root));
    if (out == it->second.outputs.end() || !fs::exists(p) || sha256_file(p) != out->second) return false;
  }
  return true;
}

StageOutcome Pipeline::run_stage(Stage s, bool force) {
  const std::string name(to_string(s));
  auto inputs = input_hashes(s);
  if (!force && is_fresh(s, inputs)) {
    logger()->info("{}: up to date, skipped", name);
    return {s, false};
  }
  logger()->info("{}: running", name);
  const auto started = std::chrono::steady_clock::now();
  json summary = execute(s);
  StageRecord rec;
  rec.inputs = std::move(inputs);
  for (const auto& p : layout_.outputs(s)) rec.outputs[relative_key(p, layout_.root)] = sha256_file(p);
  rec.completed_at = utc_now();
  rec.tool_version = std::string(kToolVersion);
  rec.summary = std::move(summary);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - started);
  logger()->info("{}: done in {} ms: {}", name, ms.count(), rec.summary.dump());
  manifest_.stages[name] = std::move(rec);
  manifest_.save(layout_.manifest());
  return {s, true};
}

std::vector<StageOutcome> Pipeline::run(const RunOptions& opts) {
  std::vector<StageOutcome> outcomes;
  std::set<Stage> executed;
  for (auto s : kAllStages) {
    bool force = opts.force;
    for (auto dep : stage_dependencies(s)) force = force || executed.count(dep) > 0;
    auto o = run_stage(s, force);
    if (o.executed) executed.insert(s);
    outcomes.push_back(o);
    if (opts.stop_after && *opts.stop_after == s) break;
  }
  return outcomes;
}

json Pipeline::execute(Stage s) {
  switch (s) {
    case Stage::sample:
      return do_sample();
    case Stage::embed:
      return do_embed();
    case Stage::project:
      return do_project();
    case Stage::density:
      return do_density();
    case Stage::diffset:
      return do_diffset();
    case Stage::rewrite:
      return do_rewrite();
    case Stage::merge:
      return do_merge();
    case Stage::viz:
      return do_viz();
  }
  return {};
}

json Pipeline::do_sample() {
  CorpusStream stream(cfg_.corpus_path, cfg_.corpus_schema);
  auto sample = reservoir_sample(stream, cfg_.reservoir_k, cfg_.seed);
  const auto corpus_stats = stream.stats();
  if (sample.empty()) throw ConfigError("corpus " + cfg_.corpus_path.string() + " has no usable records");
  StreamStats sft_stats;
  auto sft = read_sft(cfg_.sft_path, cfg_.sft_schema, &sft_stats);
  if (sft.empty()) throw ConfigError("SFT file " + cfg_.sft_path.string() + " has no usable pairs");
  fs::create_directories(layout_.corpus_sample().parent_path());
  write_records(std::span<const TextRecord>(sample), layout_.corpus_sample());
  write_records(std::span<const InstructionPair>(sft), layout_.sft());
  return {{"corpus_lines", corpus_stats.lines},
          {"corpus_skipped", corpus_stats.skipped()},
          {"sampled", sample.size()},
          {"sft_pairs", sft.size()},
          {"sft_skipped", sft_stats.skipped()}};
}

json Pipeline::do_embed() {
  const auto corpus = read_corpus(layout_.corpus_sample());
  const auto sft = read_sft(layout_.sft());
  std::vector<std::string> pre_ids, pre_texts, sft_ids, sft_texts;
  for (const auto& r : corpus) {
    pre_ids.push_back(r.id);
    pre_texts.push_back(r.text);
  }
  for (const auto& p : sft) {
    sft_ids.push_back(p.id);
    sft_texts.push_back(sft_to_text(p));
  }
  EmbedStats stats;
  auto pre = embed_records(pre_ids, pre_texts, cfg_.embedding, &stats);
  auto sft_m = embed_records(sft_ids, sft_texts, cfg_.embedding, &stats);
  fs::create_directories(layout_.pre_embeddings().parent_path());
  save_embeddings(pre, layout_.pre_embeddings());
  save_embeddings(sft_m, layout_.sft_embeddings());
  return {{"pre_rows", pre.rows()},
          {"sft_rows", sft_m.rows()},
          {"dim", pre.dim},
          {"model_tag", pre.model_tag},
          {"truncated", stats.truncated},
          {"requests", stats.requests},
          {"retries", stats.retries}};
}

json Pipeline::do_project() {
  const auto pre = load_embeddings(layout_.pre_embeddings());
  const auto sft = load_embeddings(layout_.sft_embeddings());
  const EmbeddingMatrix* parts[] = {&pre, &sft};
  const auto model = pca_fit_union(parts);
  const auto pre_pts = pca_transform(model, pre);
  const auto sft_pts = pca_transform(model, sft);
  fs::create_directories(layout_.pca_model().parent_path());
  save_pca_model(model, layout_.pca_model());
  save_points(pre_pts, layout_.pre_points());
  save_points(sft_pts, layout_.sft_points());
  return {{"explained_variance", {model.explained_variance[0], model.explained_variance[1]}},
          {"fitted_on", model.fitted_on}};
}

json Pipeline::do_density() {
  const auto pre = load_points(layout_.pre_points());
  const auto sft = load_points(layout_.sft_points());
  const auto params = resolve_kde_params(pre, sft, cfg_.diffset);
  auto pre_xy = to_points(pre);
  auto sft_xy = to_points(sft);
  std::vector<Point2> all = pre_xy;
  all.insert(all.end(), sft_xy.begin(), sft_xy.end());
  const auto grid = grid_for(all, cfg_.viz.grid_nx, cfg_.viz.grid_ny, cfg_.viz.padding);
  const auto pre_field = kde_grid(pre_xy, params, grid, "pre");
  const auto sft_field = kde_grid(sft_xy, params, grid, "sft");
  fs::create_directories(layout_.density_dir());
  save_density_field(pre_field, layout_.density_dir(), "pre");
  save_density_field(sft_field, layout_.density_dir(), "sft");
  return {{"h_x", params.h_x}, {"h_y", params.h_y}, {"sigma", params.sigma}};
}

json Pipeline::do_diffset() {
  const auto pre = load_points(layout_.pre_points());
  const auto sft = load_points(layout_.sft_points());
  const auto corpus = read_corpus(layout_.corpus_sample());
  const auto verdicts = extract_diffset(pre, sft, cfg_.diffset);
  const auto diff = materialize_diffset(verdicts, corpus);
  fs::create_directories(layout_.verdicts().parent_path());
  write_verdicts(verdicts, layout_.verdicts());
  write_records(std::span<const TextRecord>(diff), layout_.diffset());
  return {{"criterion", to_string(cfg_.diffset.criterion)},
          {"tau", cfg_.diffset.tau},
          {"evaluated", verdicts.size()},
          {"selected", diff.size()}};
}

json Pipeline::do_rewrite() {
  const auto diff = read_corpus(layout_.diffset());
  fs::create_directories(layout_.rewritten().parent_path());
  RewriteResult result;
  if (diff.empty()) {
    logger()->warn("rewrite: difference set is empty, nothing to rewrite");
  } else {
    HttpChatTransport transport(cfg_.generation);
    ResponseCache cache(layout_.response_cache());
    GenerationClient client(transport, cfg_.generation, &cache);
    result = rewrite_corpus(diff, client, cfg_.filter);
  }
  write_records(std::span<const InstructionPair>(result.pairs), layout_.rewritten());
  auto report = result.report.to_json();
  json summary = report;
  // Call counts vary with cache state; keep them out of the output file.
  report.erase("network_calls");
  report.erase("cache_hits");
  write_file_atomic(layout_.rewrite_report(), report.dump(2) + "\n");
  return summary;
}

json Pipeline::do_merge() {
  const auto sft = read_sft(layout_.sft());
  const auto rewritten = read_sft(layout_.rewritten());
  const auto result = merge_datasets(sft, rewritten, cfg_.merge);
  fs::create_directories(layout_.combined().parent_path());
  write_records(std::span<const InstructionPair>(result.combined), layout_.combined());
  write_file_atomic(layout_.merge_manifest(), result.manifest.to_json().dump(2) + "\n");
  return result.manifest.to_json();
}

json Pipeline::do_viz() {
  const auto pre_field = load_density_field(layout_.pre_field());
  const auto sft_field = load_density_field(layout_.sft_field());
  const auto& params = pre_field.params;
  const auto& grid = pre_field.grid;
  const auto pre = load_points(layout_.pre_points());
  const auto sft = load_points(layout_.sft_points());
  const auto verdicts = read_verdicts(layout_.verdicts());
  const auto rewritten = read_sft(layout_.rewritten());
  const auto combined = read_sft(layout_.combined());
  const auto model = load_pca_model(layout_.pca_model());

  const auto pre_by_id = point_index(pre);
  std::vector<Point2> diff_xy;
  for (const auto& v : verdicts) {
    if (v.selected) diff_xy.push_back(pre_by_id.at(v.id));
  }

  EmbeddingMatrix rw;
  rw.dim = model.mean.size();
  rw.model_tag = cfg_.embedding.model_name;
  if (!rewritten.empty() && cfg_.embedding.kind != ProviderKind::file_only) {
    std::vector<std::string> ids, texts;
    for (const auto& p : rewritten) {
      ids.push_back(p.id);
      texts.push_back(sft_to_text(p));
    }
    rw = embed_records(ids, texts, cfg_.embedding);
  } else if (!rewritten.empty()) {
    logger()->warn("viz: file_only embeddings cannot cover rewritten pairs; their panels stay empty");
  }
  fs::create_directories(layout_.rewritten_embeddings().parent_path());
  save_embeddings(rw, layout_.rewritten_embeddings());
  const auto rw_pts = rw.rows() > 0 ? pca_transform(model, rw) : std::vector<ProjectedPoint>{};
  const auto rw_by_id = point_index(rw_pts);
  const auto sft_by_id = point_index(sft);

  std::vector<Point2> rw_xy = to_points(rw_pts);
  std::vector<Point2> combined_xy;
  for (const auto& p : combined) {
    const auto& index = p.source == PairSource::rewritten ? rw_by_id : sft_by_id;
    if (auto it = index.find(p.id); it != index.end()) combined_xy.push_back(it->second);
  }

  auto panel = [&](DensityField overlay, std::string title) {
    OverlaySpec spec;
    spec.base = pre_field;
    spec.overlay = std::move(overlay);
    spec.title = std::move(title);
    return spec;
  };
  const auto overlay = panel(sft_field, "SFT over pre-training corpus");
  render_overlay_svg(overlay, layout_.overlay_svg());
  const std::vector<OverlaySpec> panels = {
      panel(sft_field, "SFT"),
      panel(field_or_zero(diff_xy, params, grid, "diffset"), "Difference set"),
      panel(field_or_zero(rw_xy, params, grid, "rewritten"), "Rewritten set"),
      panel(field_or_zero(combined_xy, params, grid, "combined"), "Combined"),
  };
  render_panel_grid(panels, cfg_.viz.columns, layout_.panels_svg());
  return {{"panels", panels.size()},
          {"diffset_points", diff_xy.size()},
          {"rewritten_points", rw_xy.size()},
          {"combined_points", combined_xy.size()}};
}

// ---------------------------------------------------------------------------
// Exit codes

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const MissingArtifactError*>(&e) ||
      dynamic_cast<const FormatError*>(&e) || dynamic_cast<const IoError*>(&e) ||
      dynamic_cast<const TransportError*>(&e)) {
    return 1;
  }
  return 2;
}

}  // namespace gapfill
