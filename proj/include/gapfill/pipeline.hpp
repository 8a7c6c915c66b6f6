#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "gapfill/diffset.hpp"
#include "gapfill/embedding.hpp"
#include "gapfill/merge.hpp"
#include "gapfill/records.hpp"
#include "gapfill/rewrite.hpp"

namespace gapfill {

inline constexpr std::string_view kToolVersion = "0.1.0";

enum class Stage { sample, embed, project, density, diffset, rewrite, merge, viz };

inline constexpr std::array<Stage, 8> kAllStages = {Stage::sample,  Stage::embed,   Stage::project,
                                                    Stage::density, Stage::diffset, Stage::rewrite,
                                                    Stage::merge,   Stage::viz};

std::string_view to_string(Stage s);
std::optional<Stage> parse_stage(std::string_view s);
/// Stages whose outputs `s` reads.
std::vector<Stage> stage_dependencies(Stage s);

struct VizConfig {
  std::size_t grid_nx = 64;
  std::size_t grid_ny = 64;
  double padding = 0.1;
  std::size_t columns = 4;
};

struct PipelineConfig {
  std::filesystem::path corpus_path;
  std::filesystem::path sft_path;
  SchemaMap corpus_schema;
  SchemaMap sft_schema;
  std::size_t reservoir_k = 10000;
  std::uint64_t seed = 0;
  EmbeddingProviderConfig embedding;
  DiffsetConfig diffset;
  GenClientConfig generation;
  FilterPolicy filter;
  MergePlan merge;
  VizConfig viz;
  std::filesystem::path workdir;

  /// Relative paths resolve against `base_dir`. Throws ConfigError.
  static PipelineConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
  static PipelineConfig load(const std::filesystem::path& path);

  /// Throws ConfigError when a value is out of range or an input path does
  /// not exist.
  void validate() const;

  /// The settings stage `s` depends on, as canonical JSON.
  nlohmann::json stage_settings(Stage s) const;
};

/// Artifact locations under the workdir.
struct Layout {
  std::filesystem::path root;

  std::filesystem::path manifest() const { return root / "manifest.json"; }
  std::filesystem::path lock() const { return root / ".lock"; }
  std::filesystem::path corpus_sample() const { return root / "sample" / "corpus.jsonl"; }
  std::filesystem::path sft() const { return root / "sample" / "sft.jsonl"; }
  std::filesystem::path pre_embeddings() const { return root / "embed" / "pre.emb"; }
  std::filesystem::path sft_embeddings() const { return root / "embed" / "sft.emb"; }
  std::filesystem::path pca_model() const { return root / "project" / "pca.json"; }
  std::filesystem::path pre_points() const { return root / "project" / "pre_points.jsonl"; }
  std::filesystem::path sft_points() const { return root / "project" / "sft_points.jsonl"; }
  std::filesystem::path density_dir() const { return root / "density"; }
  std::filesystem::path pre_field() const { return density_dir() / "pre.json"; }
  std::filesystem::path sft_field() const { return density_dir() / "sft.json"; }
  std::filesystem::path verdicts() const { return root / "diffset" / "verdicts.jsonl"; }
  std::filesystem::path diffset() const { return root / "diffset" / "diffset.jsonl"; }
  std::filesystem::path rewritten() const { return root / "rewrite" / "rewritten.jsonl"; }
  std::filesystem::path rewrite_report() const { return root / "rewrite" / "report.json"; }
  std::filesystem::path response_cache() const { return root / "cache" / "responses"; }
  std::filesystem::path combined() const { return root / "merge" / "combined.jsonl"; }
  std::filesystem::path merge_manifest() const { return root / "merge" / "manifest.json"; }
  std::filesystem::path rewritten_embeddings() const { return root / "viz" / "rewritten.emb"; }
  std::filesystem::path overlay_svg() const { return root / "viz" / "overlay.svg"; }
  std::filesystem::path panels_svg() const { return root / "viz" / "panels.svg"; }

  std::vector<std::filesystem::path> outputs(Stage s) const;
};

struct StageRecord {
  std::map<std::string, std::string> inputs;   // name -> sha256
  std::map<std::string, std::string> outputs;  // workdir-relative path -> sha256
  std::string completed_at;
  std::string tool_version;
  nlohmann::json summary;
};

/// `<workdir>/manifest.json`: one record per completed stage.
struct RunManifest {
  std::map<std::string, StageRecord> stages;

  static RunManifest load(const std::filesystem::path& path);  // empty when absent
  void save(const std::filesystem::path& path) const;
};

struct StageOutcome {
  Stage stage;
  bool executed = false;
};

struct RunOptions {
  bool force = false;
  std::optional<Stage> stop_after;
};

/// Runs stages against one workdir, holding its lock for the object's
/// lifetime.
class Pipeline {
 public:
  explicit Pipeline(PipelineConfig cfg);
  ~Pipeline();
  Pipeline(const Pipeline&) = delete;
  Pipeline& operator=(const Pipeline&) = delete;

  /// Executes `s` when forced or stale, otherwise leaves its outputs alone.
  /// Throws MissingArtifactError when an upstream output is absent.
  StageOutcome run_stage(Stage s, bool force);

  /// All stages in order. A stage also runs when one of its dependencies ran
  /// in this invocation.
  std::vector<StageOutcome> run(const RunOptions& opts);

  const Layout& layout() const { return layout_; }

 private:
  std::map<std::string, std::string> input_hashes(Stage s) const;
  bool is_fresh(Stage s, const std::map<std::string, std::string>& inputs) const;
  nlohmann::json execute(Stage s);

  nlohmann::json do_sample();
  nlohmann::json do_embed();
  nlohmann::json do_project();
  nlohmann::json do_density();
  nlohmann::json do_diffset();
  nlohmann::json do_rewrite();
  nlohmann::json do_merge();
  nlohmann::json do_viz();

  PipelineConfig cfg_;
  Layout layout_;
  RunManifest manifest_;
  int lock_fd_ = -1;
};

/// Process exit code for an exception escaping a command: 1 for user errors
/// (configuration, missing artifacts, bad input files, unreachable
/// endpoints), 2 otherwise.
int exit_code_for(const std::exception& e);

/// Entry point of the `gapfill` executable.
int cli_main(int argc, char** argv);

}  // namespace gapfill
