#include <CLI11.hpp>

#include "gapfill/corpus_io.hpp"
#include "gapfill/error.hpp"
#include "gapfill/log.hpp"
#include "gapfill/pipeline.hpp"

namespace gapfill {

namespace fs = std::filesystem;

namespace {

struct Flags {
  std::string config;
  std::string workdir;
  bool force = false;
  std::string stage;
  std::uint64_t seed = 0;
  float tau = 0.0f;
  std::string criterion;
  float ratio = 0.0f;

  CLI::Option* workdir_opt = nullptr;
  CLI::Option* stage_opt = nullptr;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* tau_opt = nullptr;
  CLI::Option* criterion_opt = nullptr;
  CLI::Option* ratio_opt = nullptr;
};

void add_flags(CLI::App* cmd, Flags& f, bool with_stage) {
  cmd->add_option("--config", f.config, "Pipeline config (JSON)")->required();
  f.workdir_opt = cmd->add_option("--workdir", f.workdir, "Override the config's workdir");
  cmd->add_flag("--force", f.force, "Rerun even when outputs are up to date");
  if (with_stage) f.stage_opt = cmd->add_option("--stage", f.stage, "Stop after this stage");
  f.seed_opt = cmd->add_option("--seed", f.seed, "Override the sampling and merge seed");
  f.tau_opt = cmd->add_option("--tau", f.tau, "Override the difference-set threshold");
  f.criterion_opt = cmd->add_option("--criterion", f.criterion, "threshold or ratio")
                        ->check(CLI::IsMember({"threshold", "ratio"}));
  f.ratio_opt = cmd->add_option("--ratio", f.ratio, "Override the rewritten-to-SFT ratio");
}

PipelineConfig load_config(const Flags& f) {
  const fs::path path(f.config);
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  auto doc = nlohmann::json::parse(read_file(path), nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) throw ConfigError("config is not a JSON object: " + f.config);
  if (f.seed_opt->count()) doc["seed"] = f.seed;
  if (f.tau_opt->count()) doc["diffset"]["tau"] = f.tau;
  if (f.criterion_opt->count()) doc["diffset"]["criterion"] = f.criterion;
  if (f.ratio_opt->count()) doc["merge"]["ratio"] = f.ratio;
  auto cfg = PipelineConfig::from_json(doc, fs::absolute(path).parent_path());
  if (f.workdir_opt->count()) cfg.workdir = fs::absolute(f.workdir);
  cfg.validate();
  return cfg;
}

}  // namespace

int cli_main(int argc, char** argv) {
  CLI::App app{"Difference-set extraction, rewriting and merging for instruction tuning data"};
  app.name("gapfill");
  app.require_subcommand(1, 1);

  Flags flags;
  std::vector<std::pair<CLI::App*, std::optional<Stage>>> commands;
  for (auto s : kAllStages) {
    auto* cmd = app.add_subcommand(std::string(to_string(s)), "Run the " + std::string(to_string(s)) + " stage");
    add_flags(cmd, flags, false);
    commands.emplace_back(cmd, s);
  }
  auto* run_cmd = app.add_subcommand("run", "Run every stage, skipping those already up to date");
  add_flags(run_cmd, flags, true);
  commands.emplace_back(run_cmd, std::nullopt);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    for (const auto& [cmd, stage] : commands) {
      if (!cmd->parsed()) continue;
      Pipeline pipeline(load_config(flags));
      if (stage) {
        pipeline.run_stage(*stage, flags.force);
      } else {
        RunOptions opts;
        opts.force = flags.force;
        if (flags.stage_opt->count()) {
          opts.stop_after = parse_stage(flags.stage);
          if (!opts.stop_after) throw ConfigError("unknown stage '" + flags.stage + "'");
        }
        pipeline.run(opts);
      }
    }
    return 0;
  } catch (const std::exception& e) {
    logger()->error("{}", e.what());
    return exit_code_for(e);
  }
}

}  // namespace gapfill
