#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <map>

#include "iplm/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"iplm: data preparation, alignment kernels, evaluation and cost tooling"};
  app.require_subcommand(1);
  app.set_version_flag("--version", iplm::pipeline::kToolVersion);

  iplm::pipeline::RunOptions opt;
  std::uint64_t seed = 0;
  std::string preset;
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace|debug|info|warn|error")->capture_default_str();

  const std::map<std::string, std::string> help = {
      {"preprocess", "filter, deduplicate and rewrite-upsample documents"},
      {"synthesize", "build wrapper concatenations and X-file pair samples"},
      {"tokenize", "train base and learned BPE vocabularies and merge them"},
      {"schedule", "sample, pack and write the two training stages"},
      {"verify-kernels", "gradient-check the SFT, ranking and PPO kernels"},
      {"evaluate", "score predictions and optionally run the pairwise judge"},
      {"cost", "KV-cache memory and first-token latency curves"},
      {"all", "every stage in order"}};
  for (const auto& name : iplm::pipeline::subcommands()) {
    auto* sub = app.add_subcommand(name, help.count(name) ? help.at(name) : "");
    sub->add_option("--config", opt.config, "pipeline config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "override the config seed");
    if (name == "cost" || name == "all") sub->add_option("--preset", preset, "single cost preset to evaluate");
    sub->callback([&opt, name] { opt.subcommand = name; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  auto logger = spdlog::stderr_color_mt("iplm");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::from_str(log_level));

  if (app.got_subcommand(opt.subcommand)) {
    auto* sub = app.get_subcommand(opt.subcommand);
    if (sub->count("--seed")) opt.seed = seed;
    if (sub->get_option_no_throw("--preset") && sub->count("--preset")) opt.preset = preset;
  }
  return iplm::pipeline::run(opt);
}
