#include <malloc.h>

#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "dualprompt/commands.hpp"

using namespace dualprompt;

int main(int argc, char** argv) {
  // The autodiff tape allocates and frees many mid-sized blocks per step; keep
  // them on the heap instead of round-tripping through mmap.
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);

  CLI::App app{"Pre-training and dual prompt tuning for continuous-time dynamic graphs"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::string> out_dir;
  std::optional<std::size_t> jobs;
  std::optional<std::uint64_t> seed;

  struct Sub {
    const char* name;
    const char* help;
    Command command;
  };
  const Sub subs[] = {
      {"synth", "Write a synthetic stream with planted node-time patterns", Command::synth},
      {"pretrain", "Pre-train the backbone on temporal link prediction", Command::pretrain},
      {"tune-eval", "Tune prompts per few-shot task and evaluate", Command::tune_eval},
      {"ablate", "Run the ablation over prompt and condition-net variants", Command::ablate},
  };
  std::optional<Command> chosen;
  for (const Sub& s : subs) {
    CLI::App* sub = app.add_subcommand(s.name, s.help);
    sub->add_option("--config", config_path, "Run configuration file")->required();
    sub->add_option("--out", out_dir, "Output directory (overrides output.dir)");
    sub->add_option("--jobs", jobs, "Worker threads (overrides protocol.jobs)");
    sub->add_option("--seed", seed, "Global seed (overrides run.seed)");
    const Command c = s.command;
    sub->callback([&chosen, c] { chosen = c; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  RunConfig config;
  try {
    config = load_run_config(config_path);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  if (out_dir) {
    if (out_dir->empty()) {
      std::cerr << "config error: --out: must not be empty\n";
      return kExitConfig;
    }
    config.out_dir = *out_dir;
  }
  if (jobs) config.protocol.jobs = *jobs;
  if (seed) config.set_seed(*seed);
  return run_command(*chosen, config, std::cout, std::cerr);
}
