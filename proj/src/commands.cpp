#include "dualprompt/commands.hpp"

#include <fstream>

#include <fmt/format.h>
#include <fmt/ostream.h>

namespace dualprompt {

namespace {

std::filesystem::path prepare_out(const RunConfig& config) {
  std::filesystem::create_directories(config.out_dir);
  return config.out_dir;
}

void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error(fmt::format("write failed for '{}'", path.string()));
}

std::string format_summary(const std::optional<Summary>& s) {
  if (!s) return "undefined";
  return fmt::format("{:.4f} +- {:.4f} (n={})", s->mean, s->std, s->n);
}

struct Loaded {
  EventStream stream;
  NeighborIndex index;
  SplitIndices split;
  Checkpoint checkpoint;
};

Loaded load_for_tuning(const RunConfig& config) {
  Loaded l{load_dataset(config), {}, {}, load_checkpoint(config.checkpoint_path())};
  l.index = build_neighbor_index(l.stream);
  l.split = chronological_split(l.stream.size());
  const EncoderConfig& c = l.checkpoint.config;
  if (c.d_x != l.stream.d_x() || c.d_e != l.stream.d_e) {
    throw std::runtime_error(fmt::format(
        "checkpoint expects d_x={} d_e={}, dataset has d_x={} d_e={}", c.d_x, c.d_e,
        l.stream.d_x(), l.stream.d_e));
  }
  return l;
}

nlohmann::json report_config(const RunConfig& config, const Checkpoint& checkpoint) {
  nlohmann::json j = config.to_json();
  j["encoder"] = checkpoint.config;
  return j;
}

ProgressFn progress_to(std::ostream& log) {
  return [&log](const std::string& line) { log << line << '\n' << std::flush; };
}

}  // namespace

EventStream load_dataset(const RunConfig& config) {
  if (config.source == DataSource::synthetic) return generate_synthetic(config.synth).stream;
  EventStream s = load_jodie_csv(config.data_path, config.d_x);
  if (!config.node_features.empty()) load_node_features(s, config.node_features);
  return s;
}

EncoderConfig encoder_for(const RunConfig& config, const EventStream& stream) {
  EncoderConfig c = config.pretrain.encoder;
  c.d_x = stream.d_x();
  c.d_e = stream.d_e;
  return c;
}

void cmd_synth(const RunConfig& config, std::ostream& out) {
  const SynthStream syn = generate_synthetic(config.synth);
  const auto dir = prepare_out(config);
  save_jodie_csv(syn.stream, dir / "dataset.csv");
  save_node_features(syn.stream, dir / "node_features.csv");
  std::size_t positives = 0;
  for (const Event& e : syn.stream.events) positives += e.state_label.value_or(0) == 1;
  fmt::print(out, "events {}  users {}  items {}  label-1 events {}  time span {:.2f}\n",
             syn.stream.size(), syn.stream.num_users, syn.stream.num_nodes - syn.stream.num_users,
             positives, syn.stream.time_span());
  fmt::print(out, "wrote {} and {}\n", (dir / "dataset.csv").string(),
             (dir / "node_features.csv").string());
}

void cmd_pretrain(const RunConfig& config, std::ostream& out) {
  const EventStream stream = load_dataset(config);
  const NeighborIndex index = build_neighbor_index(stream);
  const SplitIndices split = chronological_split(stream.size());
  PretrainConfig pc = config.pretrain;
  pc.encoder = encoder_for(config, stream);

  const auto dir = prepare_out(config);
  std::ofstream log(dir / "pretrain_log.jsonl");
  if (!log) throw std::runtime_error("cannot write pretrain_log.jsonl");
  const PretrainResult result = run_pretraining(stream, index, split, pc, [&](const EpochLog& e) {
    fmt::print(out, "epoch {:3d}  loss {:.6f}  {:.0f} ms\n", e.epoch, e.mean_loss, e.wall_ms);
    out.flush();
    log << nlohmann::json{{"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"wall_ms", e.wall_ms}}.dump()
        << '\n';
    log.flush();
  });
  save_checkpoint(result.checkpoint, dir / "checkpoint.json");
  fmt::print(out, "wrote {}\n", (dir / "checkpoint.json").string());
}

void cmd_tune_eval(const RunConfig& config, std::ostream& out, std::ostream& log) {
  const Loaded l = load_for_tuning(config);
  const TuneContext ctx{l.stream, l.index, l.checkpoint};
  const AblationReport report = run_ablation(ctx, l.split, config.protocol, config.prompt,
                                             {AblationFlags::all()}, progress_to(log));
  const auto dir = prepare_out(config);
  write_json(report_json(report, report_config(config, l.checkpoint)), dir / "report.json");
  write_report_csv(report, dir / "report.csv");
  for (const ModeSummary& m : report.variants.front().summaries) {
    fmt::print(out, "{:<22} AUC {}  excluded {}\n", to_string(m.mode), format_summary(m.summary),
               m.excluded);
  }

  if (config.write_embeddings && config.protocol.node_classification) {
    // Embeddings of the first task's query nodes under its tuned prompts.
    const StreamContext sctx{l.stream, l.index, l.split};
    const Task task =
        sample_protocol_task(sctx, config.protocol, 0, TaskMode::node_classification);
    PromptConfig pc = config.prompt;
    pc.flags = AblationFlags::all();
    pc.seed = derive_seed(config.protocol.seed, 0, 0);
    const TuneResult tuned = tune_prompts(ctx, task, pc);
    write_embeddings_csv(ctx, tuned.state, task.query_nodes, dir / "embeddings.csv");
    save_prompt_state(tuned.state, dir / "prompts_task0.json");
  }
  fmt::print(out, "wrote {}\n", (dir / "report.json").string());
}

void cmd_ablate(const RunConfig& config, std::ostream& out, std::ostream& log) {
  const Loaded l = load_for_tuning(config);
  const TuneContext ctx{l.stream, l.index, l.checkpoint};
  const AblationReport report = run_ablation(ctx, l.split, config.protocol, config.prompt,
                                             ablation_variants(), progress_to(log));
  const auto dir = prepare_out(config);
  write_json(report_json(report, report_config(config, l.checkpoint)), dir / "ablation.json");
  write_report_csv(report, dir / "ablation.csv");

  fmt::print(out, "{:<16} {:>9}", "variant", "trainable");
  for (const ModeSummary& m : report.variants.front().summaries)
    fmt::print(out, "  {:>32}", to_string(m.mode));
  fmt::print(out, "\n");
  for (const VariantReport& v : report.variants) {
    fmt::print(out, "{:<16} {:>9}", v.flags.label(), v.trainable);
    for (const ModeSummary& m : v.summaries) fmt::print(out, "  {:>32}", format_summary(m.summary));
    fmt::print(out, "\n");
  }
  fmt::print(out, "wrote {}\n", (dir / "ablation.json").string());
}

int run_command(Command command, const RunConfig& config, std::ostream& out, std::ostream& err) {
  try {
    config.validate(command);
  } catch (const ConfigError& e) {
    fmt::print(err, "config error: {}\n", e.what());
    return kExitConfig;
  }
  try {
    switch (command) {
      case Command::synth: cmd_synth(config, out); break;
      case Command::pretrain: cmd_pretrain(config, out); break;
      case Command::tune_eval: cmd_tune_eval(config, out, err); break;
      case Command::ablate: cmd_ablate(config, out, err); break;
    }
  } catch (const std::exception& e) {
    fmt::print(err, "error: {}\n", e.what());
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace dualprompt
