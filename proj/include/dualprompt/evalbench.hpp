#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dualprompt/metrics.hpp"
#include "dualprompt/prompts.hpp"

namespace dualprompt {

// ---------------------------------------------------------------------------
// Synthetic streams with planted node-time patterns

struct SynthConfig {
  std::size_t n_users = 100;
  std::size_t n_items = 20;
  std::size_t n_events = 20000;
  double period = 100.0;
  std::size_t archetypes = 2;
  double noise = 0.1;          // label flip rate
  double mean_gap = 0.5;       // mean inter-event time
  double item_affinity = 0.8;  // chance an event follows the planted item group
  std::size_t d_x = 16;
  double feature_noise = 0.5;  // std of the Gaussian noise on node features
  std::uint64_t seed = 0;

  void validate() const;
};

/// Phase in [0, 1) of time t.
double synth_phase(double t, double period);

/// Clean label rule: 1 iff archetype 1 and phase in the second half-cycle.
int synth_label(std::size_t archetype, double phase);

/// Item group planted for (archetype, half-cycle); groups partition the items.
std::size_t synth_group(std::size_t archetype, bool second_half, std::size_t archetypes);

struct SynthStream {
  EventStream stream;
  std::vector<std::size_t> archetype;  // per user
  std::vector<std::size_t> item_group; // per item (index = item id - n_users)
};

/// Deterministic for a fixed seed. Users are ids [0, n_users), items follow.
SynthStream generate_synthetic(const SynthConfig& config);

// ---------------------------------------------------------------------------
// Task runners

enum class EvalMode { node_classification, link_transductive, link_inductive };
std::string to_string(EvalMode mode);

struct TaskResult {
  std::size_t task_id = 0;
  std::size_t seed_index = 0;
  std::uint64_t seed = 0;
  EvalMode mode = EvalMode::node_classification;
  std::optional<double> auc;  // nullopt: undefined, excluded from aggregation
  std::size_t n_queries = 0;
  double wall_ms = 0.0;
  std::size_t epochs_run = 0;
};

/// Softmax probability of each class from prototype similarity; AUC over the
/// query labels (macro one-vs-rest beyond two classes).
TaskResult run_node_classification(const TuneContext& ctx, const PromptState& state,
                                   const Task& task, const PromptConfig& config);

/// AUC of sim(h_src, h_dst) over positive vs negative query pairs.
TaskResult run_link_prediction(const TuneContext& ctx, const PromptState& state, const Task& task,
                               LinkSetting setting, const PromptConfig& config);

// ---------------------------------------------------------------------------
// Protocol and ablation

struct ProtocolConfig {
  std::size_t tasks = 20;
  std::size_t seeds = 3;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  bool node_classification = true;
  bool link_prediction = false;
  TaskSamplerConfig sampler;

  void validate() const;
};

/// seed + task_index * 10007 + seed_index.
std::uint64_t derive_seed(std::uint64_t seed, std::size_t task_index, std::size_t seed_index);

/// Task `task_index` of the protocol; every variant and seed sees the same one.
Task sample_protocol_task(const StreamContext& ctx, const ProtocolConfig& protocol,
                          std::size_t task_index, TaskMode mode);

struct ModeSummary {
  EvalMode mode = EvalMode::node_classification;
  std::optional<Summary> summary;  // nullopt when every task was undefined
  std::size_t excluded = 0;
};

struct VariantReport {
  AblationFlags flags;
  std::size_t trainable = 0;
  std::vector<TaskResult> results;  // (task, seed, mode) order
  std::vector<ModeSummary> summaries;
};

struct AblationReport {
  std::vector<VariantReport> variants;
};

using ProgressFn = std::function<void(const std::string&)>;

/// Samples tasks once, then tunes and evaluates every variant on the same
/// tasks and seeds. Work is spread over `protocol.jobs` threads; results are
/// ordered deterministically.
AblationReport run_ablation(const TuneContext& ctx, const SplitIndices& split,
                            const ProtocolConfig& protocol, const PromptConfig& prompt,
                            const std::vector<AblationFlags>& variants,
                            const ProgressFn& progress = {});

std::vector<ModeSummary> summarize(const std::vector<TaskResult>& results);

nlohmann::json report_json(const AblationReport& report, const nlohmann::json& config);
void write_report_csv(const AblationReport& report, const std::filesystem::path& path);

/// CSV `node,label,dim0..dim{d_h-1}`, one row per instance.
void write_embeddings_csv(const TuneContext& ctx, const PromptState& state,
                          const std::vector<NodeInstance>& nodes, const std::filesystem::path& path);

}  // namespace dualprompt
