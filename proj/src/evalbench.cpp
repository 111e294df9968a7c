#include "dualprompt/evalbench.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

#include <fmt/format.h>

namespace dualprompt {

namespace {

double elapsed_ms(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

nlohmann::json flags_json(const AblationFlags& f) {
  return {{"node_prompt", f.node_prompt}, {"time_prompt", f.time_prompt}, {"ncn", f.ncn},
          {"tcn", f.tcn}};
}

}  // namespace

std::string to_string(EvalMode mode) {
  switch (mode) {
    case EvalMode::node_classification: return "node_classification";
    case EvalMode::link_transductive: return "link_transductive";
    case EvalMode::link_inductive: return "link_inductive";
  }
  return "unknown";
}

TaskResult run_node_classification(const TuneContext& ctx, const PromptState& state,
                                   const Task& task, const PromptConfig& config) {
  const auto start = std::chrono::steady_clock::now();
  TaskResult r;
  r.mode = EvalMode::node_classification;
  // Queries whose label never occurs in the support set cannot be scored.
  std::vector<NodeInstance> queries;
  std::vector<std::size_t> targets;
  for (const NodeInstance& q : task.query_nodes) {
    auto it = std::find(task.classes.begin(), task.classes.end(), q.label);
    if (it == task.classes.end()) continue;
    queries.push_back(q);
    targets.push_back(static_cast<std::size_t>(it - task.classes.begin()));
  }
  r.n_queries = queries.size();
  if (!queries.empty() && task.classes.size() >= 2) {
    const Matrix probs =
        score_nodes(ctx, state, task.support_nodes, task.classes, queries, config);
    r.auc = class_auc(probs, targets);
  }
  r.wall_ms = elapsed_ms(start);
  return r;
}

TaskResult run_link_prediction(const TuneContext& ctx, const PromptState& state, const Task& task,
                               LinkSetting setting, const PromptConfig& config) {
  const auto start = std::chrono::steady_clock::now();
  TaskResult r;
  r.mode = setting == LinkSetting::transductive ? EvalMode::link_transductive
                                                : EvalMode::link_inductive;
  const std::vector<PairInstance>& pairs =
      setting == LinkSetting::transductive ? task.query_pairs : task.inductive_pairs;
  r.n_queries = pairs.size();
  if (!pairs.empty()) {
    const std::vector<double> scores = score_pairs(ctx, state, pairs, config);
    std::vector<int> labels;
    labels.reserve(pairs.size());
    for (const auto& p : pairs) labels.push_back(p.label);
    r.auc = auc_from_labels(scores, labels);
  }
  r.wall_ms = elapsed_ms(start);
  return r;
}

void ProtocolConfig::validate() const {
  if (tasks < 1) throw std::invalid_argument("protocol.tasks: must be >= 1");
  if (seeds < 1) throw std::invalid_argument("protocol.seeds: must be >= 1");
  if (jobs < 1) throw std::invalid_argument("protocol.jobs: must be >= 1");
  if (!node_classification && !link_prediction)
    throw std::invalid_argument("protocol.mode: select node classification, link prediction or both");
  if (sampler.shots < 1) throw std::invalid_argument("protocol.shots: must be >= 1");
}

std::uint64_t derive_seed(std::uint64_t seed, std::size_t task_index, std::size_t seed_index) {
  return seed + static_cast<std::uint64_t>(task_index) * 10007u + seed_index;
}

Task sample_protocol_task(const StreamContext& ctx, const ProtocolConfig& protocol,
                          std::size_t task_index, TaskMode mode) {
  const std::uint64_t base = derive_seed(protocol.seed, task_index, 0);
  std::seed_seq seq{base, std::uint64_t{mode == TaskMode::node_classification ? 0u : 1u}};
  Rng rng(seq);
  return sample_task(ctx, mode, rng, protocol.sampler);
}

std::vector<ModeSummary> summarize(const std::vector<TaskResult>& results) {
  std::vector<ModeSummary> out;
  for (EvalMode mode : {EvalMode::node_classification, EvalMode::link_transductive,
                        EvalMode::link_inductive}) {
    std::vector<double> aucs;
    std::size_t excluded = 0;
    bool seen = false;
    for (const TaskResult& r : results) {
      if (r.mode != mode) continue;
      seen = true;
      if (r.auc) aucs.push_back(*r.auc);
      else ++excluded;
    }
    if (!seen) continue;
    ModeSummary m;
    m.mode = mode;
    m.excluded = excluded;
    if (!aucs.empty()) m.summary = aggregate(aucs);
    out.push_back(m);
  }
  return out;
}

AblationReport run_ablation(const TuneContext& ctx, const SplitIndices& split,
                            const ProtocolConfig& protocol, const PromptConfig& prompt,
                            const std::vector<AblationFlags>& variants,
                            const ProgressFn& progress) {
  protocol.validate();
  prompt.validate();
  if (variants.empty()) throw std::invalid_argument("run_ablation: no variants");

  const StreamContext sctx{ctx.stream, ctx.index, split};
  std::vector<Task> nc_tasks, lp_tasks;
  for (std::size_t ti = 0; ti < protocol.tasks; ++ti) {
    if (protocol.node_classification)
      nc_tasks.push_back(sample_protocol_task(sctx, protocol, ti, TaskMode::node_classification));
    if (protocol.link_prediction)
      lp_tasks.push_back(sample_protocol_task(sctx, protocol, ti, TaskMode::link_prediction));
  }

  struct Unit {
    std::size_t variant, task, seed_index;
  };
  std::vector<Unit> units;
  for (std::size_t v = 0; v < variants.size(); ++v)
    for (std::size_t ti = 0; ti < protocol.tasks; ++ti)
      for (std::size_t si = 0; si < protocol.seeds; ++si) units.push_back({v, ti, si});

  std::vector<std::vector<TaskResult>> unit_results(units.size());
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> done{0};
  std::mutex mu;
  std::exception_ptr failure;

  auto run_unit = [&](const Unit& u) {
    PromptConfig cfg = prompt;
    cfg.flags = variants[u.variant];
    cfg.seed = derive_seed(protocol.seed, u.task, u.seed_index);
    std::vector<TaskResult> out;
    auto stamp = [&](TaskResult r, std::size_t epochs, double tune_ms) {
      r.task_id = u.task;
      r.seed_index = u.seed_index;
      r.seed = cfg.seed;
      r.epochs_run = epochs;
      r.wall_ms += tune_ms;
      out.push_back(r);
    };
    if (protocol.node_classification) {
      const auto start = std::chrono::steady_clock::now();
      const TuneResult tuned = tune_prompts(ctx, nc_tasks[u.task], cfg);
      const double ms = elapsed_ms(start);
      stamp(run_node_classification(ctx, tuned.state, nc_tasks[u.task], cfg), tuned.epochs_run, ms);
    }
    if (protocol.link_prediction) {
      const auto start = std::chrono::steady_clock::now();
      const TuneResult tuned = tune_prompts(ctx, lp_tasks[u.task], cfg);
      const double ms = elapsed_ms(start);
      stamp(run_link_prediction(ctx, tuned.state, lp_tasks[u.task], LinkSetting::transductive, cfg),
            tuned.epochs_run, ms);
      stamp(run_link_prediction(ctx, tuned.state, lp_tasks[u.task], LinkSetting::inductive, cfg),
            tuned.epochs_run, 0.0);
    }
    return out;
  };

  auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= units.size()) return;
      {
        std::lock_guard lock(mu);
        if (failure) return;
      }
      try {
        unit_results[i] = run_unit(units[i]);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
        return;
      }
      const std::size_t n = done.fetch_add(1) + 1;
      if (progress) {
        std::lock_guard lock(mu);
        const Unit& u = units[i];
        progress(fmt::format("[{}/{}] variant={} task={} seed={}", n, units.size(),
                             variants[u.variant].label(), u.task, u.seed_index));
      }
    }
  };

  const std::size_t threads = std::min(protocol.jobs, units.size());
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < threads; ++k) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);

  AblationReport report;
  for (std::size_t v = 0; v < variants.size(); ++v) {
    VariantReport vr;
    vr.flags = variants[v];
    PromptConfig cfg = prompt;
    cfg.flags = variants[v];
    Rng rng(0);
    vr.trainable =
        count_trainable(init_prompt_state(ctx.stream.d_x(), ctx.checkpoint.config.d_t, cfg, rng)).total;
    for (std::size_t i = 0; i < units.size(); ++i) {
      if (units[i].variant != v) continue;
      vr.results.insert(vr.results.end(), unit_results[i].begin(), unit_results[i].end());
    }
    vr.summaries = summarize(vr.results);
    report.variants.push_back(std::move(vr));
  }
  return report;
}

nlohmann::json report_json(const AblationReport& report, const nlohmann::json& config) {
  nlohmann::json variants = nlohmann::json::array();
  for (const VariantReport& v : report.variants) {
    nlohmann::json modes = nlohmann::json::object();
    for (const ModeSummary& m : v.summaries) {
      nlohmann::json s;
      if (m.summary) {
        s["mean"] = m.summary->mean;
        s["std"] = m.summary->std;
        s["n"] = m.summary->n;
      } else {
        s["mean"] = nullptr;
        s["std"] = nullptr;
        s["n"] = 0;
      }
      s["excluded"] = m.excluded;
      modes[to_string(m.mode)] = s;
    }
    variants.push_back({{"label", v.flags.label()},
                        {"flags", flags_json(v.flags)},
                        {"trainable_parameters", v.trainable},
                        {"modes", modes}});
  }
  return {{"config", config}, {"per_variant", variants}};
}

void write_report_csv(const AblationReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  out << "variant,node_prompt,time_prompt,ncn,tcn,task,seed_index,seed,mode,auc,n_queries,epochs\n";
  for (const VariantReport& v : report.variants) {
    for (const TaskResult& r : v.results) {
      out << fmt::format("{},{:d},{:d},{:d},{:d},{},{},{},{},{},{},{}\n", v.flags.label(),
                         v.flags.node_prompt, v.flags.time_prompt, v.flags.ncn, v.flags.tcn,
                         r.task_id, r.seed_index, r.seed, to_string(r.mode),
                         r.auc ? fmt::format("{}", *r.auc) : std::string("undefined"),
                         r.n_queries, r.epochs_run);
    }
  }
  if (!out) throw std::runtime_error(fmt::format("write failed for '{}'", path.string()));
}

void write_embeddings_csv(const TuneContext& ctx, const PromptState& state,
                          const std::vector<NodeInstance>& nodes, const std::filesystem::path& path) {
  std::vector<NodeQuery> queries;
  queries.reserve(nodes.size());
  for (const auto& n : nodes) queries.push_back({n.node, n.t});
  const Matrix h = embed_nodes(ctx, state, queries);
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  out << "node,label";
  for (std::size_t j = 0; j < h.cols(); ++j) out << ",dim" << j;
  out << '\n';
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    out << nodes[i].node << ',' << nodes[i].label;
    for (std::size_t j = 0; j < h.cols(); ++j) out << ',' << fmt::format("{}", h(i, j));
    out << '\n';
  }
  if (!out) throw std::runtime_error(fmt::format("write failed for '{}'", path.string()));
}

}  // namespace dualprompt
