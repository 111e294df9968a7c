#include "dualprompt/prompts.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include <fmt/format.h>

#include "dualprompt/metrics.hpp"

namespace dualprompt {

namespace {

constexpr std::size_t kEvalChunk = 64;

const std::string kW1 = "w1", kB1 = "b1", kW2 = "w2", kB2 = "b2";

Matrix uniform_matrix(std::size_t rows, std::size_t cols, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = dist(rng);
  return m;
}

void add_condition_net(ParamRegistry& reg, const std::string& prefix, std::size_t in,
                       std::size_t hidden, std::size_t out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  reg.add(prefix + kW1, uniform_matrix(in, hidden, bound, rng));
  reg.add(prefix + kB1, uniform_matrix(1, hidden, bound, rng));
  reg.add(prefix + kW2, Matrix(hidden, out));
  reg.add(prefix + kB2, Matrix(1, out));
}

ConditionNetVars bind_net(Graph& g, ParamRegistry& reg, const std::string& prefix) {
  return {g.param(reg.at(prefix + kW1)), g.param(reg.at(prefix + kB1)),
          g.param(reg.at(prefix + kW2)), g.param(reg.at(prefix + kB2))};
}

std::size_t net_size(const ParamRegistry& reg, const std::string& prefix) {
  std::size_t n = 0;
  for (const Parameter& p : reg)
    if (p.name.rfind(prefix, 0) == 0) n += p.value.size();
  return n;
}

bool is_prompt_name(const std::string& name) {
  return name == prompt_names::node || name == prompt_names::time ||
         name.rfind(prompt_names::tcn, 0) == 0 || name.rfind(prompt_names::ncn, 0) == 0;
}

/// Evaluation-only embeddings, computed in chunks.
Matrix embed(const TemporalEncoder& encoder, ParamRegistry& combined, const AblationFlags& flags,
             std::span<const NodeQuery> queries) {
  Matrix out(queries.size(), encoder.config().d_h);
  for (std::size_t c0 = 0; c0 < queries.size(); c0 += kEvalChunk) {
    const std::size_t c1 = std::min(queries.size(), c0 + kEvalChunk);
    Graph g;
    g.set_recording(false);
    Var h = prompted_encode(g, encoder, combined, flags, encoder.plan(queries.subspan(c0, c1 - c0)));
    const Matrix& H = h.value();
    std::copy(H.values().begin(), H.values().end(), &out(c0, 0));
  }
  return out;
}

std::vector<std::size_t> class_targets(const std::vector<int>& labels,
                                       const std::vector<int>& classes) {
  std::vector<std::size_t> out;
  out.reserve(labels.size());
  for (int y : labels) {
    auto it = std::find(classes.begin(), classes.end(), y);
    if (it == classes.end()) throw std::invalid_argument(fmt::format("label {} is not a task class", y));
    out.push_back(static_cast<std::size_t>(it - classes.begin()));
  }
  return out;
}

/// Row-wise softmax of sim(h, proto)/tau.
Matrix class_probabilities(const Matrix& queries, const Matrix& prototypes, double tau,
                           Similarity sim) {
  Graph g;
  g.set_recording(false);
  Var s = similarity_matrix(g.constant(queries), g.constant(prototypes), sim);
  Matrix p = s.value();
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double mx = -INFINITY;
    for (std::size_t k = 0; k < p.cols(); ++k) mx = std::max(mx, p(i, k) / tau);
    double z = 0.0;
    for (std::size_t k = 0; k < p.cols(); ++k) z += (p(i, k) = std::exp(p(i, k) / tau - mx));
    for (std::size_t k = 0; k < p.cols(); ++k) p(i, k) /= z;
  }
  return p;
}

Matrix prototype_values(const Matrix& support, const std::vector<int>& labels,
                        const std::vector<int>& classes) {
  Graph g;
  g.set_recording(false);
  return compute_prototypes(g.constant(support), labels, classes).embeddings.value();
}

std::vector<NodeQuery> node_queries(const std::vector<NodeInstance>& nodes) {
  std::vector<NodeQuery> q;
  q.reserve(nodes.size());
  for (const auto& n : nodes) q.push_back({n.node, n.t});
  return q;
}

std::vector<int> node_labels(const std::vector<NodeInstance>& nodes) {
  std::vector<int> y;
  y.reserve(nodes.size());
  for (const auto& n : nodes) y.push_back(n.label);
  return y;
}

Matrix node_probs(const TemporalEncoder& encoder, ParamRegistry& combined,
                  const AblationFlags& flags, const std::vector<NodeInstance>& support,
                  const std::vector<int>& classes, const std::vector<NodeInstance>& queries,
                  const PromptConfig& config) {
  const std::vector<int> labels = node_labels(support);
  const Matrix hq = embed(encoder, combined, flags, node_queries(queries));
  if (!config.reembed_support_at_query_time) {
    const Matrix hs = embed(encoder, combined, flags, node_queries(support));
    return class_probabilities(hq, prototype_values(hs, labels, classes), config.tau, config.sim);
  }
  Matrix out(queries.size(), classes.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    std::vector<NodeQuery> sq;
    sq.reserve(support.size());
    for (const auto& s : support) sq.push_back({s.node, queries[i].t});
    const Matrix hs = embed(encoder, combined, flags, sq);
    Matrix row(1, hq.cols());
    std::copy_n(&hq(i, 0), hq.cols(), &row(0, 0));
    const Matrix p =
        class_probabilities(row, prototype_values(hs, labels, classes), config.tau, config.sim);
    std::copy_n(&p(0, 0), p.cols(), &out(i, 0));
  }
  return out;
}

std::vector<double> pair_scores(const TemporalEncoder& encoder, ParamRegistry& combined,
                                const AblationFlags& flags, const std::vector<PairInstance>& pairs,
                                const PromptConfig& config) {
  std::vector<NodeQuery> q;
  q.reserve(2 * pairs.size());
  for (const auto& p : pairs) q.push_back({p.src, p.t});
  for (const auto& p : pairs) q.push_back({p.dst, p.t});
  const Matrix h = embed(encoder, combined, flags, q);
  const std::size_t m = pairs.size();
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t j = 0; j < h.cols(); ++j) {
      dot += h(i, j) * h(m + i, j);
      na += h(i, j) * h(i, j);
      nb += h(m + i, j) * h(m + i, j);
    }
    if (config.sim == Similarity::dot) {
      out[i] = dot;
    } else {
      if (na == 0.0 || nb == 0.0) throw std::domain_error("pair_scores: zero embedding");
      out[i] = dot / (std::sqrt(na) * std::sqrt(nb));
    }
  }
  return out;
}

/// Mean -ln p(true class); the fallback when AUC is undefined.
double mean_cross_entropy(const Matrix& probs, const std::vector<std::size_t>& targets) {
  double s = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) s -= std::log(probs(i, targets[i]));
  return s / static_cast<double>(targets.size());
}

}  // namespace

std::string AblationFlags::label() const {
  std::vector<std::string> parts;
  if (node_prompt) parts.emplace_back("node");
  if (time_prompt) parts.emplace_back("time");
  if (ncn) parts.emplace_back("ncn");
  if (tcn) parts.emplace_back("tcn");
  if (parts.empty()) return "none";
  if (parts.size() == 4) return "all";
  return fmt::format("{}", fmt::join(parts, "+"));
}

std::vector<AblationFlags> ablation_variants() {
  return {
      AblationFlags::none(),
      {true, false, false, false},
      {false, true, false, false},
      {true, true, false, false},
      {true, false, true, false},
      {false, true, false, true},
      AblationFlags::all(),
  };
}

void PromptConfig::validate() const {
  if (alpha < 1) throw std::invalid_argument("prompt.alpha: must be >= 1");
  if (!(tau > 0.0)) throw std::invalid_argument(fmt::format("prompt.tau: must be > 0, got {}", tau));
  if (!(lr > 0.0)) throw std::invalid_argument("prompt.lr: must be > 0");
  if (epochs < 1) throw std::invalid_argument("prompt.epochs: must be >= 1");
}

std::size_t bottleneck_width(std::size_t d, std::size_t alpha, std::size_t hidden) {
  if (hidden > 0) return hidden;
  if (alpha < 1) throw std::invalid_argument("bottleneck_width: alpha must be >= 1");
  return std::max<std::size_t>(1, d / alpha);
}

PromptState init_prompt_state(std::size_t d_x, std::size_t d_t, const PromptConfig& config,
                              Rng& rng) {
  config.validate();
  if (d_x < 1 || d_t < 1) throw std::invalid_argument("init_prompt_state: dimensions must be >= 1");
  PromptState s;
  s.d_x = d_x;
  s.d_t = d_t;
  s.flags = config.flags;
  s.tcn_hidden = bottleneck_width(d_t, config.alpha, config.hidden);
  s.ncn_hidden = bottleneck_width(d_x, config.alpha, config.hidden);
  if (s.flags.node_prompt) s.params.add(prompt_names::node, Matrix(1, d_x, 1.0));
  if (s.flags.time_prompt) s.params.add(prompt_names::time, Matrix(1, d_t, 1.0));
  if (s.flags.tcn) add_condition_net(s.params, prompt_names::tcn, d_t, s.tcn_hidden, d_x, rng);
  if (s.flags.ncn) add_condition_net(s.params, prompt_names::ncn, d_x, s.ncn_hidden, d_t, rng);
  return s;
}

ParameterCounts count_trainable(const PromptState& state) {
  ParameterCounts c;
  if (const auto* p = state.params.find(prompt_names::node); p && !p->frozen) c.node_prompt = p->value.size();
  if (const auto* p = state.params.find(prompt_names::time); p && !p->frozen) c.time_prompt = p->value.size();
  c.tcn = net_size(state.params, prompt_names::tcn);
  c.ncn = net_size(state.params, prompt_names::ncn);
  c.total = c.node_prompt + c.time_prompt + c.tcn + c.ncn;
  return c;
}

std::size_t closed_form_count(std::size_t d_x, std::size_t d_t, std::size_t tcn_hidden,
                              std::size_t ncn_hidden) {
  return d_x + d_t + (d_t * tcn_hidden + tcn_hidden + tcn_hidden * d_x + d_x) +
         (d_x * ncn_hidden + ncn_hidden + ncn_hidden * d_t + d_t);
}

Var apply_node_prompt(Var p_node, Var x) {
  if (p_node.rows() != 1 || p_node.cols() != x.cols()) {
    throw ShapeError(fmt::format("apply_node_prompt: prompt {} vs features {}",
                                 p_node.value().shape_string(), x.value().shape_string()));
  }
  return ops::mul_row(x, p_node);
}

Var apply_time_prompt(Var p_time, Var f) {
  if (p_time.rows() != 1 || p_time.cols() != f.cols()) {
    throw ShapeError(fmt::format("apply_time_prompt: prompt {} vs features {}",
                                 p_time.value().shape_string(), f.value().shape_string()));
  }
  return ops::mul_row(f, p_time);
}

Var condition_net(const ConditionNetVars& net, Var input) {
  Var hidden = ops::sigmoid(ops::add_row(ops::matmul(input, net.w1), net.b1));
  return ops::add_scalar(ops::add_row(ops::matmul(hidden, net.w2), net.b2), 1.0);
}

PromptVars bind_prompts(Graph& g, ParamRegistry& params, const AblationFlags& flags) {
  PromptVars v;
  v.flags = flags;
  if (flags.node_prompt) v.p_node = g.param(params.at(prompt_names::node));
  if (flags.time_prompt) v.p_time = g.param(params.at(prompt_names::time));
  if (flags.tcn) v.tcn = bind_net(g, params, prompt_names::tcn);
  if (flags.ncn) v.ncn = bind_net(g, params, prompt_names::ncn);
  return v;
}

FeatureHook::Output prompted_features(const PromptVars& vars, Var x, Var f, bool need_node) {
  const Var x_node = vars.flags.node_prompt ? apply_node_prompt(vars.p_node, x) : x;
  const Var f_time = vars.flags.time_prompt ? apply_time_prompt(vars.p_time, f) : f;
  FeatureHook::Output out;
  out.time = vars.flags.ncn ? ops::mul(ncn_generate(vars.ncn, x_node), f_time) : f_time;
  if (need_node) out.node = vars.flags.tcn ? ops::mul(tcn_generate(vars.tcn, f_time), x_node) : x_node;
  return out;
}

ParamRegistry combine(const Checkpoint& checkpoint, const PromptState& state) {
  ParamRegistry reg;
  reg.merge(checkpoint.params, true);
  reg.merge(state.params, false);
  return reg;
}

void extract_prompts(const ParamRegistry& combined, PromptState& state) {
  for (Parameter& p : state.params) p.value = combined.at(p.name).value;
}

Var prompted_encode(Graph& g, const TemporalEncoder& encoder, ParamRegistry& combined,
                    const AblationFlags& flags, const EncodePlan& plan) {
  const PromptHook hook(g, combined, flags);
  return encoder.encode(g, combined, plan, hook);
}

Var similarity_matrix(Var a, Var b, Similarity sim) {
  if (a.cols() != b.cols()) {
    throw ShapeError(fmt::format("similarity_matrix: {} vs {}", a.value().shape_string(),
                                 b.value().shape_string()));
  }
  if (sim == Similarity::cosine) {
    a = ops::normalize_rows(a);
    b = ops::normalize_rows(b);
  }
  return ops::matmul(a, ops::transpose(b));
}

Prototypes compute_prototypes(Var support_embeddings, const std::vector<int>& labels,
                              const std::vector<int>& classes) {
  if (labels.size() != support_embeddings.rows())
    throw ShapeError("compute_prototypes: one label per support row required");
  const std::vector<std::size_t> targets = class_targets(labels, classes);
  std::vector<std::size_t> counts(classes.size(), 0);
  for (std::size_t k : targets) ++counts[k];
  for (std::size_t k = 0; k < classes.size(); ++k) {
    if (counts[k] == 0)
      throw std::invalid_argument(fmt::format("compute_prototypes: class {} has no support", classes[k]));
  }
  Matrix w(targets.size(), 1);
  for (std::size_t i = 0; i < targets.size(); ++i) w[i] = 1.0 / static_cast<double>(counts[targets[i]]);
  Graph& g = support_embeddings.graph();
  auto seg = std::make_shared<const std::vector<std::size_t>>(targets);
  return {classes, ops::segment_weighted_sum(g.constant(std::move(w)), support_embeddings, seg,
                                             classes.size())};
}

Var downstream_nc_loss(Var query_embeddings, const std::vector<int>& labels,
                       const Prototypes& prototypes, double tau, Similarity sim) {
  if (!(tau > 0.0)) throw std::invalid_argument("downstream_nc_loss: tau must be > 0");
  Var logits = ops::scale(similarity_matrix(query_embeddings, prototypes.embeddings, sim), 1.0 / tau);
  return ops::softmax_cross_entropy(logits, class_targets(labels, prototypes.classes));
}

std::vector<ContrastiveTuple> pairs_to_tuples(const std::vector<PairInstance>& pairs) {
  std::vector<const PairInstance*> pos, neg;
  for (const auto& p : pairs) (p.label != 0 ? pos : neg).push_back(&p);
  if (pos.size() != neg.size())
    throw std::invalid_argument("pairs_to_tuples: every positive needs one negative");
  std::vector<ContrastiveTuple> out;
  out.reserve(pos.size());
  for (std::size_t i = 0; i < pos.size(); ++i) {
    if (pos[i]->src != neg[i]->src || pos[i]->t != neg[i]->t)
      throw std::invalid_argument("pairs_to_tuples: negative does not match its positive");
    out.push_back({pos[i]->src, pos[i]->dst, neg[i]->dst, pos[i]->t});
  }
  return out;
}

Matrix embed_nodes(const TuneContext& ctx, const PromptState& state,
                   std::span<const NodeQuery> queries) {
  const TemporalEncoder encoder(ctx.stream, ctx.index, ctx.checkpoint.config);
  ParamRegistry combined = combine(ctx.checkpoint, state);
  return embed(encoder, combined, state.flags, queries);
}

Matrix score_nodes(const TuneContext& ctx, const PromptState& state,
                   const std::vector<NodeInstance>& support, const std::vector<int>& classes,
                   const std::vector<NodeInstance>& queries, const PromptConfig& config) {
  const TemporalEncoder encoder(ctx.stream, ctx.index, ctx.checkpoint.config);
  ParamRegistry combined = combine(ctx.checkpoint, state);
  return node_probs(encoder, combined, state.flags, support, classes, queries, config);
}

std::vector<double> score_pairs(const TuneContext& ctx, const PromptState& state,
                                const std::vector<PairInstance>& pairs, const PromptConfig& config) {
  const TemporalEncoder encoder(ctx.stream, ctx.index, ctx.checkpoint.config);
  ParamRegistry combined = combine(ctx.checkpoint, state);
  return pair_scores(encoder, combined, state.flags, pairs, config);
}

TuneResult tune_prompts(const TuneContext& ctx, const Task& task, const PromptConfig& config,
                        const TuneObserver& observer) {
  config.validate();
  const TemporalEncoder encoder(ctx.stream, ctx.index, ctx.checkpoint.config);
  Rng rng(config.seed);
  TuneResult result;
  result.state = init_prompt_state(ctx.stream.d_x(), ctx.checkpoint.config.d_t, config, rng);
  const AblationFlags flags = config.flags;
  ParamRegistry combined = combine(ctx.checkpoint, result.state);
  Adam adam({config.lr, 0.9, 0.999, 1e-8});

  const bool nc = task.mode == TaskMode::node_classification;
  const std::vector<int> support_labels = node_labels(task.support_nodes);
  const std::vector<NodeInstance>& valid_nodes =
      task.valid_nodes.empty() ? task.support_nodes : task.valid_nodes;
  const std::vector<PairInstance>& valid_pairs =
      task.valid_pairs.empty() ? task.support_pairs : task.valid_pairs;
  const std::vector<ContrastiveTuple> tuples = nc ? std::vector<ContrastiveTuple>{}
                                                  : pairs_to_tuples(task.support_pairs);
  if (nc && task.support_nodes.empty()) throw std::invalid_argument("tune_prompts: empty support set");
  if (!nc && tuples.empty()) throw std::invalid_argument("tune_prompts: empty support pairs");

  EncodePlan support_plan;
  if (nc) support_plan = encoder.plan(node_queries(task.support_nodes));

  auto evaluate = [&]() -> double {
    if (nc) {
      const Matrix probs = node_probs(encoder, combined, flags, task.support_nodes, task.classes,
                                      valid_nodes, config);
      const auto targets = class_targets(node_labels(valid_nodes), task.classes);
      if (auto auc = class_auc(probs, targets)) return *auc;
      return -mean_cross_entropy(probs, targets);
    }
    const std::vector<double> s = pair_scores(encoder, combined, flags, valid_pairs, config);
    std::vector<int> y;
    for (const auto& p : valid_pairs) y.push_back(p.label);
    return auc_from_labels(s, y).value_or(0.5);
  };

  result.best_valid = evaluate();
  if (combined.trainable_count() == 0) return result;

  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    Graph g;
    Var loss;
    if (nc) {
      Var h = prompted_encode(g, encoder, combined, flags, support_plan);
      const Prototypes protos = compute_prototypes(h, support_labels, task.classes);
      loss = downstream_nc_loss(h, support_labels, protos, config.tau, config.sim);
    } else {
      const PromptHook hook(g, combined, flags);
      loss = contrastive_batch_loss(g, encoder, combined, tuples, hook, config.tau, config.sim);
    }
    const double value = loss.scalar();
    if (!std::isfinite(value))
      throw std::runtime_error(fmt::format("non-finite tuning loss {} at epoch {}", value, epoch));
    result.train_loss.push_back(value);
    g.backward(loss);
    if (observer) observer(combined, epoch);
    adam.step(combined);
    result.epochs_run = epoch;

    const double metric = evaluate();
    if (metric > result.best_valid) {
      result.best_valid = metric;
      result.best_epoch = epoch;
      extract_prompts(combined, result.state);
      since_best = 0;
    } else if (config.patience > 0 && ++since_best >= config.patience) {
      break;
    }
  }
  return result;
}

nlohmann::json prompt_config_json(const PromptState& state) {
  return {{"d_x", state.d_x},
          {"d_t", state.d_t},
          {"tcn_hidden", state.tcn_hidden},
          {"ncn_hidden", state.ncn_hidden},
          {"flags",
           {{"node_prompt", state.flags.node_prompt},
            {"time_prompt", state.flags.time_prompt},
            {"ncn", state.flags.ncn},
            {"tcn", state.flags.tcn}}}};
}

void save_prompt_state(const PromptState& state, const std::filesystem::path& path) {
  save_document(path, "prompt_state", prompt_config_json(state), state.params);
}

PromptState load_prompt_state(const std::filesystem::path& path) {
  auto [config, params] = load_document(path, "prompt_state");
  PromptState s;
  try {
    s.d_x = config.at("d_x").get<std::size_t>();
    s.d_t = config.at("d_t").get<std::size_t>();
    s.tcn_hidden = config.at("tcn_hidden").get<std::size_t>();
    s.ncn_hidden = config.at("ncn_hidden").get<std::size_t>();
    const auto& f = config.at("flags");
    s.flags = {f.at("node_prompt").get<bool>(), f.at("time_prompt").get<bool>(),
               f.at("ncn").get<bool>(), f.at("tcn").get<bool>()};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("{}: bad prompt_state config: {}", path.string(), e.what()));
  }
  for (const Parameter& p : params) {
    if (!is_prompt_name(p.name))
      throw FormatError(fmt::format("{}: unexpected parameter '{}'", path.string(), p.name));
  }
  s.params = std::move(params);
  return s;
}

}  // namespace dualprompt
