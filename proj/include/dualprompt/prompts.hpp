#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dualprompt/adam.hpp"
#include "dualprompt/encoder.hpp"
#include "dualprompt/pretrain.hpp"

namespace dualprompt {

/// Which prompt components are active. A disabled prompt acts as the
/// all-ones vector and a disabled condition-net as the identity.
struct AblationFlags {
  bool node_prompt = true;
  bool time_prompt = true;
  bool ncn = true;
  bool tcn = true;

  static AblationFlags all() { return {}; }
  static AblationFlags none() { return {false, false, false, false}; }
  std::string label() const;
  bool operator==(const AblationFlags&) const = default;
};

/// The seven ablation variants, in table order.
std::vector<AblationFlags> ablation_variants();

struct PromptConfig {
  AblationFlags flags;
  std::size_t alpha = 2;     // bottleneck divisor
  std::size_t hidden = 0;    // explicit bottleneck width; 0 derives it from alpha
  double tau = 0.1;
  Similarity sim = Similarity::cosine;
  std::size_t epochs = 200;
  std::size_t patience = 20;  // 0 disables early stopping
  double lr = 1e-2;
  bool reembed_support_at_query_time = false;
  std::uint64_t seed = 0;

  void validate() const;
};

/// max(1, floor(d / alpha)) unless `hidden` overrides it.
std::size_t bottleneck_width(std::size_t d, std::size_t alpha, std::size_t hidden = 0);

namespace prompt_names {
inline const std::string node = "prompt.node";
inline const std::string time = "prompt.time";
inline const std::string tcn = "tcn.";
inline const std::string ncn = "ncn.";
}  // namespace prompt_names

/// Dual prompts plus the two condition-nets. Only enabled components own
/// parameters.
struct PromptState {
  std::size_t d_x = 0;
  std::size_t d_t = 0;
  std::size_t tcn_hidden = 0;
  std::size_t ncn_hidden = 0;
  AblationFlags flags;
  ParamRegistry params;
};

/// Prompts at 1, condition-nets with a zero output layer (so they emit 1),
/// hidden layer drawn U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
PromptState init_prompt_state(std::size_t d_x, std::size_t d_t, const PromptConfig& config,
                              Rng& rng);

struct ParameterCounts {
  std::size_t node_prompt = 0;
  std::size_t time_prompt = 0;
  std::size_t tcn = 0;
  std::size_t ncn = 0;
  std::size_t total = 0;
};

ParameterCounts count_trainable(const PromptState& state);

/// d_x + d_t + (d_t*h_t + h_t + h_t*d_x + d_x) + (d_x*h_n + h_n + h_n*d_t + d_t).
std::size_t closed_form_count(std::size_t d_x, std::size_t d_t, std::size_t tcn_hidden,
                              std::size_t ncn_hidden);

/// p ⊙ x for every row of x.
Var apply_node_prompt(Var p_node, Var x);
Var apply_time_prompt(Var p_time, Var f);

struct ConditionNetVars {
  Var w1, b1, w2, b2;
};

/// 1 + W2 sigmoid(W1 in + b1) + b2, row-wise.
Var condition_net(const ConditionNetVars& net, Var input);
inline Var tcn_generate(const ConditionNetVars& kappa, Var f_time) {
  return condition_net(kappa, f_time);
}
inline Var ncn_generate(const ConditionNetVars& phi, Var x_node) {
  return condition_net(phi, x_node);
}

/// Prompt parameters bound to one graph.
struct PromptVars {
  AblationFlags flags;
  Var p_node, p_time;
  ConditionNetVars tcn, ncn;
};

/// Binds the prompt entries of `params` (names from prompt_names) for the
/// components enabled in `flags`.
PromptVars bind_prompts(Graph& g, ParamRegistry& params, const AblationFlags& flags);

/// x_node = p_node ⊙ x, f_time = p_time ⊙ f, then
/// x~ = TCN(f_time) ⊙ x_node and f~ = NCN(x_node) ⊙ f_time.
FeatureHook::Output prompted_features(const PromptVars& vars, Var x, Var f, bool need_node = true);

class PromptHook final : public FeatureHook {
 public:
  PromptHook(Graph& g, ParamRegistry& params, const AblationFlags& flags)
      : vars_(bind_prompts(g, params, flags)) {}
  Output apply(Var node_rows, Var time_rows, bool need_node) const override {
    return prompted_features(vars_, node_rows, time_rows, need_node);
  }

 private:
  PromptVars vars_;
};

/// Backbone parameters (frozen) followed by the prompt parameters (trainable).
ParamRegistry combine(const Checkpoint& checkpoint, const PromptState& state);

/// Copies the prompt entries of a combined registry back into `state`.
void extract_prompts(const ParamRegistry& combined, PromptState& state);

/// Encoder embeddings with the prompt hook at every layer's inputs.
/// `combined` holds both backbone and prompt parameters.
Var prompted_encode(Graph& g, const TemporalEncoder& encoder, ParamRegistry& combined,
                    const AblationFlags& flags, const EncodePlan& plan);

/// Row-wise similarity between every row of a and every row of b.
Var similarity_matrix(Var a, Var b, Similarity sim);

struct Prototypes {
  std::vector<int> classes;
  Var embeddings;  // |classes| x d_h
};

/// Per-class mean of the support embeddings. Throws when a class has no
/// support rows.
Prototypes compute_prototypes(Var support_embeddings, const std::vector<int>& labels,
                              const std::vector<int>& classes);

/// Mean over queries of -ln softmax_y(sim(h, proto_y) / tau) at the true class.
Var downstream_nc_loss(Var query_embeddings, const std::vector<int>& labels,
                       const Prototypes& prototypes, double tau, Similarity sim);

/// Support-pair list -> contrastive tuples: positives are followed by their
/// negatives in the same order.
std::vector<ContrastiveTuple> pairs_to_tuples(const std::vector<PairInstance>& pairs);

/// Everything a tuning or evaluation run reads.
struct TuneContext {
  const EventStream& stream;
  const NeighborIndex& index;
  const Checkpoint& checkpoint;
};

/// Prompted embeddings (queries x d_h), evaluation only.
Matrix embed_nodes(const TuneContext& ctx, const PromptState& state,
                   std::span<const NodeQuery> queries);

/// Class probabilities (queries x |classes|) under the given state.
Matrix score_nodes(const TuneContext& ctx, const PromptState& state,
                   const std::vector<NodeInstance>& support, const std::vector<int>& classes,
                   const std::vector<NodeInstance>& queries, const PromptConfig& config);

/// sim(h_src, h_dst) for each pair.
std::vector<double> score_pairs(const TuneContext& ctx, const PromptState& state,
                                const std::vector<PairInstance>& pairs, const PromptConfig& config);

struct TuneResult {
  PromptState state;
  double best_valid = 0.0;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  std::vector<double> train_loss;
};

/// Called after each backward pass with the combined (frozen backbone +
/// prompts) registry, before the optimizer step.
using TuneObserver = std::function<void(const ParamRegistry& combined, std::size_t epoch)>;

/// Frozen-backbone prompt tuning: node classification uses the prototype
/// loss, link prediction the contrastive loss. Returns the state with the
/// best validation score (the initial state counts as epoch 0).
TuneResult tune_prompts(const TuneContext& ctx, const Task& task, const PromptConfig& config,
                        const TuneObserver& observer = {});

nlohmann::json prompt_config_json(const PromptState& state);
void save_prompt_state(const PromptState& state, const std::filesystem::path& path);
PromptState load_prompt_state(const std::filesystem::path& path);

}  // namespace dualprompt
