#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dualprompt/autodiff.hpp"
#include "dualprompt/eventstore.hpp"

namespace dualprompt {

/// Time-encoder input: elapsed time since the anchor (0 for the anchor itself)
/// or the absolute event time.
enum class TimeMode { elapsed, absolute };
/// Neighbor truncation: keep the k most recent, or k drawn uniformly from
/// the full history (seeded per (node, time)).
enum class NeighborPolicy { most_recent, uniform };
enum class Similarity { cosine, dot };

struct EncoderConfig {
  std::size_t d_x = 16;
  std::size_t d_t = 16;
  std::size_t d_h = 16;
  std::size_t d_e = 0;
  std::size_t layers = 2;
  std::size_t neighbors = 20;
  TimeMode time_mode = TimeMode::elapsed;
  NeighborPolicy neighbor_policy = NeighborPolicy::most_recent;
  std::uint64_t neighbor_seed = 0;

  void validate() const;
  /// Width of a fused entry [h ‖ f ‖ edge] entering `layer` (1-based).
  std::size_t entry_dim(std::size_t layer) const;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

namespace param_names {
inline const std::string omega = "encoder.time.omega";
std::string layer(std::size_t layer, const char* what);
}  // namespace param_names

/// Registers the backbone parameters. Projections are U(-1/sqrt(fan_in),
/// 1/sqrt(fan_in)); frequencies are log-uniform over [1/time_span, 10].
void init_encoder_params(ParamRegistry& registry, const EncoderConfig& config, double time_span,
                         Rng& rng);

/// (1/sqrt(d_t)) [cos(w1 t), sin(w1 t), ..., cos(wk t), sin(wk t)] as a 1 x d_t row.
Matrix time_encode(std::span<const double> omega, double t);
/// Batched, differentiable form; `times` is m x 1, result m x d_t.
Var time_encode(Var omega, const Matrix& times);

/// [x ‖ f]. Row counts must match.
Var fuse(Var x, Var f);

struct AttentionVars {
  Var query, key, value, out_w, out_b;
};
AttentionVars bind_attention(Graph& g, ParamRegistry& registry, std::size_t layer);

/// Single-target attention: the self row queries {self} ∪ neighbors.
Var attend(const AttentionVars& p, Var self_fused, Var neighbor_fused);

/// Attention over many targets at once. Entry rows of one target share a
/// segment id; `self_rows[s]` is the row holding target s's own entry.
Var attend_segments(const AttentionVars& p, Var entries, const std::vector<std::size_t>& self_rows,
                    ops::Segments segments, std::size_t num_targets);

/// Maps raw node rows and raw time-feature rows to the rows fed to the
/// encoder. Pre-training uses the identity; prompt tuning injects prompts.
class FeatureHook {
 public:
  struct Output {
    Var node;
    Var time;
  };
  virtual ~FeatureHook() = default;
  virtual Output apply(Var node_rows, Var time_rows, bool need_node) const = 0;
};

class IdentityHook final : public FeatureHook {
 public:
  Output apply(Var node_rows, Var time_rows, bool) const override {
    return {node_rows, time_rows};
  }
};

struct NodeQuery {
  NodeId node = 0;
  double t = 0.0;
};

/// Flattened L-hop neighborhood trees for a batch of queries. levels[0]
/// feeds layer 1 (raw features); levels.back() holds the query targets.
struct EncodePlan {
  struct Level {
    std::vector<NodeId> node;          // one per entry
    Matrix time_input;                 // entries x 1, time-encoder input
    Matrix raw_features;               // entries x d_x
    Matrix edge_features;              // entries x d_e, zero rows for self entries
    std::vector<double> entry_time;    // time at which the entry is embedded
    std::vector<std::size_t> self_rows;
    ops::Segments segments;
    std::size_t num_targets = 0;
  };
  std::vector<Level> levels;
  std::size_t num_queries = 0;

  std::size_t total_entries() const;
};

/// The backbone: read-only view of a stream plus the encoder configuration.
class TemporalEncoder {
 public:
  TemporalEncoder(const EventStream& stream, const NeighborIndex& index, EncoderConfig config);

  const EncoderConfig& config() const noexcept { return config_; }
  const EventStream& stream() const noexcept { return *stream_; }
  const NeighborIndex& index() const noexcept { return *index_; }

  EncodePlan plan(std::span<const NodeQuery> queries) const;

  /// Embeddings of every query in the plan, num_queries x d_h.
  Var encode(Graph& g, ParamRegistry& params, const EncodePlan& plan,
             const FeatureHook& hook) const;

  /// h_{t,v}, 1 x d_h.
  Var encode_node(Graph& g, ParamRegistry& params, NodeId v, double t,
                  const FeatureHook& hook) const;

 private:
  std::vector<NeighborEntry> neighbors(NodeId v, double t) const;

  const EventStream* stream_;
  const NeighborIndex* index_;
  EncoderConfig config_;
};

/// Pre-trained backbone parameters plus the configuration that built them.
struct Checkpoint {
  EncoderConfig config;
  ParamRegistry params;
};

inline constexpr int kFormatVersion = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// {name: {shape: [r, c], data: base64 of little-endian float64}}.
nlohmann::json params_to_json(const ParamRegistry& params);
ParamRegistry params_from_json(const nlohmann::json& j);

/// Writes {format_version, kind, config, params}; reads it back, checking
/// version and kind.
void save_document(const std::filesystem::path& path, const std::string& kind,
                   const nlohmann::json& config, const ParamRegistry& params);
std::pair<nlohmann::json, ParamRegistry> load_document(const std::filesystem::path& path,
                                                       const std::string& kind);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dualprompt
