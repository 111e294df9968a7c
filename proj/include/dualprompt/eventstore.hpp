#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "dualprompt/tensor.hpp"

namespace dualprompt {

using NodeId = std::uint32_t;
using Rng = std::mt19937_64;

/// A single timestamped interaction between two nodes.
struct Event {
  NodeId src = 0;
  NodeId dst = 0;
  double t = 0.0;
  std::vector<double> edge_feat;
  std::optional<int> state_label;  // label of src at time t
};

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what);
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Chronologically ordered events plus static node features.
///
/// Bipartite streams (user/item) keep users in [0, num_users) and items in
/// [num_users, num_nodes); negatives are then drawn from the item side.
struct EventStream {
  std::vector<Event> events;
  std::size_t num_nodes = 0;
  std::size_t num_users = 0;  // 0 when the stream is not bipartite
  std::size_t d_e = 0;
  Matrix node_feat;  // num_nodes x d_x, zeros when the dataset has none

  bool bipartite() const noexcept { return num_users > 0 && num_users < num_nodes; }
  std::size_t d_x() const noexcept { return node_feat.cols(); }
  std::size_t size() const noexcept { return events.size(); }
  double time_span() const;

  /// Stable-sorts events by time and checks node ids / feature widths.
  void normalize();
};

/// Reads `user,item,timestamp,state_label,f1..fk` rows (one header line).
/// Items are offset by the user count into one id space. Node features are
/// zero rows of width `d_x`.
EventStream load_jodie_csv(const std::filesystem::path& path, std::size_t d_x = 16);

/// Writes a bipartite stream in the same format. Node features are not part
/// of the format and are dropped.
void save_jodie_csv(const EventStream& stream, const std::filesystem::path& path);

/// Node feature sidecar: `node,f0..f{d-1}` with one row per dense node id in
/// order. Loading replaces stream.node_feat and requires every node.
void save_node_features(const EventStream& stream, const std::filesystem::path& path);
void load_node_features(EventStream& stream, const std::filesystem::path& path);

struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const noexcept { return end - begin; }
  bool contains(std::size_t i) const noexcept { return i >= begin && i < end; }
  bool operator==(const IndexRange&) const = default;
};

struct SplitIndices {
  IndexRange pretrain;
  IndexRange tune_pool;
  IndexRange valid_pool;
  IndexRange test;
};

/// 80% / 1% / 1% / 18% chronological split with round-half-up boundaries.
SplitIndices chronological_split(std::size_t n);
inline SplitIndices chronological_split(const EventStream& stream) {
  return chronological_split(stream.size());
}

struct NeighborEntry {
  NodeId node = 0;
  double t = 0.0;
  std::size_t event = 0;
};

/// Per-node interaction history, sorted by time. Edges are indexed under both
/// endpoints.
class NeighborIndex {
 public:
  NeighborIndex() = default;
  explicit NeighborIndex(const EventStream& stream);

  std::span<const NeighborEntry> history(NodeId v) const;
  std::size_t num_nodes() const noexcept { return lists_.size(); }

  /// Up to k entries with t' < t, most recent first.
  std::vector<NeighborEntry> before(NodeId v, double t, std::size_t k) const;

  /// Number of entries with t' < t.
  std::size_t count_before(NodeId v, double t) const;

  /// True when some event joins u and w at a time <= t.
  bool linked_by(NodeId u, NodeId w, double t) const;

 private:
  std::vector<std::vector<NeighborEntry>> lists_;
  std::vector<std::unordered_map<NodeId, double>> first_contact_;
};

NeighborIndex build_neighbor_index(const EventStream& stream);

std::vector<NeighborEntry> neighbors_before(const NeighborIndex& index, NodeId v, double t,
                                            std::size_t k);

/// Uniform negative destination sampling over a fixed candidate pool.
class NegativeSampler {
 public:
  NegativeSampler(const NeighborIndex& index, std::vector<NodeId> pool);

  /// Default pool: the item partition for bipartite streams, all nodes
  /// otherwise. With `fallback`, a node that has linked the whole pool gets
  /// a uniform pool node other than itself and the positive instead.
  static NegativeSampler for_stream(const EventStream& stream, const NeighborIndex& index,
                                    bool fallback = true);

  /// Adds a pool used only when every earlier pool has no candidate. A
  /// relaxed pool skips the "never linked" condition.
  NegativeSampler& with_fallback(std::vector<NodeId> pool, bool relaxed = false);

  /// Draws b uniformly among pool nodes b != v (and b != exclude) that share
  /// no event with v at any time <= t, from the first pool with a candidate.
  /// Throws when no pool has one.
  NodeId sample(NodeId v, double t, Rng& rng, std::optional<NodeId> exclude = {}) const;

  std::span<const NodeId> pool() const noexcept { return tiers_.front().pool; }

 private:
  struct Tier {
    std::vector<NodeId> pool;
    bool relaxed = false;
  };
  std::optional<NodeId> sample_from(const Tier& tier, NodeId v, double t, Rng& rng,
                                    std::optional<NodeId> exclude) const;

  const NeighborIndex* index_;
  std::vector<Tier> tiers_;
};

/// Strict draw from the default pool; throws when v has linked all of it.
NodeId sample_negative(const EventStream& stream, const NeighborIndex& index, NodeId v, double t,
                       Rng& rng);

enum class TaskMode { node_classification, link_prediction };
enum class LinkSetting { transductive, inductive };

const char* to_string(TaskMode mode);
const char* to_string(LinkSetting setting);

/// A labeled (node, time) instance: node classification support/query rows.
struct NodeInstance {
  NodeId node = 0;
  double t = 0.0;
  int label = 0;
};

/// A scored pair (src, dst, t); label 1 for observed events, 0 for negatives.
struct PairInstance {
  NodeId src = 0;
  NodeId dst = 0;
  double t = 0.0;
  int label = 0;
};

struct Task {
  TaskMode mode = TaskMode::node_classification;
  std::vector<std::size_t> sampled_events;  // indices of the 30 tune-pool events
  std::vector<int> classes;                 // node classification only

  std::vector<NodeInstance> support_nodes;
  std::vector<NodeInstance> valid_nodes;
  std::vector<NodeInstance> query_nodes;

  std::vector<PairInstance> support_pairs;  // positives followed by their negatives
  std::vector<PairInstance> valid_pairs;
  std::vector<PairInstance> query_pairs;    // transductive query set
  std::vector<PairInstance> inductive_pairs;
};

struct TaskSamplerConfig {
  std::size_t shots = 30;
  std::size_t max_retries = 1000;
  std::size_t max_queries = 0;  // 0 keeps every test instance
};

/// Everything a sampler needs; all members are read-only.
struct StreamContext {
  const EventStream& stream;
  const NeighborIndex& index;
  SplitIndices split;
};

Task sample_task(const StreamContext& ctx, TaskMode mode, Rng& rng,
                 const TaskSamplerConfig& config = {});

}  // namespace dualprompt
