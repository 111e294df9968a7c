#include "dualprompt/eventstore.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_set>

#include <fmt/format.h>

namespace dualprompt {

ParseError::ParseError(std::size_t line, const std::string& what)
    : std::runtime_error(fmt::format("line {}: {}", line, what)), line_(line) {}

double EventStream::time_span() const {
  if (events.empty()) return 0.0;
  return events.back().t - events.front().t;
}

void EventStream::normalize() {
  std::stable_sort(events.begin(), events.end(),
                   [](const Event& a, const Event& b) { return a.t < b.t; });
  for (const Event& e : events) {
    if (!(e.t >= 0.0)) throw std::invalid_argument(fmt::format("negative timestamp {}", e.t));
    if (e.src >= num_nodes || e.dst >= num_nodes) {
      throw std::invalid_argument(
          fmt::format("event ({}, {}) exceeds num_nodes {}", e.src, e.dst, num_nodes));
    }
    if (e.edge_feat.size() != d_e) {
      throw std::invalid_argument(
          fmt::format("edge feature width {} differs from d_e {}", e.edge_feat.size(), d_e));
    }
  }
  if (node_feat.rows() != num_nodes) node_feat = Matrix(num_nodes, node_feat.cols());
}

namespace {

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

double parse_double(std::string_view field, std::size_t line, const char* what) {
  field = trim(field);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || ptr != field.data() + field.size() || field.empty()) {
    throw ParseError(line, fmt::format("bad {} '{}'", what, field));
  }
  return v;
}

long long parse_int(std::string_view field, std::size_t line, const char* what) {
  const double v = parse_double(field, line, what);
  const auto i = static_cast<long long>(v);
  if (static_cast<double>(i) != v || i < 0) {
    throw ParseError(line, fmt::format("bad {} '{}'", what, trim(field)));
  }
  return i;
}

}  // namespace

EventStream load_jodie_csv(const std::filesystem::path& path, std::size_t d_x) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("cannot open '{}'", path.string()));

  struct RawRow {
    long long user, item;
    double t;
    int label;
    std::vector<double> feat;
  };
  std::vector<RawRow> rows;
  std::string line;
  std::size_t lineno = 0;
  std::optional<std::size_t> width;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1) continue;  // header
    if (trim(line).empty()) continue;
    const auto fields = split_commas(line);
    if (fields.size() < 4) throw ParseError(lineno, "expected at least 4 columns");
    if (width && *width != fields.size()) {
      throw ParseError(lineno, fmt::format("expected {} columns, got {}", *width, fields.size()));
    }
    width = fields.size();
    RawRow r;
    r.user = parse_int(fields[0], lineno, "user id");
    r.item = parse_int(fields[1], lineno, "item id");
    r.t = parse_double(fields[2], lineno, "timestamp");
    if (!(r.t >= 0.0)) throw ParseError(lineno, "negative timestamp");
    r.label = static_cast<int>(parse_int(fields[3], lineno, "state label"));
    r.feat.reserve(fields.size() - 4);
    for (std::size_t k = 4; k < fields.size(); ++k)
      r.feat.push_back(parse_double(fields[k], lineno, "feature"));
    rows.push_back(std::move(r));
  }

  std::map<long long, NodeId> users, items;
  for (const auto& r : rows) {
    users.emplace(r.user, 0);
    items.emplace(r.item, 0);
  }
  NodeId next = 0;
  for (auto& [id, dense] : users) dense = next++;
  for (auto& [id, dense] : items) dense = next++;

  EventStream s;
  s.num_users = users.size();
  s.num_nodes = users.size() + items.size();
  s.d_e = width ? *width - 4 : 0;
  s.node_feat = Matrix(s.num_nodes, d_x);
  s.events.reserve(rows.size());
  for (auto& r : rows) {
    Event e;
    e.src = users.at(r.user);
    e.dst = items.at(r.item);
    e.t = r.t;
    e.state_label = r.label;
    e.edge_feat = std::move(r.feat);
    s.events.push_back(std::move(e));
  }
  s.normalize();
  return s;
}

void save_jodie_csv(const EventStream& stream, const std::filesystem::path& path) {
  if (!stream.bipartite()) {
    throw std::invalid_argument("save_jodie_csv: stream is not bipartite");
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  out << "user_id,item_id,timestamp,state_label,comma_separated_list_of_features\n";
  for (const Event& e : stream.events) {
    if (e.src >= stream.num_users || e.dst < stream.num_users) {
      throw std::invalid_argument("save_jodie_csv: event does not go user -> item");
    }
    out << fmt::format("{},{},{},{}", e.src, e.dst - stream.num_users, e.t,
                       e.state_label.value_or(0));
    for (double f : e.edge_feat) out << ',' << fmt::format("{}", f);
    out << '\n';
  }
  if (!out) throw std::runtime_error(fmt::format("write failed for '{}'", path.string()));
}

void save_node_features(const EventStream& stream, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  out << "node";
  for (std::size_t j = 0; j < stream.d_x(); ++j) out << ",f" << j;
  out << '\n';
  for (std::size_t v = 0; v < stream.num_nodes; ++v) {
    out << v;
    for (std::size_t j = 0; j < stream.d_x(); ++j) out << ',' << fmt::format("{}", stream.node_feat(v, j));
    out << '\n';
  }
  if (!out) throw std::runtime_error(fmt::format("write failed for '{}'", path.string()));
}

void load_node_features(EventStream& stream, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("cannot open '{}'", path.string()));
  std::string line;
  std::size_t lineno = 0;
  std::optional<std::size_t> width;
  std::vector<double> values;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 || trim(line).empty()) continue;
    const auto fields = split_commas(line);
    if (fields.size() < 2) throw ParseError(lineno, "expected a node id and at least one feature");
    if (width && *width != fields.size() - 1) {
      throw ParseError(lineno, fmt::format("expected {} features, got {}", *width, fields.size() - 1));
    }
    width = fields.size() - 1;
    if (static_cast<std::size_t>(parse_int(fields[0], lineno, "node id")) != rows)
      throw ParseError(lineno, fmt::format("expected node id {}", rows));
    for (std::size_t k = 1; k < fields.size(); ++k)
      values.push_back(parse_double(fields[k], lineno, "feature"));
    ++rows;
  }
  if (rows == 0 || rows != stream.num_nodes) {
    throw std::invalid_argument(fmt::format("'{}': {} feature rows for {} nodes", path.string(),
                                            rows, stream.num_nodes));
  }
  Matrix feat(rows, *width);
  std::copy(values.begin(), values.end(), &feat(0, 0));
  stream.node_feat = std::move(feat);
}

// ---------------------------------------------------------------------------

SplitIndices chronological_split(std::size_t n) {
  if (n < 100) {
    throw std::invalid_argument(fmt::format("chronological_split: n = {} < 100", n));
  }
  // round-half-up of percent * n / 100 in integer arithmetic
  auto pct = [n](std::size_t percent) { return (percent * n * 2 + 100) / 200; };
  const std::size_t pre = pct(80);
  const std::size_t one = pct(1);
  SplitIndices s;
  s.pretrain = {0, pre};
  s.tune_pool = {pre, pre + one};
  s.valid_pool = {pre + one, pre + 2 * one};
  s.test = {pre + 2 * one, n};
  return s;
}

// ---------------------------------------------------------------------------

NeighborIndex::NeighborIndex(const EventStream& stream)
    : lists_(stream.num_nodes), first_contact_(stream.num_nodes) {
  for (std::size_t i = 0; i < stream.events.size(); ++i) {
    const Event& e = stream.events[i];
    lists_[e.src].push_back({e.dst, e.t, i});
    first_contact_[e.src].try_emplace(e.dst, e.t);
    if (e.dst != e.src) {
      lists_[e.dst].push_back({e.src, e.t, i});
      first_contact_[e.dst].try_emplace(e.src, e.t);
    }
  }
}

std::span<const NeighborEntry> NeighborIndex::history(NodeId v) const {
  if (v >= lists_.size()) throw std::out_of_range(fmt::format("unknown node {}", v));
  return lists_[v];
}

std::size_t NeighborIndex::count_before(NodeId v, double t) const {
  const auto h = history(v);
  const auto it = std::lower_bound(h.begin(), h.end(), t,
                                   [](const NeighborEntry& e, double x) { return e.t < x; });
  return static_cast<std::size_t>(it - h.begin());
}

std::vector<NeighborEntry> NeighborIndex::before(NodeId v, double t, std::size_t k) const {
  const auto h = history(v);
  const std::size_t end = count_before(v, t);
  const std::size_t begin = end > k ? end - k : 0;
  std::vector<NeighborEntry> out;
  out.reserve(end - begin);
  for (std::size_t i = end; i-- > begin;) out.push_back(h[i]);
  return out;
}

bool NeighborIndex::linked_by(NodeId u, NodeId w, double t) const {
  if (u >= first_contact_.size()) return false;
  const auto& m = first_contact_[u];
  const auto it = m.find(w);
  return it != m.end() && it->second <= t;
}

NeighborIndex build_neighbor_index(const EventStream& stream) { return NeighborIndex(stream); }

std::vector<NeighborEntry> neighbors_before(const NeighborIndex& index, NodeId v, double t,
                                            std::size_t k) {
  if (k < 1) throw std::invalid_argument("neighbors_before: k must be >= 1");
  return index.before(v, t, k);
}

// ---------------------------------------------------------------------------

NegativeSampler::NegativeSampler(const NeighborIndex& index, std::vector<NodeId> pool)
    : index_(&index) {
  tiers_.push_back({std::move(pool), false});
}

NegativeSampler NegativeSampler::for_stream(const EventStream& stream, const NeighborIndex& index,
                                            bool fallback) {
  std::vector<NodeId> pool;
  const std::size_t first = stream.bipartite() ? stream.num_users : 0;
  for (std::size_t v = first; v < stream.num_nodes; ++v) pool.push_back(static_cast<NodeId>(v));
  NegativeSampler sampler(index, pool);
  if (fallback) sampler.with_fallback(std::move(pool), true);
  return sampler;
}

NegativeSampler& NegativeSampler::with_fallback(std::vector<NodeId> pool, bool relaxed) {
  tiers_.push_back({std::move(pool), relaxed});
  return *this;
}

std::optional<NodeId> NegativeSampler::sample_from(const Tier& tier, NodeId v, double t, Rng& rng,
                                                   std::optional<NodeId> exclude) const {
  auto eligible = [&](NodeId b) {
    if (b == v || (exclude && b == *exclude)) return false;
    return tier.relaxed || !index_->linked_by(v, b, t);
  };
  const auto& pool = tier.pool;
  if (!pool.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    for (int attempt = 0; attempt < 64; ++attempt) {
      const NodeId b = pool[pick(rng)];
      if (eligible(b)) return b;
    }
  }
  std::vector<NodeId> candidates;
  for (NodeId b : pool) {
    if (eligible(b)) candidates.push_back(b);
  }
  if (candidates.empty()) return std::nullopt;
  std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
  return candidates[pick(rng)];
}

NodeId NegativeSampler::sample(NodeId v, double t, Rng& rng, std::optional<NodeId> exclude) const {
  for (const Tier& tier : tiers_) {
    if (auto b = sample_from(tier, v, t, rng, exclude)) return *b;
  }
  throw std::runtime_error(fmt::format("negative pool exhausted for node {} at t={}", v, t));
}

NodeId sample_negative(const EventStream& stream, const NeighborIndex& index, NodeId v, double t,
                       Rng& rng) {
  return NegativeSampler::for_stream(stream, index, false).sample(v, t, rng);
}

// ---------------------------------------------------------------------------

const char* to_string(TaskMode mode) {
  return mode == TaskMode::node_classification ? "node_classification" : "link_prediction";
}

const char* to_string(LinkSetting setting) {
  return setting == LinkSetting::transductive ? "transductive" : "inductive";
}

namespace {

std::vector<std::size_t> sample_without_replacement(const std::vector<std::size_t>& from,
                                                    std::size_t count, Rng& rng) {
  std::vector<std::size_t> pool = from;
  count = std::min(count, pool.size());
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(count);
  std::sort(pool.begin(), pool.end());
  return pool;
}

std::vector<std::size_t> labeled_events(const EventStream& s, IndexRange r) {
  std::vector<std::size_t> out;
  for (std::size_t i = r.begin; i < r.end; ++i) {
    if (s.events[i].state_label) out.push_back(i);
  }
  return out;
}

bool covers(const EventStream& s, const std::vector<std::size_t>& picked,
            const std::vector<int>& classes) {
  std::set<int> seen;
  for (std::size_t i : picked) seen.insert(*s.events[i].state_label);
  return std::all_of(classes.begin(), classes.end(), [&](int c) { return seen.count(c) != 0; });
}

/// Draws `shots` events with every class present; returns empty on failure.
std::vector<std::size_t> draw_covering(const EventStream& s, const std::vector<std::size_t>& pool,
                                       const std::vector<int>& classes, std::size_t shots,
                                       std::size_t retries, Rng& rng) {
  for (std::size_t attempt = 0; attempt < retries; ++attempt) {
    auto picked = sample_without_replacement(pool, shots, rng);
    if (covers(s, picked, classes)) return picked;
  }
  return {};
}

std::vector<NodeId> destination_pool(const EventStream& s, IndexRange r) {
  std::set<NodeId> nodes;
  for (std::size_t i = r.begin; i < r.end; ++i) nodes.insert(s.events[i].dst);
  return {nodes.begin(), nodes.end()};
}

// Range destinations first, then the whole destination partition, then the
// partition without the "never linked" condition.
void add_fallbacks(NegativeSampler& sampler, const EventStream& s) {
  const std::size_t first = s.bipartite() ? s.num_users : 0;
  std::vector<NodeId> part(s.num_nodes - first);
  std::iota(part.begin(), part.end(), static_cast<NodeId>(first));
  sampler.with_fallback(part);
  sampler.with_fallback(std::move(part), true);
}

void add_pairs(const StreamContext& ctx, const std::vector<std::size_t>& events,
               const NegativeSampler& sampler, Rng& rng, std::vector<PairInstance>& positives,
               std::vector<PairInstance>& negatives) {
  for (std::size_t i : events) {
    const Event& e = ctx.stream.events[i];
    positives.push_back({e.src, e.dst, e.t, 1});
    negatives.push_back({e.src, sampler.sample(e.src, e.t, rng, e.dst), e.t, 0});
  }
}

}  // namespace

Task sample_task(const StreamContext& ctx, TaskMode mode, Rng& rng,
                 const TaskSamplerConfig& config) {
  const EventStream& s = ctx.stream;
  const SplitIndices& sp = ctx.split;
  Task task;
  task.mode = mode;

  if (mode == TaskMode::node_classification) {
    const auto pool = labeled_events(s, sp.tune_pool);
    if (pool.size() < config.shots) {
      throw std::runtime_error(fmt::format("tune pool has {} labeled events, need {}",
                                           pool.size(), config.shots));
    }
    std::set<int> cls;
    for (std::size_t i : pool) cls.insert(*s.events[i].state_label);
    task.classes.assign(cls.begin(), cls.end());

    task.sampled_events =
        draw_covering(s, pool, task.classes, config.shots, config.max_retries, rng);
    if (task.sampled_events.empty()) {
      throw std::runtime_error(fmt::format(
          "could not cover all {} classes after {} retries", task.classes.size(),
          config.max_retries));
    }
    for (std::size_t i : task.sampled_events) {
      const Event& e = s.events[i];
      task.support_nodes.push_back({e.src, e.t, *e.state_label});
    }

    const auto vpool = labeled_events(s, sp.valid_pool);
    auto vpicked = draw_covering(s, vpool, task.classes, config.shots, config.max_retries, rng);
    if (vpicked.empty()) vpicked = sample_without_replacement(vpool, config.shots, rng);
    for (std::size_t i : vpicked) {
      const Event& e = s.events[i];
      task.valid_nodes.push_back({e.src, e.t, *e.state_label});
    }

    auto queries = labeled_events(s, sp.test);
    if (config.max_queries > 0 && queries.size() > config.max_queries) {
      queries = sample_without_replacement(queries, config.max_queries, rng);
    }
    for (std::size_t i : queries) {
      const Event& e = s.events[i];
      task.query_nodes.push_back({e.src, e.t, *e.state_label});
    }
    return task;
  }

  // link prediction
  std::vector<std::size_t> pool(sp.tune_pool.size());
  std::iota(pool.begin(), pool.end(), sp.tune_pool.begin);
  if (pool.size() < config.shots) {
    throw std::runtime_error(
        fmt::format("tune pool has {} events, need {}", pool.size(), config.shots));
  }
  task.sampled_events = sample_without_replacement(pool, config.shots, rng);
  {
    NegativeSampler sampler(ctx.index, destination_pool(s, sp.tune_pool));
    add_fallbacks(sampler, s);
    std::vector<PairInstance> pos, neg;
    add_pairs(ctx, task.sampled_events, sampler, rng, pos, neg);
    task.support_pairs = pos;
    task.support_pairs.insert(task.support_pairs.end(), neg.begin(), neg.end());
  }
  {
    std::vector<std::size_t> vpool(sp.valid_pool.size());
    std::iota(vpool.begin(), vpool.end(), sp.valid_pool.begin);
    const auto vpicked = sample_without_replacement(vpool, config.shots, rng);
    NegativeSampler sampler(ctx.index, destination_pool(s, sp.valid_pool));
    add_fallbacks(sampler, s);
    std::vector<PairInstance> pos, neg;
    add_pairs(ctx, vpicked, sampler, rng, pos, neg);
    task.valid_pairs = pos;
    task.valid_pairs.insert(task.valid_pairs.end(), neg.begin(), neg.end());
  }
  {
    std::vector<std::size_t> tpool(sp.test.size());
    std::iota(tpool.begin(), tpool.end(), sp.test.begin);
    if (config.max_queries > 0 && tpool.size() > config.max_queries) {
      tpool = sample_without_replacement(tpool, config.max_queries, rng);
    }
    NegativeSampler sampler(ctx.index, destination_pool(s, sp.test));
    add_fallbacks(sampler, s);
    for (std::size_t i : tpool) {
      const Event& e = s.events[i];
      task.query_pairs.push_back({e.src, e.dst, e.t, 1});
      task.query_pairs.push_back({e.src, sampler.sample(e.src, e.t, rng, e.dst), e.t, 0});
    }
  }

  std::unordered_set<NodeId> seen;
  for (std::size_t i = sp.pretrain.begin; i < sp.pretrain.end; ++i) {
    seen.insert(s.events[i].src);
    seen.insert(s.events[i].dst);
  }
  for (const PairInstance& p : task.support_pairs) {
    seen.insert(p.src);
    seen.insert(p.dst);
  }
  for (const PairInstance& p : task.query_pairs) {
    if (seen.count(p.src) == 0 && seen.count(p.dst) == 0) task.inductive_pairs.push_back(p);
  }
  return task;
}

}  // namespace dualprompt
