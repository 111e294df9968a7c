#include "dualprompt/encoder.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <fmt/format.h>
#include <openssl/evp.h>

namespace dualprompt {

using nlohmann::json;

void EncoderConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw std::invalid_argument(fmt::format("encoder.{}: {}", field, why));
  };
  if (d_t < 2 || d_t % 2 != 0) fail("d_t", "must be even and >= 2");
  if (d_h < 1) fail("d_h", "must be >= 1");
  if (layers < 1) fail("layers", "must be >= 1");
  if (neighbors < 1) fail("neighbors", "must be >= 1");
}

std::size_t EncoderConfig::entry_dim(std::size_t layer) const {
  const std::size_t h = layer <= 1 ? d_x : d_h;
  return h + d_t + d_e;
}

namespace {
const char* to_string(TimeMode m) { return m == TimeMode::elapsed ? "elapsed" : "absolute"; }
const char* to_string(NeighborPolicy p) {
  return p == NeighborPolicy::most_recent ? "most_recent" : "uniform";
}
}  // namespace

void to_json(json& j, const EncoderConfig& c) {
  j = json{{"d_x", c.d_x},
           {"d_t", c.d_t},
           {"d_h", c.d_h},
           {"d_e", c.d_e},
           {"layers", c.layers},
           {"neighbors", c.neighbors},
           {"time_mode", to_string(c.time_mode)},
           {"neighbor_policy", to_string(c.neighbor_policy)},
           {"neighbor_seed", c.neighbor_seed}};
}

void from_json(const json& j, EncoderConfig& c) {
  j.at("d_x").get_to(c.d_x);
  j.at("d_t").get_to(c.d_t);
  j.at("d_h").get_to(c.d_h);
  j.at("d_e").get_to(c.d_e);
  j.at("layers").get_to(c.layers);
  j.at("neighbors").get_to(c.neighbors);
  const auto tm = j.at("time_mode").get<std::string>();
  if (tm == "elapsed") {
    c.time_mode = TimeMode::elapsed;
  } else if (tm == "absolute") {
    c.time_mode = TimeMode::absolute;
  } else {
    throw FormatError(fmt::format("config.time_mode: unknown value '{}'", tm));
  }
  const auto np = j.at("neighbor_policy").get<std::string>();
  if (np == "most_recent") {
    c.neighbor_policy = NeighborPolicy::most_recent;
  } else if (np == "uniform") {
    c.neighbor_policy = NeighborPolicy::uniform;
  } else {
    throw FormatError(fmt::format("config.neighbor_policy: unknown value '{}'", np));
  }
  j.at("neighbor_seed").get_to(c.neighbor_seed);
}

std::string param_names::layer(std::size_t layer, const char* what) {
  return fmt::format("encoder.layer{}.{}", layer, what);
}

void init_encoder_params(ParamRegistry& registry, const EncoderConfig& config, double time_span,
                         Rng& rng) {
  config.validate();
  const double span = time_span > 0.0 ? time_span : 1.0;
  const double lo = std::log(std::min(1.0 / span, 10.0));
  const double hi = std::log(10.0);
  std::uniform_real_distribution<double> logw(lo, hi);
  Matrix omega(1, config.d_t / 2);
  for (std::size_t i = 0; i < omega.size(); ++i) omega[i] = std::exp(logw(rng));
  std::sort(omega.flat().begin(), omega.flat().end());
  registry.add(param_names::omega, std::move(omega));

  auto uniform = [&rng](std::size_t rows, std::size_t cols, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
    std::uniform_real_distribution<double> u(-bound, bound);
    Matrix m(rows, cols);
    for (double& x : m.flat()) x = u(rng);
    return m;
  };
  for (std::size_t l = 1; l <= config.layers; ++l) {
    const std::size_t in = config.entry_dim(l);
    registry.add(param_names::layer(l, "query"), uniform(in, config.d_h, in));
    registry.add(param_names::layer(l, "key"), uniform(in, config.d_h, in));
    registry.add(param_names::layer(l, "value"), uniform(in, config.d_h, in));
    registry.add(param_names::layer(l, "out_w"), uniform(config.d_h, config.d_h, config.d_h));
    registry.add(param_names::layer(l, "out_b"), uniform(1, config.d_h, config.d_h));
  }
}

Matrix time_encode(std::span<const double> omega, double t) {
  const std::size_t d = 2 * omega.size();
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  Matrix out(1, d);
  for (std::size_t i = 0; i < omega.size(); ++i) {
    out[2 * i] = s * std::cos(omega[i] * t);
    out[2 * i + 1] = s * std::sin(omega[i] * t);
  }
  return out;
}

Var time_encode(Var omega, const Matrix& times) {
  Graph& g = omega.graph();
  if (times.cols() != 1 || omega.value().rows() != 1) {
    throw ShapeError(fmt::format("time_encode: times {} omega {}", times.shape_string(),
                                 omega.value().shape_string()));
  }
  const double s = 1.0 / std::sqrt(static_cast<double>(2 * omega.value().cols()));
  Var phase = ops::matmul(g.constant(times), omega);
  return ops::scale(ops::interleave_cols(ops::cos(phase), ops::sin(phase)), s);
}

Var fuse(Var x, Var f) {
  if (x.value().rows() != f.value().rows()) {
    throw ShapeError(fmt::format("fuse: node features {} vs time features {}",
                                 x.value().shape_string(), f.value().shape_string()));
  }
  if (x.value().cols() == 0) return f;
  return ops::concat_cols({x, f});
}

AttentionVars bind_attention(Graph& g, ParamRegistry& registry, std::size_t layer) {
  return {g.param(registry.at(param_names::layer(layer, "query"))),
          g.param(registry.at(param_names::layer(layer, "key"))),
          g.param(registry.at(param_names::layer(layer, "value"))),
          g.param(registry.at(param_names::layer(layer, "out_w"))),
          g.param(registry.at(param_names::layer(layer, "out_b")))};
}

Var attend_segments(const AttentionVars& p, Var entries, const std::vector<std::size_t>& self_rows,
                    ops::Segments segments, std::size_t num_targets) {
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(p.query.value().cols()));
  Var q = ops::matmul(ops::gather_rows(entries, self_rows), p.query);
  Var k = ops::matmul(entries, p.key);
  Var v = ops::matmul(entries, p.value);
  Var scores = ops::scale(ops::segment_dot(k, q, segments), inv_sqrt);
  Var weights = ops::segment_softmax(scores, segments, num_targets);
  Var pooled = ops::segment_weighted_sum(weights, v, segments, num_targets);
  return ops::tanh(ops::add_row(ops::matmul(pooled, p.out_w), p.out_b));
}

Var attend(const AttentionVars& p, Var self_fused, Var neighbor_fused) {
  const std::size_t n = neighbor_fused.value().rows();
  Var entries = n == 0 ? self_fused
                       : ops::concat_rows(std::vector<Var>{self_fused, neighbor_fused});
  auto seg = std::make_shared<const std::vector<std::size_t>>(n + 1, 0);
  return attend_segments(p, entries, {0}, seg, 1);
}

std::size_t EncodePlan::total_entries() const {
  std::size_t n = 0;
  for (const auto& l : levels) n += l.node.size();
  return n;
}

// ---------------------------------------------------------------------------

TemporalEncoder::TemporalEncoder(const EventStream& stream, const NeighborIndex& index,
                                 EncoderConfig config)
    : stream_(&stream), index_(&index), config_(config) {
  config_.validate();
  if (stream.d_x() != config_.d_x) {
    throw std::invalid_argument(fmt::format("encoder: stream d_x {} != configured d_x {}",
                                            stream.d_x(), config_.d_x));
  }
  if (stream.d_e != config_.d_e) {
    throw std::invalid_argument(fmt::format("encoder: stream d_e {} != configured d_e {}",
                                            stream.d_e, config_.d_e));
  }
}

std::vector<NeighborEntry> TemporalEncoder::neighbors(NodeId v, double t) const {
  if (config_.neighbor_policy == NeighborPolicy::most_recent) {
    return index_->before(v, t, config_.neighbors);
  }
  const std::size_t avail = index_->count_before(v, t);
  if (avail <= config_.neighbors) return index_->before(v, t, avail == 0 ? 1 : avail);
  std::uint64_t tbits = 0;
  std::memcpy(&tbits, &t, sizeof t);
  std::seed_seq seq{config_.neighbor_seed, static_cast<std::uint64_t>(v), tbits};
  Rng rng(seq);
  std::vector<std::size_t> picks(avail);
  for (std::size_t i = 0; i < avail; ++i) picks[i] = i;
  for (std::size_t i = 0; i < config_.neighbors; ++i) {
    std::uniform_int_distribution<std::size_t> u(i, avail - 1);
    std::swap(picks[i], picks[u(rng)]);
  }
  picks.resize(config_.neighbors);
  std::sort(picks.begin(), picks.end(), std::greater<>());
  const auto h = index_->history(v);
  std::vector<NeighborEntry> out;
  for (std::size_t i : picks) out.push_back(h[i]);
  return out;
}

EncodePlan TemporalEncoder::plan(std::span<const NodeQuery> queries) const {
  EncodePlan plan;
  plan.num_queries = queries.size();
  plan.levels.resize(config_.layers);
  std::vector<NodeQuery> targets(queries.begin(), queries.end());
  for (const auto& q : targets) {
    if (q.node >= stream_->num_nodes) {
      throw std::out_of_range(fmt::format("encode: unknown node {}", q.node));
    }
  }
  const bool elapsed = config_.time_mode == TimeMode::elapsed;
  for (std::size_t lvl = config_.layers; lvl-- > 0;) {
    auto& L = plan.levels[lvl];
    L.num_targets = targets.size();
    std::vector<std::size_t> seg;
    std::vector<double> tin;
    std::vector<std::size_t> edges;  // event index + 1, 0 for self
    std::vector<NodeQuery> next;
    for (std::size_t s = 0; s < targets.size(); ++s) {
      const auto [v, t] = targets[s];
      L.self_rows.push_back(L.node.size());
      L.node.push_back(v);
      L.entry_time.push_back(t);
      tin.push_back(elapsed ? 0.0 : t);
      edges.push_back(0);
      seg.push_back(s);
      next.push_back({v, t});
      for (const NeighborEntry& n : neighbors(v, t)) {
        L.node.push_back(n.node);
        L.entry_time.push_back(n.t);
        tin.push_back(elapsed ? t - n.t : n.t);
        edges.push_back(n.event + 1);
        seg.push_back(s);
        next.push_back({n.node, n.t});
      }
    }
    const std::size_t m = L.node.size();
    L.time_input = Matrix::column(std::move(tin));
    L.raw_features = Matrix(m, config_.d_x);
    L.edge_features = Matrix(m, config_.d_e);
    for (std::size_t i = 0; i < m; ++i) {
      const auto src = stream_->node_feat.row_span(L.node[i]);
      std::copy(src.begin(), src.end(), L.raw_features.row_span(i).begin());
      if (edges[i] != 0 && config_.d_e > 0) {
        const auto& ef = stream_->events[edges[i] - 1].edge_feat;
        std::copy(ef.begin(), ef.end(), L.edge_features.row_span(i).begin());
      }
    }
    L.segments = std::make_shared<const std::vector<std::size_t>>(std::move(seg));
    targets = std::move(next);
  }
  return plan;
}

Var TemporalEncoder::encode(Graph& g, ParamRegistry& params, const EncodePlan& plan,
                            const FeatureHook& hook) const {
  if (plan.levels.size() != config_.layers) {
    throw std::invalid_argument("encode: plan built for a different layer count");
  }
  Var omega = g.param(params.at(param_names::omega));
  Var h;
  for (std::size_t lvl = 0; lvl < plan.levels.size(); ++lvl) {
    const auto& L = plan.levels[lvl];
    Var raw_time = time_encode(omega, L.time_input);
    const auto out = hook.apply(g.constant(L.raw_features), raw_time, lvl == 0);
    std::vector<Var> parts{lvl == 0 ? out.node : h, out.time};
    if (config_.d_e > 0) parts.push_back(g.constant(L.edge_features));
    if (parts.front().value().cols() == 0) parts.erase(parts.begin());
    Var entries = ops::concat_cols(parts);
    h = attend_segments(bind_attention(g, params, lvl + 1), entries, L.self_rows, L.segments,
                        L.num_targets);
  }
  return h;
}

Var TemporalEncoder::encode_node(Graph& g, ParamRegistry& params, NodeId v, double t,
                                 const FeatureHook& hook) const {
  const NodeQuery q{v, t};
  return encode(g, params, plan(std::span<const NodeQuery>(&q, 1)), hook);
}

// ---------------------------------------------------------------------------
// serialization

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint encoding assumes a little-endian host");

std::string encode_base64(const Matrix& m) {
  const auto* bytes = reinterpret_cast<const unsigned char*>(m.flat().data());
  const std::size_t n = m.size() * sizeof(double);
  std::string out(4 * ((n + 2) / 3), '\0');
  const int written = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes,
                                      static_cast<int>(n));
  out.resize(static_cast<std::size_t>(written));
  return out;
}

std::vector<double> decode_base64(const std::string& text, const std::string& field) {
  if (text.size() % 4 != 0) throw FormatError(fmt::format("{}: malformed base64", field));
  std::vector<unsigned char> buf(3 * text.size() / 4 + 1);
  const int n = EVP_DecodeBlock(buf.data(), reinterpret_cast<const unsigned char*>(text.data()),
                                static_cast<int>(text.size()));
  if (n < 0) throw FormatError(fmt::format("{}: malformed base64", field));
  std::size_t len = static_cast<std::size_t>(n);
  if (!text.empty() && text.back() == '=') --len;
  if (text.size() > 1 && text[text.size() - 2] == '=') --len;
  if (len % sizeof(double) != 0) {
    throw FormatError(fmt::format("{}: byte length {} is not a multiple of 8", field, len));
  }
  std::vector<double> out(len / sizeof(double));
  if (len > 0) std::memcpy(out.data(), buf.data(), len);
  return out;
}

template <typename T>
T field(const json& j, const std::string& key, const std::string& path) {
  if (!j.is_object() || !j.contains(key)) throw FormatError(fmt::format("missing field '{}'", path));
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw FormatError(fmt::format("field '{}': {}", path, e.what()));
  }
}

}  // namespace

json params_to_json(const ParamRegistry& params) {
  json out = json::object();
  for (const Parameter& p : params) {
    out[p.name] = {{"shape", {p.value.rows(), p.value.cols()}}, {"data", encode_base64(p.value)}};
  }
  return out;
}

ParamRegistry params_from_json(const json& j) {
  if (!j.is_object()) throw FormatError("field 'params' must be an object");
  ParamRegistry reg;
  for (const auto& [name, entry] : j.items()) {
    const std::string path = "params." + name;
    const auto shape = field<std::vector<std::size_t>>(entry, "shape", path + ".shape");
    if (shape.size() != 2) throw FormatError(fmt::format("field '{}.shape': rank != 2", path));
    auto data = decode_base64(field<std::string>(entry, "data", path + ".data"), path + ".data");
    if (data.size() != shape[0] * shape[1]) {
      throw FormatError(fmt::format("field '{}.data': {} values for shape {}x{}", path,
                                    data.size(), shape[0], shape[1]));
    }
    reg.add(name, Matrix(shape[0], shape[1], std::move(data)));
  }
  return reg;
}

void save_document(const std::filesystem::path& path, const std::string& kind,
                   const json& config, const ParamRegistry& params) {
  json doc = {{"format_version", kFormatVersion},
              {"kind", kind},
              {"config", config},
              {"params", params_to_json(params)}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  out << doc.dump() << '\n';
  if (!out) throw std::runtime_error(fmt::format("write failed for '{}'", path.string()));
}

std::pair<json, ParamRegistry> load_document(const std::filesystem::path& path,
                                             const std::string& kind) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("cannot open '{}'", path.string()));
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(fmt::format("'{}' is not valid JSON: {}", path.string(), e.what()));
  }
  const int version = field<int>(doc, "format_version", "format_version");
  if (version != kFormatVersion) {
    throw FormatError(fmt::format("field 'format_version': file has version {}, expected {}",
                                  version, kFormatVersion));
  }
  const auto k = field<std::string>(doc, "kind", "kind");
  if (k != kind) {
    throw FormatError(fmt::format("field 'kind': expected '{}', got '{}'", kind, k));
  }
  if (!doc.contains("config")) throw FormatError("missing field 'config'");
  if (!doc.contains("params")) throw FormatError("missing field 'params'");
  return {doc.at("config"), params_from_json(doc.at("params"))};
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  save_document(path, "checkpoint", json(checkpoint.config), checkpoint.params);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto [config, params] = load_document(path, "checkpoint");
  Checkpoint ck;
  try {
    ck.config = config.get<EncoderConfig>();
  } catch (const json::exception& e) {
    throw FormatError(fmt::format("field 'config': {}", e.what()));
  }
  ck.params = std::move(params);
  return ck;
}

}  // namespace dualprompt
