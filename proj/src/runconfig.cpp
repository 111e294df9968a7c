#include "dualprompt/runconfig.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>

namespace dualprompt {

namespace pt = boost::property_tree;

const char* to_string(Command command) {
  switch (command) {
    case Command::synth: return "synth";
    case Command::pretrain: return "pretrain";
    case Command::tune_eval: return "tune-eval";
    case Command::ablate: return "ablate";
  }
  return "unknown";
}

namespace {

std::string unquote(std::string v) {
  if (v.size() >= 2 && (v.front() == '"' || v.front() == '\'') && v.back() == v.front())
    return v.substr(1, v.size() - 2);
  return v;
}

// Reads typed values out of one parsed file and remembers which keys were
// consumed so leftovers can be reported.
class Reader {
 public:
  Reader(const pt::ptree& tree, std::filesystem::path base) : tree_(tree), base_(std::move(base)) {}

  std::optional<std::string> raw(const std::string& section, const std::string& key) {
    used_.insert({section, key});
    const auto sec = tree_.get_child_optional(section);
    if (!sec) return std::nullopt;
    const auto v = sec->get_optional<std::string>(pt::ptree::path_type(key, '\0'));
    if (!v) return std::nullopt;
    return unquote(*v);
  }

  void get(const std::string& s, const std::string& k, std::size_t& out) {
    if (auto v = raw(s, k)) out = to_unsigned(s, k, *v);
  }
  void get(const std::string& s, const std::string& k, std::optional<std::uint64_t>& out) {
    if (auto v = raw(s, k)) out = to_unsigned(s, k, *v);
  }
  void get(const std::string& s, const std::string& k, double& out) {
    const auto v = raw(s, k);
    if (!v) return;
    double d = 0.0;
    const auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), d);
    if (v->empty() || ec != std::errc() || ptr != v->data() + v->size())
      fail(s, k, fmt::format("expected a number, got '{}'", *v));
    out = d;
  }
  void get(const std::string& s, const std::string& k, bool& out) {
    const auto v = raw(s, k);
    if (!v) return;
    if (*v == "true") out = true;
    else if (*v == "false") out = false;
    else fail(s, k, fmt::format("expected true or false, got '{}'", *v));
  }
  void get_path(const std::string& s, const std::string& k, std::filesystem::path& out) {
    const auto v = raw(s, k);
    if (!v) return;
    if (v->empty()) fail(s, k, "empty path");
    std::filesystem::path p(*v);
    out = p.is_absolute() || base_.empty() ? p : base_ / p;
  }
  template <typename E>
  void get_enum(const std::string& s, const std::string& k, E& out,
                const std::map<std::string, E>& choices) {
    const auto v = raw(s, k);
    if (!v) return;
    const auto it = choices.find(*v);
    if (it == choices.end()) {
      std::string names;
      for (const auto& [name, _] : choices) names += (names.empty() ? "" : ", ") + name;
      fail(s, k, fmt::format("unknown value '{}' (expected one of: {})", *v, names));
    }
    out = it->second;
  }

  void reject_unknown() const {
    for (const auto& [section, body] : tree_) {
      if (body.empty() && !body.data().empty())
        throw ConfigError(fmt::format("{}: key outside of any [section]", section));
      for (const auto& [key, _] : body) {
        if (!used_.count({section, key}))
          throw ConfigError(fmt::format("{}.{}: unknown key", section, key));
      }
    }
  }

  [[noreturn]] static void fail(const std::string& s, const std::string& k, const std::string& why) {
    throw ConfigError(fmt::format("{}.{}: {}", s, k, why));
  }

 private:
  static std::uint64_t to_unsigned(const std::string& s, const std::string& k, const std::string& v) {
    std::uint64_t n = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), n);
    if (v.empty() || ec != std::errc() || ptr != v.data() + v.size())
      fail(s, k, fmt::format("expected a non-negative integer, got '{}'", v));
    return n;
  }

  const pt::ptree& tree_;
  std::filesystem::path base_;
  std::set<std::pair<std::string, std::string>> used_;
};

void check(bool ok, const std::string& field, const std::string& why) {
  if (!ok) throw ConfigError(fmt::format("{}: {}", field, why));
}

}  // namespace

void RunConfig::set_seed(std::uint64_t value) {
  seed = value;
  synth.seed = synth_seed.value_or(value);
  pretrain.seed = pretrain_seed.value_or(value);
  protocol.seed = protocol_seed.value_or(value);
}

std::filesystem::path RunConfig::checkpoint_path() const {
  return checkpoint.empty() ? out_dir / "checkpoint.json" : checkpoint;
}

void RunConfig::validate(Command command) const {
  // Component validators already name their fields; rethrow them as config errors.
  try {
    if (source == DataSource::synthetic) synth.validate();
    pretrain.validate();
    prompt.validate();
    protocol.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (source == DataSource::jodie) {
    check(!data_path.empty(), "data.path", "required when data.source = jodie");
    check(std::filesystem::is_regular_file(data_path), "data.path",
          fmt::format("no such file '{}'", data_path.string()));
  }
  check(d_x >= 1, "data.d_x", "must be >= 1");
  if (!node_features.empty()) {
    check(source == DataSource::jodie, "data.node_features", "only used with data.source = jodie");
    check(std::filesystem::is_regular_file(node_features), "data.node_features",
          fmt::format("no such file '{}'", node_features.string()));
  }
  check(!out_dir.empty(), "output.dir", "must not be empty");
  check(!std::filesystem::exists(out_dir) || std::filesystem::is_directory(out_dir), "output.dir",
        fmt::format("'{}' exists and is not a directory", out_dir.string()));
  if (command == Command::tune_eval || command == Command::ablate) {
    check(std::filesystem::is_regular_file(checkpoint_path()), "output.checkpoint",
          fmt::format("no checkpoint at '{}' (run pretrain first)", checkpoint_path().string()));
  }
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json data = {{"source", source == DataSource::synthetic ? "synthetic" : "jodie"}};
  if (source == DataSource::jodie) {
    data["path"] = data_path.string();
    data["d_x"] = d_x;
    if (!node_features.empty()) data["node_features"] = node_features.string();
  } else {
    data["synth"] = {{"n_users", synth.n_users},         {"n_items", synth.n_items},
                     {"n_events", synth.n_events},       {"period", synth.period},
                     {"archetypes", synth.archetypes},   {"noise", synth.noise},
                     {"mean_gap", synth.mean_gap},       {"item_affinity", synth.item_affinity},
                     {"d_x", synth.d_x},                 {"feature_noise", synth.feature_noise},
                     {"seed", synth.seed}};
  }
  nlohmann::json encoder = pretrain.encoder;
  return {
      {"seed", seed},
      {"data", data},
      {"encoder", encoder},
      {"pretrain",
       {{"epochs", pretrain.epochs},
        {"batch_size", pretrain.batch_size},
        {"tuples_per_epoch", pretrain.tuples_per_epoch},
        {"lr", pretrain.lr},
        {"tau", pretrain.tau},
        {"seed", pretrain.seed}}},
      {"prompt",
       {{"alpha", prompt.alpha},
        {"hidden", prompt.hidden},
        {"tau", prompt.tau},
        {"epochs", prompt.epochs},
        {"patience", prompt.patience},
        {"lr", prompt.lr},
        {"reembed_support", prompt.reembed_support_at_query_time}}},
      {"protocol",
       {{"tasks", protocol.tasks},
        {"seeds", protocol.seeds},
        {"seed", protocol.seed},
        {"node_classification", protocol.node_classification},
        {"link_prediction", protocol.link_prediction},
        {"shots", protocol.sampler.shots},
        {"max_queries", protocol.sampler.max_queries}}},
  };
}

RunConfig parse_run_config(const std::string& text, const std::filesystem::path& base_dir) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(fmt::format("config line {}: {}", e.line(), e.message()));
  }
  Reader r(tree, base_dir);
  RunConfig c;

  std::optional<std::uint64_t> seed;
  r.get("run", "seed", seed);

  r.get_enum("data", "source", c.source,
             {{"synthetic", DataSource::synthetic}, {"jodie", DataSource::jodie}});
  r.get_path("data", "path", c.data_path);
  r.get_path("data", "node_features", c.node_features);
  r.get("data", "d_x", c.d_x);

  r.get("synth", "n_users", c.synth.n_users);
  r.get("synth", "n_items", c.synth.n_items);
  r.get("synth", "n_events", c.synth.n_events);
  r.get("synth", "period", c.synth.period);
  r.get("synth", "archetypes", c.synth.archetypes);
  r.get("synth", "noise", c.synth.noise);
  r.get("synth", "mean_gap", c.synth.mean_gap);
  r.get("synth", "item_affinity", c.synth.item_affinity);
  r.get("synth", "d_x", c.synth.d_x);
  r.get("synth", "feature_noise", c.synth.feature_noise);
  r.get("synth", "seed", c.synth_seed);

  EncoderConfig& enc = c.pretrain.encoder;
  r.get("encoder", "d_t", enc.d_t);
  r.get("encoder", "d_h", enc.d_h);
  r.get("encoder", "layers", enc.layers);
  r.get("encoder", "neighbors", enc.neighbors);
  r.get_enum("encoder", "time_mode", enc.time_mode,
             {{"elapsed", TimeMode::elapsed}, {"absolute", TimeMode::absolute}});
  r.get_enum("encoder", "neighbor_policy", enc.neighbor_policy,
             {{"most_recent", NeighborPolicy::most_recent}, {"uniform", NeighborPolicy::uniform}});
  Similarity sim = Similarity::cosine;
  r.get_enum("encoder", "similarity", sim, {{"cosine", Similarity::cosine}, {"dot", Similarity::dot}});
  c.pretrain.sim = sim;
  c.prompt.sim = sim;

  r.get("pretrain", "epochs", c.pretrain.epochs);
  r.get("pretrain", "batch_size", c.pretrain.batch_size);
  r.get("pretrain", "tuples_per_epoch", c.pretrain.tuples_per_epoch);
  r.get("pretrain", "lr", c.pretrain.lr);
  r.get("pretrain", "tau", c.pretrain.tau);
  r.get("pretrain", "seed", c.pretrain_seed);

  r.get("prompt", "alpha", c.prompt.alpha);
  r.get("prompt", "hidden", c.prompt.hidden);
  r.get("prompt", "tau", c.prompt.tau);
  r.get("prompt", "epochs", c.prompt.epochs);
  r.get("prompt", "patience", c.prompt.patience);
  r.get("prompt", "lr", c.prompt.lr);
  r.get("prompt", "reembed_support", c.prompt.reembed_support_at_query_time);

  r.get("protocol", "tasks", c.protocol.tasks);
  r.get("protocol", "seeds", c.protocol.seeds);
  r.get("protocol", "seed", c.protocol_seed);
  r.get("protocol", "jobs", c.protocol.jobs);
  r.get("protocol", "shots", c.protocol.sampler.shots);
  r.get("protocol", "max_queries", c.protocol.sampler.max_queries);
  r.get("protocol", "max_retries", c.protocol.sampler.max_retries);
  enum class Modes { node, link, both };
  Modes modes = Modes::both;
  r.get_enum("protocol", "mode", modes, {{"node", Modes::node}, {"link", Modes::link}, {"both", Modes::both}});
  c.protocol.node_classification = modes != Modes::link;
  c.protocol.link_prediction = modes != Modes::node;

  r.get_path("output", "dir", c.out_dir);
  r.get_path("output", "checkpoint", c.checkpoint);
  r.get("output", "embeddings", c.write_embeddings);

  r.reject_unknown();
  c.set_seed(seed.value_or(0));
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot read config '{}'", path.string()));
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str(), path.parent_path());
}

}  // namespace dualprompt
