#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include <fmt/format.h>

#include "dualprompt/evalbench.hpp"

namespace dualprompt {

void SynthConfig::validate() const {
  if (n_users < 2) throw std::invalid_argument("synth.n_users: must be >= 2");
  if (archetypes < 1) throw std::invalid_argument("synth.archetypes: must be >= 1");
  if (n_items < 2 * archetypes) {
    throw std::invalid_argument(
        fmt::format("synth.n_items: need at least {} (two groups per archetype)", 2 * archetypes));
  }
  if (n_events < 1) throw std::invalid_argument("synth.n_events: must be >= 1");
  if (!(period > 0.0)) throw std::invalid_argument("synth.period: must be > 0");
  if (!(noise >= 0.0 && noise < 1.0)) throw std::invalid_argument("synth.noise: must be in [0, 1)");
  if (!(mean_gap > 0.0)) throw std::invalid_argument("synth.mean_gap: must be > 0");
  if (!(item_affinity >= 0.0 && item_affinity <= 1.0))
    throw std::invalid_argument("synth.item_affinity: must be in [0, 1]");
  if (d_x < 3 * archetypes) {
    throw std::invalid_argument(
        fmt::format("synth.d_x: need at least {} to encode archetypes and item groups", 3 * archetypes));
  }
  if (!(feature_noise >= 0.0)) throw std::invalid_argument("synth.feature_noise: must be >= 0");
}

double synth_phase(double t, double period) {
  const double x = t / period;
  return x - std::floor(x);
}

int synth_label(std::size_t archetype, double phase) {
  return archetype == 1 && phase >= 0.5 ? 1 : 0;
}

std::size_t synth_group(std::size_t archetype, bool second_half, std::size_t archetypes) {
  if (archetype >= archetypes) throw std::out_of_range("synth_group: archetype out of range");
  return 2 * archetype + (second_half ? 1 : 0);
}

SynthStream generate_synthetic(const SynthConfig& config) {
  config.validate();
  Rng rng(config.seed);
  SynthStream out;
  const std::size_t groups = 2 * config.archetypes;

  out.archetype.resize(config.n_users);
  for (std::size_t u = 0; u < config.n_users; ++u) out.archetype[u] = u % config.archetypes;
  std::shuffle(out.archetype.begin(), out.archetype.end(), rng);

  out.item_group.resize(config.n_items);
  std::vector<std::vector<std::size_t>> members(groups);
  for (std::size_t i = 0; i < config.n_items; ++i) {
    out.item_group[i] = i % groups;
    members[i % groups].push_back(i);
  }

  EventStream& s = out.stream;
  s.num_users = config.n_users;
  s.num_nodes = config.n_users + config.n_items;
  s.d_e = 0;
  s.node_feat = Matrix(s.num_nodes, config.d_x);
  std::normal_distribution<double> gauss(0.0, config.feature_noise);
  for (std::size_t v = 0; v < s.num_nodes; ++v) {
    for (std::size_t j = 0; j < config.d_x; ++j) s.node_feat(v, j) = gauss(rng);
    if (v < config.n_users) {
      s.node_feat(v, out.archetype[v]) += 1.0;
    } else {
      s.node_feat(v, config.archetypes + out.item_group[v - config.n_users]) += 1.0;
    }
  }

  std::exponential_distribution<double> gap(1.0 / config.mean_gap);
  std::uniform_int_distribution<std::size_t> pick_user(0, config.n_users - 1);
  std::uniform_int_distribution<std::size_t> pick_item(0, config.n_items - 1);
  std::bernoulli_distribution follow(config.item_affinity);
  std::bernoulli_distribution flip(config.noise);
  s.events.reserve(config.n_events);
  double t = 0.0;
  for (std::size_t k = 0; k < config.n_events; ++k) {
    if (k > 0) t += gap(rng);
    const std::size_t u = pick_user(rng);
    const std::size_t a = out.archetype[u];
    const double phase = synth_phase(t, config.period);
    std::size_t item;
    if (follow(rng)) {
      const auto& g = members[synth_group(a, phase >= 0.5, config.archetypes)];
      item = g[std::uniform_int_distribution<std::size_t>(0, g.size() - 1)(rng)];
    } else {
      item = pick_item(rng);
    }
    int label = synth_label(a, phase);
    if (flip(rng)) label = 1 - label;
    Event e;
    e.src = static_cast<NodeId>(u);
    e.dst = static_cast<NodeId>(config.n_users + item);
    e.t = t;
    e.state_label = label;
    s.events.push_back(std::move(e));
  }
  s.normalize();
  return out;
}

}  // namespace dualprompt
