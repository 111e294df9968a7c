#include "dualprompt/pretrain.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

namespace dualprompt {

namespace {
// Tuples per computation graph; a batch is accumulated over several chunks.
constexpr std::size_t kChunk = 16;
}  // namespace

void PretrainConfig::validate() const {
  encoder.validate();
  if (!(tau > 0.0)) throw std::invalid_argument(fmt::format("pretrain.tau: must be > 0, got {}", tau));
  if (!(lr > 0.0)) throw std::invalid_argument("pretrain.lr: must be > 0");
  if (epochs < 1) throw std::invalid_argument("pretrain.epochs: must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("pretrain.batch_size: must be >= 1");
}

std::vector<ContrastiveTuple> build_tuples(const EventStream& stream, IndexRange range,
                                           const NegativeSampler& sampler, Rng& rng) {
  if (range.size() == 0) throw std::invalid_argument("build_tuples: empty range");
  std::vector<ContrastiveTuple> out;
  out.reserve(range.size());
  for (std::size_t i = range.begin; i < range.end; ++i) {
    const Event& e = stream.events[i];
    out.push_back({e.src, e.dst, sampler.sample(e.src, e.t, rng, e.dst), e.t});
  }
  return out;
}

Var similarity(Var a, Var b, Similarity sim) {
  if (sim == Similarity::cosine) return ops::row_dot(ops::normalize_rows(a), ops::normalize_rows(b));
  return ops::row_dot(a, b);
}

Var pretrain_loss(Var h_v, Var h_a, Var h_b, double tau, Similarity sim) {
  if (!(tau > 0.0)) throw std::invalid_argument("pretrain_loss: tau must be > 0");
  Var pos = similarity(h_v, h_a, sim);
  Var neg = similarity(h_v, h_b, sim);
  return ops::scale(ops::sub(pos, neg), -1.0 / tau);
}

double pretrain_loss_value(double sim_pos, double sim_neg, double tau) {
  return -(sim_pos - sim_neg) / tau;
}

Var contrastive_batch_loss(Graph& g, const TemporalEncoder& encoder, ParamRegistry& params,
                           std::span<const ContrastiveTuple> tuples, const FeatureHook& hook,
                           double tau, Similarity sim) {
  const std::size_t m = tuples.size();
  std::vector<NodeQuery> queries(3 * m);
  for (std::size_t i = 0; i < m; ++i) {
    queries[i] = {tuples[i].v, tuples[i].t};
    queries[m + i] = {tuples[i].a, tuples[i].t};
    queries[2 * m + i] = {tuples[i].b, tuples[i].t};
  }
  Var h = encoder.encode(g, params, encoder.plan(queries), hook);
  auto rows = [m](std::size_t block) {
    std::vector<std::size_t> r(m);
    std::iota(r.begin(), r.end(), block * m);
    return r;
  };
  Var per_tuple = pretrain_loss(ops::gather_rows(h, rows(0)), ops::gather_rows(h, rows(1)),
                                ops::gather_rows(h, rows(2)), tau, sim);
  return ops::mean(per_tuple);
}

PretrainResult run_pretraining(const EventStream& stream, const NeighborIndex& index,
                               const SplitIndices& split, const PretrainConfig& config,
                               const EpochCallback& on_epoch) {
  config.validate();
  const IndexRange range = split.pretrain;
  if (range.size() == 0) throw std::invalid_argument("run_pretraining: empty pre-training range");

  Rng rng(config.seed);
  PretrainResult result;
  result.checkpoint.config = config.encoder;
  ParamRegistry& params = result.checkpoint.params;
  const double span = stream.events[range.end - 1].t - stream.events[range.begin].t;
  init_encoder_params(params, config.encoder, span, rng);

  const TemporalEncoder encoder(stream, index, config.encoder);
  const IdentityHook identity;
  const NegativeSampler sampler = NegativeSampler::for_stream(stream, index);
  Adam adam({config.lr, 0.9, 0.999, 1e-8});

  std::vector<std::size_t> order(range.size());
  std::iota(order.begin(), order.end(), range.begin);
  const std::size_t per_epoch =
      config.tuples_per_epoch == 0 ? order.size() : std::min(order.size(), config.tuples_per_epoch);

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<ContrastiveTuple> tuples;
    tuples.reserve(per_epoch);
    for (std::size_t i = 0; i < per_epoch; ++i) {
      const Event& e = stream.events[order[i]];
      tuples.push_back({e.src, e.dst, sampler.sample(e.src, e.t, rng, e.dst), e.t});
    }

    double loss_sum = 0.0;
    for (std::size_t b0 = 0; b0 < tuples.size(); b0 += config.batch_size) {
      const std::size_t b1 = std::min(tuples.size(), b0 + config.batch_size);
      const double batch_n = static_cast<double>(b1 - b0);
      for (std::size_t c0 = b0; c0 < b1; c0 += kChunk) {
        const std::size_t c1 = std::min(b1, c0 + kChunk);
        const std::span<const ContrastiveTuple> chunk(tuples.data() + c0, c1 - c0);
        Graph g;
        Var loss = contrastive_batch_loss(g, encoder, params, chunk, identity, config.tau,
                                          config.sim);
        const double value = loss.scalar();
        if (!std::isfinite(value)) {
          throw std::runtime_error(fmt::format(
              "non-finite pre-training loss {} at epoch {}, tuples [{}, {})", value, epoch, c0, c1));
        }
        loss_sum += value * static_cast<double>(c1 - c0);
        g.backward(ops::scale(loss, static_cast<double>(c1 - c0) / batch_n));
      }
      adam.step(params);
    }

    EpochLog log;
    log.epoch = epoch;
    log.mean_loss = loss_sum / static_cast<double>(tuples.size());
    log.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
                      .count();
    result.epochs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return result;
}

}  // namespace dualprompt
