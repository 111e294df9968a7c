#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "dualprompt/adam.hpp"
#include "dualprompt/encoder.hpp"

namespace dualprompt {

/// (v, a, b, t): (v, a, t) is an observed event, b is not linked to v by t.
struct ContrastiveTuple {
  NodeId v = 0;
  NodeId a = 0;
  NodeId b = 0;
  double t = 0.0;
};

struct PretrainConfig {
  EncoderConfig encoder;
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  /// Tuples drawn per epoch (without replacement); 0 uses the whole range.
  std::size_t tuples_per_epoch = 0;
  double lr = 1e-3;
  double tau = 0.1;
  Similarity sim = Similarity::cosine;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpochLog {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double wall_ms = 0.0;
};

struct PretrainResult {
  Checkpoint checkpoint;
  std::vector<EpochLog> epochs;
};

/// One tuple per event of `range`, negatives drawn with `sampler`.
std::vector<ContrastiveTuple> build_tuples(const EventStream& stream, IndexRange range,
                                           const NegativeSampler& sampler, Rng& rng);

/// Row-wise similarity of two m x d embedding blocks, m x 1.
Var similarity(Var a, Var b, Similarity sim);

/// Per-tuple -ln(exp(s_pos/tau) / exp(s_neg/tau)) = -(s_pos - s_neg)/tau, m x 1.
Var pretrain_loss(Var h_v, Var h_a, Var h_b, double tau, Similarity sim = Similarity::cosine);

/// Scalar form of the per-tuple loss.
double pretrain_loss_value(double sim_pos, double sim_neg, double tau);

/// Mean per-tuple loss of a tuple batch under the given hook; used by both
/// pre-training and link-prediction prompt tuning.
Var contrastive_batch_loss(Graph& g, const TemporalEncoder& encoder, ParamRegistry& params,
                           std::span<const ContrastiveTuple> tuples, const FeatureHook& hook,
                           double tau, Similarity sim);

using EpochCallback = std::function<void(const EpochLog&)>;

/// Seeded initialisation, Adam over shuffled mini-batches of the pre-training
/// range, mean loss per batch. Throws on a non-finite loss.
PretrainResult run_pretraining(const EventStream& stream, const NeighborIndex& index,
                               const SplitIndices& split, const PretrainConfig& config,
                               const EpochCallback& on_epoch = {});

}  // namespace dualprompt
