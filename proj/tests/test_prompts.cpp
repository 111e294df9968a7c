#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

#include "dualprompt/evalbench.hpp"
#include "dualprompt/prompts.hpp"
#include "test_support.hpp"

using namespace dualprompt;
using namespace dualprompt::testing;

namespace {

Matrix row(std::vector<double> v) {
  const std::size_t n = v.size();
  return Matrix(1, n, std::move(v));
}

bool bitwise_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.flat().data(), b.flat().data(), a.size() * sizeof(double)) == 0;
}

// A stream, its index and an untrained backbone; enough for tuning tests.
struct World {
  EventStream stream;
  NeighborIndex index;
  Checkpoint checkpoint;

  World(std::size_t users, std::size_t items, std::size_t events, std::size_t d_x,
        std::size_t layers, std::size_t k, std::uint64_t seed) {
    stream = random_stream(users, items, events, d_x, 0, seed);
    index = build_neighbor_index(stream);
    checkpoint.config.d_x = d_x;
    checkpoint.config.d_t = 4;
    checkpoint.config.d_h = 4;
    checkpoint.config.layers = layers;
    checkpoint.config.neighbors = k;
    Rng rng(seed + 1);
    init_encoder_params(checkpoint.params, checkpoint.config, stream.time_span(), rng);
  }
  TuneContext ctx() const { return {stream, index, checkpoint}; }
  TemporalEncoder encoder() const { return {stream, index, checkpoint.config}; }
};

// Random values in every prompt entry, including the zero-initialised ones.
void perturb(PromptState& s, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-0.8, 0.8);
  for (Parameter& p : s.params)
    for (double& x : p.value.flat()) x += u(rng);
}

PromptState make_state(std::size_t d_x, std::size_t d_t, AblationFlags flags = AblationFlags::all(),
                       std::size_t alpha = 2) {
  PromptConfig pc;
  pc.flags = flags;
  pc.alpha = alpha;
  Rng rng(3);
  return init_prompt_state(d_x, d_t, pc, rng);
}

}  // namespace

// ---------------------------------------------------------------------------
// dual prompts

TEST(NodePrompt, Examples) {
  Graph g;
  const Matrix x = row({3, 4, 5});
  EXPECT_TRUE(bitwise_equal(apply_node_prompt(g.constant(Matrix(1, 3, 1.0)), g.constant(x)).value(), x));
  const Var y = apply_node_prompt(g.constant(row({2, 0, 1})), g.constant(x));
  EXPECT_EQ(y.value()[0], 6.0);
  EXPECT_EQ(y.value()[1], 0.0);
  EXPECT_EQ(y.value()[2], 5.0);
  EXPECT_THROW(apply_node_prompt(g.constant(row({1, 1})), g.constant(x)), ShapeError);
}

TEST(NodePrompt, MatchesScalarLoop) {
  Rng rng(8);
  const Matrix p = random_matrix(1, 7, rng), x = random_matrix(5, 7, rng);
  Graph g;
  const Var y = apply_node_prompt(g.constant(p), g.constant(x));
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t j = 0; j < 7; ++j) EXPECT_NEAR(y.value()(r, j), p[j] * x(r, j), 1e-12);
}

TEST(TimePrompt, Examples) {
  Graph g;
  const Matrix f = row({0.5, -0.2, 0.1, 0.9});
  EXPECT_TRUE(bitwise_equal(apply_time_prompt(g.constant(Matrix(1, 4, 1.0)), g.constant(f)).value(), f));
  const Var z = apply_time_prompt(g.constant(Matrix(1, 4, 0.0)), g.constant(f));
  for (double v : z.value().flat()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(apply_time_prompt(g.constant(row({1, 1})), g.constant(f)), ShapeError);
}

TEST(TimePrompt, Gradient) {
  ParamRegistry reg;
  reg.add("p", row({0.9, -1.1, 0.4}));
  Rng rng(2);
  const Matrix f = random_matrix(4, 3, rng), w = random_matrix(4, 3, rng);
  const auto report = check_gradients(
      [&](Graph& g) {
        return ops::sum(ops::mul(ops::sigmoid(apply_time_prompt(g.param(reg.at("p")), g.constant(f))),
                                 g.constant(w)));
      },
      reg);
  EXPECT_LT(report.max_rel_error, 1e-6);
}

// ---------------------------------------------------------------------------
// condition-nets

TEST(ConditionNet, ZeroOutputLayerGivesOnes) {
  const PromptState s = make_state(5, 4);
  ParamRegistry reg = s.params;
  Graph g;
  const PromptVars v = bind_prompts(g, reg, s.flags);
  Rng rng(1);
  const Var a = tcn_generate(v.tcn, g.constant(random_matrix(3, 4, rng)));
  const Var b = ncn_generate(v.ncn, g.constant(random_matrix(3, 5, rng)));
  EXPECT_EQ(a.cols(), 5u);
  EXPECT_EQ(b.cols(), 4u);
  for (double x : a.value().flat()) EXPECT_EQ(x, 1.0);
  for (double x : b.value().flat()) EXPECT_EQ(x, 1.0);
}

TEST(ConditionNet, HandSetScalarOracle) {
  // d_t = 2 -> hidden 1 -> d_x = 2
  Graph g;
  ConditionNetVars net{g.constant(Matrix(2, 1, std::vector<double>{0.5, -1.5})),
                       g.constant(row({0.25})),
                       g.constant(row({2.0, -3.0})),
                       g.constant(row({0.1, 0.2}))};
  const double f0 = 0.6, f1 = 0.3;
  const Var out = tcn_generate(net, g.constant(row({f0, f1})));
  const double h = 1.0 / (1.0 + std::exp(-(0.5 * f0 - 1.5 * f1 + 0.25)));
  EXPECT_NEAR(out.value()[0], 1.0 + 2.0 * h + 0.1, 1e-12);
  EXPECT_NEAR(out.value()[1], 1.0 - 3.0 * h + 0.2, 1e-12);
}

TEST(ConditionNet, DistinctInputsGiveDistinctPrompts) {
  PromptState s = make_state(4, 6);
  perturb(s, 9);
  Graph g;
  const PromptVars v = bind_prompts(g, s.params, s.flags);
  Rng rng(5);
  std::vector<double> omega{0.2, 1.0, 3.0};
  // two times -> two time features -> two node prompts
  const Var a = tcn_generate(v.tcn, g.constant(time_encode(omega, 1.0)));
  const Var b = tcn_generate(v.tcn, g.constant(time_encode(omega, 2.5)));
  double diff = 0.0;
  for (std::size_t j = 0; j < 4; ++j) diff += std::abs(a.value()[j] - b.value()[j]);
  EXPECT_GT(diff, 1e-6);
  // two nodes -> two time prompts
  const Var c = ncn_generate(v.ncn, g.constant(random_matrix(1, 4, rng)));
  const Var d = ncn_generate(v.ncn, g.constant(random_matrix(1, 4, rng)));
  diff = 0.0;
  for (std::size_t j = 0; j < 6; ++j) diff += std::abs(c.value()[j] - d.value()[j]);
  EXPECT_GT(diff, 1e-6);
}

TEST(ConditionNet, GradientWrtNcn) {
  PromptState s = make_state(4, 6, {false, false, true, false});
  perturb(s, 4);
  Rng rng(6);
  const Matrix x = random_matrix(3, 4, rng), w = random_matrix(3, 6, rng);
  const auto report = check_gradients(
      [&](Graph& g) {
        const PromptVars v = bind_prompts(g, s.params, s.flags);
        return ops::sum(ops::mul(ncn_generate(v.ncn, g.constant(x)), g.constant(w)));
      },
      s.params);
  EXPECT_EQ(report.entries_checked, 4u * 2 + 2 + 2 * 6 + 6);
  EXPECT_LT(report.max_rel_error, 1e-6);
}

// ---------------------------------------------------------------------------
// prompted features

TEST(PromptedFeatures, IdentityState) {
  PromptState s = make_state(5, 4);
  Graph g;
  const PromptVars v = bind_prompts(g, s.params, s.flags);
  Rng rng(2);
  const Matrix x = random_matrix(6, 5, rng), f = random_matrix(6, 4, rng);
  const auto out = prompted_features(v, g.constant(x), g.constant(f));
  EXPECT_TRUE(bitwise_equal(out.node.value(), x));
  EXPECT_TRUE(bitwise_equal(out.time.value(), f));
}

TEST(PromptedFeatures, ZeroNodePromptAbsorbs) {
  PromptState s = make_state(5, 4);
  perturb(s, 3);
  s.params.at(prompt_names::node).value = Matrix(1, 5, 0.0);
  Graph g;
  const PromptVars v = bind_prompts(g, s.params, s.flags);
  Rng rng(2);
  const auto out = prompted_features(v, g.constant(random_matrix(3, 5, rng)),
                                     g.constant(random_matrix(3, 4, rng)));
  for (double x : out.node.value().flat()) EXPECT_EQ(x, 0.0);
}

TEST(PromptedFeatures, ConditionNetsSeePromptedInputs) {
  PromptState s = make_state(5, 4);
  perturb(s, 3);
  s.params.at(prompt_names::node).value = Matrix(1, 5, 1.0);
  Rng rng(2);
  const Matrix x = random_matrix(3, 5, rng), f = random_matrix(3, 4, rng);
  auto node_out = [&](const PromptState& st) {
    ParamRegistry reg = st.params;
    Graph g;
    const PromptVars v = bind_prompts(g, reg, st.flags);
    return prompted_features(v, g.constant(x), g.constant(f)).node.value();
  };
  const Matrix base = node_out(s);
  // p_node = 1 keeps x_node = x, so any change comes through TCN(p_time ⊙ f)
  PromptState t = s;
  t.params.at(prompt_names::time).value = row({2.0, 0.5, 1.0, -1.0});
  const Matrix moved = node_out(t);
  double diff = 0.0;
  for (std::size_t i = 0; i < base.size(); ++i) diff += std::abs(base[i] - moved[i]);
  EXPECT_GT(diff, 1e-6);
  // reference: TCN applied to the prompted time features
  ParamRegistry reg = t.params;
  Graph g;
  const PromptVars v = bind_prompts(g, reg, t.flags);
  const Var expect = ops::mul(tcn_generate(v.tcn, apply_time_prompt(v.p_time, g.constant(f))),
                              apply_node_prompt(v.p_node, g.constant(x)));
  for (std::size_t i = 0; i < moved.size(); ++i) EXPECT_EQ(moved[i], expect.value()[i]);
}

// ---------------------------------------------------------------------------
// prompted encoding

TEST(PromptedEncode, IdentityStateIsBitwiseUnprompted) {
  const World w(30, 20, 800, 5, 2, 8, 4);
  const TemporalEncoder enc = w.encoder();
  const PromptState s = make_state(5, 4);
  ParamRegistry combined = combine(w.checkpoint, s);
  ParamRegistry backbone = w.checkpoint.params;
  std::vector<NodeQuery> qs;
  Rng rng(1);
  for (int i = 0; i < 60; ++i) qs.push_back({static_cast<NodeId>(rng() % 50), 0.5 + (rng() % 1500) * 0.5});
  const EncodePlan plan = enc.plan(qs);
  for (const AblationFlags& flags : ablation_variants()) {
    PromptState st = make_state(5, 4, flags);
    ParamRegistry comb = combine(w.checkpoint, st);
    Graph a, b;
    const Var p = prompted_encode(a, enc, comb, flags, plan);
    const Var u = enc.encode(b, backbone, plan, IdentityHook{});
    EXPECT_TRUE(bitwise_equal(p.value(), u.value())) << flags.label();
  }
}

TEST(PromptedEncode, GradientsReachOnlyPrompts) {
  const World w(6, 4, 60, 4, 2, 5, 2);
  const TemporalEncoder enc = w.encoder();
  PromptState s = make_state(4, 4);
  perturb(s, 1);
  ParamRegistry combined = combine(w.checkpoint, s);
  std::vector<NodeQuery> qs{{0, 40.0}, {7, 50.0}};
  Graph g;
  const Var h = prompted_encode(g, enc, combined, s.flags, enc.plan(qs));
  g.backward(ops::sum(ops::tanh(h)));
  for (const Parameter& p : combined) {
    double norm = 0.0;
    for (double v : p.grad.flat()) norm += std::abs(v);
    if (p.frozen) EXPECT_EQ(norm, 0.0) << p.name;
    else EXPECT_GT(norm, 0.0) << p.name;
  }
  EXPECT_EQ(combined.trainable_count(), count_trainable(s).total);

  // and a perturbed state moves the embedding
  ParamRegistry backbone = w.checkpoint.params;
  Graph u;
  const Var plain = enc.encode(u, backbone, enc.plan(qs), IdentityHook{});
  double diff = 0.0;
  for (std::size_t i = 0; i < plain.value().size(); ++i) diff += std::abs(plain.value()[i] - h.value()[i]);
  EXPECT_GT(diff, 1e-6);
}

TEST(PromptedEncode, TuningObjectiveGradient) {
  // 10 nodes, d = 4, backbone frozen; node-classification objective
  const World w(6, 4, 60, 4, 2, 5, 7);
  const TemporalEncoder enc = w.encoder();
  PromptState s = make_state(4, 4);
  perturb(s, 2);
  ParamRegistry combined = combine(w.checkpoint, s);
  std::vector<NodeQuery> support{{0, 30.0}, {1, 35.0}, {2, 41.0}, {3, 52.0}};
  const std::vector<int> labels{0, 1, 0, 1};
  const EncodePlan plan = enc.plan(support);
  const auto report = check_gradients(
      [&](Graph& g) {
        const Var h = prompted_encode(g, enc, combined, s.flags, plan);
        const Prototypes protos = compute_prototypes(h, labels, {0, 1});
        return downstream_nc_loss(h, labels, protos, 0.5, Similarity::cosine);
      },
      combined);
  EXPECT_EQ(report.entries_checked, count_trainable(s).total);
  EXPECT_LT(report.max_rel_error, 1e-4) << report.worst_param;
}

// ---------------------------------------------------------------------------
// prototypes and the downstream loss

TEST(Prototypes, Means) {
  Graph g;
  const Matrix h(6, 2, std::vector<double>{1, 2, 3, 4, 3, 4, 0.5, 0.1, 0.2, 0.9, -0.4, 0.3});
  const std::vector<int> labels{7, 3, 3, 5, 5, 5};
  const Prototypes p = compute_prototypes(g.constant(h), labels, {3, 5, 7});
  const Matrix& e = p.embeddings.value();
  // single example
  EXPECT_EQ(e(2, 0), 1.0);
  EXPECT_EQ(e(2, 1), 2.0);
  // two identical examples
  EXPECT_EQ(e(0, 0), 3.0);
  EXPECT_EQ(e(0, 1), 4.0);
  // three examples
  EXPECT_NEAR(e(1, 0), (0.5 + 0.2 - 0.4) / 3.0, 1e-15);
  EXPECT_NEAR(e(1, 1), (0.1 + 0.9 + 0.3) / 3.0, 1e-15);
  EXPECT_THROW(compute_prototypes(g.constant(h), labels, {3, 5, 7, 9}), std::invalid_argument);
}

TEST(DownstreamLoss, ClosedForms) {
  Graph g;
  const Var q = g.constant(row({1.0, 0.0}));
  // one class
  Prototypes one{{0}, g.constant(row({0.3, 0.8}))};
  EXPECT_EQ(downstream_nc_loss(q, {0}, one, 0.1, Similarity::cosine).scalar(), 0.0);
  // equal similarities
  Prototypes tie{{0, 1}, g.constant(Matrix(2, 2, std::vector<double>{0, 1, 0, -1}))};
  EXPECT_NEAR(downstream_nc_loss(q, {0}, tie, 0.1, Similarity::cosine).scalar(), std::log(2.0), 1e-12);
  // sims (1, 0), tau = 1
  Prototypes two{{0, 1}, g.constant(Matrix(2, 2, std::vector<double>{2, 0, 0, 3}))};
  EXPECT_NEAR(downstream_nc_loss(q, {0}, two, 1.0, Similarity::cosine).scalar(),
              std::log(1.0 + std::exp(-1.0)), 1e-12);
  EXPECT_NEAR(std::log(1.0 + std::exp(-1.0)), 0.313262, 1e-6);
}

TEST(DownstreamLoss, NonNegative) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    Graph g;
    const std::size_t classes = 1 + trial % 4;
    std::vector<int> cls(classes), labels;
    for (std::size_t c = 0; c < classes; ++c) cls[c] = static_cast<int>(c);
    for (int i = 0; i < 5; ++i) labels.push_back(static_cast<int>(rng() % classes));
    Prototypes p{cls, g.constant(random_matrix(classes, 3, rng))};
    const double l =
        downstream_nc_loss(g.constant(random_matrix(5, 3, rng)), labels, p, 0.1, Similarity::cosine).scalar();
    EXPECT_GE(l, 0.0);
    if (classes == 1) EXPECT_EQ(l, 0.0);
  }
}

// ---------------------------------------------------------------------------
// parameter accounting

TEST(ParameterCount, Examples) {
  const PromptState s = make_state(4, 4);
  const ParameterCounts c = count_trainable(s);
  EXPECT_EQ(c.total, 52u);
  EXPECT_EQ(c.node_prompt, 4u);
  EXPECT_EQ(c.time_prompt, 4u);
  EXPECT_EQ(c.tcn, 22u);
  EXPECT_EQ(c.ncn, 22u);

  const ParameterCounts big = count_trainable(make_state(172, 172));
  EXPECT_EQ(big.tcn, 29842u);
  EXPECT_EQ(big.ncn, 29842u);
  EXPECT_EQ(big.total, 60028u);

  const PromptState minimal = make_state(8, 8, AblationFlags::all(), 8);
  EXPECT_EQ(minimal.tcn_hidden, 1u);
  EXPECT_EQ(minimal.ncn_hidden, 1u);
  EXPECT_EQ(count_trainable(minimal).total, closed_form_count(8, 8, 1, 1));
  EXPECT_EQ(count_trainable(make_state(8, 8, AblationFlags::none())).total, 0u);
}

TEST(ParameterCount, ClosedFormGrid) {
  for (std::size_t d_x : {2u, 4u, 8u, 16u})
    for (std::size_t d_t : {2u, 4u, 8u, 16u})
      for (std::size_t alpha : {1u, 2u, 4u}) {
        const PromptState s = make_state(d_x, d_t, AblationFlags::all(), alpha);
        EXPECT_EQ(s.tcn_hidden, std::max<std::size_t>(1, d_t / alpha));
        EXPECT_EQ(s.ncn_hidden, std::max<std::size_t>(1, d_x / alpha));
        EXPECT_EQ(count_trainable(s).total, closed_form_count(d_x, d_t, s.tcn_hidden, s.ncn_hidden))
            << d_x << " " << d_t << " " << alpha;
        std::size_t raw = 0;
        for (const Parameter& p : s.params) raw += p.value.size();
        EXPECT_EQ(raw, count_trainable(s).total);
      }
}

TEST(ParameterCount, ExplicitHiddenWidth) {
  PromptConfig pc;
  pc.hidden = 4;
  Rng rng(1);
  const PromptState s = init_prompt_state(172, 172, pc, rng);
  EXPECT_EQ(s.tcn_hidden, 4u);
  EXPECT_EQ(count_trainable(s).total, closed_form_count(172, 172, 4, 4));
}

// ---------------------------------------------------------------------------
// tuning

class Tuning : public ::testing::Test {
 protected:
  Tuning() : world(30, 20, 3000, 4, 1, 5, 12) {}
  Task task(TaskMode mode, std::uint64_t seed) const {
    Rng rng(seed);
    TaskSamplerConfig cfg;
    cfg.max_queries = 40;
    return sample_task({world.stream, world.index, chronological_split(world.stream)}, mode, rng, cfg);
  }
  PromptConfig config() const {
    PromptConfig pc;
    pc.epochs = 15;
    pc.seed = 4;
    return pc;
  }
  World world;
};

TEST_F(Tuning, BackboneUnchangedAndFrozenGradsZero) {
  const Checkpoint before = world.checkpoint;
  PromptConfig pc = config();
  pc.patience = 0;
  std::size_t calls = 0;
  double max_frozen_grad = 0.0, trainable_grad = 0.0;
  const TuneResult r = tune_prompts(world.ctx(), task(TaskMode::node_classification, 1), pc,
                                    [&](const ParamRegistry& reg, std::size_t) {
                                      ++calls;
                                      for (const Parameter& p : reg)
                                        for (double v : p.grad.flat()) {
                                          if (p.frozen) max_frozen_grad = std::max(max_frozen_grad, std::abs(v));
                                          else trainable_grad += std::abs(v);
                                        }
                                    });
  EXPECT_EQ(calls, 15u);
  EXPECT_EQ(r.epochs_run, 15u);
  EXPECT_EQ(max_frozen_grad, 0.0);
  EXPECT_GT(trainable_grad, 0.0);
  for (const Parameter& p : before.params)
    EXPECT_TRUE(bitwise_equal(p.value, world.checkpoint.params.at(p.name).value)) << p.name;
}

TEST_F(Tuning, DeterministicPerSeed) {
  for (TaskMode mode : {TaskMode::node_classification, TaskMode::link_prediction}) {
    const Task t = task(mode, 2);
    const TuneResult a = tune_prompts(world.ctx(), t, config());
    const TuneResult b = tune_prompts(world.ctx(), t, config());
    EXPECT_EQ(a.best_epoch, b.best_epoch);
    EXPECT_EQ(a.train_loss, b.train_loss);
    for (const Parameter& p : a.state.params)
      EXPECT_TRUE(bitwise_equal(p.value, b.state.params.at(p.name).value)) << p.name;
  }
}

TEST_F(Tuning, ReturnsBestValidationState) {
  const Task t = task(TaskMode::node_classification, 3);
  const TuneResult r = tune_prompts(world.ctx(), t, config());
  EXPECT_LE(r.best_epoch, r.epochs_run);
  ASSERT_EQ(r.train_loss.size(), r.epochs_run);
  for (double l : r.train_loss) EXPECT_TRUE(std::isfinite(l));
  // the returned state reproduces the recorded validation AUC
  const auto& valid = t.valid_nodes.empty() ? t.support_nodes : t.valid_nodes;
  std::vector<std::size_t> targets;
  for (const NodeInstance& q : valid)
    targets.push_back(static_cast<std::size_t>(
        std::find(t.classes.begin(), t.classes.end(), q.label) - t.classes.begin()));
  const Matrix probs = score_nodes(world.ctx(), r.state, t.support_nodes, t.classes, valid, config());
  const auto auc = class_auc(probs, targets);
  if (!auc) GTEST_SKIP() << "validation AUC undefined for this draw";
  EXPECT_NEAR(*auc, r.best_valid, 1e-12);
}

TEST_F(Tuning, NoTrainableParametersSkipsTraining) {
  PromptConfig pc = config();
  pc.flags = AblationFlags::none();
  const TuneResult r = tune_prompts(world.ctx(), task(TaskMode::node_classification, 1), pc);
  EXPECT_EQ(r.epochs_run, 0u);
  EXPECT_EQ(r.state.params.size(), 0u);
}

TEST_F(Tuning, ReembedFlagChangesPrototypes) {
  const Task t = task(TaskMode::node_classification, 5);
  const PromptState s = make_state(4, 4);
  PromptConfig pc = config();
  const Matrix a = score_nodes(world.ctx(), s, t.support_nodes, t.classes, t.query_nodes, pc);
  pc.reembed_support_at_query_time = true;
  const Matrix b = score_nodes(world.ctx(), s, t.support_nodes, t.classes, t.query_nodes, pc);
  ASSERT_EQ(a.rows(), b.rows());
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += std::abs(a[i] - b[i]);
  EXPECT_GT(diff, 1e-9);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < a.cols(); ++c) sum += a(r, c);
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

// ---------------------------------------------------------------------------
// persistence

TEST(PromptPersistence, RoundTripBitwise) {
  PromptState s = make_state(6, 4, {true, false, true, true});
  perturb(s, 8);
  auto dir = temp_dir("prompt_state");
  save_prompt_state(s, dir / "p.json");
  const PromptState back = load_prompt_state(dir / "p.json");
  EXPECT_EQ(back.flags, s.flags);
  EXPECT_EQ(back.tcn_hidden, s.tcn_hidden);
  EXPECT_EQ(back.ncn_hidden, s.ncn_hidden);
  ASSERT_EQ(back.params.size(), s.params.size());
  for (const Parameter& p : s.params) EXPECT_TRUE(bitwise_equal(p.value, back.params.at(p.name).value));

  // a backbone file is not a prompt state
  Checkpoint ck;
  ck.config.d_x = 4;
  Rng rng(1);
  init_encoder_params(ck.params, ck.config, 1.0, rng);
  save_checkpoint(ck, dir / "c.json");
  EXPECT_THROW(load_prompt_state(dir / "c.json"), FormatError);
}
