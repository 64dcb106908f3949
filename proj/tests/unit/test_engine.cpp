#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "deepsca/checkpoint.hpp"
#include "deepsca/error.hpp"
#include "deepsca/training.hpp"

using namespace deepsca;

namespace {

// Two classes separated by the sign of sample 10.
std::pair<TraceSet, std::vector<std::uint8_t>> toy_set(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<float> noise(0.0f, 0.5f);
  TraceSet ts;
  ts.n_traces = n;
  ts.n_samples = 20;
  ts.plaintexts = ByteMatrix(n, 16);
  ts.keys = ByteMatrix(1, 16);
  std::vector<std::uint8_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<std::uint8_t>(uniform_below(rng, 2));
    for (std::size_t t = 0; t < 20; ++t) {
      float v = noise(rng);
      if (t == 10) v += labels[i] ? 2.0f : -2.0f;
      ts.samples.push_back(v);
    }
  }
  return {ts, labels};
}

NetworkConfig toy_net(std::size_t classes) {
  NetworkConfig c;
  c.input_length = 20;
  c.filters_per_block = {4};
  c.conv_kernel = 3;
  c.fc_hidden_units = 8;
  c.n_classes = classes;
  c.cbam.reduction_ratio = 4;
  c.cbam.spatial_kernel = 3;
  c.init_seed = 1;
  return c;
}

TrainingConfig toy_training(std::size_t epochs) {
  TrainingConfig t;
  t.epochs = epochs;
  t.batch_size = 32;
  t.optimizer.learning_rate = 1e-2;
  t.seed = 5;
  return t;
}

double accuracy(const Tensor& p, std::span<const std::uint8_t> labels) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < p.dim(1); ++k) if (p.at(i, k) > p.at(i, best)) best = k;
    ok += best == labels[i];
  }
  return static_cast<double>(ok) / static_cast<double>(labels.size());
}

// Sigmoid whose backward pass is deliberately wrong.
class BrokenSigmoid : public Layer {
 public:
  Shape output_shape(const Shape& in) const override { return in; }
  Variable forward(ForwardContext&, const Variable& x) const override {
    Tensor out = x.value();
    for (auto& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
    return Variable::make(out, {x}, [out](const Tensor& go, std::span<Variable> in) {
      Tensor& g = in[0].grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * out[i];
    });
  }
  std::string describe() const override { return "broken sigmoid"; }
};

}  // namespace

TEST(Training, LearnsSeparableToy) {
  auto [train_set, train_labels] = toy_set(400, 1);
  auto [test_set, test_labels] = toy_set(200, 2);
  const TrainedModel m = train(build_attention_network(toy_net(2)), train_set, train_labels, toy_training(20));
  ASSERT_EQ(m.history.size(), 20u);
  EXPECT_GT(accuracy(predict_proba(m.graph, test_set), test_labels), 0.95);
  EXPECT_LT(m.history.back().loss, m.history.front().loss);
}

TEST(Training, SameSeedSameRun) {
  auto [ts, labels] = toy_set(100, 3);
  TrainingConfig cfg = toy_training(2);
  cfg.validation_fraction = 0.2;
  const TrainedModel a = train(build_attention_network(toy_net(2)), ts, labels, cfg);
  const TrainedModel b = train(build_attention_network(toy_net(2)), ts, labels, cfg);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].loss, b.history[i].loss);
    EXPECT_EQ(a.history[i].val_loss, b.history[i].val_loss);
  }
  EXPECT_TRUE(a.history[0].val_accuracy.has_value());
  EXPECT_EQ(a.graph.params(), b.graph.params());
}

TEST(Training, RejectsBadConfiguration) {
  auto [ts, labels] = toy_set(20, 4);
  TrainingConfig cfg = toy_training(0);
  EXPECT_THROW(train(build_attention_network(toy_net(2)), ts, labels, cfg), ConfigError);
  cfg = toy_training(1);
  cfg.batch_size = 0;
  EXPECT_THROW(train(build_attention_network(toy_net(2)), ts, labels, cfg), ConfigError);
  std::vector<std::uint8_t> bad(labels);
  bad[0] = 2;
  EXPECT_THROW(train(build_attention_network(toy_net(2)), ts, bad, toy_training(1)), ConfigError);
  NetworkConfig wrong = toy_net(2);
  wrong.input_length = 21;
  EXPECT_THROW(train(build_attention_network(wrong), ts, labels, toy_training(1)), ShapeError);
}

TEST(Training, NonFiniteLossDiverges) {
  auto [ts, labels] = toy_set(20, 5);
  ts.samples[3] = std::numeric_limits<float>::quiet_NaN();
  TrainingConfig cfg = toy_training(1);
  cfg.batch_size = 100;
  try {
    train(build_attention_network(toy_net(2)), ts, labels, cfg);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.epoch(), 1u);
    EXPECT_EQ(e.batch(), 0u);
  }
}

TEST(Optimizer, ZeroLearningRateKeepsParameters) {
  ModelGraph g = build_attention_network(toy_net(2));
  const ParameterStore before = g.params();
  auto [ts, labels] = toy_set(10, 6);
  TrainingConfig cfg = toy_training(1);
  cfg.optimizer.learning_rate = 0.0;
  EXPECT_EQ(train(g, ts, labels, cfg).graph.params(), before);
  cfg.optimizer.name = "sgd";
  EXPECT_EQ(train(g, ts, labels, cfg).graph.params(), before);
}

TEST(Optimizer, SmallSgdStepDoesNotIncreaseLoss) {
  ModelGraph g = build_attention_network(toy_net(2));
  auto [ts, labels] = toy_set(16, 7);
  const std::vector<int> lab(labels.begin(), labels.end());
  const Tensor batch = make_batch(ts, 0, ts.n_traces);
  auto loss_of = [&](const ModelGraph& m, ForwardContext& ctx) {
    return ops::cross_entropy(m.forward(ctx, Variable(batch)), lab);
  };
  Optimizer opt({"sgd", 1e-3});
  double prev = 1e300;
  for (int step = 0; step < 5; ++step) {
    ForwardContext ctx;
    ctx.track_param_grads = true;
    const Variable l = loss_of(g, ctx);
    EXPECT_LE(l.value()[0], prev + 1e-12);
    prev = l.value()[0];
    l.backward();
    std::map<std::string, const Tensor*> grads;
    for (auto& [name, leaf] : ctx.leaves) if (leaf.has_grad()) grads.emplace(name, &leaf.grad());
    opt.step(g.params(), grads);
  }
  EXPECT_EQ(opt.steps(), 5u);
}

TEST(Inference, UniformHeadAndBatching) {
  NetworkConfig c = toy_net(256);
  ModelGraph g = build_attention_network(c);
  auto [ts, labels] = toy_set(7, 8);
  const Tensor p = predict_proba(g, ts);
  for (std::size_t i = 0; i < 7; ++i) {
    double s = 0;
    for (std::size_t k = 0; k < 256; ++k) s += p.at(i, k);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_EQ(predict_proba(g, ts, 1), p);

  for (auto n : {"output.weight", "output.bias"}) {
    Tensor& t = g.params().get_mut(n);
    std::fill(t.data.begin(), t.data.end(), 0.0);
  }
  const Tensor u = predict_proba(g, ts);
  for (double v : u.data) EXPECT_NEAR(v, 1.0 / 256.0, 1e-15);
  const std::vector<int> lab(labels.begin(), labels.end());
  ForwardContext ctx;
  const double ce = ops::cross_entropy(g.forward(ctx, Variable(make_batch(ts, 0, 7))), lab).value()[0];
  EXPECT_NEAR(ce, std::log(256.0), 1e-12);
}

TEST(Inference, DropoutOnlyWhileTraining) {
  NetworkConfig c = toy_net(2);
  c.dropout_rates = {0.5, 0.5};
  const ModelGraph g = build_attention_network(c);
  auto [ts, labels] = toy_set(4, 9);
  const Tensor x = make_batch(ts, 0, 4);
  ForwardContext e1, e2;
  EXPECT_EQ(g.forward(e1, Variable(x)).value(), g.forward(e2, Variable(x)).value());
  Rng r1(1), r2(2);
  ForwardContext t1, t2;
  t1.training = t2.training = true;
  t1.rng = &r1;
  t2.rng = &r2;
  EXPECT_NE(g.forward(t1, Variable(x)).value(), g.forward(t2, Variable(x)).value());
}

TEST(GradientCheck, LinearGraphIsExact) {
  std::vector<LayerPtr> layers = {std::make_shared<FlattenLayer>(),
                                  std::make_shared<DenseLayer>("output", 6, 5, false)};
  const ModelGraph g = ModelGraph::initialized(layers, {1, 6}, 3);
  Rng rng(1);
  Tensor batch({4, 1, 6});
  std::normal_distribution<double> nd;
  for (auto& v : batch.data) v = nd(rng);
  const std::vector<int> labels = {0, 4, 2, 2};
  GradCheckOptions opt;
  opt.objectives = {GradObjective::kCrossEntropy, GradObjective::kClassScore, GradObjective::kHalfSumSquares};
  const auto r = gradient_check(g, batch, labels, opt);
  EXPECT_TRUE(r.passed);
  EXPECT_LT(r.max_rel_error, 1e-8);
  EXPECT_LT(r.input_max_rel_error, 1e-8);
}

TEST(GradientCheck, AttentionNetwork) {
  NetworkConfig c;
  c.input_length = 16;
  c.filters_per_block = {4};
  c.conv_kernel = 3;
  c.fc_hidden_units = 6;
  c.n_classes = 5;
  c.cbam.reduction_ratio = 2;
  c.cbam.spatial_kernel = 5;
  c.init_seed = 2;
  const ModelGraph g = build_attention_network(c);
  Rng rng(2);
  Tensor batch({3, 1, 16});
  std::normal_distribution<double> nd;
  for (auto& v : batch.data) v = nd(rng);
  const std::vector<int> labels = {1, 3, 0};
  GradCheckOptions opt;
  opt.n_param_coords = 400;
  const auto r = gradient_check(g, batch, labels, opt);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
  EXPECT_LT(r.max_rel_error, 1e-4);
  EXPECT_TRUE(r.per_group.count("block0.cbam.channel.fc1.weight"));
}

TEST(GradientCheck, DetectsWrongBackward) {
  std::vector<LayerPtr> layers = {std::make_shared<FlattenLayer>(),
                                  std::make_shared<DenseLayer>("output", 6, 5, false),
                                  std::make_shared<BrokenSigmoid>()};
  const ModelGraph g = ModelGraph::initialized(layers, {1, 6}, 3);
  Tensor batch({2, 1, 6}, 0.3);
  batch[1] = -1.0;
  const std::vector<int> labels = {0, 1};
  EXPECT_FALSE(gradient_check(g, batch, labels).passed);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto [ts, labels] = toy_set(40, 10);
  NetworkConfig c = toy_net(2);
  c.dropout_rates = {0.25};
  TrainingConfig cfg = toy_training(2);
  cfg.validation_fraction = 0.25;
  TrainedModel m = train(build_attention_network(c), ts, labels, cfg);
  m.provenance.preset = "custom";
  m.provenance.dataset_hash = "abc";
  m.provenance.split_seed = 9;
  m.standardizer = fit_standardizer(ts);
  m.leakage = LeakageModelSpec::sbox(2);
  const auto path = std::filesystem::temp_directory_path() / "deepsca_ckpt_test.h5";
  save_checkpoint(path, m);
  const TrainedModel r = load_checkpoint(path);
  EXPECT_EQ(r.graph.params(), m.graph.params());
  EXPECT_EQ(r.graph.config(), m.graph.config());
  EXPECT_EQ(r.training, m.training);
  ASSERT_EQ(r.history.size(), 2u);
  EXPECT_EQ(r.history[1].loss, m.history[1].loss);
  EXPECT_EQ(r.history[1].val_accuracy, m.history[1].val_accuracy);
  EXPECT_EQ(r.provenance.dataset_hash, "abc");
  EXPECT_EQ(r.provenance.split_seed, 9u);
  ASSERT_TRUE(r.standardizer && r.leakage);
  EXPECT_EQ(r.standardizer->mean, m.standardizer->mean);
  EXPECT_EQ(r.standardizer->scale, m.standardizer->scale);
  EXPECT_EQ(*r.leakage, *m.leakage);
  EXPECT_EQ(predict_proba(r, ts), predict_proba(m, ts));
  std::filesystem::remove(path);

  EXPECT_THROW(load_checkpoint(std::filesystem::temp_directory_path() / "deepsca_missing.h5"), DataError);
}
