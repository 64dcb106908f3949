#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "deepsca/aes.hpp"
#include "deepsca/analysis.hpp"
#include "deepsca/error.hpp"
#include "deepsca/training.hpp"

using namespace deepsca;

namespace {

TraceSet random_plaintext_set(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  TraceSet ts;
  ts.n_traces = n;
  ts.n_samples = d;
  ts.samples.assign(n * d, 0.0f);
  ts.plaintexts = ByteMatrix(n, 16);
  for (auto& b : ts.plaintexts.data) b = static_cast<std::uint8_t>(uniform_below(rng, 256));
  ts.keys = ByteMatrix(1, 16);
  for (auto& b : ts.keys.data) b = static_cast<std::uint8_t>(uniform_below(rng, 256));
  return ts;
}

double textbook_pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    syy += y[i] * y[i];
    sxy += x[i] * y[i];
  }
  return (n * sxy - sx * sy) / std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy));
}

// Tap -> flatten -> dense "output" from 3 features to k classes.
ModelGraph surrogate(std::size_t k, int c, std::vector<double> w_c, bool bias) {
  std::vector<LayerPtr> layers = {std::make_shared<TapLayer>(kTapPostFinalPooling),
                                  std::make_shared<FlattenLayer>(),
                                  std::make_shared<DenseLayer>("output", 3, k, false)};
  ModelGraph g = ModelGraph::initialized(layers, {1, 3}, 1);
  Tensor& w = g.params().get_mut("output.weight");
  for (std::size_t i = 0; i < 3; ++i) w.at(static_cast<std::size_t>(c), i) = w_c[i];
  Tensor& b = g.params().get_mut("output.bias");
  for (std::size_t i = 0; i < k; ++i) b[i] = bias ? 0.1 * static_cast<double>(i) : 0.0;
  return g;
}

NetworkConfig small_net() {
  NetworkConfig c;
  c.input_length = 24;
  c.filters_per_block = {4, 4};
  c.conv_kernel = 3;
  c.fc_hidden_units = 8;
  c.n_classes = 9;
  c.cbam.reduction_ratio = 2;
  c.cbam.spatial_kernel = 3;
  c.init_seed = 4;
  return c;
}

TraceSet noise_set(std::size_t n, std::size_t d, std::uint64_t seed) {
  TraceSet ts = random_plaintext_set(n, d, seed);
  Rng rng(seed + 100);
  std::normal_distribution<float> nd;
  for (auto& v : ts.samples) v = nd(rng);
  return ts;
}

}  // namespace

TEST(Cpa, NoiselessLeakCorrelatesPerfectly) {
  SynthConfig cfg;
  cfg.n_traces = 500;
  cfg.n_samples = 30;
  cfg.leak_positions = {12};
  cfg.snr = std::numeric_limits<double>::infinity();
  cfg.seed = 3;
  const TraceSet ts = synthesize(cfg);
  const CpaResult r = cpa(ts, LeakageModelSpec::sbox(1));
  ASSERT_TRUE(r.known_key.has_value());
  EXPECT_EQ(*r.known_key, ts.fixed_key()[0]);
  EXPECT_NEAR(r.at(*r.known_key, 12), 1.0, 1e-9);
  for (std::size_t t = 0; t < 30; ++t) {
    if (t != 12) EXPECT_EQ(r.at(*r.known_key, t), 0.0) << t;
  }
  for (int k = 0; k < 256; ++k) {
    if (k != *r.known_key) EXPECT_LT(std::abs(r.at(k, 12)), 0.5);
  }
}

TEST(Cpa, MatchesTextbookPearson) {
  TraceSet ts = random_plaintext_set(50, 4, 5);
  Rng rng(6);
  std::normal_distribution<float> nd;
  for (auto& v : ts.samples) v = nd(rng);
  for (PowerModel pm : {PowerModel::kHammingWeight, PowerModel::kIdentity}) {
    const CpaResult r = cpa(ts, LeakageModelSpec::sbox(1), pm);
    for (int k : {0, 17, 255}) {
      std::vector<double> h(50);
      for (std::size_t j = 0; j < 50; ++j) {
        const std::uint8_t z = aes::sbox_table()[ts.plaintexts.at(j, 0) ^ k];
        h[j] = pm == PowerModel::kHammingWeight ? aes::hamming_weight(z) : z;
      }
      for (std::size_t t = 0; t < 4; ++t) {
        std::vector<double> x(50);
        for (std::size_t j = 0; j < 50; ++j) x[j] = ts.sample(j, t);
        EXPECT_NEAR(r.at(k, t), textbook_pearson(h, x), 1e-10);
      }
    }
  }
}

TEST(Cpa, ConstantColumnsAndNegation) {
  TraceSet ts = random_plaintext_set(80, 3, 7);
  Rng rng(8);
  std::normal_distribution<float> nd;
  for (std::size_t j = 0; j < 80; ++j) {
    ts.samples[j * 3 + 0] = 4.0f;
    ts.samples[j * 3 + 1] = nd(rng);
    ts.samples[j * 3 + 2] = -ts.samples[j * 3 + 1];
  }
  const CpaResult r = cpa(ts, LeakageModelSpec::sbox(1));
  for (int k = 0; k < 256; ++k) {
    EXPECT_EQ(r.at(k, 0), 0.0);
    EXPECT_NEAR(r.at(k, 2), -r.at(k, 1), 1e-12);
    EXPECT_LE(std::abs(r.at(k, 1)), 1.0);
  }
}

TEST(Cpa, TooFewTraces) {
  const TraceSet ts = random_plaintext_set(2, 3, 9);
  try {
    cpa(ts, LeakageModelSpec::sbox(1));
    FAIL();
  } catch (const DataError& e) {
    EXPECT_EQ(e.field(), "n_traces");
  }
}

TEST(Cpa, CsvHeader) {
  const TraceSet ts = noise_set(10, 2, 10);
  const auto path = std::filesystem::temp_directory_path() / "deepsca_cpa_test.csv";
  write_cpa_csv(path, cpa(ts, LeakageModelSpec::sbox(1)));
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line.rfind("t,k0,k1,", 0), 0u);
  EXPECT_NE(line.find(",k255"), std::string::npos);
  std::filesystem::remove(path);
}

TEST(Cgv, SurrogateLinearModel) {
  const ModelGraph g = surrogate(4, 2, {2, 1, 1}, true);
  const std::vector<float> x = {1, -2, 3};
  const Tensor a = cgv_feature_matrix(g, x);
  ASSERT_EQ(a.shape, (Shape{3, 1}));
  const WeightMap m = cgv_weight_map(g, x, 2);
  EXPECT_EQ(m.coarse, (std::vector<double>{2, 0, 3}));
  EXPECT_EQ(m.expanded, m.coarse);
  EXPECT_EQ(m.class_index, std::optional<int>(2));
}

TEST(Cgv, ZeroTraceGivesZeroMap) {
  NetworkConfig c = small_net();
  ModelGraph g = build_attention_network(c);
  for (const auto& n : g.params().names()) {
    if (n.size() > 5 && n.compare(n.size() - 5, 5, ".bias") == 0) {
      auto& t = g.params().get_mut(n);
      std::fill(t.data.begin(), t.data.end(), 0.0);
    }
  }
  const std::vector<float> zero(24, 0.0f);
  const WeightMap m = cgv_weight_map(g, zero, 3);
  for (double v : m.expanded) EXPECT_EQ(v, 0.0);
}

TEST(Cgv, GradientMatchesFiniteDifferences) {
  const ModelGraph g = build_attention_network(small_net());
  const TraceSet ts = noise_set(1, 24, 11);
  const int cls = 5;
  const WeightMap m = cgv_weight_map(g, ts.trace(0), cls);
  const Tensor a = cgv_feature_matrix(g, ts.trace(0));  // [D', V]
  const std::size_t dp = a.dim(0), v = a.dim(1);
  ASSERT_EQ(m.coarse.size(), dp);

  // Head of the network as its own graph, fed the feature map directly.
  std::vector<LayerPtr> head;
  bool after = false;
  for (const auto& l : g.layers()) {
    if (after) head.push_back(l);
    if (auto* t = dynamic_cast<const TapLayer*>(l.get()); t && t->name() == kTapPostFinalPooling) after = true;
  }
  const ModelGraph h(head, {v, dp}, g.params());
  auto score = [&](const Tensor& feat) {
    ForwardContext ctx;
    return h.forward(ctx, Variable(feat)).value().at(0, cls);
  };
  Tensor feat({1, v, dp});
  for (std::size_t i = 0; i < v; ++i)
    for (std::size_t j = 0; j < dp; ++j) feat.at(0, i, j) = a.at(j, i);
  const double step = 1e-6;
  for (std::size_t j = 0; j < dp; ++j) {
    double s = 0;
    for (std::size_t i = 0; i < v; ++i) {
      Tensor up = feat, dn = feat;
      up.at(0, i, j) += step;
      dn.at(0, i, j) -= step;
      s += a.at(j, i) * (score(up) - score(dn)) / (2 * step);
    }
    EXPECT_NEAR(m.coarse[j], std::max(s, 0.0), 1e-6 * std::max(1.0, std::abs(s))) << j;
  }
}

TEST(Cgv, AggregateOfOneAndOfDuplicates) {
  const ModelGraph g = build_attention_network(small_net());
  TraceSet one = noise_set(1, 24, 12);
  CgvAggregateOptions opt;
  opt.policy = ClassPolicy::kFixed;
  opt.fixed_class = 4;
  const WeightMap single = cgv_weight_map(g, one.trace(0), 4);
  const WeightMap agg1 = cgv_aggregate(g, one, opt);
  ASSERT_EQ(agg1.expanded.size(), 24u);
  for (std::size_t t = 0; t < 24; ++t) EXPECT_NEAR(agg1.expanded[t], single.expanded[t], 1e-12);

  TraceSet dup = one;
  dup.n_traces = 5;
  dup.plaintexts = ByteMatrix(5, 16);
  for (int r = 0; r < 4; ++r) dup.samples.insert(dup.samples.end(), one.samples.begin(), one.samples.end());
  opt.batch = 2;
  const WeightMap agg5 = cgv_aggregate(g, dup, opt);
  EXPECT_EQ(agg5.count, 5u);
  for (std::size_t t = 0; t < 24; ++t) EXPECT_NEAR(agg5.expanded[t], single.expanded[t], 1e-12);
  for (double v : agg5.expanded) EXPECT_GE(v, 0.0);
}

TEST(Cgv, ClassPolicies) {
  const ModelGraph g = build_attention_network(small_net());
  const TraceSet ts = noise_set(6, 24, 13);
  const Tensor p = predict_proba(g, ts);
  std::vector<std::uint8_t> predicted(6);
  for (std::size_t i = 0; i < 6; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < 9; ++k) if (p.at(i, k) > p.at(i, best)) best = k;
    predicted[i] = static_cast<std::uint8_t>(best);
  }
  CgvAggregateOptions pred;
  CgvAggregateOptions truth;
  truth.policy = ClassPolicy::kTrue;
  truth.labels = predicted;
  const WeightMap a = cgv_aggregate(g, ts, pred), b = cgv_aggregate(g, ts, truth);
  for (std::size_t t = 0; t < 24; ++t) EXPECT_NEAR(a.expanded[t], b.expanded[t], 1e-12);

  // Different classes generally weigh positions differently.
  const WeightMap c0 = cgv_weight_map(g, ts.trace(0), 0), c1 = cgv_weight_map(g, ts.trace(0), 1);
  EXPECT_NE(c0.coarse, c1.coarse);

  TraceSet empty = ts;
  empty.n_traces = 0;
  empty.samples.clear();
  EXPECT_THROW(cgv_aggregate(g, empty, pred), ConfigError);
  truth.labels = std::span<const std::uint8_t>(predicted).first(3);
  EXPECT_THROW(cgv_aggregate(g, ts, truth), ConfigError);
  EXPECT_THROW(parse_class_policy("other"), ConfigError);
}

TEST(Cgv, ExpansionRule) {
  const std::vector<double> coarse = {1, 2, 3, 4};
  EXPECT_EQ(expand_nearest(coarse, 8), (std::vector<double>{1, 1, 2, 2, 3, 3, 4, 4}));
  EXPECT_EQ(expand_nearest(coarse, 7), (std::vector<double>{1, 1, 2, 2, 3, 3, 4}));
  EXPECT_EQ(expand_nearest(coarse, 4), coarse);
  for (std::size_t dp : {1, 5, 88}) {
    for (std::size_t d : {dp, dp * 2 - 1, dp * 8, dp * 8 - 3}) {
      std::vector<double> c(dp);
      std::iota(c.begin(), c.end(), 0.0);
      const auto e = expand_nearest(c, d);
      ASSERT_EQ(e.size(), d);
      for (std::size_t t = 1; t < d; ++t) EXPECT_LE(e[t - 1], e[t]);
      if (d % dp == 0) {
        for (std::size_t j = 0; j < dp; ++j) EXPECT_EQ(std::count(e.begin(), e.end(), c[j]), static_cast<long>(d / dp));
      }
    }
  }
  EXPECT_THROW(expand_nearest({}, 3), ShapeError);
}

TEST(Cgv, MissingTapAndNormalization) {
  std::vector<LayerPtr> layers = {std::make_shared<FlattenLayer>(), std::make_shared<DenseLayer>("output", 3, 2, false)};
  const ModelGraph g = ModelGraph::initialized(layers, {1, 3}, 1);
  const std::vector<float> x = {1, 2, 3};
  EXPECT_THROW(cgv_weight_map(g, x, 0), ConfigError);
  const std::vector<double> v = {0, 2, 4};
  EXPECT_EQ(normalize_unit(v), (std::vector<double>{0, 0.5, 1}));
  const std::vector<double> z = {0, 0};
  EXPECT_EQ(normalize_unit(z), z);
}
