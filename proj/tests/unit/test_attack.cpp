#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "deepsca/aes.hpp"
#include "deepsca/attack.hpp"
#include "deepsca/error.hpp"
#include "deepsca/random.hpp"

using namespace deepsca;

namespace {

// Rank by sorting candidates by descending score and taking the mean
// position of the block of ties that contains the true key.
double sorted_rank(std::span<const double> s, std::uint8_t key) {
  std::vector<int> idx(256);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return s[a] > s[b]; });
  std::size_t first = 256, last = 0;
  for (std::size_t pos = 0; pos < 256; ++pos) {
    if (s[idx[pos]] == s[key]) {
      first = std::min(first, pos);
      last = pos;
    }
  }
  // Midrank: positions first..last share the tie; self excluded.
  return static_cast<double>(first) + static_cast<double>(last - first) / 2.0;
}

TraceSet fixed_key_set(std::size_t n, std::uint8_t key_byte, std::uint64_t seed) {
  Rng rng(seed);
  TraceSet ts;
  ts.n_traces = n;
  ts.n_samples = 1;
  ts.samples.assign(n, 0.0f);
  ts.plaintexts = ByteMatrix(n, 16);
  for (auto& b : ts.plaintexts.data) b = static_cast<std::uint8_t>(uniform_below(rng, 256));
  ts.keys = ByteMatrix(1, 16);
  ts.keys.at(0, 0) = key_byte;
  return ts;
}

Tensor oracle_probs(const TraceSet& ts, const LeakageModelSpec& lm, std::uint8_t key) {
  Tensor p({ts.n_traces, 256});
  for (std::size_t j = 0; j < ts.n_traces; ++j) p.at(j, hypothesis_label(ts, j, lm, key)) = 1.0;
  return p;
}

}  // namespace

TEST(KeyRank, Examples) {
  std::vector<double> s(256, 0.0);
  EXPECT_DOUBLE_EQ(key_rank(s, 7), 127.5);
  s[7] = 1.0;
  EXPECT_DOUBLE_EQ(key_rank(s, 7), 0.0);
  s[9] = 2.0;
  EXPECT_DOUBLE_EQ(key_rank(s, 7), 1.0);
  s[3] = 1.0;
  EXPECT_DOUBLE_EQ(key_rank(s, 7), 1.5);
  for (int k = 0; k < 256; ++k) s[k] = -k;
  EXPECT_DOUBLE_EQ(key_rank(s, 255), 255.0);
}

TEST(KeyRank, MatchesSortOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> s(256);
    // Few distinct values to force ties.
    for (auto& v : s) v = static_cast<double>(uniform_below(rng, trial % 2 ? 4 : 1000));
    const auto key = static_cast<std::uint8_t>(uniform_below(rng, 256));
    const double r = key_rank(s, key);
    EXPECT_DOUBLE_EQ(r, sorted_rank(s, key));
    EXPECT_GE(r, 0.0);
    EXPECT_LE(r, 255.0);
  }
}

TEST(Scores, LogLikelihoodWithFloor) {
  Tensor p({2, 256}, 1.0 / 256.0);
  p.at(0, 5) = 0.0;
  ByteMatrix labels(2, 256);
  for (int k = 0; k < 256; ++k) {
    labels.at(0, k) = static_cast<std::uint8_t>(k);
    labels.at(1, k) = static_cast<std::uint8_t>(k ^ 1);
  }
  const ScoreVector g = log_likelihood_scores(p, labels);
  EXPECT_NEAR(g[0], 2 * std::log(1.0 / 256.0), 1e-12);
  EXPECT_NEAR(g[5], std::log(kProbabilityFloor) + std::log(1.0 / 256.0), 1e-9);
  EXPECT_TRUE(std::isfinite(g[5]));
}

TEST(Scores, CandidateTableMatchesLabels) {
  const TraceSet ts = fixed_key_set(10, 0x2b, 2);
  const auto lm = LeakageModelSpec::sbox(1);
  const ByteMatrix t = candidate_label_table(ts, lm);
  ASSERT_EQ(t.rows, 10u);
  ASSERT_EQ(t.cols, 256u);
  for (std::size_t j = 0; j < 10; ++j) {
    for (int k = 0; k < 256; ++k) EXPECT_EQ(t.at(j, k), aes::sbox_table()[ts.plaintexts.at(j, 0) ^ k]);
  }
}

TEST(RankCurve, OracleModelRanksZero) {
  const TraceSet ts = fixed_key_set(60, 0x3c, 3);
  const auto lm = LeakageModelSpec::sbox(1);
  const RankCurve c = average_rank_curve(oracle_probs(ts, lm, 0x3c), candidate_label_table(ts, lm), 0x3c, 60, 20, 1);
  ASSERT_EQ(c.n_max(), 60u);
  for (double r : c.mean_rank) EXPECT_EQ(r, 0.0);
  EXPECT_EQ(required_traces(c, RankThreshold::kZero), std::optional<std::size_t>(1));
}

TEST(RankCurve, UniformModelAveragesMidrank) {
  const TraceSet ts = fixed_key_set(30, 0x11, 4);
  const auto lm = LeakageModelSpec::sbox(1);
  const Tensor p({30, 256}, 1.0 / 256.0);
  const RankCurve c = average_rank_curve(p, candidate_label_table(ts, lm), 0x11, 30, 5, 2);
  for (double r : c.mean_rank) EXPECT_DOUBLE_EQ(r, 127.5);
  EXPECT_DOUBLE_EQ(c.percentile(10, 10.0), 127.5);
  EXPECT_FALSE(required_traces(c, RankThreshold::kBelowOne).has_value());
}

TEST(RankCurve, DeterministicAndBounded) {
  const TraceSet ts = fixed_key_set(40, 0x99, 5);
  const auto lm = LeakageModelSpec::sbox(1);
  Rng rng(6);
  Tensor p({40, 256});
  for (auto& v : p.data) v = std::uniform_real_distribution<double>(0, 1)(rng);
  const auto labels = candidate_label_table(ts, lm);
  const RankCurve a = average_rank_curve(p, labels, 0x99, 40, 10, 7);
  const RankCurve b = average_rank_curve(p, labels, 0x99, 40, 10, 7);
  const RankCurve c = average_rank_curve(p, labels, 0x99, 40, 10, 8);
  EXPECT_EQ(a.mean_rank, b.mean_rank);
  EXPECT_NE(a.mean_rank, c.mean_rank);
  ASSERT_EQ(a.ranks.size(), 10u);
  for (std::size_t n = 1; n <= 40; ++n) {
    EXPECT_LE(a.percentile(n, 10), a.percentile(n, 90));
    double m = 0;
    for (const auto& row : a.ranks) {
      EXPECT_GE(row[n - 1], 0.0);
      EXPECT_LE(row[n - 1], 255.0);
      m += row[n - 1];
    }
    EXPECT_NEAR(a.mean_rank[n - 1], m / 10, 1e-12);
  }
  // With every trace used the ordering no longer matters.
  for (const auto& row : a.ranks) EXPECT_DOUBLE_EQ(row.back(), a.ranks[0].back());
}

TEST(RankCurve, RejectsBadArguments) {
  const TraceSet ts = fixed_key_set(10, 0, 7);
  const auto labels = candidate_label_table(ts, LeakageModelSpec::sbox(1));
  const Tensor p({10, 256}, 1.0 / 256);
  EXPECT_THROW(average_rank_curve(p, labels, 0, 11, 5), ConfigError);
  EXPECT_THROW(average_rank_curve(p, labels, 0, 0, 5), ConfigError);
  EXPECT_THROW(average_rank_curve(p, labels, 0, 10, 0), ConfigError);
}

TEST(RequiredTraces, StaysBelowRule) {
  const std::vector<double> a = {5, 0, 2, 0, 0};
  EXPECT_EQ(required_traces(a, RankThreshold::kZero), std::optional<std::size_t>(4));
  const std::vector<double> b = {5, 0.5, 0.9, 1.0, 0.2};
  EXPECT_EQ(required_traces(b, RankThreshold::kBelowOne), std::optional<std::size_t>(5));
  EXPECT_FALSE(required_traces(b, RankThreshold::kZero).has_value());
  const std::vector<double> c = {0.0};
  EXPECT_EQ(required_traces(c, RankThreshold::kZero), std::optional<std::size_t>(1));
  EXPECT_EQ(parse_rank_threshold("zero"), RankThreshold::kZero);
  EXPECT_EQ(parse_rank_threshold("below1"), RankThreshold::kBelowOne);
  EXPECT_THROW(parse_rank_threshold("two"), ConfigError);
}

TEST(RankCurve, CsvHeader) {
  const TraceSet ts = fixed_key_set(5, 1, 8);
  const auto lm = LeakageModelSpec::sbox(1);
  const RankCurve c = average_rank_curve(oracle_probs(ts, lm, 1), candidate_label_table(ts, lm), 1, 5, 3);
  const auto path = std::filesystem::temp_directory_path() / "deepsca_rank_test.csv";
  write_rank_curve_csv(path, c);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "n,mean_rank,p10,p90");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 5u);
  std::filesystem::remove(path);
}
