// Desk-scale acceptance run. One PASS/FAIL line per criterion; exit status 1
// when any gating criterion fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "deepsca/analysis.hpp"
#include "deepsca/attack.hpp"
#include "deepsca/network.hpp"
#include "deepsca/training.hpp"

using namespace deepsca;

namespace {

constexpr std::size_t kLeak = 50;
constexpr std::size_t kSeeds = 5;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

bool report(int id, const char* title, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  std::printf("criterion %d %-32s %s  (%s; %.1f s)\n", id, title, o.pass ? "PASS" : "FAIL", o.detail.c_str(),
              elapsed(t0));
  std::fflush(stdout);
  return o.pass;
}

void note(const std::string& s) {
  std::printf("  %s\n", s.c_str());
  std::fflush(stdout);
}

// --- 1 ---------------------------------------------------------------------

Outcome gradient_integrity() {
  double worst = 0.0;
  bool ok = true;
  for (std::size_t channels : {4, 8}) {
    NetworkConfig c;
    c.input_length = 32;
    c.filters_per_block = {channels};
    c.conv_kernel = 5;
    c.fc_hidden_units = 16;
    c.cbam.reduction_ratio = 2;
    c.cbam.spatial_kernel = 7;
    c.init_seed = channels;
    const ModelGraph g = build_attention_network(c);
    Rng rng(channels);
    std::normal_distribution<double> nd;
    Tensor batch({3, 1, 32});
    for (auto& v : batch.data) v = nd(rng);
    const std::vector<int> labels = {3, 200, 17};
    GradCheckOptions opt;
    opt.n_param_coords = 600;
    opt.seed = channels;
    const GradCheckReport r = gradient_check(g, batch, labels, opt);
    worst = std::max({worst, r.max_rel_error, r.input_max_rel_error});
    ok = ok && r.passed && r.max_rel_error < 1e-4 && r.input_max_rel_error < 1e-4;
    note("C=" + std::to_string(channels) + ": max rel error " + std::to_string(r.max_rel_error) + ", " +
         std::to_string(r.coordinates_checked) + " coordinates, " + std::to_string(r.kinks_skipped) +
         " kinks skipped");
  }
  char buf[64];
  std::snprintf(buf, sizeof buf, "max rel error %.2e", worst);
  return {ok, buf};
}

// --- 2 ---------------------------------------------------------------------

Outcome rank_oracle() {
  Rng rng(2024);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::size_t mismatches = 0;
  for (int inst = 0; inst < 1000; ++inst) {
    const std::size_t n = 1 + uniform_below(rng, 8);
    Tensor probs({n, 256});
    const bool coarse = inst % 3 == 0;  // few distinct values, many ties
    for (auto& v : probs.data) v = coarse ? static_cast<double>(uniform_below(rng, 3)) / 2.0 : u(rng);
    ByteMatrix labels(n, 256);
    for (auto& b : labels.data) b = static_cast<std::uint8_t>(uniform_below(rng, coarse ? 4 : 256));
    const auto key = static_cast<std::uint8_t>(uniform_below(rng, 256));

    const ScoreVector g = log_likelihood_scores(probs, labels);
    const double r = key_rank(g, key);

    std::vector<double> s(256, 0.0);
    for (int k = 0; k < 256; ++k) {
      for (std::size_t j = 0; j < n; ++j) s[k] += std::log(std::max(probs.at(j, labels.at(j, k)), 1e-40));
    }
    std::vector<int> order(256);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return s[a] > s[b]; });
    double first = -1, last = -1;
    for (int pos = 0; pos < 256; ++pos) {
      if (s[order[pos]] == s[key]) {
        if (first < 0) first = pos;
        last = pos;
      }
    }
    const double oracle = first + (last - first) / 2.0;
    bool same = r == oracle;
    for (int k = 0; k < 256; ++k) same = same && g[k] == s[k];
    mismatches += !same;
  }
  return {mismatches == 0, std::to_string(mismatches) + " mismatches in 1000 instances"};
}

// --- 3, 4, 5 ----------------------------------------------------------------

NetworkConfig reduced_network(std::uint64_t seed) {
  NetworkConfig c;
  c.input_length = 100;
  c.filters_per_block = {16};
  c.fc_hidden_units = 64;
  c.dropout_rates = {0.5, 0.5};
  c.cbam.reduction_ratio = 4;
  c.init_seed = seed;
  return c;
}

TrainingConfig reduced_training(std::uint64_t seed) {
  TrainingConfig t;
  t.epochs = 15;
  t.batch_size = 100;
  t.optimizer.learning_rate = 2e-3;
  t.seed = seed;
  return t;
}

struct SeedRun {
  TrainedModel model;
  TraceSet attack;
  std::optional<std::size_t> required;
  double mean_rank_at_limit = 0.0;
};

SeedRun synthetic_attack(std::uint64_t seed, std::size_t desync, std::size_t limit) {
  SynthConfig sc;
  sc.n_traces = 6000;
  sc.n_samples = 100;
  sc.leak_positions = {kLeak};
  sc.snr = 1.0;
  sc.desync_max = desync;
  sc.seed = seed;
  const TraceSet all = synthesize(sc);
  auto [prof, atk] = split_profiling_attack(all, 5700, 300, derive_seed(seed, 7));
  const auto lm = LeakageModelSpec::sbox(1);
  const Standardizer st = fit_standardizer(prof);
  const auto labels = compute_labels(prof, lm);

  SeedRun run;
  run.model = train(build_attention_network(reduced_network(seed)), st.apply(prof), labels,
                    reduced_training(seed));
  run.model.standardizer = st;
  run.model.leakage = lm;
  run.attack = std::move(atk);
  const RankCurve curve = average_rank_curve(run.model, run.attack, lm, limit, 50, seed);
  run.required = required_traces(curve, RankThreshold::kZero);
  run.mean_rank_at_limit = curve.mean_rank.back();
  return run;
}

std::string describe(const SeedRun& r, std::uint64_t seed) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "seed %llu: final loss %.4f, required traces %s, mean rank at limit %.3f",
                static_cast<unsigned long long>(seed), r.model.history.back().loss,
                r.required ? std::to_string(*r.required).c_str() : "none", r.mean_rank_at_limit);
  return buf;
}

std::vector<SeedRun> g_unprotected;

Outcome unprotected_attack() {
  std::size_t ok = 0;
  for (std::uint64_t s = 1; s <= kSeeds; ++s) {
    g_unprotected.push_back(synthetic_attack(s, 0, 50));
    note(describe(g_unprotected.back(), s));
    ok += g_unprotected.back().required.has_value();
  }
  return {ok >= 4, std::to_string(ok) + "/5 seeds reach mean rank 0 within 50 traces"};
}

Outcome desync_attack() {
  std::size_t ok = 0;
  for (std::uint64_t s = 1; s <= kSeeds; ++s) {
    const SeedRun r = synthetic_attack(100 + s, 20, 300);
    note(describe(r, 100 + s));
    ok += r.required.has_value();
  }
  return {ok >= 4, std::to_string(ok) + "/5 seeds reach mean rank 0 within 300 traces"};
}

Outcome cgv_localization() {
  if (g_unprotected.empty()) return {false, "no models from criterion 3"};
  const std::size_t tol = 2;  // 2^{n3} input samples, n3 = 1
  std::size_t ok = 0;
  bool nonnegative = true;
  for (std::size_t i = 0; i < g_unprotected.size(); ++i) {
    const SeedRun& r = g_unprotected[i];
    const auto lm = *r.model.leakage;
    const auto labels = compute_labels(r.attack, lm);
    CgvAggregateOptions opt;
    opt.policy = ClassPolicy::kTrue;
    opt.labels = labels;
    const WeightMap m = cgv_aggregate(r.model.graph, r.model.standardizer->apply(r.attack), opt);
    const auto peak = static_cast<std::size_t>(std::max_element(m.expanded.begin(), m.expanded.end()) -
                                               m.expanded.begin());
    for (double v : m.expanded) nonnegative = nonnegative && v >= 0.0;
    const std::size_t dist = peak > kLeak ? peak - kLeak : kLeak - peak;
    ok += dist <= tol;
    note("seed " + std::to_string(i + 1) + ": argmax " + std::to_string(peak) + " (leak " +
         std::to_string(kLeak) + ")");
  }
  const bool pass = nonnegative && ok * 5 >= g_unprotected.size() * 4;
  return {pass, std::to_string(ok) + "/" + std::to_string(g_unprotected.size()) + " within +-" +
                    std::to_string(tol) + " samples, entries " + (nonnegative ? "all >= 0" : "NEGATIVE")};
}

// --- 6 ---------------------------------------------------------------------

Outcome cpa_oracle() {
  SynthConfig sc;
  sc.n_traces = 2000;
  sc.n_samples = 100;
  sc.leak_positions = {kLeak};
  sc.snr = std::numeric_limits<double>::infinity();
  sc.seed = 6;
  const TraceSet ts = synthesize(sc);
  const CpaResult r = cpa(ts, LeakageModelSpec::sbox(1));
  const int k = ts.fixed_key()[0];
  const double peak = r.at(k, kLeak);
  bool zeros = true;
  for (int h = 0; h < 256; ++h) {
    for (std::size_t t = 0; t < 100; ++t) {
      if (t != kLeak) zeros = zeros && r.at(h, t) == 0.0;
    }
  }
  char buf[96];
  std::snprintf(buf, sizeof buf, "rho = 1 %+.1e, constant columns %s", peak - 1.0, zeros ? "all 0" : "NONZERO");
  return {std::abs(peak - 1.0) <= 1e-9 && zeros, buf};
}

// --- 7 ---------------------------------------------------------------------

Outcome metric_sanity() {
  SynthConfig sc;
  sc.n_traces = 500;
  sc.n_samples = 4;
  sc.leak_positions = {1};
  sc.seed = 7;
  const TraceSet ts = synthesize(sc);
  const auto lm = LeakageModelSpec::sbox(1);
  const ByteMatrix table = candidate_label_table(ts, lm);
  const std::uint8_t key = true_key_byte(ts, lm);

  const RankCurve uniform = average_rank_curve(Tensor({500, 256}, 1.0 / 256.0), table, key, 500, 300, 1);
  double dev = 0.0;
  for (double m : uniform.mean_rank) dev = std::max(dev, std::abs(m - 127.5));

  Tensor oracle({500, 256});
  const auto labels = compute_labels(ts, lm);
  for (std::size_t j = 0; j < 500; ++j) oracle.at(j, labels[j]) = 1.0;
  const RankCurve perfect = average_rank_curve(oracle, table, key, 500, 300, 1);
  const bool zero = std::all_of(perfect.mean_rank.begin(), perfect.mean_rank.end(), [](double v) { return v == 0.0; });

  char buf[96];
  std::snprintf(buf, sizeof buf, "uniform max |rank - 127.5| = %.3f, oracle curve %s", dev,
                zero ? "identically 0" : "NONZERO");
  return {dev <= 5.0 && zero, buf};
}

}  // namespace

int main() {
  bool ok = true;
  ok &= report(1, "gradient integrity", gradient_integrity);
  ok &= report(2, "rank oracle equivalence", rank_oracle);
  ok &= report(6, "CPA oracle", cpa_oracle);
  ok &= report(7, "metric sanity", metric_sanity);
  ok &= report(3, "synthetic unprotected attack", unprotected_attack);
  ok &= report(5, "CGV localization", cgv_localization);
  ok &= report(4, "desynchronization robustness", desync_attack);
  std::printf("criterion 8 %-32s SKIPPED  (full public-dataset runs need GPU-hours)\n", "public dataset presets");
  std::printf("%s\n", ok ? "ALL GATING CRITERIA PASS" : "SOME GATING CRITERIA FAIL");
  return ok ? 0 : 1;
}
