#include "deepsca/attack.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>

#include "deepsca/error.hpp"
#include "deepsca/random.hpp"
#include "deepsca/training.hpp"

namespace deepsca {

ByteMatrix candidate_label_table(const TraceSet& ts, const LeakageModelSpec& lm) {
  lm.validate();
  require_metadata(ts, lm);
  ByteMatrix out(ts.n_traces, 256);
  for (std::size_t j = 0; j < ts.n_traces; ++j) {
    for (int k = 0; k < 256; ++k) {
      out.at(j, static_cast<std::size_t>(k)) = hypothesis_label(ts, j, lm, static_cast<std::uint8_t>(k));
    }
  }
  return out;
}

namespace {

void check_prob_shapes(const Tensor& probs, const ByteMatrix& labels) {
  if (probs.rank() != 2 || probs.dim(1) != 256) {
    throw ShapeError("probabilities must be [N, 256], got " + shape_string(probs.shape));
  }
  if (labels.cols != 256 || labels.rows != probs.dim(0)) {
    throw ShapeError("label table is " + std::to_string(labels.rows) + "x" +
                     std::to_string(labels.cols) + ", expected " + std::to_string(probs.dim(0)) +
                     "x256");
  }
}

// Per-trace log-likelihood of each key candidate, N x 256.
std::vector<double> log_table(const Tensor& probs, const ByteMatrix& labels) {
  check_prob_shapes(probs, labels);
  const std::size_t n = labels.rows;
  std::vector<double> out(n * 256);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < 256; ++k) {
      out[j * 256 + k] = std::log(std::max(probs.at(j, labels.at(j, k)), kProbabilityFloor));
    }
  }
  return out;
}

}  // namespace

ScoreVector log_likelihood_scores(const Tensor& probs, const ByteMatrix& labels) {
  const std::vector<double> lt = log_table(probs, labels);
  ScoreVector g{};
  for (std::size_t j = 0; j < labels.rows; ++j) {
    for (std::size_t k = 0; k < 256; ++k) g[k] += lt[j * 256 + k];
  }
  return g;
}

double key_rank(std::span<const double> scores, std::uint8_t true_key) {
  if (true_key >= scores.size()) throw std::out_of_range("true key outside the score vector");
  const double ref = scores[true_key];
  std::size_t greater = 0;
  std::size_t equal = 0;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    if (k == true_key) continue;
    if (scores[k] > ref) {
      ++greater;
    } else if (scores[k] == ref) {
      ++equal;
    }
  }
  return static_cast<double>(greater) + 0.5 * static_cast<double>(equal);
}

double RankCurve::percentile(std::size_t n, double q) const {
  if (n == 0 || n > n_max()) throw std::out_of_range("percentile: n outside the curve");
  std::vector<double> col;
  col.reserve(ranks.size());
  for (const auto& r : ranks) col.push_back(r[n - 1]);
  std::sort(col.begin(), col.end());
  if (col.size() == 1) return col[0];
  const double pos = q / 100.0 * static_cast<double>(col.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, col.size() - 1);
  return col[lo] + (pos - static_cast<double>(lo)) * (col[hi] - col[lo]);
}

RankCurve average_rank_curve(const Tensor& probs, const ByteMatrix& labels, std::uint8_t true_key,
                             std::size_t n_max, std::size_t repeats, std::uint64_t seed) {
  const std::vector<double> lt = log_table(probs, labels);
  const std::size_t n = labels.rows;
  if (n_max == 0) throw ConfigError("max_traces", "must be at least 1");
  if (n_max > n) {
    throw ConfigError("max_traces", std::to_string(n_max) + " exceeds the " + std::to_string(n) +
                                        " available attack traces");
  }
  if (repeats == 0) throw ConfigError("repeats", "must be at least 1");

  RankCurve curve;
  curve.repeats = repeats;
  curve.seed = seed;
  curve.ranks.assign(repeats, std::vector<double>(n_max, 0.0));
  for (std::size_t r = 0; r < repeats; ++r) {
    Rng rng(derive_seed(seed, r));
    const std::vector<std::size_t> order = random_permutation(n, rng);
    ScoreVector g{};
    for (std::size_t i = 0; i < n_max; ++i) {
      const double* row = &lt[order[i] * 256];
      for (std::size_t k = 0; k < 256; ++k) g[k] += row[k];
      curve.ranks[r][i] = key_rank(g, true_key);
    }
  }
  curve.mean_rank.assign(n_max, 0.0);
  for (std::size_t i = 0; i < n_max; ++i) {
    double s = 0.0;
    for (std::size_t r = 0; r < repeats; ++r) s += curve.ranks[r][i];
    curve.mean_rank[i] = s / static_cast<double>(repeats);
  }
  return curve;
}

std::uint8_t true_key_byte(const TraceSet& attack, const LeakageModelSpec& lm) {
  const Key key = attack.fixed_key();
  return key[static_cast<std::size_t>(lm.key_position() - 1)];
}

RankCurve average_rank_curve(const TrainedModel& model, const TraceSet& attack,
                             const LeakageModelSpec& lm, std::size_t n_max, std::size_t repeats,
                             std::uint64_t seed) {
  const std::uint8_t k_star = true_key_byte(attack, lm);
  const ByteMatrix labels = candidate_label_table(attack, lm);
  const Tensor probs = predict_proba(model, attack);
  return average_rank_curve(probs, labels, k_star, n_max, repeats, seed);
}

RankThreshold parse_rank_threshold(const std::string& name) {
  if (name == "zero" || name == "0") return RankThreshold::kZero;
  if (name == "below1" || name == "<1") return RankThreshold::kBelowOne;
  throw ConfigError("threshold", "expected 'zero' or 'below1', got '" + name + "'");
}

std::string rank_threshold_name(RankThreshold t) {
  return t == RankThreshold::kZero ? "rank = 0" : "rank < 1";
}

std::optional<std::size_t> required_traces(std::span<const double> mean_rank, RankThreshold t) {
  auto meets = [t](double r) { return t == RankThreshold::kZero ? r == 0.0 : r < 1.0; };
  std::optional<std::size_t> first;
  for (std::size_t i = mean_rank.size(); i-- > 0;) {
    if (!meets(mean_rank[i])) break;
    first = i + 1;
  }
  return first;
}

std::optional<std::size_t> required_traces(const RankCurve& curve, RankThreshold t) {
  return required_traces(curve.mean_rank, t);
}

void write_rank_curve_csv(const std::filesystem::path& path, const RankCurve& curve) {
  std::ofstream out(path);
  if (!out) throw DataError(path.string(), "cannot open for writing");
  out << "n,mean_rank,p10,p90\n" << std::setprecision(10);
  for (std::size_t n = 1; n <= curve.n_max(); ++n) {
    out << n << ',' << curve.mean_rank[n - 1] << ',' << curve.percentile(n, 10.0) << ','
        << curve.percentile(n, 90.0) << '\n';
  }
}

}  // namespace deepsca
