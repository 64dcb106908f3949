#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "deepsca/tensor.hpp"
#include "deepsca/traces.hpp"

namespace deepsca {

struct TrainedModel;

/// Probabilities are clamped to this floor before taking logs.
inline constexpr double kProbabilityFloor = 1e-40;
inline constexpr std::size_t kDefaultRepeats = 300;

using ScoreVector = std::array<double, 256>;

/// N x 256 matrix; entry (j, k) is the label of trace j under key byte k.
ByteMatrix candidate_label_table(const TraceSet& ts, const LeakageModelSpec& lm);

/// g_k = sum_j log(max(probs[j, labels(j, k)], floor)). probs is [N, 256].
ScoreVector log_likelihood_scores(const Tensor& probs, const ByteMatrix& labels);

/// Midrank of the true key: candidates scoring strictly higher count 1,
/// ties count 1/2. Ranges over [0, 255].
double key_rank(std::span<const double> scores, std::uint8_t true_key);

struct RankCurve {
  std::vector<double> mean_rank;           // index n-1 holds the mean over repeats for n traces
  std::vector<std::vector<double>> ranks;  // [repeat][n-1]
  std::size_t repeats = 0;
  std::uint64_t seed = 0;

  std::size_t n_max() const { return mean_rank.size(); }
  /// Linear-interpolated percentile (q in [0, 100]) across repeats at n.
  double percentile(std::size_t n, double q) const;
};

/// Average rank of `true_key` over `repeats` random orderings of the attack
/// traces, for every prefix length 1..n_max. Repeat r draws its ordering from
/// derive_seed(seed, r).
RankCurve average_rank_curve(const Tensor& probs, const ByteMatrix& labels, std::uint8_t true_key,
                             std::size_t n_max, std::size_t repeats = kDefaultRepeats,
                             std::uint64_t seed = 0);

/// Runs the model on the attack set; the true key byte comes from the set's
/// fixed key at lm.key_position().
RankCurve average_rank_curve(const TrainedModel& model, const TraceSet& attack,
                             const LeakageModelSpec& lm, std::size_t n_max,
                             std::size_t repeats = kDefaultRepeats, std::uint64_t seed = 0);

/// Key byte attacked under `lm` for a fixed-key set.
std::uint8_t true_key_byte(const TraceSet& attack, const LeakageModelSpec& lm);

enum class RankThreshold {
  kZero,      // mean rank == 0
  kBelowOne,  // mean rank < 1
};

RankThreshold parse_rank_threshold(const std::string& name);
std::string rank_threshold_name(RankThreshold t);

/// Smallest n whose mean rank meets the threshold and keeps meeting it for
/// every larger n of the curve.
std::optional<std::size_t> required_traces(std::span<const double> mean_rank, RankThreshold t);
std::optional<std::size_t> required_traces(const RankCurve& curve, RankThreshold t);

/// Columns n,mean_rank,p10,p90.
void write_rank_curve_csv(const std::filesystem::path& path, const RankCurve& curve);

}  // namespace deepsca
