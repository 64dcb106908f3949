#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "deepsca/network.hpp"
#include "deepsca/tensor.hpp"
#include "deepsca/traces.hpp"

namespace deepsca {

enum class PowerModel { kHammingWeight, kIdentity };

PowerModel parse_power_model(const std::string& name);
std::string power_model_name(PowerModel pm);

/// Pearson correlation between the modelled power of every key hypothesis
/// and every sample column.
struct CpaResult {
  std::size_t n_samples = 0;
  std::vector<double> corr;  // 256 x D
  std::optional<int> known_key;
  std::string description;
  /// Hypotheses whose modelled power was constant; their rows are zero.
  std::vector<int> degenerate_hypotheses;

  double at(int k, std::size_t t) const { return corr[static_cast<std::size_t>(k) * n_samples + t]; }
  std::span<const double> row(int k) const {
    return {corr.data() + static_cast<std::size_t>(k) * n_samples, n_samples};
  }
};

/// Constant sample columns correlate as 0. Throws DataError for N < 3.
CpaResult cpa(const TraceSet& ts, const LeakageModelSpec& lm,
              PowerModel pm = PowerModel::kHammingWeight);

/// Feature map after the last pooling, arranged [D', V] (time-major).
Tensor cgv_feature_matrix(const ModelGraph& graph, std::span<const float> trace);

struct WeightMap {
  std::vector<double> coarse;    // length D'
  std::vector<double> expanded;  // length D
  std::optional<int> class_index;  // set for single-class maps
  std::size_t count = 1;         // traces aggregated
};

/// Class gradient map: alpha = d y^c / d A over the pre-softmax score,
/// coarse[j] = ReLU(sum_i A[j, i] alpha[j, i]), expanded to the input length
/// by repeating each entry ceil(D / D') times and truncating to D.
WeightMap cgv_weight_map(const ModelGraph& graph, std::span<const float> trace, int c);

/// Nearest-neighbour expansion used by the weight maps.
std::vector<double> expand_nearest(std::span<const double> coarse, std::size_t length);

enum class ClassPolicy { kPredicted, kTrue, kFixed };
ClassPolicy parse_class_policy(const std::string& name);

struct CgvAggregateOptions {
  ClassPolicy policy = ClassPolicy::kPredicted;
  int fixed_class = 0;                      // for kFixed
  std::span<const std::uint8_t> labels;     // for kTrue, one per trace
  std::size_t batch = 64;
};

/// Mean of per-trace expanded (and coarse) maps. Throws ConfigError for an
/// empty set.
WeightMap cgv_aggregate(const ModelGraph& graph, const TraceSet& traces,
                        const CgvAggregateOptions& opt = {});

/// Rescales to [0, 1] for plotting; an all-zero map stays zero.
std::vector<double> normalize_unit(std::span<const double> v);

void write_cpa_csv(const std::filesystem::path& path, const CpaResult& r);
/// Columns t,weight,weight_normalized.
void write_weight_map_csv(const std::filesystem::path& path, const WeightMap& m);

}  // namespace deepsca
