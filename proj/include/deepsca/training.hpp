#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "deepsca/network.hpp"
#include "deepsca/traces.hpp"

namespace deepsca {

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;
  double accuracy = 0.0;
  std::optional<double> val_loss;
  std::optional<double> val_accuracy;
};

struct Provenance {
  std::string preset;
  std::string dataset_path;
  std::string dataset_hash;
  std::uint64_t split_seed = 0;
  std::size_t n_profiling = 0;
  std::size_t n_attack = 0;
};

/// A graph with learned parameters and everything needed to reuse it.
struct TrainedModel {
  ModelGraph graph;
  TrainingConfig training;
  std::vector<EpochStats> history;
  Provenance provenance;
  std::optional<Standardizer> standardizer;
  std::optional<LeakageModelSpec> leakage;
};

/// Builds a [B, 1, D] batch from rows of a trace set.
Tensor make_batch(const TraceSet& ts, std::span<const std::size_t> rows);
Tensor make_batch(const TraceSet& ts, std::size_t begin, std::size_t end);

struct TrainHooks {
  /// Called after each epoch.
  std::function<void(const EpochStats&)> on_epoch;
};

/// Minibatch training on mean cross-entropy. Deterministic given cfg.seed.
/// Throws ConfigError for bad configuration or labels, DivergenceError when
/// the loss becomes non-finite.
TrainedModel train(ModelGraph graph, const TraceSet& profiling,
                   std::span<const std::uint8_t> labels, const TrainingConfig& cfg,
                   const TrainHooks& hooks = {});

/// Class scores before the softmax, [N, n_classes].
Tensor predict_logits(const ModelGraph& graph, const TraceSet& traces, std::size_t batch = 256);
/// Softmax probabilities, [N, n_classes]; each row sums to 1.
Tensor predict_proba(const ModelGraph& graph, const TraceSet& traces, std::size_t batch = 256);
Tensor predict_proba(const TrainedModel& model, const TraceSet& traces, std::size_t batch = 256);

/// Applies Adam or SGD updates to a parameter store.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(std::move(cfg)) {}
  /// grads: parameter name -> gradient (same shape as the parameter).
  void step(ParameterStore& params, const std::map<std::string, const Tensor*>& grads);
  std::size_t steps() const { return t_; }

 private:
  OptimizerConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, Tensor> m_;
  std::map<std::string, Tensor> v_;
};

enum class GradObjective {
  kCrossEntropy,    // mean cross-entropy against the labels
  kClassScore,      // sum of y^c, c = labels
  kHalfSumSquares,  // 0.5 * sum of all class scores squared
};

struct GradCheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;
  std::size_t n_param_coords = 200;
  std::size_t n_input_coords = 32;
  /// Denominator floor of the relative error.
  double scale_floor = 1e-6;
  std::vector<GradObjective> objectives = {GradObjective::kCrossEntropy,
                                           GradObjective::kClassScore};
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  double input_max_rel_error = 0.0;
  std::map<std::string, double> per_group;  // parameter name -> max relative error
  std::size_t coordinates_checked = 0;
  /// Coordinates where the one-sided differences disagree as at a ReLU/max
  /// kink; they are excluded from the maxima above.
  std::size_t kinks_skipped = 0;
  bool passed = false;
};

/// Compares reverse-mode gradients with central finite differences on a
/// random subset of parameter coordinates and input coordinates, in eval mode.
GradCheckReport gradient_check(ModelGraph graph, const Tensor& batch, std::span<const int> labels,
                               const GradCheckOptions& opt = {});

}  // namespace deepsca
