#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "deepsca/autograd.hpp"
#include "deepsca/traces.hpp"

namespace deepsca {

inline constexpr const char* kTapPostFinalPooling = "post_final_pooling";
inline constexpr const char* kTapPreSoftmax = "pre_softmax";

/// Convolutional block attention: channel module then spatial module, hosted
/// by one residual block after its shortcut merge and before its pooling.
struct CbamConfig {
  bool enabled = true;
  std::size_t residual_block_index = 0;
  std::size_t reduction_ratio = 16;
  std::size_t spatial_kernel = 11;

  friend bool operator==(const CbamConfig&, const CbamConfig&) = default;
};

struct NetworkConfig {
  std::size_t input_length = 0;
  std::size_t n_fc = 2;     // hidden fully-connected layers
  std::size_t n_basic = 2;  // conv + ReLU units per residual block
  std::vector<std::size_t> filters_per_block = {128, 256, 512};
  std::size_t conv_kernel = 11;
  std::size_t conv_stride = 1;
  std::string pool_kind = "average";
  std::size_t pool_size = 2;
  std::size_t pool_stride = 2;
  std::string activation = "relu";
  std::size_t fc_hidden_units = 1024;
  /// One rate per hidden fully-connected layer (possibly fewer, or none).
  std::vector<double> dropout_rates;
  std::size_t n_classes = 256;
  CbamConfig cbam;
  std::uint64_t init_seed = 0;

  std::size_t n_residual() const { return filters_per_block.size(); }
  /// Throws ConfigError naming the offending field.
  void validate() const;
  /// Settings that differ from the preset architecture (n_fc/n_basic != 2,
  /// kernel != 11, ...), for reporting.
  std::vector<std::string> non_default_settings() const;
  /// Time length after the last residual block.
  std::size_t final_time_length() const;

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

/// Named parameter tensors with value semantics (copies are deep).
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore& other);
  ParameterStore& operator=(const ParameterStore& other);
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  void add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor& get(const std::string& name) const;
  Tensor& get_mut(const std::string& name);
  std::shared_ptr<const Tensor> shared(const std::string& name) const;
  const std::vector<std::string>& names() const { return names_; }
  std::size_t total_size() const;

  bool operator==(const ParameterStore& other) const;

 private:
  std::vector<std::string> names_;
  std::map<std::string, std::shared_ptr<Tensor>> index_;
};

/// Per-call state of one forward pass. Parameter leaves are created lazily,
/// so concurrent passes over the same store do not interact.
struct ForwardContext {
  const ParameterStore* params = nullptr;
  bool training = false;
  bool track_param_grads = false;
  Rng* rng = nullptr;  // dropout; required when training
  /// Taps listed here are re-rooted as fresh leaves with requires_grad, so
  /// gradients with respect to them can be read after backward().
  std::set<std::string> grad_taps;

  std::map<std::string, Variable> leaves;
  std::map<std::string, Variable> taps;

  Variable param(const std::string& name);
};

class Layer {
 public:
  virtual ~Layer() = default;
  /// Input and output shapes exclude the batch axis.
  virtual Shape output_shape(const Shape& in) const = 0;
  virtual Variable forward(ForwardContext& ctx, const Variable& x) const = 0;
  virtual void init_params(ParameterStore& store, Rng& rng) const { (void)store; (void)rng; }
  virtual std::string describe() const = 0;
};

using LayerPtr = std::shared_ptr<const Layer>;

/// Layer stack whose output is the pre-softmax class score vector.
class ModelGraph {
 public:
  ModelGraph() = default;
  ModelGraph(std::vector<LayerPtr> layers, Shape input_shape, ParameterStore params,
             std::optional<NetworkConfig> config = std::nullopt);
  /// Graph whose parameters are drawn by each layer's initialiser.
  static ModelGraph initialized(std::vector<LayerPtr> layers, Shape input_shape,
                                std::uint64_t seed);

  /// x: [B, C_in, D]. Returns logits [B, n_classes]; taps land in ctx.taps.
  Variable forward(ForwardContext& ctx, const Variable& x) const;

  const std::vector<LayerPtr>& layers() const { return layers_; }
  const Shape& input_shape() const { return input_shape_; }
  std::size_t input_length() const { return input_shape_.back(); }
  std::size_t n_classes() const { return output_shape_.back(); }
  const ParameterStore& params() const { return params_; }
  ParameterStore& params() { return params_; }
  const std::optional<NetworkConfig>& config() const { return config_; }

  /// Per-sample shape of a registered tap; nullopt when absent.
  std::optional<Shape> tap_shape(const std::string& name) const;
  std::string summary() const;

 private:
  std::vector<LayerPtr> layers_;
  Shape input_shape_;
  Shape output_shape_;
  ParameterStore params_;
  std::optional<NetworkConfig> config_;
};

// --- building blocks -------------------------------------------------------

struct ChannelAttentionParams {
  Variable fc1_weight;  // [C/r, C]
  Variable fc1_bias;    // [C/r]
  Variable fc2_weight;  // [C, C/r]
  Variable fc2_bias;    // [C]
};

struct SpatialAttentionParams {
  Variable weight;  // [1, 2, K]
  Variable bias;    // [1]
};

/// sigmoid(MLP(GAP(F)) + MLP(GMP(F))) broadcast over time, times F.
/// The attention map [B, C, 1] is written to `map_out` when given.
Variable channel_attention_forward(const Variable& features, const ChannelAttentionParams& p,
                                   Variable* map_out = nullptr);

/// sigmoid(conv([mean_c(F); max_c(F)])) broadcast over channels, times F.
Variable spatial_attention_forward(const Variable& features, const SpatialAttentionParams& p,
                                   Variable* map_out = nullptr);

struct ResidualBlockParams {
  std::vector<std::pair<Variable, Variable>> convs;  // (weight, bias) per basic unit
  std::pair<Variable, Variable> shortcut;            // width-1 conv
  std::optional<ChannelAttentionParams> channel_attention;
  std::optional<SpatialAttentionParams> spatial_attention;
};

struct ResidualBlockOptions {
  std::size_t conv_stride = 1;
  std::size_t pool_size = 2;
  std::size_t pool_stride = 2;
};

/// pool(attention(ReLU(body(x) + shortcut(x)))) where body is n_basic
/// conv + ReLU units and attention is present only in the hosting block.
Variable residual_block_forward(const Variable& x, const ResidualBlockParams& p,
                                const ResidualBlockOptions& opt);

class Conv1dLayer : public Layer {
 public:
  Conv1dLayer(std::string name, std::size_t c_in, std::size_t c_out, std::size_t kernel,
              std::size_t stride = 1);
  Shape output_shape(const Shape& in) const override;
  Variable forward(ForwardContext& ctx, const Variable& x) const override;
  void init_params(ParameterStore& store, Rng& rng) const override;
  std::string describe() const override;

 private:
  std::string name_;
  std::size_t c_in_, c_out_, kernel_, stride_;
};

class ResidualBlockLayer : public Layer {
 public:
  ResidualBlockLayer(std::string name, std::size_t c_in, std::size_t c_out, std::size_t n_basic,
                     std::size_t kernel, ResidualBlockOptions opt,
                     std::optional<CbamConfig> cbam);
  Shape output_shape(const Shape& in) const override;
  Variable forward(ForwardContext& ctx, const Variable& x) const override;
  void init_params(ParameterStore& store, Rng& rng) const override;
  std::string describe() const override;

 private:
  std::string name_;
  std::size_t c_in_, c_out_, n_basic_, kernel_;
  ResidualBlockOptions opt_;
  std::optional<CbamConfig> cbam_;
};

class DenseLayer : public Layer {
 public:
  DenseLayer(std::string name, std::size_t in, std::size_t out, bool relu);
  Shape output_shape(const Shape& in) const override;
  Variable forward(ForwardContext& ctx, const Variable& x) const override;
  void init_params(ParameterStore& store, Rng& rng) const override;
  std::string describe() const override;

 private:
  std::string name_;
  std::size_t in_, out_;
  bool relu_;
};

class FlattenLayer : public Layer {
 public:
  Shape output_shape(const Shape& in) const override;
  Variable forward(ForwardContext& ctx, const Variable& x) const override;
  std::string describe() const override { return "flatten"; }
};

class DropoutLayer : public Layer {
 public:
  explicit DropoutLayer(double rate) : rate_(rate) {}
  Shape output_shape(const Shape& in) const override { return in; }
  Variable forward(ForwardContext& ctx, const Variable& x) const override;
  std::string describe() const override;

 private:
  double rate_;
};

/// Identity that records its input under a name.
class TapLayer : public Layer {
 public:
  explicit TapLayer(std::string name) : name_(std::move(name)) {}
  Shape output_shape(const Shape& in) const override { return in; }
  Variable forward(ForwardContext& ctx, const Variable& x) const override;
  std::string describe() const override { return "tap " + name_; }
  const std::string& name() const { return name_; }

 private:
  std::string name_;
};

/// Glorot-uniform tensor.
Tensor glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng);

/// Residual blocks -> flatten -> hidden dense layers -> class scores, with
/// parameters drawn from cfg.init_seed.
ModelGraph build_attention_network(const NetworkConfig& cfg);

// --- presets ----------------------------------------------------------------

struct OptimizerConfig {
  std::string name = "adam";
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;

  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

struct TrainingConfig {
  std::size_t epochs = 1;
  std::size_t batch_size = 200;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  double validation_fraction = 0.0;

  void validate() const;
  friend bool operator==(const TrainingConfig&, const TrainingConfig&) = default;
};

struct DatasetPreset {
  std::string name;
  NetworkConfig network;
  TrainingConfig training;
  LeakageModelSpec leakage;
  std::size_t n_profiling = 0;
  std::size_t n_attack = 0;
};

/// dpav4, aes_rd, aes_hd or ascad. Throws ConfigError for anything else.
DatasetPreset dataset_preset(const std::string& name);
std::vector<std::string> preset_names();

}  // namespace deepsca
