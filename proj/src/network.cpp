#include "deepsca/network.hpp"

#include <cmath>
#include <sstream>

#include "deepsca/error.hpp"

namespace deepsca {

// --- NetworkConfig ------------------------------------------------------------

void NetworkConfig::validate() const {
  if (input_length == 0) throw ConfigError("input_length", "must be >= 1");
  if (filters_per_block.empty()) throw ConfigError("filters_per_block", "need at least one residual block");
  for (auto f : filters_per_block) {
    if (f == 0) throw ConfigError("filters_per_block", "filter counts must be >= 1");
  }
  if (n_basic == 0) throw ConfigError("n_basic", "must be >= 1");
  if (conv_kernel == 0) throw ConfigError("conv_kernel", "must be >= 1");
  if (conv_stride == 0) throw ConfigError("conv_stride", "must be >= 1");
  if (pool_kind != "average") throw ConfigError("pool_kind", "only 'average' is supported");
  if (pool_size == 0 || pool_stride == 0) throw ConfigError("pool_size", "must be >= 1");
  if (activation != "relu") throw ConfigError("activation", "only 'relu' is supported");
  if (n_fc > 0 && fc_hidden_units == 0) throw ConfigError("fc_hidden_units", "must be >= 1");
  if (dropout_rates.size() > n_fc) {
    throw ConfigError("dropout_rates", "at most one rate per hidden fully-connected layer");
  }
  for (double r : dropout_rates) {
    if (!(r >= 0.0 && r < 1.0)) throw ConfigError("dropout_rates", "rates must lie in [0, 1)");
  }
  if (n_classes < 2) throw ConfigError("n_classes", "must be >= 2");
  if (cbam.enabled) {
    if (cbam.residual_block_index >= filters_per_block.size()) {
      throw ConfigError("cbam.residual_block_index", "no such residual block");
    }
    const std::size_t ch = filters_per_block[cbam.residual_block_index];
    if (cbam.reduction_ratio == 0 || ch % cbam.reduction_ratio != 0) {
      throw ConfigError("cbam.reduction_ratio", "must divide the hosting block's " +
                                                     std::to_string(ch) + " channels");
    }
    if (cbam.spatial_kernel % 2 == 0) throw ConfigError("cbam.spatial_kernel", "must be odd");
    // Time length inside the hosting block, before its pooling.
    std::size_t t = input_length;
    for (std::size_t i = 0; i < cbam.residual_block_index; ++i) {
      t = (t + conv_stride - 1) / conv_stride;
      t = (t > pool_size ? (t - pool_size + pool_stride - 1) / pool_stride : 0) + 1;
    }
    t = (t + conv_stride - 1) / conv_stride;
    if (cbam.spatial_kernel > t) {
      throw ConfigError("cbam.spatial_kernel", "wider than the " + std::to_string(t) +
                                                   " timesteps it attends over");
    }
  }
}

std::vector<std::string> NetworkConfig::non_default_settings() const {
  std::vector<std::string> out;
  if (n_fc != 2) out.push_back("n_fc=" + std::to_string(n_fc));
  if (n_basic != 2) out.push_back("n_basic=" + std::to_string(n_basic));
  if (conv_kernel != 11) out.push_back("conv_kernel=" + std::to_string(conv_kernel));
  if (conv_stride != 1) out.push_back("conv_stride=" + std::to_string(conv_stride));
  if (pool_size != 2 || pool_stride != 2) out.push_back("pool_size/stride != 2");
  if (!cbam.enabled) out.push_back("cbam disabled");
  else if (cbam.residual_block_index != 0) out.push_back("cbam not in first block");
  if (n_classes != 256) out.push_back("n_classes=" + std::to_string(n_classes));
  return out;
}

std::size_t NetworkConfig::final_time_length() const {
  std::size_t t = input_length;
  for (std::size_t i = 0; i < filters_per_block.size(); ++i) {
    t = (t + conv_stride - 1) / conv_stride;
    t = (t > pool_size ? (t - pool_size + pool_stride - 1) / pool_stride : 0) + 1;
  }
  return t;
}

// --- ParameterStore -----------------------------------------------------------

ParameterStore::ParameterStore(const ParameterStore& other) : names_(other.names_) {
  for (const auto& [k, v] : other.index_) index_[k] = std::make_shared<Tensor>(*v);
}

ParameterStore& ParameterStore::operator=(const ParameterStore& other) {
  if (this != &other) {
    ParameterStore copy(other);
    *this = std::move(copy);
  }
  return *this;
}

void ParameterStore::add(const std::string& name, Tensor value) {
  if (contains(name)) throw ConfigError(name, "duplicate parameter name");
  names_.push_back(name);
  index_[name] = std::make_shared<Tensor>(std::move(value));
}

const Tensor& ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ShapeError("unknown parameter " + name);
  return *it->second;
}

Tensor& ParameterStore::get_mut(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ShapeError("unknown parameter " + name);
  return *it->second;
}

std::shared_ptr<const Tensor> ParameterStore::shared(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ShapeError("unknown parameter " + name);
  return it->second;
}

std::size_t ParameterStore::total_size() const {
  std::size_t n = 0;
  for (const auto& [k, v] : index_) n += v->size();
  return n;
}

bool ParameterStore::operator==(const ParameterStore& other) const {
  if (names_ != other.names_) return false;
  for (const auto& n : names_) {
    if (get(n) != other.get(n)) return false;
  }
  return true;
}

Variable ForwardContext::param(const std::string& name) {
  auto it = leaves.find(name);
  if (it != leaves.end()) return it->second;
  Variable v = Variable::shared(params->shared(name), track_param_grads);
  leaves.emplace(name, v);
  return v;
}

// --- ModelGraph ---------------------------------------------------------------

ModelGraph::ModelGraph(std::vector<LayerPtr> layers, Shape input_shape, ParameterStore params,
                       std::optional<NetworkConfig> config)
    : layers_(std::move(layers)),
      input_shape_(std::move(input_shape)),
      params_(std::move(params)),
      config_(std::move(config)) {
  Shape s = input_shape_;
  for (const auto& l : layers_) s = l->output_shape(s);
  if (s.size() != 1) throw ShapeError("graph output must be a class-score vector, got " + shape_string(s));
  output_shape_ = s;
}

ModelGraph ModelGraph::initialized(std::vector<LayerPtr> layers, Shape input_shape,
                                   std::uint64_t seed) {
  ParameterStore params;
  Rng rng(seed);
  for (const auto& l : layers) l->init_params(params, rng);
  return ModelGraph(std::move(layers), std::move(input_shape), std::move(params));
}

Variable ModelGraph::forward(ForwardContext& ctx, const Variable& x) const {
  if (x.value().rank() != input_shape_.size() + 1) {
    throw ShapeError("model expects input of per-trace shape " + shape_string(input_shape_) +
                     ", got " + shape_string(x.shape()));
  }
  for (std::size_t i = 0; i < input_shape_.size(); ++i) {
    if (x.shape()[i + 1] != input_shape_[i]) {
      throw ShapeError("model expects traces of shape " + shape_string(input_shape_) +
                       ", got " + shape_string(x.shape()));
    }
  }
  if (ctx.params == nullptr) ctx.params = &params_;
  Variable h = x;
  for (const auto& l : layers_) h = l->forward(ctx, h);
  return h;
}

std::optional<Shape> ModelGraph::tap_shape(const std::string& name) const {
  Shape s = input_shape_;
  for (const auto& l : layers_) {
    s = l->output_shape(s);
    if (auto* tap = dynamic_cast<const TapLayer*>(l.get()); tap && tap->name() == name) return s;
  }
  return std::nullopt;
}

std::string ModelGraph::summary() const {
  std::ostringstream os;
  Shape s = input_shape_;
  os << "input " << shape_string(s) << "\n";
  for (const auto& l : layers_) {
    s = l->output_shape(s);
    os << "  " << l->describe() << " -> " << shape_string(s) << "\n";
  }
  os << "parameters: " << params_.total_size() << "\n";
  return os.str();
}

// --- attention and residual blocks -------------------------------------------

Variable channel_attention_forward(const Variable& features, const ChannelAttentionParams& p,
                                   Variable* map_out) {
  const Shape& fs = features.shape();
  if (fs.size() != 3) throw ShapeError("channel attention expects [B, C, T]");
  const std::size_t ch = fs[1];
  if (p.fc1_weight.shape().size() != 2 || p.fc1_weight.shape()[1] != ch ||
      p.fc2_weight.shape().size() != 2 || p.fc2_weight.shape()[0] != ch) {
    throw ShapeError("channel attention parameters built for " +
                     shape_string(p.fc1_weight.shape()) + " do not match " +
                     std::to_string(ch) + " channels");
  }
  auto mlp = [&](const Variable& v) {
    return ops::linear(ops::relu(ops::linear(v, p.fc1_weight, p.fc1_bias)), p.fc2_weight,
                       p.fc2_bias);
  };
  const Variable avg = mlp(ops::global_avg_pool(features));
  const Variable mx = mlp(ops::global_max_pool(features));
  const Variable map = ops::reshape(ops::sigmoid(ops::add(avg, mx)), {fs[0], ch, 1});
  if (map_out) *map_out = map;
  return ops::broadcast_mul(features, map);
}

Variable spatial_attention_forward(const Variable& features, const SpatialAttentionParams& p,
                                   Variable* map_out) {
  const Shape& fs = features.shape();
  if (fs.size() != 3) throw ShapeError("spatial attention expects [B, C, T]");
  const Shape& ws = p.weight.shape();
  if (ws.size() != 3 || ws[0] != 1 || ws[1] != 2) {
    throw ShapeError("spatial attention weight must be [1, 2, K], got " + shape_string(ws));
  }
  if (ws[2] > fs[2]) {
    throw ShapeError("spatial attention kernel " + std::to_string(ws[2]) + " wider than " +
                     std::to_string(fs[2]) + " timesteps");
  }
  const Variable pooled = ops::concat_channels(ops::channel_mean(features), ops::channel_max(features));
  const Variable map = ops::sigmoid(ops::conv1d(pooled, p.weight, p.bias));
  if (map_out) *map_out = map;
  return ops::broadcast_mul(features, map);
}

Variable residual_block_forward(const Variable& x, const ResidualBlockParams& p,
                                const ResidualBlockOptions& opt) {
  if (p.convs.empty()) throw ShapeError("residual block needs at least one basic unit");
  Variable h = x;
  for (std::size_t i = 0; i < p.convs.size(); ++i) {
    h = ops::relu(ops::conv1d(h, p.convs[i].first, p.convs[i].second, i == 0 ? opt.conv_stride : 1));
  }
  const Variable skip = ops::conv1d(x, p.shortcut.first, p.shortcut.second, opt.conv_stride);
  if (skip.shape() != h.shape()) {
    throw ShapeError("shortcut output " + shape_string(skip.shape()) + " cannot be added to " +
                     shape_string(h.shape()));
  }
  h = ops::relu(ops::add(h, skip));
  if (p.channel_attention) h = channel_attention_forward(h, *p.channel_attention);
  if (p.spatial_attention) h = spatial_attention_forward(h, *p.spatial_attention);
  return ops::avg_pool1d(h, opt.pool_size, opt.pool_stride);
}

Tensor glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  Tensor t(std::move(shape));
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (auto& v : t.data) v = dist(rng);
  return t;
}

// --- layers -------------------------------------------------------------------

namespace {

std::size_t pooled_length(std::size_t t, std::size_t size, std::size_t stride) {
  return (t > size ? (t - size + stride - 1) / stride : 0) + 1;
}

void expect_channels(const Shape& in, std::size_t c, const std::string& who) {
  if (in.size() != 2 || in[0] != c) {
    throw ShapeError(who + " expects [" + std::to_string(c) + ", T], got " + shape_string(in));
  }
}

}  // namespace

Conv1dLayer::Conv1dLayer(std::string name, std::size_t c_in, std::size_t c_out,
                         std::size_t kernel, std::size_t stride)
    : name_(std::move(name)), c_in_(c_in), c_out_(c_out), kernel_(kernel), stride_(stride) {}

Shape Conv1dLayer::output_shape(const Shape& in) const {
  expect_channels(in, c_in_, name_);
  return {c_out_, (in[1] + stride_ - 1) / stride_};
}

Variable Conv1dLayer::forward(ForwardContext& ctx, const Variable& x) const {
  return ops::conv1d(x, ctx.param(name_ + ".weight"), ctx.param(name_ + ".bias"), stride_);
}

void Conv1dLayer::init_params(ParameterStore& store, Rng& rng) const {
  store.add(name_ + ".weight",
            glorot_uniform({c_out_, c_in_, kernel_}, c_in_ * kernel_, c_out_ * kernel_, rng));
  store.add(name_ + ".bias", Tensor({c_out_}));
}

std::string Conv1dLayer::describe() const {
  return name_ + ": conv1d " + std::to_string(c_in_) + "->" + std::to_string(c_out_) + " k=" +
         std::to_string(kernel_);
}

ResidualBlockLayer::ResidualBlockLayer(std::string name, std::size_t c_in, std::size_t c_out,
                                       std::size_t n_basic, std::size_t kernel,
                                       ResidualBlockOptions opt, std::optional<CbamConfig> cbam)
    : name_(std::move(name)),
      c_in_(c_in),
      c_out_(c_out),
      n_basic_(n_basic),
      kernel_(kernel),
      opt_(opt),
      cbam_(cbam) {}

Shape ResidualBlockLayer::output_shape(const Shape& in) const {
  expect_channels(in, c_in_, name_);
  const std::size_t t = (in[1] + opt_.conv_stride - 1) / opt_.conv_stride;
  return {c_out_, pooled_length(t, opt_.pool_size, opt_.pool_stride)};
}

Variable ResidualBlockLayer::forward(ForwardContext& ctx, const Variable& x) const {
  ResidualBlockParams p;
  for (std::size_t i = 0; i < n_basic_; ++i) {
    const std::string base = name_ + ".conv" + std::to_string(i);
    p.convs.emplace_back(ctx.param(base + ".weight"), ctx.param(base + ".bias"));
  }
  p.shortcut = {ctx.param(name_ + ".shortcut.weight"), ctx.param(name_ + ".shortcut.bias")};
  if (cbam_) {
    const std::string c = name_ + ".cbam.channel";
    p.channel_attention = ChannelAttentionParams{ctx.param(c + ".fc1.weight"), ctx.param(c + ".fc1.bias"),
                                                 ctx.param(c + ".fc2.weight"), ctx.param(c + ".fc2.bias")};
    const std::string s = name_ + ".cbam.spatial";
    p.spatial_attention = SpatialAttentionParams{ctx.param(s + ".weight"), ctx.param(s + ".bias")};
  }
  return residual_block_forward(x, p, opt_);
}

void ResidualBlockLayer::init_params(ParameterStore& store, Rng& rng) const {
  std::size_t cin = c_in_;
  for (std::size_t i = 0; i < n_basic_; ++i) {
    const std::string base = name_ + ".conv" + std::to_string(i);
    store.add(base + ".weight",
              glorot_uniform({c_out_, cin, kernel_}, cin * kernel_, c_out_ * kernel_, rng));
    store.add(base + ".bias", Tensor({c_out_}));
    cin = c_out_;
  }
  Tensor sw({c_out_, c_in_, 1});
  if (c_in_ == c_out_) {
    for (std::size_t c = 0; c < c_out_; ++c) sw.at(c, c, 0) = 1.0;
  } else {
    sw = glorot_uniform({c_out_, c_in_, 1}, c_in_, c_out_, rng);
  }
  store.add(name_ + ".shortcut.weight", std::move(sw));
  store.add(name_ + ".shortcut.bias", Tensor({c_out_}));
  if (cbam_) {
    const std::size_t hidden = c_out_ / cbam_->reduction_ratio;
    const std::string c = name_ + ".cbam.channel";
    store.add(c + ".fc1.weight", glorot_uniform({hidden, c_out_}, c_out_, hidden, rng));
    store.add(c + ".fc1.bias", Tensor({hidden}));
    store.add(c + ".fc2.weight", glorot_uniform({c_out_, hidden}, hidden, c_out_, rng));
    store.add(c + ".fc2.bias", Tensor({c_out_}));
    const std::size_t k = cbam_->spatial_kernel;
    const std::string s = name_ + ".cbam.spatial";
    store.add(s + ".weight", glorot_uniform({1, 2, k}, 2 * k, k, rng));
    store.add(s + ".bias", Tensor({1}));
  }
}

std::string ResidualBlockLayer::describe() const {
  std::string d = name_ + ": residual " + std::to_string(c_in_) + "->" + std::to_string(c_out_) +
                  " x" + std::to_string(n_basic_) + " k=" + std::to_string(kernel_);
  if (cbam_) {
    d += " +cbam(r=" + std::to_string(cbam_->reduction_ratio) +
         ", k=" + std::to_string(cbam_->spatial_kernel) + ")";
  }
  return d + " avgpool" + std::to_string(opt_.pool_size);
}

DenseLayer::DenseLayer(std::string name, std::size_t in, std::size_t out, bool relu)
    : name_(std::move(name)), in_(in), out_(out), relu_(relu) {}

Shape DenseLayer::output_shape(const Shape& in) const {
  if (in.size() != 1 || in[0] != in_) {
    throw ShapeError(name_ + " expects [" + std::to_string(in_) + "], got " + shape_string(in));
  }
  return {out_};
}

Variable DenseLayer::forward(ForwardContext& ctx, const Variable& x) const {
  Variable y = ops::linear(x, ctx.param(name_ + ".weight"), ctx.param(name_ + ".bias"));
  return relu_ ? ops::relu(y) : y;
}

void DenseLayer::init_params(ParameterStore& store, Rng& rng) const {
  store.add(name_ + ".weight", glorot_uniform({out_, in_}, in_, out_, rng));
  store.add(name_ + ".bias", Tensor({out_}));
}

std::string DenseLayer::describe() const {
  return name_ + ": dense " + std::to_string(in_) + "->" + std::to_string(out_) +
         (relu_ ? " relu" : "");
}

Shape FlattenLayer::output_shape(const Shape& in) const { return {shape_size(in)}; }

Variable FlattenLayer::forward(ForwardContext&, const Variable& x) const { return ops::flatten(x); }

Variable DropoutLayer::forward(ForwardContext& ctx, const Variable& x) const {
  if (!ctx.training || rate_ <= 0.0) return x;
  if (ctx.rng == nullptr) throw std::logic_error("dropout in training mode needs an RNG");
  return ops::dropout(x, rate_, *ctx.rng, true);
}

std::string DropoutLayer::describe() const {
  std::ostringstream os;
  os << "dropout " << rate_;
  return os.str();
}

Variable TapLayer::forward(ForwardContext& ctx, const Variable& x) const {
  Variable out = x;
  if (ctx.grad_taps.count(name_)) out = Variable(x.value(), true);
  ctx.taps[name_] = out;
  return out;
}

ModelGraph build_attention_network(const NetworkConfig& cfg) {
  cfg.validate();
  std::vector<LayerPtr> layers;
  ResidualBlockOptions opt{cfg.conv_stride, cfg.pool_size, cfg.pool_stride};
  std::size_t cin = 1;
  for (std::size_t i = 0; i < cfg.n_residual(); ++i) {
    std::optional<CbamConfig> cbam;
    if (cfg.cbam.enabled && cfg.cbam.residual_block_index == i) cbam = cfg.cbam;
    layers.push_back(std::make_shared<ResidualBlockLayer>("block" + std::to_string(i), cin,
                                                          cfg.filters_per_block[i], cfg.n_basic,
                                                          cfg.conv_kernel, opt, cbam));
    cin = cfg.filters_per_block[i];
  }
  layers.push_back(std::make_shared<TapLayer>(kTapPostFinalPooling));
  layers.push_back(std::make_shared<FlattenLayer>());
  std::size_t width = cin * cfg.final_time_length();
  for (std::size_t j = 0; j < cfg.n_fc; ++j) {
    layers.push_back(std::make_shared<DenseLayer>("fc" + std::to_string(j), width,
                                                  cfg.fc_hidden_units, true));
    width = cfg.fc_hidden_units;
    if (j < cfg.dropout_rates.size() && cfg.dropout_rates[j] > 0.0) {
      layers.push_back(std::make_shared<DropoutLayer>(cfg.dropout_rates[j]));
    }
  }
  layers.push_back(std::make_shared<DenseLayer>("output", width, cfg.n_classes, false));
  layers.push_back(std::make_shared<TapLayer>(kTapPreSoftmax));

  ParameterStore params;
  Rng rng(cfg.init_seed);
  for (const auto& l : layers) l->init_params(params, rng);
  return ModelGraph(std::move(layers), {1, cfg.input_length}, std::move(params), cfg);
}

// --- presets -------------------------------------------------------------------

void TrainingConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs", "must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
  if (optimizer.name != "adam" && optimizer.name != "sgd") {
    throw ConfigError("optimizer.name", "must be 'adam' or 'sgd'");
  }
  if (!(optimizer.learning_rate >= 0.0)) throw ConfigError("optimizer.learning_rate", "must be >= 0");
  if (!(optimizer.clip_norm >= 0.0)) throw ConfigError("optimizer.clip_norm", "must be >= 0");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    throw ConfigError("validation_fraction", "must lie in [0, 1)");
  }
}

std::vector<std::string> preset_names() { return {"dpav4", "aes_rd", "aes_hd", "ascad"}; }

DatasetPreset dataset_preset(const std::string& name) {
  DatasetPreset p;
  p.name = name;
  NetworkConfig& n = p.network;
  TrainingConfig& t = p.training;
  n.filters_per_block = {128, 256, 512};
  n.fc_hidden_units = 1024;
  t.batch_size = 200;
  t.optimizer.learning_rate = 1e-4;
  if (name == "dpav4") {
    n.input_length = 1000;
    t.epochs = 60;
    p.leakage = LeakageModelSpec::sbox_xor_mask(1);
    p.n_profiling = 5000;
    p.n_attack = 5000;
  } else if (name == "aes_rd") {
    n.input_length = 3500;
    n.filters_per_block = {64, 64, 128, 128, 256};
    n.dropout_rates = {0.2, 0.2};
    t.epochs = 101;
    t.batch_size = 256;
    t.optimizer.clip_norm = 1.0;
    p.leakage = LeakageModelSpec::sbox(1);
    p.n_profiling = 40000;
    p.n_attack = 10000;
  } else if (name == "aes_hd") {
    n.input_length = 1250;
    t.epochs = 75;
    p.leakage = LeakageModelSpec::last_round_hd(12);
    p.n_profiling = 50000;
    p.n_attack = 25000;
  } else if (name == "ascad") {
    n.input_length = 700;
    n.fc_hidden_units = 4096;
    t.epochs = 75;
    p.leakage = LeakageModelSpec::sbox(3);
    p.n_profiling = 50000;
    p.n_attack = 10000;
  } else {
    throw ConfigError("preset", "unknown preset '" + name + "' (expected dpav4, aes_rd, aes_hd or ascad)");
  }
  return p;
}

}  // namespace deepsca
