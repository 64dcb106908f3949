#include "deepsca/config_json.hpp"

#include <cmath>
#include <limits>
#include <set>

#include "deepsca/error.hpp"

namespace deepsca {
namespace {

std::string join(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

void check_keys(const Json& j, const std::string& prefix, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(prefix, "must be a JSON object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!ok.count(it.key())) throw ConfigError(join(prefix, it.key()), "unknown field");
  }
}

template <typename T>
void read(const Json& j, const char* key, T& out, const std::string& prefix) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(join(prefix, key), std::string("wrong type (") + e.what() + ")");
  }
}

void read_size(const Json& j, const char* key, std::size_t& out, const std::string& prefix) {
  if (!j.contains(key)) return;
  const Json& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ConfigError(join(prefix, key), "must be a non-negative integer");
  }
  out = v.get<std::size_t>();
}

}  // namespace

Json to_json(const CbamConfig& c) {
  return {{"enabled", c.enabled},
          {"residual_block_index", c.residual_block_index},
          {"reduction_ratio", c.reduction_ratio},
          {"spatial_kernel", c.spatial_kernel}};
}

void from_json(const Json& j, CbamConfig& c, const std::string& prefix) {
  check_keys(j, prefix, {"enabled", "residual_block_index", "reduction_ratio", "spatial_kernel"});
  read(j, "enabled", c.enabled, prefix);
  read_size(j, "residual_block_index", c.residual_block_index, prefix);
  read_size(j, "reduction_ratio", c.reduction_ratio, prefix);
  read_size(j, "spatial_kernel", c.spatial_kernel, prefix);
}

Json to_json(const NetworkConfig& c) {
  return {{"input_length", c.input_length},
          {"n_fc", c.n_fc},
          {"n_basic", c.n_basic},
          {"filters_per_block", c.filters_per_block},
          {"conv_kernel", c.conv_kernel},
          {"conv_stride", c.conv_stride},
          {"pool_kind", c.pool_kind},
          {"pool_size", c.pool_size},
          {"pool_stride", c.pool_stride},
          {"activation", c.activation},
          {"fc_hidden_units", c.fc_hidden_units},
          {"dropout_rates", c.dropout_rates},
          {"n_classes", c.n_classes},
          {"cbam", to_json(c.cbam)},
          {"init_seed", c.init_seed}};
}

void from_json(const Json& j, NetworkConfig& c, const std::string& prefix) {
  check_keys(j, prefix,
             {"input_length", "n_fc", "n_basic", "filters_per_block", "conv_kernel", "conv_stride",
              "pool_kind", "pool_size", "pool_stride", "activation", "fc_hidden_units",
              "dropout_rates", "n_classes", "cbam", "init_seed"});
  read_size(j, "input_length", c.input_length, prefix);
  read_size(j, "n_fc", c.n_fc, prefix);
  read_size(j, "n_basic", c.n_basic, prefix);
  read(j, "filters_per_block", c.filters_per_block, prefix);
  read_size(j, "conv_kernel", c.conv_kernel, prefix);
  read_size(j, "conv_stride", c.conv_stride, prefix);
  read(j, "pool_kind", c.pool_kind, prefix);
  read_size(j, "pool_size", c.pool_size, prefix);
  read_size(j, "pool_stride", c.pool_stride, prefix);
  read(j, "activation", c.activation, prefix);
  read_size(j, "fc_hidden_units", c.fc_hidden_units, prefix);
  read(j, "dropout_rates", c.dropout_rates, prefix);
  read_size(j, "n_classes", c.n_classes, prefix);
  if (j.contains("cbam")) from_json(j.at("cbam"), c.cbam, join(prefix, "cbam"));
  read(j, "init_seed", c.init_seed, prefix);
}

Json to_json(const OptimizerConfig& c) {
  return {{"name", c.name},         {"learning_rate", c.learning_rate}, {"beta1", c.beta1},
          {"beta2", c.beta2},       {"epsilon", c.epsilon},             {"clip_norm", c.clip_norm}};
}

void from_json(const Json& j, OptimizerConfig& c, const std::string& prefix) {
  check_keys(j, prefix, {"name", "learning_rate", "beta1", "beta2", "epsilon", "clip_norm"});
  read(j, "name", c.name, prefix);
  read(j, "learning_rate", c.learning_rate, prefix);
  read(j, "beta1", c.beta1, prefix);
  read(j, "beta2", c.beta2, prefix);
  read(j, "epsilon", c.epsilon, prefix);
  read(j, "clip_norm", c.clip_norm, prefix);
}

Json to_json(const TrainingConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"optimizer", to_json(c.optimizer)},
          {"seed", c.seed},
          {"validation_fraction", c.validation_fraction},
          {"loss", "categorical_cross_entropy"}};
}

void from_json(const Json& j, TrainingConfig& c, const std::string& prefix) {
  check_keys(j, prefix, {"epochs", "batch_size", "optimizer", "seed", "validation_fraction", "loss"});
  read_size(j, "epochs", c.epochs, prefix);
  read_size(j, "batch_size", c.batch_size, prefix);
  if (j.contains("optimizer")) from_json(j.at("optimizer"), c.optimizer, join(prefix, "optimizer"));
  read(j, "seed", c.seed, prefix);
  read(j, "validation_fraction", c.validation_fraction, prefix);
  if (j.contains("loss") && j.at("loss") != "categorical_cross_entropy") {
    throw ConfigError(join(prefix, "loss"), "only categorical_cross_entropy is supported");
  }
}

Json to_json(const LeakageModelSpec& c) {
  Json j = {{"kind", leakage_kind_name(c.kind)}};
  if (c.kind == LeakageKind::kLastRoundHd) {
    j["i1"] = c.i1;
    j["i2"] = c.i2;
  } else {
    j["byte_index"] = c.byte_index;
    if (c.kind == LeakageKind::kSboxXorMask) j["mask_index"] = c.effective_mask_index();
  }
  return j;
}

void from_json(const Json& j, LeakageModelSpec& c, const std::string& prefix) {
  check_keys(j, prefix, {"kind", "byte_index", "mask_index", "i1", "i2"});
  if (j.contains("kind")) {
    std::string k;
    read(j, "kind", k, prefix);
    c.kind = parse_leakage_kind(k);
  }
  read(j, "byte_index", c.byte_index, prefix);
  read(j, "mask_index", c.mask_index, prefix);
  read(j, "i1", c.i1, prefix);
  if (c.kind == LeakageKind::kLastRoundHd && !j.contains("i2") && c.i1 >= 1 && c.i1 <= 16) {
    c.i2 = LeakageModelSpec::last_round_hd(c.i1).i2;
  }
  read(j, "i2", c.i2, prefix);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(join(prefix, e.field()), e.what());
  }
}

Json to_json(const SynthConfig& c) {
  Json j = {{"n_traces", c.n_traces},
            {"n_samples", c.n_samples},
            {"leak_positions", c.leak_positions},
            {"desync_max", c.desync_max},
            {"masked", c.masked},
            {"seed", c.seed},
            {"byte_index", c.byte_index},
            {"amplitude", c.amplitude},
            {"offset", c.offset}};
  j["snr"] = std::isinf(c.snr) ? Json("inf") : Json(c.snr);
  if (c.key) j["key"] = key_hex(*c.key);
  if (c.mask_leak_position) j["mask_leak_position"] = *c.mask_leak_position;
  return j;
}

void from_json(const Json& j, SynthConfig& c, const std::string& prefix) {
  check_keys(j, prefix,
             {"n_traces", "n_samples", "leak_positions", "snr", "desync_max", "masked", "seed",
              "byte_index", "key", "mask_leak_position", "amplitude", "offset"});
  read_size(j, "n_traces", c.n_traces, prefix);
  read_size(j, "n_samples", c.n_samples, prefix);
  read(j, "leak_positions", c.leak_positions, prefix);
  if (j.contains("snr")) {
    const Json& v = j.at("snr");
    if (v.is_string() && (v == "inf" || v == "infinity")) {
      c.snr = std::numeric_limits<double>::infinity();
    } else if (v.is_number()) {
      c.snr = v.get<double>();
    } else {
      throw ConfigError(join(prefix, "snr"), "must be a number or \"inf\"");
    }
  }
  read_size(j, "desync_max", c.desync_max, prefix);
  read(j, "masked", c.masked, prefix);
  read(j, "seed", c.seed, prefix);
  read(j, "byte_index", c.byte_index, prefix);
  if (j.contains("key")) {
    std::string k;
    read(j, "key", k, prefix);
    c.key = parse_key_hex(k, join(prefix, "key"));
  }
  if (j.contains("mask_leak_position")) {
    std::size_t m = 0;
    read_size(j, "mask_leak_position", m, prefix);
    c.mask_leak_position = m;
  }
  read(j, "amplitude", c.amplitude, prefix);
  read(j, "offset", c.offset, prefix);
}

Json to_json(const EpochStats& s) {
  Json j = {{"epoch", s.epoch}, {"loss", s.loss}, {"accuracy", s.accuracy}};
  if (s.val_loss) j["val_loss"] = *s.val_loss;
  if (s.val_accuracy) j["val_accuracy"] = *s.val_accuracy;
  return j;
}

void from_json(const Json& j, EpochStats& s) {
  s.epoch = j.at("epoch").get<std::size_t>();
  s.loss = j.at("loss").get<double>();
  s.accuracy = j.at("accuracy").get<double>();
  if (j.contains("val_loss")) s.val_loss = j.at("val_loss").get<double>();
  if (j.contains("val_accuracy")) s.val_accuracy = j.at("val_accuracy").get<double>();
}

Json to_json(const Provenance& p) {
  return {{"preset", p.preset},         {"dataset_path", p.dataset_path},
          {"dataset_hash", p.dataset_hash}, {"split_seed", p.split_seed},
          {"n_profiling", p.n_profiling},   {"n_attack", p.n_attack}};
}

void from_json(const Json& j, Provenance& p) {
  p.preset = j.value("preset", "");
  p.dataset_path = j.value("dataset_path", "");
  p.dataset_hash = j.value("dataset_hash", "");
  p.split_seed = j.value("split_seed", std::uint64_t{0});
  p.n_profiling = j.value("n_profiling", std::size_t{0});
  p.n_attack = j.value("n_attack", std::size_t{0});
}

Key parse_key_hex(const std::string& hex, const std::string& field) {
  if (hex.size() != 32) throw ConfigError(field, "expected 32 hex digits");
  Key k{};
  for (std::size_t i = 0; i < 16; ++i) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(hex.substr(2 * i, 2), &used, 16);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != 2) throw ConfigError(field, "invalid hex digits");
    k[i] = static_cast<std::uint8_t>(v);
  }
  return k;
}

std::string key_hex(std::span<const std::uint8_t> key) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (auto b : key) {
    s += digits[b >> 4];
    s += digits[b & 15];
  }
  return s;
}

}  // namespace deepsca
