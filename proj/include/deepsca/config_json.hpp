#pragma once

#include <json.hpp>

#include "deepsca/network.hpp"
#include "deepsca/training.hpp"
#include "deepsca/traces.hpp"

// JSON mirrors of the configuration records. Readers accept partial objects
// (missing keys keep their defaults), reject unknown keys, and raise
// ConfigError naming the offending field.
namespace deepsca {

using Json = nlohmann::json;

Json to_json(const CbamConfig& c);
Json to_json(const NetworkConfig& c);
Json to_json(const OptimizerConfig& c);
Json to_json(const TrainingConfig& c);
Json to_json(const LeakageModelSpec& c);
Json to_json(const SynthConfig& c);
Json to_json(const EpochStats& s);
Json to_json(const Provenance& p);

void from_json(const Json& j, CbamConfig& c, const std::string& prefix = "cbam");
void from_json(const Json& j, NetworkConfig& c, const std::string& prefix = "network");
void from_json(const Json& j, OptimizerConfig& c, const std::string& prefix = "optimizer");
void from_json(const Json& j, TrainingConfig& c, const std::string& prefix = "training");
void from_json(const Json& j, LeakageModelSpec& c, const std::string& prefix = "leakage");
void from_json(const Json& j, SynthConfig& c, const std::string& prefix = "synth");
void from_json(const Json& j, EpochStats& s);
void from_json(const Json& j, Provenance& p);

/// Parses a 32-digit hex key.
Key parse_key_hex(const std::string& hex, const std::string& field = "key");
std::string key_hex(std::span<const std::uint8_t> key);

}  // namespace deepsca
