#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "deepsca/traces.hpp"

namespace deepsca {

inline constexpr int kCanonicalSchemaVersion = 1;

/// Canonical container (HDF5):
///   /samples      float32 N x D
///   /plaintexts   uint8   N x 16
///   /ciphertexts  uint8   N x 16   (optional)
///   /masks        uint8   N x M    (optional)
///   /key          uint8   16, or N x 16 for per-trace keys
///   attributes on "/": schema_version = 1, source_tag (string)
void save_canonical(const std::filesystem::path& path, const TraceSet& ts);
TraceSet load_canonical(const std::filesystem::path& path);

inline constexpr const char* kAscadProfilingGroup = "Profiling_traces";
inline constexpr const char* kAscadAttackGroup = "Attack_traces";

/// Reads one group of an ASCAD-layout file: a `traces` array plus a
/// `metadata` compound array. Metadata field names are matched loosely
/// (plaintext/plaintexts/pt, ciphertext/ct, key, masks/mask); errors list the
/// fields actually present.
TraceSet load_ascad_hdf5(const std::filesystem::path& path, const std::string& group_name);

/// Writes profiling and attack sets in the ASCAD group layout. Traces are
/// stored as float32 so synthetic data survives unchanged.
void write_ascad_hdf5(const std::filesystem::path& path, const TraceSet& profiling,
                      const TraceSet& attack);

/// Names of groups and datasets in an HDF5 file, for `info`.
std::vector<std::string> describe_hdf5(const std::filesystem::path& path);

enum class RawSampleType { kInt8, kUInt8, kInt16, kFloat32, kFloat64 };
RawSampleType parse_raw_sample_type(const std::string& name);

/// One-shot import of vendor dumps (e.g. DPAcontest v4 or AES_RD exported to
/// flat files): a little-endian binary sample matrix plus a text index with
/// one line per trace of whitespace-separated hex fields.
struct RawImportConfig {
  std::filesystem::path samples_path;
  RawSampleType sample_type = RawSampleType::kFloat32;
  std::size_t n_samples = 0;
  std::filesystem::path metadata_path;
  /// Order of hex columns on each metadata line; entries are "plaintext",
  /// "ciphertext", "key", "mask" or "skip".
  std::vector<std::string> columns = {"plaintext", "key"};
  std::string source_tag = "raw";
};

TraceSet import_raw(const RawImportConfig& cfg);

/// FNV-1a digest over shape, samples and metadata (16 hex digits).
std::string dataset_hash(const TraceSet& ts);

}  // namespace deepsca
