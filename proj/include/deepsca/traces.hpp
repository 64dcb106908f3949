#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace deepsca {

using Key = std::array<std::uint8_t, 16>;

/// Row-major byte matrix (N rows of per-trace metadata).
struct ByteMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> data;

  ByteMatrix() = default;
  ByteMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0) {}

  std::uint8_t& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  std::uint8_t at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<const std::uint8_t> row(std::size_t r) const {
    return {data.data() + r * cols, cols};
  }

  friend bool operator==(const ByteMatrix&, const ByteMatrix&) = default;
};

/// N aligned measurements of D samples each, plus the public and secret
/// values of the encryption that produced each one.
///
/// `keys` holds either one row (a fixed key for the whole set) or N rows.
/// Masks may be wider than 16 columns when a dataset stores extra mask bytes.
struct TraceSet {
  std::size_t n_traces = 0;
  std::size_t n_samples = 0;
  std::vector<float> samples;  // N x D, row-major
  ByteMatrix plaintexts;
  std::optional<ByteMatrix> ciphertexts;
  std::optional<ByteMatrix> masks;
  ByteMatrix keys;
  std::string source_tag;

  std::span<const float> trace(std::size_t i) const {
    return {samples.data() + i * n_samples, n_samples};
  }
  float sample(std::size_t i, std::size_t t) const { return samples[i * n_samples + t]; }

  /// Throws DataError naming the first inconsistent field.
  void validate() const;

  /// True when all traces share one key (either stored once or repeated).
  bool has_fixed_key() const;
  /// The single key of an attack set; throws DataError("key") otherwise.
  Key fixed_key() const;
  /// Key of trace i, whichever storage form is used.
  std::span<const std::uint8_t> key_of(std::size_t i) const {
    return keys.row(keys.rows == 1 ? 0 : i);
  }

  TraceSet subset(std::span<const std::size_t> indices) const;

  friend bool operator==(const TraceSet&, const TraceSet&) = default;
};

enum class LeakageKind {
  kSboxXorMask,  // Sbox[P_i ^ k] ^ M (mask known)
  kSbox,         // Sbox[P_i ^ k]
  kLastRoundHd,  // InvSbox[C_i1 ^ k] ^ C_i2
};

/// Labelling rule mapping public data and a key hypothesis to one of 256
/// classes. All byte positions are 1-based.
struct LeakageModelSpec {
  LeakageKind kind = LeakageKind::kSbox;
  int byte_index = 1;  // for the S-box kinds
  int mask_index = 0;  // mask column for kSboxXorMask; 0 means "same as byte_index"
  int i1 = 12;         // for kLastRoundHd
  int i2 = 8;

  static LeakageModelSpec sbox(int byte_index);
  static LeakageModelSpec sbox_xor_mask(int byte_index, int mask_index = 0);
  static LeakageModelSpec last_round_hd(int i1);

  void validate() const;
  std::string name() const;
  /// Position of the key byte the hypothesis refers to.
  int key_position() const { return kind == LeakageKind::kLastRoundHd ? i1 : byte_index; }
  int effective_mask_index() const { return mask_index == 0 ? byte_index : mask_index; }

  friend bool operator==(const LeakageModelSpec&, const LeakageModelSpec&) = default;
};

LeakageKind parse_leakage_kind(const std::string& name);
std::string leakage_kind_name(LeakageKind kind);

/// Checks that `ts` carries the metadata `lm` reads.
void require_metadata(const TraceSet& ts, const LeakageModelSpec& lm);

/// Label of trace `j` under key-byte hypothesis `k`. No metadata checks.
std::uint8_t hypothesis_label(const TraceSet& ts, std::size_t j, const LeakageModelSpec& lm,
                              std::uint8_t k);

/// Labels under an explicit 16-byte key.
std::vector<std::uint8_t> compute_labels(const TraceSet& ts, const LeakageModelSpec& lm,
                                         const Key& key);
/// Labels under each trace's own key.
std::vector<std::uint8_t> compute_labels(const TraceSet& ts, const LeakageModelSpec& lm);

struct Split {
  std::vector<std::size_t> profiling;
  std::vector<std::size_t> attack;
};

Split make_split(std::size_t n, std::size_t n_profiling, std::size_t n_attack,
                 std::uint64_t seed);
std::pair<TraceSet, TraceSet> split_profiling_attack(const TraceSet& ts, std::size_t n_profiling,
                                                     std::size_t n_attack, std::uint64_t seed);

/// Per-column affine map fitted on profiling data. Constant columns keep
/// scale 1, so they map to zero.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;

  TraceSet apply(const TraceSet& ts) const;
  void apply_inplace(std::span<float> row) const;
  TraceSet invert(const TraceSet& ts) const;
};

Standardizer fit_standardizer(const TraceSet& profiling);

struct SynthConfig {
  std::size_t n_traces = 1000;
  std::size_t n_samples = 100;
  std::vector<std::size_t> leak_positions = {50};
  /// Leakage variance over noise variance. +infinity gives noiseless traces.
  double snr = 1.0;
  std::size_t desync_max = 0;
  bool masked = false;
  std::uint64_t seed = 0;
  int byte_index = 1;
  std::optional<Key> key;  // drawn from the seed when absent
  /// Where the mask itself leaks (masked sets only); defaults to
  /// (first leak + D/2) mod D.
  std::optional<std::size_t> mask_leak_position;
  double amplitude = 1.0;  // a in a*HW + b
  double offset = 0.0;     // b

  void validate() const;
  std::size_t resolved_mask_leak_position() const;
  double noise_sigma() const;
};

/// Simulated power traces leaking the Hamming weight of the first-round
/// S-box output of one byte.
TraceSet synthesize(const SynthConfig& cfg);

/// Ratio of the variance of class-conditional means to the mean within-class
/// variance at one column.
double estimate_snr(const TraceSet& ts, std::size_t column, std::span<const int> classes);

}  // namespace deepsca
