#include "deepsca/traces.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "deepsca/aes.hpp"
#include "deepsca/error.hpp"
#include "deepsca/random.hpp"

namespace deepsca {

void TraceSet::validate() const {
  if (n_traces == 0) throw DataError("samples", "trace set is empty");
  if (n_samples == 0) throw DataError("samples", "traces have zero length");
  if (samples.size() != n_traces * n_samples) {
    throw DataError("samples", "expected " + std::to_string(n_traces) + "x" +
                                   std::to_string(n_samples) + " values, found " +
                                   std::to_string(samples.size()));
  }
  auto check_rows = [&](const ByteMatrix& m, const std::string& name, std::size_t min_cols) {
    if (m.rows != n_traces) {
      throw DataError(name, "has " + std::to_string(m.rows) + " rows but samples has " +
                                std::to_string(n_traces));
    }
    if (m.cols < min_cols) {
      throw DataError(name, "needs at least " + std::to_string(min_cols) + " columns, found " +
                                std::to_string(m.cols));
    }
    if (m.data.size() != m.rows * m.cols) throw DataError(name, "storage size mismatch");
  };
  check_rows(plaintexts, "plaintexts", 16);
  if (ciphertexts) check_rows(*ciphertexts, "ciphertexts", 16);
  if (masks) check_rows(*masks, "masks", 1);
  if (keys.cols != 16) throw DataError("key", "must have 16 bytes per row");
  if (keys.rows != 1 && keys.rows != n_traces) {
    throw DataError("key", "must hold one row or one row per trace");
  }
  if (keys.data.size() != keys.rows * keys.cols) throw DataError("key", "storage size mismatch");
}

bool TraceSet::has_fixed_key() const {
  if (keys.rows <= 1) return keys.rows == 1;
  for (std::size_t i = 1; i < keys.rows; ++i) {
    if (!std::equal(keys.row(i).begin(), keys.row(i).end(), keys.row(0).begin())) return false;
  }
  return true;
}

Key TraceSet::fixed_key() const {
  if (!has_fixed_key()) throw DataError("key", "trace set does not use a single fixed key");
  Key k{};
  std::copy_n(keys.row(0).begin(), 16, k.begin());
  return k;
}

TraceSet TraceSet::subset(std::span<const std::size_t> indices) const {
  TraceSet out;
  out.n_traces = indices.size();
  out.n_samples = n_samples;
  out.source_tag = source_tag;
  out.samples.resize(indices.size() * n_samples);
  auto take = [&](const ByteMatrix& m) {
    ByteMatrix r(indices.size(), m.cols);
    for (std::size_t j = 0; j < indices.size(); ++j) {
      std::copy_n(m.row(indices[j]).begin(), m.cols, r.data.begin() + j * m.cols);
    }
    return r;
  };
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const auto src = trace(indices[j]);
    std::copy(src.begin(), src.end(), out.samples.begin() + j * n_samples);
  }
  out.plaintexts = take(plaintexts);
  if (ciphertexts) out.ciphertexts = take(*ciphertexts);
  if (masks) out.masks = take(*masks);
  out.keys = keys.rows == 1 ? keys : take(keys);
  return out;
}

LeakageModelSpec LeakageModelSpec::sbox(int byte_index) {
  LeakageModelSpec s;
  s.kind = LeakageKind::kSbox;
  s.byte_index = byte_index;
  return s;
}

LeakageModelSpec LeakageModelSpec::sbox_xor_mask(int byte_index, int mask_index) {
  LeakageModelSpec s;
  s.kind = LeakageKind::kSboxXorMask;
  s.byte_index = byte_index;
  s.mask_index = mask_index;
  return s;
}

LeakageModelSpec LeakageModelSpec::last_round_hd(int i1) {
  LeakageModelSpec s;
  s.kind = LeakageKind::kLastRoundHd;
  s.i1 = i1;
  s.i2 = aes::inv_shiftrows_partner(i1);
  return s;
}

void LeakageModelSpec::validate() const {
  auto in_range = [](int v) { return v >= 1 && v <= 16; };
  switch (kind) {
    case LeakageKind::kSboxXorMask:
      if (mask_index < 0) throw ConfigError("mask_index", "must be >= 0");
      [[fallthrough]];
    case LeakageKind::kSbox:
      if (!in_range(byte_index)) throw ConfigError("byte_index", "must be in [1, 16]");
      break;
    case LeakageKind::kLastRoundHd:
      if (!in_range(i1)) throw ConfigError("i1", "must be in [1, 16]");
      if (i2 != aes::inv_shiftrows_partner(i1)) {
        throw ConfigError("i2", "must be the inverse-ShiftRows partner of i1 (" +
                                    std::to_string(aes::inv_shiftrows_partner(i1)) + ")");
      }
      break;
  }
}

std::string leakage_kind_name(LeakageKind kind) {
  switch (kind) {
    case LeakageKind::kSboxXorMask: return "sbox_xor_mask";
    case LeakageKind::kSbox: return "sbox";
    case LeakageKind::kLastRoundHd: return "last_round_hd";
  }
  return "?";
}

LeakageKind parse_leakage_kind(const std::string& name) {
  if (name == "sbox_xor_mask") return LeakageKind::kSboxXorMask;
  if (name == "sbox") return LeakageKind::kSbox;
  if (name == "last_round_hd") return LeakageKind::kLastRoundHd;
  throw ConfigError("leakage.kind", "unknown leakage model '" + name + "'");
}

std::string LeakageModelSpec::name() const {
  switch (kind) {
    case LeakageKind::kSboxXorMask:
      return "Sbox[P" + std::to_string(byte_index) + " ^ k] ^ M" +
             std::to_string(effective_mask_index());
    case LeakageKind::kSbox:
      return "Sbox[P" + std::to_string(byte_index) + " ^ k]";
    case LeakageKind::kLastRoundHd:
      return "InvSbox[C" + std::to_string(i1) + " ^ k] ^ C" + std::to_string(i2);
  }
  return "?";
}

void require_metadata(const TraceSet& ts, const LeakageModelSpec& lm) {
  lm.validate();
  if (lm.kind == LeakageKind::kSboxXorMask) {
    if (!ts.masks) throw DataError("masks", "required by leakage model " + lm.name());
    if (static_cast<std::size_t>(lm.effective_mask_index()) > ts.masks->cols) {
      throw DataError("masks", "mask column " + std::to_string(lm.effective_mask_index()) +
                                   " not present");
    }
  }
  if (lm.kind == LeakageKind::kLastRoundHd && !ts.ciphertexts) {
    throw DataError("ciphertexts", "required by leakage model " + lm.name());
  }
}

std::uint8_t hypothesis_label(const TraceSet& ts, std::size_t j, const LeakageModelSpec& lm,
                              std::uint8_t k) {
  const auto& s = aes::sbox_table();
  switch (lm.kind) {
    case LeakageKind::kSboxXorMask:
      return s[ts.plaintexts.at(j, lm.byte_index - 1) ^ k] ^
             ts.masks->at(j, lm.effective_mask_index() - 1);
    case LeakageKind::kSbox:
      return s[ts.plaintexts.at(j, lm.byte_index - 1) ^ k];
    case LeakageKind::kLastRoundHd:
      return aes::inv_sbox_table()[ts.ciphertexts->at(j, lm.i1 - 1) ^ k] ^
             ts.ciphertexts->at(j, lm.i2 - 1);
  }
  return 0;
}

std::vector<std::uint8_t> compute_labels(const TraceSet& ts, const LeakageModelSpec& lm,
                                         const Key& key) {
  require_metadata(ts, lm);
  const std::uint8_t k = key[lm.key_position() - 1];
  std::vector<std::uint8_t> out(ts.n_traces);
  for (std::size_t j = 0; j < ts.n_traces; ++j) out[j] = hypothesis_label(ts, j, lm, k);
  return out;
}

std::vector<std::uint8_t> compute_labels(const TraceSet& ts, const LeakageModelSpec& lm) {
  require_metadata(ts, lm);
  if (ts.keys.rows == 0) throw DataError("key", "missing");
  std::vector<std::uint8_t> out(ts.n_traces);
  for (std::size_t j = 0; j < ts.n_traces; ++j) {
    out[j] = hypothesis_label(ts, j, lm, ts.key_of(j)[lm.key_position() - 1]);
  }
  return out;
}

Split make_split(std::size_t n, std::size_t n_profiling, std::size_t n_attack,
                 std::uint64_t seed) {
  if (n_profiling + n_attack > n) {
    throw DataError("samples", "split needs " + std::to_string(n_profiling + n_attack) +
                                   " traces, only " + std::to_string(n) + " available");
  }
  Rng rng(seed);
  const auto perm = random_permutation(n, rng);
  Split s;
  s.profiling.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_profiling));
  s.attack.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_profiling),
                  perm.begin() + static_cast<std::ptrdiff_t>(n_profiling + n_attack));
  std::sort(s.profiling.begin(), s.profiling.end());
  std::sort(s.attack.begin(), s.attack.end());
  return s;
}

std::pair<TraceSet, TraceSet> split_profiling_attack(const TraceSet& ts, std::size_t n_profiling,
                                                     std::size_t n_attack, std::uint64_t seed) {
  const Split s = make_split(ts.n_traces, n_profiling, n_attack, seed);
  return {ts.subset(s.profiling), ts.subset(s.attack)};
}

Standardizer fit_standardizer(const TraceSet& profiling) {
  if (profiling.n_traces < 2) {
    throw DataError("samples", "standardization needs at least 2 profiling traces");
  }
  const std::size_t n = profiling.n_traces;
  const std::size_t d = profiling.n_samples;
  Standardizer st;
  st.mean.assign(d, 0.0);
  st.scale.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = profiling.trace(i);
    for (std::size_t t = 0; t < d; ++t) st.mean[t] += row[t];
  }
  for (auto& m : st.mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = profiling.trace(i);
    for (std::size_t t = 0; t < d; ++t) {
      const double dv = row[t] - st.mean[t];
      st.scale[t] += dv * dv;
    }
  }
  for (auto& s : st.scale) {
    s = std::sqrt(s / static_cast<double>(n));
    if (!(s > 0.0)) s = 1.0;
  }
  return st;
}

void Standardizer::apply_inplace(std::span<float> row) const {
  for (std::size_t t = 0; t < row.size(); ++t) {
    row[t] = static_cast<float>((row[t] - mean[t]) / scale[t]);
  }
}

TraceSet Standardizer::apply(const TraceSet& ts) const {
  if (ts.n_samples != mean.size()) {
    throw DataError("samples", "standardizer fitted on " + std::to_string(mean.size()) +
                                   " samples, traces have " + std::to_string(ts.n_samples));
  }
  TraceSet out = ts;
  for (std::size_t i = 0; i < out.n_traces; ++i) {
    apply_inplace({out.samples.data() + i * out.n_samples, out.n_samples});
  }
  return out;
}

TraceSet Standardizer::invert(const TraceSet& ts) const {
  TraceSet out = ts;
  for (std::size_t i = 0; i < out.n_traces; ++i) {
    for (std::size_t t = 0; t < out.n_samples; ++t) {
      float& v = out.samples[i * out.n_samples + t];
      v = static_cast<float>(v * scale[t] + mean[t]);
    }
  }
  return out;
}

void SynthConfig::validate() const {
  if (n_traces == 0) throw ConfigError("n_traces", "must be >= 1");
  if (n_samples == 0) throw ConfigError("n_samples", "must be >= 1");
  if (leak_positions.empty()) throw ConfigError("leak_positions", "must not be empty");
  for (auto p : leak_positions) {
    if (p >= n_samples) throw ConfigError("leak_positions", "position outside [0, n_samples)");
  }
  if (!(snr > 0.0)) throw ConfigError("snr", "must be > 0");
  if (desync_max >= n_samples) throw ConfigError("desync_max", "must be < n_samples");
  if (byte_index < 1 || byte_index > 16) throw ConfigError("byte_index", "must be in [1, 16]");
  if (mask_leak_position && *mask_leak_position >= n_samples) {
    throw ConfigError("mask_leak_position", "outside [0, n_samples)");
  }
  if (!(amplitude > 0.0)) throw ConfigError("amplitude", "must be > 0");
}

std::size_t SynthConfig::resolved_mask_leak_position() const {
  return mask_leak_position.value_or((leak_positions.front() + n_samples / 2) % n_samples);
}

double SynthConfig::noise_sigma() const {
  // Var(HW(uniform byte)) = 8 * 1/4.
  return std::isinf(snr) ? 0.0 : amplitude * std::sqrt(2.0 / snr);
}

TraceSet synthesize(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const std::size_t n = cfg.n_traces;
  const std::size_t d = cfg.n_samples;

  TraceSet ts;
  ts.n_traces = n;
  ts.n_samples = d;
  ts.source_tag = "synthetic";
  ts.keys = ByteMatrix(1, 16);
  std::uniform_int_distribution<int> byte_dist(0, 255);
  for (auto& b : ts.keys.data) b = static_cast<std::uint8_t>(byte_dist(rng));
  if (cfg.key) std::copy(cfg.key->begin(), cfg.key->end(), ts.keys.data.begin());

  ts.plaintexts = ByteMatrix(n, 16);
  for (auto& b : ts.plaintexts.data) b = static_cast<std::uint8_t>(byte_dist(rng));
  if (cfg.masked) {
    ts.masks = ByteMatrix(n, 16);
    for (auto& b : ts.masks->data) b = static_cast<std::uint8_t>(byte_dist(rng));
  }

  const double sigma = cfg.noise_sigma();
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::uint8_t k = ts.keys.at(0, cfg.byte_index - 1);
  const std::size_t mask_pos = cfg.resolved_mask_leak_position();
  std::uniform_int_distribution<std::size_t> shift_dist(0, cfg.desync_max);

  ts.samples.resize(n * d);
  std::vector<double> row(d);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t t = 0; t < d; ++t) {
      row[t] = cfg.offset + (sigma > 0.0 ? sigma * noise(rng) : 0.0);
    }
    const std::uint8_t z = aes::sbox_table()[ts.plaintexts.at(j, cfg.byte_index - 1) ^ k];
    if (cfg.masked) {
      const std::uint8_t m = ts.masks->at(j, cfg.byte_index - 1);
      for (auto p : cfg.leak_positions) {
        row[p] += cfg.amplitude * aes::hamming_weight(static_cast<std::uint8_t>(z ^ m));
      }
      row[mask_pos] += cfg.amplitude * aes::hamming_weight(m);
    } else {
      for (auto p : cfg.leak_positions) row[p] += cfg.amplitude * aes::hamming_weight(z);
    }
    const std::size_t shift = cfg.desync_max > 0 ? shift_dist(rng) : 0;
    float* dst = ts.samples.data() + j * d;
    for (std::size_t t = 0; t < d; ++t) dst[(t + shift) % d] = static_cast<float>(row[t]);
  }
  return ts;
}

double estimate_snr(const TraceSet& ts, std::size_t column, std::span<const int> classes) {
  if (classes.size() != ts.n_traces) throw ShapeError("estimate_snr: one class per trace");
  std::map<int, std::pair<double, double>> sums;  // class -> (sum, sum of squares)
  std::map<int, std::size_t> counts;
  double total = 0.0;
  for (std::size_t j = 0; j < ts.n_traces; ++j) {
    const double v = ts.sample(j, column);
    auto& s = sums[classes[j]];
    s.first += v;
    s.second += v * v;
    ++counts[classes[j]];
    total += v;
  }
  const double n = static_cast<double>(ts.n_traces);
  const double grand = total / n;
  double between = 0.0;
  double within = 0.0;
  for (const auto& [c, s] : sums) {
    const double cnt = static_cast<double>(counts[c]);
    const double mean = s.first / cnt;
    between += cnt * (mean - grand) * (mean - grand);
    within += s.second - cnt * mean * mean;
  }
  between /= n;
  within /= n;
  if (within <= 0.0) return std::numeric_limits<double>::infinity();
  return between / within;
}

}  // namespace deepsca
