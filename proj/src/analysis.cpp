#include "deepsca/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>

#include "deepsca/aes.hpp"
#include "deepsca/error.hpp"

namespace deepsca {

PowerModel parse_power_model(const std::string& name) {
  if (name == "hamming_weight" || name == "hw") return PowerModel::kHammingWeight;
  if (name == "identity" || name == "id") return PowerModel::kIdentity;
  throw ConfigError("power_model", "expected 'hamming_weight' or 'identity', got '" + name + "'");
}

std::string power_model_name(PowerModel pm) {
  return pm == PowerModel::kHammingWeight ? "hamming_weight" : "identity";
}

CpaResult cpa(const TraceSet& ts, const LeakageModelSpec& lm, PowerModel pm) {
  lm.validate();
  require_metadata(ts, lm);
  const std::size_t n = ts.n_traces;
  const std::size_t d = ts.n_samples;
  if (n < 3) throw DataError("n_traces", "CPA needs at least 3 traces");

  CpaResult r;
  r.n_samples = d;
  r.corr.assign(256 * d, 0.0);
  r.description = power_model_name(pm) + "(" + lm.name() + ")";
  if (ts.has_fixed_key()) {
    r.known_key = ts.fixed_key()[static_cast<std::size_t>(lm.key_position() - 1)];
  }

  // Centred samples and per-column norms.
  std::vector<double> mean(d, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t t = 0; t < d; ++t) mean[t] += ts.sample(j, t);
  }
  for (auto& m : mean) m /= static_cast<double>(n);
  std::vector<double> centred(n * d);
  std::vector<double> norm_x(d, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t t = 0; t < d; ++t) {
      const double v = ts.sample(j, t) - mean[t];
      centred[j * d + t] = v;
      norm_x[t] += v * v;
    }
  }
  for (auto& v : norm_x) v = std::sqrt(v);

  std::vector<double> h(n);
  std::vector<double> num(d);
  for (int k = 0; k < 256; ++k) {
    double hmean = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const std::uint8_t z = hypothesis_label(ts, j, lm, static_cast<std::uint8_t>(k));
      h[j] = pm == PowerModel::kHammingWeight ? aes::hamming_weight(z) : z;
      hmean += h[j];
    }
    hmean /= static_cast<double>(n);
    double norm_h = 0.0;
    for (auto& v : h) {
      v -= hmean;
      norm_h += v * v;
    }
    norm_h = std::sqrt(norm_h);
    if (norm_h == 0.0) {
      r.degenerate_hypotheses.push_back(k);
      continue;
    }
    std::fill(num.begin(), num.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      const double hj = h[j];
      const double* row = &centred[j * d];
      for (std::size_t t = 0; t < d; ++t) num[t] += hj * row[t];
    }
    double* out = &r.corr[static_cast<std::size_t>(k) * d];
    for (std::size_t t = 0; t < d; ++t) {
      out[t] = norm_x[t] == 0.0 ? 0.0 : std::clamp(num[t] / (norm_h * norm_x[t]), -1.0, 1.0);
    }
  }
  return r;
}

namespace {

Tensor batch_of(std::span<const float> samples, std::size_t rows, std::size_t d) {
  Tensor x({rows, 1, d});
  std::copy(samples.begin(), samples.begin() + static_cast<std::ptrdiff_t>(rows * d),
            x.data.begin());
  return x;
}

void require_tap(const ModelGraph& graph) {
  if (!graph.tap_shape(kTapPostFinalPooling)) {
    throw ConfigError("model", std::string("graph has no '") + kTapPostFinalPooling + "' tap");
  }
}

void check_trace_length(const ModelGraph& graph, std::size_t d) {
  if (d != graph.input_length()) {
    throw ShapeError("trace length " + std::to_string(d) + " does not match model input " +
                     std::to_string(graph.input_length()));
  }
}

struct TapGrad {
  Tensor value;  // [B, V, D']
  Tensor grad;   // [B, V, D']
  Tensor logits;
};

// One forward/backward pass with objective sum_b y_b^{classes[b]}. Rows do not
// interact in eval mode, so the tap gradient of row b is d y_b^{c_b} / d A_b.
TapGrad tap_gradient(const ModelGraph& graph, const Tensor& x, std::span<const int> classes) {
  ForwardContext ctx;
  ctx.params = &graph.params();
  ctx.grad_taps.insert(kTapPostFinalPooling);
  const Variable logits = graph.forward(ctx, Variable(x));
  const std::size_t b = x.dim(0);
  const std::size_t k = logits.shape()[1];
  Tensor seed({b, k});
  for (std::size_t i = 0; i < b; ++i) {
    if (classes[i] < 0 || static_cast<std::size_t>(classes[i]) >= k) {
      throw ConfigError("class", "class " + std::to_string(classes[i]) + " outside [0, " +
                                     std::to_string(k - 1) + "]");
    }
    seed.at(i, static_cast<std::size_t>(classes[i])) = 1.0;
  }
  logits.backward(seed);
  const Variable& tap = ctx.taps.at(kTapPostFinalPooling);
  TapGrad out{tap.value(), tap.has_grad() ? tap.grad() : Tensor::zeros_like(tap.value()),
              logits.value()};
  return out;
}

std::vector<double> coarse_map(const TapGrad& g, std::size_t row) {
  const Shape& s = g.value.shape;  // [B, V, D']
  const std::size_t v = s[1];
  const std::size_t dp = s.size() == 3 ? s[2] : 1;
  std::vector<double> out(dp, 0.0);
  const std::size_t base = row * v * dp;
  for (std::size_t i = 0; i < v; ++i) {
    for (std::size_t j = 0; j < dp; ++j) {
      out[j] += g.value.data[base + i * dp + j] * g.grad.data[base + i * dp + j];
    }
  }
  for (auto& e : out) e = std::max(e, 0.0);
  return out;
}

}  // namespace

Tensor cgv_feature_matrix(const ModelGraph& graph, std::span<const float> trace) {
  require_tap(graph);
  check_trace_length(graph, trace.size());
  ForwardContext ctx;
  ctx.params = &graph.params();
  graph.forward(ctx, Variable(batch_of(trace, 1, trace.size())));
  const Tensor& a = ctx.taps.at(kTapPostFinalPooling).value();
  const std::size_t v = a.dim(1);
  const std::size_t dp = a.rank() == 3 ? a.dim(2) : 1;
  Tensor out({dp, v});
  for (std::size_t i = 0; i < v; ++i) {
    for (std::size_t j = 0; j < dp; ++j) out.at(j, i) = a.data[i * dp + j];
  }
  return out;
}

std::vector<double> expand_nearest(std::span<const double> coarse, std::size_t length) {
  if (coarse.empty()) throw ShapeError("cannot expand an empty map");
  const std::size_t factor = (length + coarse.size() - 1) / coarse.size();
  std::vector<double> out(length);
  for (std::size_t t = 0; t < length; ++t) out[t] = coarse[std::min(t / factor, coarse.size() - 1)];
  return out;
}

WeightMap cgv_weight_map(const ModelGraph& graph, std::span<const float> trace, int c) {
  require_tap(graph);
  check_trace_length(graph, trace.size());
  const int cls[1] = {c};
  const TapGrad g = tap_gradient(graph, batch_of(trace, 1, trace.size()), cls);
  WeightMap m;
  m.coarse = coarse_map(g, 0);
  m.expanded = expand_nearest(m.coarse, trace.size());
  m.class_index = c;
  return m;
}

ClassPolicy parse_class_policy(const std::string& name) {
  if (name == "predicted") return ClassPolicy::kPredicted;
  if (name == "true") return ClassPolicy::kTrue;
  if (name == "fixed") return ClassPolicy::kFixed;
  throw ConfigError("class_policy", "expected predicted, true or fixed, got '" + name + "'");
}

WeightMap cgv_aggregate(const ModelGraph& graph, const TraceSet& traces,
                        const CgvAggregateOptions& opt) {
  require_tap(graph);
  if (traces.n_traces == 0) throw ConfigError("traces", "cannot aggregate over an empty set");
  check_trace_length(graph, traces.n_samples);
  if (opt.policy == ClassPolicy::kTrue && opt.labels.size() != traces.n_traces) {
    throw ConfigError("labels", "true-class policy needs one label per trace");
  }
  const std::size_t d = traces.n_samples;
  const std::size_t batch = std::max<std::size_t>(opt.batch, 1);

  std::vector<double> coarse_sum;
  std::vector<double> expanded_sum(d, 0.0);
  for (std::size_t start = 0; start < traces.n_traces; start += batch) {
    const std::size_t rows = std::min(batch, traces.n_traces - start);
    const Tensor x = batch_of(std::span<const float>(traces.samples).subspan(start * d), rows, d);
    std::vector<int> classes(rows, opt.fixed_class);
    if (opt.policy == ClassPolicy::kPredicted) {
      ForwardContext ctx;
      ctx.params = &graph.params();
      const Tensor logits = graph.forward(ctx, Variable(x)).value();
      const std::size_t k = logits.dim(1);
      for (std::size_t i = 0; i < rows; ++i) {
        const double* row = &logits.at(i, 0);
        classes[i] = static_cast<int>(std::max_element(row, row + k) - row);
      }
    } else if (opt.policy == ClassPolicy::kTrue) {
      for (std::size_t i = 0; i < rows; ++i) classes[i] = opt.labels[start + i];
    }
    const TapGrad g = tap_gradient(graph, x, classes);
    for (std::size_t i = 0; i < rows; ++i) {
      const std::vector<double> c = coarse_map(g, i);
      if (coarse_sum.empty()) coarse_sum.assign(c.size(), 0.0);
      for (std::size_t j = 0; j < c.size(); ++j) coarse_sum[j] += c[j];
      const std::vector<double> e = expand_nearest(c, d);
      for (std::size_t t = 0; t < d; ++t) expanded_sum[t] += e[t];
    }
  }
  const double n = static_cast<double>(traces.n_traces);
  WeightMap m;
  m.count = traces.n_traces;
  for (auto& v : coarse_sum) v /= n;
  for (auto& v : expanded_sum) v /= n;
  m.coarse = std::move(coarse_sum);
  m.expanded = std::move(expanded_sum);
  if (opt.policy == ClassPolicy::kFixed) m.class_index = opt.fixed_class;
  return m;
}

std::vector<double> normalize_unit(std::span<const double> v) {
  std::vector<double> out(v.begin(), v.end());
  if (out.empty()) return out;
  const auto [lo, hi] = std::minmax_element(out.begin(), out.end());
  const double a = *lo;
  const double span = *hi - *lo;
  for (auto& e : out) e = span > 0.0 ? (e - a) / span : 0.0;
  return out;
}

void write_cpa_csv(const std::filesystem::path& path, const CpaResult& r) {
  std::ofstream out(path);
  if (!out) throw DataError(path.string(), "cannot open for writing");
  out << "t";
  for (int k = 0; k < 256; ++k) out << ",k" << k;
  out << '\n' << std::setprecision(10);
  for (std::size_t t = 0; t < r.n_samples; ++t) {
    out << t;
    for (int k = 0; k < 256; ++k) out << ',' << r.at(k, t);
    out << '\n';
  }
}

void write_weight_map_csv(const std::filesystem::path& path, const WeightMap& m) {
  std::ofstream out(path);
  if (!out) throw DataError(path.string(), "cannot open for writing");
  const std::vector<double> unit = normalize_unit(m.expanded);
  out << "t,weight,weight_normalized\n" << std::setprecision(10);
  for (std::size_t t = 0; t < m.expanded.size(); ++t) {
    out << t << ',' << m.expanded[t] << ',' << unit[t] << '\n';
  }
}

}  // namespace deepsca
