#include "deepsca/training.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "deepsca/error.hpp"
#include "deepsca/random.hpp"

namespace deepsca {

Tensor make_batch(const TraceSet& ts, std::span<const std::size_t> rows) {
  Tensor x({rows.size(), 1, ts.n_samples});
  for (std::size_t b = 0; b < rows.size(); ++b) {
    const auto tr = ts.trace(rows[b]);
    std::copy(tr.begin(), tr.end(), x.data.begin() + static_cast<std::ptrdiff_t>(b * ts.n_samples));
  }
  return x;
}

Tensor make_batch(const TraceSet& ts, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> rows(end - begin);
  for (std::size_t i = begin; i < end; ++i) rows[i - begin] = i;
  return make_batch(ts, rows);
}

void Optimizer::step(ParameterStore& params, const std::map<std::string, const Tensor*>& grads) {
  ++t_;
  double scale = 1.0;
  if (cfg_.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& [name, g] : grads) {
      for (double v : g->data) sq += v * v;
    }
    const double norm = std::sqrt(sq);
    if (norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
  }
  const double lr = cfg_.learning_rate;
  for (const auto& [name, g] : grads) {
    Tensor& p = params.get_mut(name);
    if (cfg_.name == "sgd") {
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * scale * (*g)[i];
      continue;
    }
    auto [mit, m_new] = m_.try_emplace(name, Tensor(p.shape));
    auto [vit, v_new] = v_.try_emplace(name, Tensor(p.shape));
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    const double b1 = cfg_.beta1;
    const double b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = scale * (*g)[i];
      m[i] = b1 * m[i] + (1.0 - b1) * gi;
      v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
      p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.epsilon);
    }
  }
}

namespace {

std::size_t argmax_row(const Tensor& logits, std::size_t b) {
  const std::size_t k = logits.dim(1);
  const double* row = &logits.at(b, 0);
  return static_cast<std::size_t>(std::max_element(row, row + k) - row);
}

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

EvalResult evaluate(const ModelGraph& graph, const TraceSet& ts, std::span<const std::size_t> rows,
                    std::span<const std::uint8_t> labels, std::size_t batch) {
  EvalResult r;
  for (std::size_t s = 0; s < rows.size(); s += batch) {
    const std::size_t e = std::min(rows.size(), s + batch);
    std::span<const std::size_t> chunk = rows.subspan(s, e - s);
    ForwardContext ctx;
    const Variable logits = graph.forward(ctx, Variable(make_batch(ts, chunk)));
    std::vector<int> lab(chunk.size());
    for (std::size_t i = 0; i < chunk.size(); ++i) lab[i] = labels[chunk[i]];
    r.loss += ops::cross_entropy(logits, lab).value()[0] * static_cast<double>(chunk.size());
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      if (argmax_row(logits.value(), i) == static_cast<std::size_t>(lab[i])) r.accuracy += 1.0;
    }
  }
  r.loss /= static_cast<double>(rows.size());
  r.accuracy /= static_cast<double>(rows.size());
  return r;
}

}  // namespace

TrainedModel train(ModelGraph graph, const TraceSet& profiling,
                   std::span<const std::uint8_t> labels, const TrainingConfig& cfg,
                   const TrainHooks& hooks) {
  cfg.validate();
  profiling.validate();
  if (labels.size() != profiling.n_traces) {
    throw ConfigError("labels", "one label per profiling trace required");
  }
  if (profiling.n_samples != graph.input_length()) {
    throw ShapeError("model input length " + std::to_string(graph.input_length()) +
                     " != trace length " + std::to_string(profiling.n_samples));
  }
  for (auto l : labels) {
    if (l >= graph.n_classes()) throw ConfigError("labels", "label exceeds the number of classes");
  }

  Rng rng(cfg.seed);
  std::vector<std::size_t> train_rows = random_permutation(profiling.n_traces, rng);
  std::vector<std::size_t> val_rows;
  if (cfg.validation_fraction > 0.0) {
    const auto n_val = static_cast<std::size_t>(
        std::floor(cfg.validation_fraction * static_cast<double>(profiling.n_traces)));
    val_rows.assign(train_rows.end() - static_cast<std::ptrdiff_t>(n_val), train_rows.end());
    train_rows.resize(train_rows.size() - n_val);
    if (train_rows.empty()) throw ConfigError("validation_fraction", "leaves no training traces");
  }

  Optimizer opt(cfg.optimizer);
  TrainedModel out;
  out.training = cfg;
  Rng dropout_rng(derive_seed(cfg.seed, 1));

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = random_permutation(train_rows.size(), rng);
    double loss_sum = 0.0;
    double correct = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size, ++batch_index) {
      const std::size_t e = std::min(order.size(), s + cfg.batch_size);
      std::vector<std::size_t> rows(e - s);
      std::vector<int> lab(e - s);
      for (std::size_t i = s; i < e; ++i) {
        rows[i - s] = train_rows[order[i]];
        lab[i - s] = labels[rows[i - s]];
      }
      ForwardContext ctx;
      ctx.training = true;
      ctx.track_param_grads = true;
      ctx.rng = &dropout_rng;
      const Variable logits = graph.forward(ctx, Variable(make_batch(profiling, rows)));
      const Variable loss = ops::cross_entropy(logits, lab);
      const double lv = loss.value()[0];
      if (!std::isfinite(lv)) throw DivergenceError(epoch, batch_index);
      loss.backward();

      std::map<std::string, const Tensor*> grads;
      for (auto& [name, leaf] : ctx.leaves) {
        if (leaf.has_grad()) grads.emplace(name, &leaf.grad());
      }
      opt.step(graph.params(), grads);

      loss_sum += lv * static_cast<double>(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        if (argmax_row(logits.value(), i) == static_cast<std::size_t>(lab[i])) correct += 1.0;
      }
    }
    EpochStats st;
    st.epoch = epoch;
    st.loss = loss_sum / static_cast<double>(train_rows.size());
    st.accuracy = correct / static_cast<double>(train_rows.size());
    if (!val_rows.empty()) {
      const EvalResult v = evaluate(graph, profiling, val_rows, labels, cfg.batch_size);
      st.val_loss = v.loss;
      st.val_accuracy = v.accuracy;
    }
    out.history.push_back(st);
    if (hooks.on_epoch) hooks.on_epoch(st);
  }
  out.graph = std::move(graph);
  return out;
}

Tensor predict_logits(const ModelGraph& graph, const TraceSet& traces, std::size_t batch) {
  if (traces.n_samples != graph.input_length()) {
    throw ShapeError("model input length " + std::to_string(graph.input_length()) +
                     " != trace length " + std::to_string(traces.n_samples));
  }
  const std::size_t k = graph.n_classes();
  Tensor out({traces.n_traces, k});
  for (std::size_t s = 0; s < traces.n_traces; s += batch) {
    const std::size_t e = std::min(traces.n_traces, s + batch);
    ForwardContext ctx;
    const Variable logits = graph.forward(ctx, Variable(make_batch(traces, s, e)));
    std::copy(logits.value().data.begin(), logits.value().data.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(s * k));
  }
  return out;
}

Tensor predict_proba(const ModelGraph& graph, const TraceSet& traces, std::size_t batch) {
  Tensor p = predict_logits(graph, traces, batch);
  const std::size_t k = p.dim(1);
  for (std::size_t i = 0; i < p.dim(0); ++i) softmax_inplace({p.data.data() + i * k, k});
  return p;
}

Tensor predict_proba(const TrainedModel& model, const TraceSet& traces, std::size_t batch) {
  if (model.standardizer) return predict_proba(model.graph, model.standardizer->apply(traces), batch);
  return predict_proba(model.graph, traces, batch);
}

// --- gradient check -------------------------------------------------------------

namespace {

double objective_value(const Variable& logits, GradObjective obj, std::span<const int> labels) {
  switch (obj) {
    case GradObjective::kCrossEntropy: return ops::cross_entropy(logits, labels).value()[0];
    case GradObjective::kClassScore: return ops::class_score_sum(logits, labels).value()[0];
    case GradObjective::kHalfSumSquares: return ops::half_sum_squares(logits).value()[0];
  }
  return 0.0;
}

Variable objective_var(const Variable& logits, GradObjective obj, std::span<const int> labels) {
  switch (obj) {
    case GradObjective::kCrossEntropy: return ops::cross_entropy(logits, labels);
    case GradObjective::kClassScore: return ops::class_score_sum(logits, labels);
    case GradObjective::kHalfSumSquares: return ops::half_sum_squares(logits);
  }
  return {};
}

struct Coordinate {
  std::string param;  // empty for input coordinates
  std::size_t index;
};

}  // namespace

GradCheckReport gradient_check(ModelGraph graph, const Tensor& batch, std::span<const int> labels,
                               const GradCheckOptions& opt) {
  GradCheckReport report;
  Rng rng(opt.seed);

  // At least two coordinates per parameter tensor, the rest drawn uniformly.
  std::vector<Coordinate> coords;
  std::set<std::pair<std::string, std::size_t>> chosen;
  const auto& names = graph.params().names();
  for (const auto& n : names) {
    const std::size_t sz = graph.params().get(n).size();
    for (std::size_t r = 0; r < std::min<std::size_t>(2, sz); ++r) {
      const std::size_t i = uniform_below(rng, sz);
      if (chosen.emplace(n, i).second) coords.push_back({n, i});
    }
  }
  const std::size_t total = graph.params().total_size();
  const std::size_t target = std::min(total, std::max(opt.n_param_coords, coords.size()));
  std::vector<std::pair<std::string, std::size_t>> flat;
  flat.reserve(total);
  for (const auto& n : names) {
    for (std::size_t i = 0; i < graph.params().get(n).size(); ++i) flat.emplace_back(n, i);
  }
  while (coords.size() < target) {
    const auto& c = flat[uniform_below(rng, flat.size())];
    if (chosen.insert(c).second) coords.push_back({c.first, c.second});
  }
  const std::size_t n_in = std::min(opt.n_input_coords, batch.size());
  std::set<std::size_t> in_chosen;
  while (in_chosen.size() < n_in) in_chosen.insert(uniform_below(rng, batch.size()));
  for (auto i : in_chosen) coords.push_back({"", i});

  Tensor input = batch;
  for (GradObjective obj : opt.objectives) {
    ForwardContext ctx;
    ctx.track_param_grads = true;
    Variable x(input, true);
    const Variable logits = graph.forward(ctx, x);
    objective_var(logits, obj, labels).backward();

    auto eval = [&]() {
      ForwardContext c;
      return objective_value(graph.forward(c, Variable(input)), obj, labels);
    };

    for (const auto& c : coords) {
      double* slot = c.param.empty() ? &input.data[c.index] : &graph.params().get_mut(c.param).data[c.index];
      double analytic = 0.0;
      if (c.param.empty()) {
        analytic = x.has_grad() ? x.grad()[c.index] : 0.0;
      } else {
        auto it = ctx.leaves.find(c.param);
        if (it != ctx.leaves.end() && it->second.has_grad()) analytic = it->second.grad()[c.index];
      }
      const double saved = *slot;
      *slot = saved + opt.step;
      const double fp = eval();
      *slot = saved - opt.step;
      const double fm = eval();
      *slot = saved;
      const double central = (fp - fm) / (2.0 * opt.step);
      const double diff = std::abs(central - analytic);
      const double denom = std::max({std::abs(central), std::abs(analytic), opt.scale_floor});
      double rel = diff / denom;
      ++report.coordinates_checked;
      if (rel > opt.tolerance) {
        const double f0 = eval();
        const double fwd = (fp - f0) / opt.step;
        const double bwd = (f0 - fm) / opt.step;
        if (std::abs(fwd - bwd) >= diff) {
          ++report.kinks_skipped;
          continue;
        }
      }
      if (c.param.empty()) {
        report.input_max_rel_error = std::max(report.input_max_rel_error, rel);
      } else {
        auto& g = report.per_group[c.param];
        g = std::max(g, rel);
      }
      report.max_rel_error = std::max(report.max_rel_error, rel);
    }
  }
  const double kink_fraction =
      report.coordinates_checked == 0
          ? 0.0
          : static_cast<double>(report.kinks_skipped) / static_cast<double>(report.coordinates_checked);
  report.passed = report.max_rel_error < opt.tolerance && kink_fraction <= 0.05;
  return report;
}

}  // namespace deepsca
