#include "deepsca/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "deepsca/error.hpp"

namespace deepsca {

Variable::Variable(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::make_shared<const Tensor>(std::move(value));
  node_->requires_grad = requires_grad;
}

Variable Variable::shared(std::shared_ptr<const Tensor> value, bool requires_grad) {
  Variable v;
  v.node_ = std::make_shared<Node>();
  v.node_->value = std::move(value);
  v.node_->requires_grad = requires_grad;
  return v;
}

Variable Variable::make(Tensor value, std::vector<Variable> inputs, BackwardFn fn) {
  Variable v(std::move(value), false);
  for (const auto& in : inputs) {
    if (in.requires_grad()) v.node_->requires_grad = true;
  }
  if (v.node_->requires_grad) {
    v.node_->inputs = std::move(inputs);
    v.node_->backward_fn = std::move(fn);
  }
  return v;
}

Tensor& Variable::grad_mut() {
  if (node_->grad.data.empty()) node_->grad = Tensor(node_->value->shape);
  return node_->grad;
}

void Variable::backward(const Tensor& seed) const {
  if (seed.shape != shape()) {
    throw ShapeError("backward seed shape " + shape_string(seed.shape) + " != " +
                     shape_string(shape()));
  }
  if (!requires_grad()) return;
  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].node_.get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  Tensor& g = const_cast<Variable*>(this)->grad_mut();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.data.empty()) n->backward_fn(n->grad, n->inputs);
  }
}

void Variable::backward() const {
  if (value().size() != 1) throw ShapeError("backward() without seed needs a scalar");
  backward(Tensor(shape(), 1.0));
}

void softmax_inplace(std::span<double> row) {
  const double mx = *std::max_element(row.begin(), row.end());
  double sum = 0.0;
  for (auto& v : row) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (auto& v : row) v /= sum;
}

namespace ops {
namespace {

void accumulate(Variable& in, const Tensor& delta) {
  Tensor& g = in.grad_mut();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

struct ConvGeometry {
  std::size_t batch, c_in, c_out, t_in, t_out, k, stride, pad_left;
};

ConvGeometry conv_geometry(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride) {
  expect_rank(x, 3, "conv1d input");
  expect_rank(w, 3, "conv1d weight");
  require(b.rank() == 1 && b.dim(0) == w.dim(0), "conv1d: bias must have C_out entries");
  require(w.dim(1) == x.dim(1), "conv1d: weight expects " + std::to_string(w.dim(1)) +
                                    " input channels, got " + std::to_string(x.dim(1)));
  require(stride >= 1, "conv1d: stride must be >= 1");
  ConvGeometry g{};
  g.batch = x.dim(0);
  g.c_in = x.dim(1);
  g.t_in = x.dim(2);
  g.c_out = w.dim(0);
  g.k = w.dim(2);
  g.stride = stride;
  g.t_out = (g.t_in + stride - 1) / stride;
  const std::size_t needed = (g.t_out - 1) * stride + g.k;
  const std::size_t pad_total = needed > g.t_in ? needed - g.t_in : 0;
  g.pad_left = pad_total / 2;
  return g;
}

// Valid output range [lo, hi) for kernel tap k at stride 1.
inline void tap_range(const ConvGeometry& g, std::size_t k, std::size_t& lo, std::size_t& hi) {
  // input index = t + k - pad_left must lie in [0, t_in)
  lo = g.pad_left > k ? g.pad_left - k : 0;
  const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(g.t_in) +
                           static_cast<std::ptrdiff_t>(g.pad_left) -
                           static_cast<std::ptrdiff_t>(k);
  hi = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(h, 0, static_cast<std::ptrdiff_t>(g.t_out)));
  if (lo > hi) lo = hi;
}

}  // namespace

Variable conv1d(const Variable& x, const Variable& weight, const Variable& bias,
                std::size_t stride) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  const ConvGeometry g = conv_geometry(xv, wv, bias.value(), stride);
  Tensor out({g.batch, g.c_out, g.t_out});
  const double* bv = bias.value().data.data();

  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t o = 0; o < g.c_out; ++o) {
      double* dst = &out.at(b, o, 0);
      std::fill(dst, dst + g.t_out, bv[o]);
      for (std::size_t c = 0; c < g.c_in; ++c) {
        const double* src = &xv.at(b, c, 0);
        const double* wk = &wv.at(o, c, 0);
        for (std::size_t k = 0; k < g.k; ++k) {
          const double wgt = wk[k];
          if (g.stride == 1) {
            std::size_t lo, hi;
            tap_range(g, k, lo, hi);
            const std::size_t shift = k - g.pad_left;  // modular; t + shift >= 0 on [lo, hi)
            for (std::size_t t = lo; t < hi; ++t) dst[t] += wgt * src[t + shift];
          } else {
            for (std::size_t t = 0; t < g.t_out; ++t) {
              const std::ptrdiff_t i = static_cast<std::ptrdiff_t>(t * g.stride + k) -
                                       static_cast<std::ptrdiff_t>(g.pad_left);
              if (i >= 0 && i < static_cast<std::ptrdiff_t>(g.t_in)) dst[t] += wgt * src[i];
            }
          }
        }
      }
    }
  }

  return Variable::make(
      std::move(out), {x, weight, bias}, [g](const Tensor& go, std::span<Variable> in) {
        const Tensor& xv = in[0].value();
        const Tensor& wv = in[1].value();
        if (in[0].requires_grad()) {
          Tensor& gx = in[0].grad_mut();
          for (std::size_t b = 0; b < g.batch; ++b) {
            for (std::size_t o = 0; o < g.c_out; ++o) {
              const double* gsrc = &go.at(b, o, 0);
              for (std::size_t c = 0; c < g.c_in; ++c) {
                double* gdst = &gx.at(b, c, 0);
                const double* wk = &wv.at(o, c, 0);
                for (std::size_t k = 0; k < g.k; ++k) {
                  const double wgt = wk[k];
                  if (g.stride == 1) {
                    std::size_t lo, hi;
                    tap_range(g, k, lo, hi);
                    const std::size_t shift = k - g.pad_left;
                    for (std::size_t t = lo; t < hi; ++t) gdst[t + shift] += wgt * gsrc[t];
                  } else {
                    for (std::size_t t = 0; t < g.t_out; ++t) {
                      const std::ptrdiff_t i = static_cast<std::ptrdiff_t>(t * g.stride + k) -
                                               static_cast<std::ptrdiff_t>(g.pad_left);
                      if (i >= 0 && i < static_cast<std::ptrdiff_t>(g.t_in)) gdst[i] += wgt * gsrc[t];
                    }
                  }
                }
              }
            }
          }
        }
        if (in[1].requires_grad()) {
          Tensor& gw = in[1].grad_mut();
          for (std::size_t o = 0; o < g.c_out; ++o) {
            for (std::size_t c = 0; c < g.c_in; ++c) {
              for (std::size_t k = 0; k < g.k; ++k) {
                double acc = 0.0;
                for (std::size_t b = 0; b < g.batch; ++b) {
                  const double* gsrc = &go.at(b, o, 0);
                  const double* src = &xv.at(b, c, 0);
                  if (g.stride == 1) {
                    std::size_t lo, hi;
                    tap_range(g, k, lo, hi);
                    const std::size_t shift = k - g.pad_left;
                    for (std::size_t t = lo; t < hi; ++t) acc += gsrc[t] * src[t + shift];
                  } else {
                    for (std::size_t t = 0; t < g.t_out; ++t) {
                      const std::ptrdiff_t i = static_cast<std::ptrdiff_t>(t * g.stride + k) -
                                               static_cast<std::ptrdiff_t>(g.pad_left);
                      if (i >= 0 && i < static_cast<std::ptrdiff_t>(g.t_in)) acc += gsrc[t] * src[i];
                    }
                  }
                }
                gw.at(o, c, k) += acc;
              }
            }
          }
        }
        if (in[2].requires_grad()) {
          Tensor& gb = in[2].grad_mut();
          for (std::size_t b = 0; b < g.batch; ++b) {
            for (std::size_t o = 0; o < g.c_out; ++o) {
              const double* gsrc = &go.at(b, o, 0);
              double acc = 0.0;
              for (std::size_t t = 0; t < g.t_out; ++t) acc += gsrc[t];
              gb[o] += acc;
            }
          }
        }
      });
}

Variable avg_pool1d(const Variable& x, std::size_t size, std::size_t stride) {
  const Tensor& xv = x.value();
  expect_rank(xv, 3, "avg_pool1d input");
  require(size >= 1 && stride >= 1, "avg_pool1d: size and stride must be >= 1");
  const std::size_t bsz = xv.dim(0), ch = xv.dim(1), t_in = xv.dim(2);
  const std::size_t t_out = (t_in > size ? (t_in - size + stride - 1) / stride : 0) + 1;
  Tensor out({bsz, ch, t_out});
  for (std::size_t r = 0; r < bsz * ch; ++r) {
    const double* src = xv.data.data() + r * t_in;
    double* dst = out.data.data() + r * t_out;
    for (std::size_t t = 0; t < t_out; ++t) {
      const std::size_t lo = t * stride;
      const std::size_t hi = std::min(lo + size, t_in);
      double acc = 0.0;
      for (std::size_t i = lo; i < hi; ++i) acc += src[i];
      dst[t] = acc / static_cast<double>(hi - lo);
    }
  }
  return Variable::make(std::move(out), {x},
                        [=](const Tensor& go, std::span<Variable> in) {
                          Tensor& gx = in[0].grad_mut();
                          for (std::size_t r = 0; r < bsz * ch; ++r) {
                            const double* gsrc = go.data.data() + r * t_out;
                            double* gdst = gx.data.data() + r * t_in;
                            for (std::size_t t = 0; t < t_out; ++t) {
                              const std::size_t lo = t * stride;
                              const std::size_t hi = std::min(lo + size, t_in);
                              const double share = gsrc[t] / static_cast<double>(hi - lo);
                              for (std::size_t i = lo; i < hi; ++i) gdst[i] += share;
                            }
                          }
                        });
}

Variable global_avg_pool(const Variable& x) {
  const Tensor& xv = x.value();
  expect_rank(xv, 3, "global_avg_pool input");
  const std::size_t bsz = xv.dim(0), ch = xv.dim(1), t_len = xv.dim(2);
  Tensor out({bsz, ch});
  for (std::size_t r = 0; r < bsz * ch; ++r) {
    double acc = 0.0;
    for (std::size_t t = 0; t < t_len; ++t) acc += xv.data[r * t_len + t];
    out.data[r] = acc / static_cast<double>(t_len);
  }
  return Variable::make(std::move(out), {x}, [=](const Tensor& go, std::span<Variable> in) {
    Tensor& gx = in[0].grad_mut();
    for (std::size_t r = 0; r < bsz * ch; ++r) {
      const double share = go.data[r] / static_cast<double>(t_len);
      for (std::size_t t = 0; t < t_len; ++t) gx.data[r * t_len + t] += share;
    }
  });
}

Variable global_max_pool(const Variable& x) {
  const Tensor& xv = x.value();
  expect_rank(xv, 3, "global_max_pool input");
  const std::size_t bsz = xv.dim(0), ch = xv.dim(1), t_len = xv.dim(2);
  Tensor out({bsz, ch});
  std::vector<std::size_t> argmax(bsz * ch);
  for (std::size_t r = 0; r < bsz * ch; ++r) {
    const double* src = xv.data.data() + r * t_len;
    const std::size_t a = static_cast<std::size_t>(std::max_element(src, src + t_len) - src);
    argmax[r] = a;
    out.data[r] = src[a];
  }
  return Variable::make(std::move(out), {x},
                        [=, argmax = std::move(argmax)](const Tensor& go, std::span<Variable> in) {
                          Tensor& gx = in[0].grad_mut();
                          for (std::size_t r = 0; r < bsz * ch; ++r) {
                            gx.data[r * t_len + argmax[r]] += go.data[r];
                          }
                        });
}

Variable channel_mean(const Variable& x) {
  const Tensor& xv = x.value();
  expect_rank(xv, 3, "channel_mean input");
  const std::size_t bsz = xv.dim(0), ch = xv.dim(1), t_len = xv.dim(2);
  Tensor out({bsz, 1, t_len});
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t c = 0; c < ch; ++c) {
      for (std::size_t t = 0; t < t_len; ++t) out.at(b, 0, t) += xv.at(b, c, t);
    }
    for (std::size_t t = 0; t < t_len; ++t) out.at(b, 0, t) /= static_cast<double>(ch);
  }
  return Variable::make(std::move(out), {x}, [=](const Tensor& go, std::span<Variable> in) {
    Tensor& gx = in[0].grad_mut();
    for (std::size_t b = 0; b < bsz; ++b) {
      for (std::size_t c = 0; c < ch; ++c) {
        for (std::size_t t = 0; t < t_len; ++t) {
          gx.at(b, c, t) += go.at(b, 0, t) / static_cast<double>(ch);
        }
      }
    }
  });
}

Variable channel_max(const Variable& x) {
  const Tensor& xv = x.value();
  expect_rank(xv, 3, "channel_max input");
  const std::size_t bsz = xv.dim(0), ch = xv.dim(1), t_len = xv.dim(2);
  Tensor out({bsz, 1, t_len});
  std::vector<std::size_t> arg(bsz * t_len, 0);
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t t = 0; t < t_len; ++t) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < ch; ++c) {
        if (xv.at(b, c, t) > xv.at(b, best, t)) best = c;
      }
      arg[b * t_len + t] = best;
      out.at(b, 0, t) = xv.at(b, best, t);
    }
  }
  return Variable::make(std::move(out), {x},
                        [=, arg = std::move(arg)](const Tensor& go, std::span<Variable> in) {
                          Tensor& gx = in[0].grad_mut();
                          for (std::size_t b = 0; b < bsz; ++b) {
                            for (std::size_t t = 0; t < t_len; ++t) {
                              gx.at(b, arg[b * t_len + t], t) += go.at(b, 0, t);
                            }
                          }
                        });
}

Variable linear(const Variable& x, const Variable& weight, const Variable& bias) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  expect_rank(xv, 2, "linear input");
  expect_rank(wv, 2, "linear weight");
  require(wv.dim(1) == xv.dim(1), "linear: weight expects " + std::to_string(wv.dim(1)) +
                                      " features, got " + std::to_string(xv.dim(1)));
  require(bias.value().rank() == 1 && bias.value().dim(0) == wv.dim(0),
          "linear: bias must have one entry per output");
  const std::size_t bsz = xv.dim(0), fin = xv.dim(1), fout = wv.dim(0);
  Tensor out({bsz, fout});
  for (std::size_t b = 0; b < bsz; ++b) {
    const double* xr = &xv.at(b, 0);
    for (std::size_t o = 0; o < fout; ++o) {
      const double* wr = &wv.at(o, 0);
      double acc = 0.0;
      for (std::size_t f = 0; f < fin; ++f) acc += wr[f] * xr[f];
      out.at(b, o) = acc + bias.value()[o];
    }
  }
  return Variable::make(
      std::move(out), {x, weight, bias}, [=](const Tensor& go, std::span<Variable> in) {
        const Tensor& xv = in[0].value();
        const Tensor& wv = in[1].value();
        if (in[0].requires_grad()) {
          Tensor& gx = in[0].grad_mut();
          for (std::size_t b = 0; b < bsz; ++b) {
            double* gr = &gx.at(b, 0);
            for (std::size_t o = 0; o < fout; ++o) {
              const double g = go.at(b, o);
              const double* wr = &wv.at(o, 0);
              for (std::size_t f = 0; f < fin; ++f) gr[f] += g * wr[f];
            }
          }
        }
        if (in[1].requires_grad()) {
          Tensor& gw = in[1].grad_mut();
          for (std::size_t o = 0; o < fout; ++o) {
            double* gr = &gw.at(o, 0);
            for (std::size_t b = 0; b < bsz; ++b) {
              const double g = go.at(b, o);
              const double* xr = &xv.at(b, 0);
              for (std::size_t f = 0; f < fin; ++f) gr[f] += g * xr[f];
            }
          }
        }
        if (in[2].requires_grad()) {
          Tensor& gb = in[2].grad_mut();
          for (std::size_t b = 0; b < bsz; ++b) {
            for (std::size_t o = 0; o < fout; ++o) gb[o] += go.at(b, o);
          }
        }
      });
}

Variable relu(const Variable& x) {
  Tensor out = x.value();
  for (auto& v : out.data) v = v < 0.0 ? 0.0 : v;  // NaN passes through
  return Variable::make(std::move(out), {x}, [](const Tensor& go, std::span<Variable> in) {
    const Tensor& xv = in[0].value();
    Tensor& gx = in[0].grad_mut();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (xv[i] > 0.0) gx[i] += go[i];
    }
  });
}

Variable sigmoid(const Variable& x) {
  Tensor out = x.value();
  for (auto& v : out.data) {
    v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  auto y = std::make_shared<const Tensor>(out);
  return Variable::make(std::move(out), {x}, [y](const Tensor& go, std::span<Variable> in) {
    Tensor& gx = in[0].grad_mut();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * (*y)[i] * (1.0 - (*y)[i]);
  });
}

Variable softmax(const Variable& x) {
  expect_rank(x.value(), 2, "softmax input");
  Tensor out = x.value();
  const std::size_t bsz = out.dim(0), k = out.dim(1);
  for (std::size_t b = 0; b < bsz; ++b) softmax_inplace({out.data.data() + b * k, k});
  auto y = std::make_shared<const Tensor>(out);
  return Variable::make(std::move(out), {x}, [=](const Tensor& go, std::span<Variable> in) {
    Tensor& gx = in[0].grad_mut();
    for (std::size_t b = 0; b < bsz; ++b) {
      double dot = 0.0;
      for (std::size_t j = 0; j < k; ++j) dot += go.at(b, j) * y->at(b, j);
      for (std::size_t j = 0; j < k; ++j) gx.at(b, j) += y->at(b, j) * (go.at(b, j) - dot);
    }
  });
}

Variable add(const Variable& a, const Variable& b) {
  require(a.shape() == b.shape(), "add: shape mismatch " + shape_string(a.shape()) + " vs " +
                                      shape_string(b.shape()));
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return Variable::make(std::move(out), {a, b}, [](const Tensor& go, std::span<Variable> in) {
    for (auto& v : in) {
      if (v.requires_grad()) accumulate(v, go);
    }
  });
}

Variable mul(const Variable& a, const Variable& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch " + shape_string(a.shape()) + " vs " +
                                      shape_string(b.shape()));
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return Variable::make(std::move(out), {a, b}, [](const Tensor& go, std::span<Variable> in) {
    if (in[0].requires_grad()) {
      Tensor& g = in[0].grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * in[1].value()[i];
    }
    if (in[1].requires_grad()) {
      Tensor& g = in[1].grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * in[0].value()[i];
    }
  });
}

Variable broadcast_mul(const Variable& x, const Variable& m) {
  const Tensor& xv = x.value();
  const Tensor& mv = m.value();
  expect_rank(xv, 3, "broadcast_mul input");
  expect_rank(mv, 3, "broadcast_mul multiplier");
  const std::size_t bsz = xv.dim(0), ch = xv.dim(1), t_len = xv.dim(2);
  const bool per_channel = mv.dim(1) == ch;
  const bool per_time = mv.dim(2) == t_len;
  require(mv.dim(0) == bsz && (per_channel || mv.dim(1) == 1) && (per_time || mv.dim(2) == 1),
          "broadcast_mul: cannot broadcast " + shape_string(mv.shape) + " to " +
              shape_string(xv.shape));
  auto midx = [=](std::size_t b, std::size_t c, std::size_t t) {
    return (b * (per_channel ? ch : 1) + (per_channel ? c : 0)) * (per_time ? t_len : 1) +
           (per_time ? t : 0);
  };
  Tensor out = xv;
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t t = 0; t < t_len; ++t) out.at(b, c, t) *= mv.data[midx(b, c, t)];
  return Variable::make(std::move(out), {x, m}, [=](const Tensor& go, std::span<Variable> in) {
    const Tensor& xv = in[0].value();
    const Tensor& mv = in[1].value();
    if (in[0].requires_grad()) {
      Tensor& gx = in[0].grad_mut();
      for (std::size_t b = 0; b < bsz; ++b)
        for (std::size_t c = 0; c < ch; ++c)
          for (std::size_t t = 0; t < t_len; ++t)
            gx.at(b, c, t) += go.at(b, c, t) * mv.data[midx(b, c, t)];
    }
    if (in[1].requires_grad()) {
      Tensor& gm = in[1].grad_mut();
      for (std::size_t b = 0; b < bsz; ++b)
        for (std::size_t c = 0; c < ch; ++c)
          for (std::size_t t = 0; t < t_len; ++t)
            gm.data[midx(b, c, t)] += go.at(b, c, t) * xv.at(b, c, t);
    }
  });
}

Variable reshape(const Variable& x, Shape shape) {
  require(shape_size(shape) == x.value().size(),
          "reshape: " + shape_string(x.shape()) + " to " + shape_string(shape));
  Tensor out(std::move(shape), x.value().data);
  return Variable::make(std::move(out), {x}, [](const Tensor& go, std::span<Variable> in) {
    Tensor& g = in[0].grad_mut();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
  });
}

Variable concat_channels(const Variable& a, const Variable& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  expect_rank(av, 3, "concat_channels lhs");
  expect_rank(bv, 3, "concat_channels rhs");
  require(av.dim(0) == bv.dim(0) && av.dim(2) == bv.dim(2), "concat_channels: batch/time mismatch");
  const std::size_t bsz = av.dim(0), ca = av.dim(1), cb = bv.dim(1), t_len = av.dim(2);
  Tensor out({bsz, ca + cb, t_len});
  for (std::size_t n = 0; n < bsz; ++n) {
    std::copy_n(&av.at(n, 0, 0), ca * t_len, &out.at(n, 0, 0));
    std::copy_n(&bv.at(n, 0, 0), cb * t_len, &out.at(n, ca, 0));
  }
  return Variable::make(std::move(out), {a, b}, [=](const Tensor& go, std::span<Variable> in) {
    for (std::size_t n = 0; n < bsz; ++n) {
      if (in[0].requires_grad()) {
        Tensor& g = in[0].grad_mut();
        for (std::size_t i = 0; i < ca * t_len; ++i) (&g.at(n, 0, 0))[i] += (&go.at(n, 0, 0))[i];
      }
      if (in[1].requires_grad()) {
        Tensor& g = in[1].grad_mut();
        for (std::size_t i = 0; i < cb * t_len; ++i) (&g.at(n, 0, 0))[i] += (&go.at(n, ca, 0))[i];
      }
    }
  });
}

Variable flatten(const Variable& x) {
  const Tensor& xv = x.value();
  require(xv.rank() >= 2, "flatten: needs a batch axis");
  return reshape(x, {xv.dim(0), xv.size() / xv.dim(0)});
}

Variable dropout(const Variable& x, double rate, Rng& rng, bool training) {
  if (!training || rate <= 0.0) return x;
  require(rate < 1.0, "dropout: rate must be < 1");
  auto mask = std::make_shared<std::vector<double>>(x.value().size());
  std::bernoulli_distribution keep(1.0 - rate);
  const double scale = 1.0 / (1.0 - rate);
  for (auto& m : *mask) m = keep(rng) ? scale : 0.0;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*mask)[i];
  return Variable::make(std::move(out), {x}, [mask](const Tensor& go, std::span<Variable> in) {
    Tensor& g = in[0].grad_mut();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * (*mask)[i];
  });
}

Variable cross_entropy(const Variable& logits, std::span<const int> labels) {
  const Tensor& lv = logits.value();
  expect_rank(lv, 2, "cross_entropy logits");
  const std::size_t bsz = lv.dim(0), k = lv.dim(1);
  require(labels.size() == bsz, "cross_entropy: one label per row required");
  auto probs = std::make_shared<Tensor>(lv);
  double loss = 0.0;
  for (std::size_t b = 0; b < bsz; ++b) {
    const int y = labels[b];
    require(y >= 0 && static_cast<std::size_t>(y) < k, "cross_entropy: label out of range");
    const double* row = &lv.at(b, 0);
    const double mx = *std::max_element(row, row + k);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
    loss += mx + std::log(sum) - row[y];
    softmax_inplace({probs->data.data() + b * k, k});
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return Variable::make(Tensor({1}, loss / static_cast<double>(bsz)), {logits},
                        [=, lab = std::move(lab)](const Tensor& go, std::span<Variable> in) {
                          Tensor& g = in[0].grad_mut();
                          const double s = go[0] / static_cast<double>(bsz);
                          for (std::size_t b = 0; b < bsz; ++b) {
                            for (std::size_t j = 0; j < k; ++j) {
                              const double onehot = static_cast<int>(j) == lab[b] ? 1.0 : 0.0;
                              g.at(b, j) += s * (probs->at(b, j) - onehot);
                            }
                          }
                        });
}

Variable class_score_sum(const Variable& logits, std::span<const int> classes) {
  const Tensor& lv = logits.value();
  expect_rank(lv, 2, "class_score_sum logits");
  const std::size_t bsz = lv.dim(0), k = lv.dim(1);
  require(classes.size() == bsz, "class_score_sum: one class per row required");
  double s = 0.0;
  for (std::size_t b = 0; b < bsz; ++b) {
    require(classes[b] >= 0 && static_cast<std::size_t>(classes[b]) < k,
            "class_score_sum: class out of range");
    s += lv.at(b, static_cast<std::size_t>(classes[b]));
  }
  std::vector<int> cls(classes.begin(), classes.end());
  return Variable::make(Tensor({1}, s), {logits},
                        [cls = std::move(cls)](const Tensor& go, std::span<Variable> in) {
                          Tensor& g = in[0].grad_mut();
                          for (std::size_t b = 0; b < cls.size(); ++b) {
                            g.at(b, static_cast<std::size_t>(cls[b])) += go[0];
                          }
                        });
}

Variable half_sum_squares(const Variable& x) {
  double s = 0.0;
  for (double v : x.value().data) s += v * v;
  return Variable::make(Tensor({1}, 0.5 * s), {x}, [](const Tensor& go, std::span<Variable> in) {
    Tensor& g = in[0].grad_mut();
    const Tensor& xv = in[0].value();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[0] * xv[i];
  });
}

}  // namespace ops
}  // namespace deepsca
