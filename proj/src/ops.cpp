#include "fnas/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "fnas/errors.hpp"
#include "reduce.hpp"

namespace fnas {
namespace {

thread_local std::uint64_t macs = 0;

using detail::centered_sums;
using detail::load4;
using detail::store4;
using detail::v4d;
using detail::dot;
using detail::total;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

void accumulate(std::vector<double>& dst, const std::vector<double>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

std::uint64_t mac_count() { return macs; }

void reset_mac_count() { macs = 0; }

// --- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_op_result(a.shape(), std::move(out), {a, b}, "add", [](TensorImpl& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (self.input_needs_grad(k)) accumulate(self.inputs[k]->ensure_grad(), self.grad);
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_op_result(a.shape(), std::move(out), {a, b}, "sub", [](TensorImpl& self) {
    if (self.input_needs_grad(0)) accumulate(self.inputs[0]->ensure_grad(), self.grad);
    if (self.input_needs_grad(1)) {
      auto& g = self.inputs[1]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_op_result(a.shape(), std::move(out), {a, b}, "mul", [](TensorImpl& self) {
    const auto& xa = self.inputs[0]->data;
    const auto& xb = self.inputs[1]->data;
    if (self.input_needs_grad(0)) {
      auto& g = self.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * xb[i];
    }
    if (self.input_needs_grad(1)) {
      auto& g = self.inputs[1]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * xa[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return make_op_result(a.shape(), std::move(out), {a}, "scale", [factor](TensorImpl& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_op_result({1}, {s}, {a}, "sum", [](TensorImpl& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_op_result(std::move(shape), std::move(out), {a}, "reshape", [](TensorImpl& self) {
    accumulate(self.inputs[0]->ensure_grad(), self.grad);
  });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
  return make_op_result(x.shape(), std::move(out), {x}, "relu", [](TensorImpl& self) {
    const auto& in = self.inputs[0]->data;
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (in[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

Tensor scale_samples(const Tensor& x, std::span<const double> factors) {
  if (x.rank() < 1 || factors.size() != x.dim(0)) {
    throw DimensionError("scale_samples: need one factor per sample");
  }
  const std::size_t per = x.numel() / x.dim(0);
  std::vector<double> f(factors.begin(), factors.end());
  std::vector<double> out(x.numel());
  auto in = x.data();
  for (std::size_t n = 0; n < f.size(); ++n) {
    for (std::size_t i = 0; i < per; ++i) out[n * per + i] = in[n * per + i] * f[n];
  }
  return make_op_result(x.shape(), std::move(out), {x}, "scale_samples", [f, per](TensorImpl& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t n = 0; n < f.size(); ++n) {
      for (std::size_t i = 0; i < per; ++i) g[n * per + i] += self.grad[n * per + i] * f[n];
    }
  });
}

Tensor weighted_sum(const std::vector<Tensor>& terms, const Tensor& weights) {
  if (weights.rank() != 1 || weights.numel() != terms.size()) {
    throw DimensionError("weighted_sum: " + std::to_string(terms.size()) + " terms vs weights " +
                         shape_str(weights.shape()));
  }
  const Tensor* first = nullptr;
  for (const auto& t : terms) {
    if (!t.defined()) continue;
    if (first && t.shape() != first->shape()) {
      throw DimensionError("weighted_sum: term shape " + shape_str(t.shape()) + " vs " +
                           shape_str(first->shape()));
    }
    if (!first) first = &t;
  }
  if (!first) throw DimensionError("weighted_sum: all terms are zero maps of unknown shape");

  std::vector<double> out(first->numel(), 0.0);
  auto w = weights.data();
  std::vector<Tensor> inputs{weights};
  std::vector<std::size_t> term_index;  // position of each defined term in `inputs`
  for (std::size_t k = 0; k < terms.size(); ++k) {
    if (!terms[k].defined()) continue;
    const double wk = w[k];
    auto x = terms[k].data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += wk * x[i];
    inputs.push_back(terms[k]);
    term_index.push_back(k);
  }
  return make_op_result(first->shape(), std::move(out), std::move(inputs), "weighted_sum",
                        [term_index](TensorImpl& self) {
                          const auto& w = self.inputs[0]->data;
                          const auto& g = self.grad;
                          for (std::size_t j = 0; j < term_index.size(); ++j) {
                            auto& term = *self.inputs[j + 1];
                            const std::size_t k = term_index[j];
                            if (self.input_needs_grad(0)) {
                              double dot = 0.0;
                              dot += detail::dot(g.data(), term.data.data(), g.size());
                              self.inputs[0]->ensure_grad()[k] += dot;
                            }
                            if (term.requires_grad) {
                              auto& tg = term.ensure_grad();
                              const double wk = w[k];
                              for (std::size_t i = 0; i < g.size(); ++i) tg[i] += wk * g[i];
                            }
                          }
                        });
}

Tensor row(const Tensor& table, std::size_t r) {
  require_rank(table, 2, "row");
  if (r >= table.dim(0)) throw DimensionError("row: index " + std::to_string(r) + " out of range");
  const std::size_t cols = table.dim(1);
  std::vector<double> out(table.data().begin() + r * cols, table.data().begin() + (r + 1) * cols);
  return make_op_result({cols}, std::move(out), {table}, "row", [r, cols](TensorImpl& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t j = 0; j < cols; ++j) g[r * cols + j] += self.grad[j];
  });
}

// --- softmax / loss -----------------------------------------------------------

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw ConfigError("softmax of an empty vector");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    z += out[i];
  }
  for (auto& v : out) v /= z;
  return out;
}

namespace {

// dL/dz_i = p_i (g_i - Σ_j p_j g_j) for each row of length cols.
void softmax_backward_rows(const std::vector<double>& p, const std::vector<double>& g, std::vector<double>& dz,
                           std::size_t cols) {
  for (std::size_t r = 0; r * cols < p.size(); ++r) {
    const std::size_t o = r * cols;
    double dot = 0.0;
    for (std::size_t j = 0; j < cols; ++j) dot += p[o + j] * g[o + j];
    for (std::size_t j = 0; j < cols; ++j) dz[o + j] += p[o + j] * (g[o + j] - dot);
  }
}

}  // namespace

Tensor softmax(const Tensor& logits) {
  require_rank(logits, 1, "softmax");
  auto out = softmax(logits.data());
  const std::size_t cols = out.size();
  return make_op_result(logits.shape(), std::move(out), {logits}, "softmax", [cols](TensorImpl& self) {
    softmax_backward_rows(self.data, self.grad, self.inputs[0]->ensure_grad(), cols);
  });
}

Tensor softmax_rows(const Tensor& logits) {
  require_rank(logits, 2, "softmax_rows");
  const std::size_t rows = logits.dim(0);
  const std::size_t cols = logits.dim(1);
  std::vector<double> out;
  out.reserve(logits.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    auto p = softmax(logits.data().subspan(r * cols, cols));
    out.insert(out.end(), p.begin(), p.end());
  }
  return make_op_result(logits.shape(), std::move(out), {logits}, "softmax_rows", [cols](TensorImpl& self) {
    softmax_backward_rows(self.data, self.grad, self.inputs[0]->ensure_grad(), cols);
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, double smoothing) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t n = logits.dim(0);
  const std::size_t k = logits.dim(1);
  if (labels.size() != n) throw DimensionError("cross_entropy: label count does not match batch");
  if (smoothing < 0.0 || smoothing >= 1.0) throw ConfigError("cross_entropy: smoothing must be in [0,1)");
  std::vector<double> probs(n * k);
  std::vector<double> target(n * k, smoothing / static_cast<double>(k));
  double total = 0.0;
  auto z = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw InputError("cross_entropy: label " + std::to_string(y) + " outside [0," + std::to_string(k) + ")");
    }
    target[i * k + static_cast<std::size_t>(y)] += 1.0 - smoothing;
    const auto row_z = z.subspan(i * k, k);
    const double mx = *std::max_element(row_z.begin(), row_z.end());
    double s = 0.0;
    for (double v : row_z) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < k; ++j) {
      const double logp = row_z[j] - lse;
      probs[i * k + j] = std::exp(logp);
      total -= target[i * k + j] * logp;
    }
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  return make_op_result({1}, {total * inv_n}, {logits}, "cross_entropy",
                        [probs = std::move(probs), target = std::move(target), inv_n](TensorImpl& self) {
                          auto& g = self.inputs[0]->ensure_grad();
                          const double s = self.grad[0] * inv_n;
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * (probs[i] - target[i]);
                        });
}

// --- convolution --------------------------------------------------------------

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding,
                             std::size_t dilation) {
  const long long span = static_cast<long long>(dilation * (kernel - 1) + 1);
  const long long padded = static_cast<long long>(in + 2 * padding);
  if (padded < span) {
    throw DimensionError("window of extent " + std::to_string(span) + " exceeds padded input " +
                         std::to_string(padded));
  }
  return static_cast<std::size_t>((padded - span) / static_cast<long long>(stride)) + 1;
}

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w;
  std::size_t cout, cg, k;
  std::size_t ho, wo;
  std::size_t stride, pad, dil, groups;
  std::size_t cout_per_group;
};

// Range of output columns whose input column ow*stride + off lies inside [0, width).
inline void valid_columns(long long off, std::size_t stride, std::size_t width, std::size_t wo, std::size_t& lo,
                          std::size_t& hi) {
  const long long s = static_cast<long long>(stride);
  long long first = off >= 0 ? 0 : (-off + s - 1) / s;
  long long last = (static_cast<long long>(width) - 1 - off);
  last = last < 0 ? -1 : last / s;
  if (last > static_cast<long long>(wo) - 1) last = static_cast<long long>(wo) - 1;
  lo = static_cast<std::size_t>(first);
  hi = last < first ? lo : static_cast<std::size_t>(last + 1);
}

// Visits every (output row, input row, weight) triple; body(out_row, in_row, weight_index, col_off).
template <typename Body>
void for_each_tap(const ConvGeometry& g, Body&& body) {
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t co = 0; co < g.cout; ++co) {
      const std::size_t grp = co / g.cout_per_group;
      for (std::size_t cig = 0; cig < g.cg; ++cig) {
        const std::size_t ci = grp * g.cg + cig;
        const std::size_t in_plane = (n * g.c + ci) * g.h * g.w;
        const std::size_t out_plane = (n * g.cout + co) * g.ho * g.wo;
        const std::size_t w_base = (co * g.cg + cig) * g.k * g.k;
        for (std::size_t kh = 0; kh < g.k; ++kh) {
          for (std::size_t oh = 0; oh < g.ho; ++oh) {
            const long long ih = static_cast<long long>(oh * g.stride + kh * g.dil) - static_cast<long long>(g.pad);
            if (ih < 0 || ih >= static_cast<long long>(g.h)) continue;
            const std::size_t in_row = in_plane + static_cast<std::size_t>(ih) * g.w;
            const std::size_t out_row = out_plane + oh * g.wo;
            for (std::size_t kw = 0; kw < g.k; ++kw) {
              const long long off = static_cast<long long>(kw * g.dil) - static_cast<long long>(g.pad);
              body(out_row, in_row, w_base + kh * g.k + kw, off);
            }
          }
        }
      }
    }
  }
}

// Depthwise stride-1 convolution works on a zero-padded copy of each plane and
// produces outputs over the full padded width, so every tap is one contiguous
// multiply-add run; the surplus columns are discarded (forward) or held at zero
// (backward).
struct DepthwisePlan {
  std::size_t hp, wp;   // padded plane
  std::size_t span;     // (k-1)·dilation
  std::size_t run;      // ho·wp
  std::size_t padded;   // buffer length including tail slack for the last tap
};

DepthwisePlan depthwise_plan(const ConvGeometry& g) {
  DepthwisePlan p{};
  p.hp = g.h + 2 * g.pad;
  p.wp = g.w + 2 * g.pad;
  p.span = (g.k - 1) * g.dil;
  p.run = g.ho * p.wp;
  p.padded = p.hp * p.wp + p.span;
  return p;
}

bool is_depthwise_unit_stride(const ConvGeometry& g) {
  return g.groups == g.c && g.cg == 1 && g.cout == g.c && g.stride == 1 && g.k > 1;
}

void pad_plane(const double* src, const ConvGeometry& g, const DepthwisePlan& p, double* dst) {
  std::fill(dst, dst + p.padded, 0.0);
  for (std::size_t r = 0; r < g.h; ++r) {
    std::copy(src + r * g.w, src + (r + 1) * g.w, dst + (r + g.pad) * p.wp + g.pad);
  }
}

constexpr std::size_t kChunk = 8;

// out[i] (+)= Σ_t w[t] · src[i + off[t]] for i < n; taps accumulate in registers.
template <bool Accumulate>
void tap_sum(const double* src, const std::size_t* off, const double* w, std::size_t taps, std::size_t n,
             double* out) {
  std::size_t i = 0;
  for (; i + kChunk <= n; i += kChunk) {
    v4d lo = {}, hi = {};
    for (std::size_t t = 0; t < taps; ++t) {
      const double wt = w[t];
      const double* s = src + off[t] + i;
      lo += wt * load4(s);
      hi += wt * load4(s + 4);
    }
    if constexpr (Accumulate) {
      lo += load4(out + i);
      hi += load4(out + i + 4);
    }
    store4(out + i, lo);
    store4(out + i + 4, hi);
  }
  for (; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t t = 0; t < taps; ++t) acc += w[t] * src[off[t] + i];
    if constexpr (Accumulate) {
      out[i] += acc;
    } else {
      out[i] = acc;
    }
  }
}

void depthwise_forward(const double* x, const double* w, const ConvGeometry& g, double* out) {
  const auto p = depthwise_plan(g);
  const std::size_t taps = g.k * g.k;
  std::vector<std::size_t> off(taps);
  for (std::size_t kh = 0; kh < g.k; ++kh) {
    for (std::size_t kw = 0; kw < g.k; ++kw) off[kh * g.k + kw] = kh * g.dil * p.wp + kw * g.dil;
  }
  thread_local std::vector<double> pad, acc;
  pad.resize(p.padded);
  acc.resize(p.run);
  for (std::size_t plane = 0; plane < g.n * g.c; ++plane) {
    const std::size_t c = plane % g.c;
    pad_plane(x + plane * g.h * g.w, g, p, pad.data());
    tap_sum<false>(pad.data(), off.data(), w + c * taps, taps, p.run, acc.data());
    double* o = out + plane * g.ho * g.wo;
    for (std::size_t r = 0; r < g.ho; ++r) std::copy(acc.data() + r * p.wp, acc.data() + r * p.wp + g.wo, o + r * g.wo);
  }
}

// The input gradient is the same tap sum read backwards: gradients sit in a
// buffer with leading slack so that position j gathers from j + slack - off[t].
void depthwise_backward(const double* x, const double* w, const double* go, const ConvGeometry& g, double* gx,
                        double* gw) {
  const auto p = depthwise_plan(g);
  const std::size_t taps = g.k * g.k;
  const std::size_t slack = p.span * p.wp + p.span;
  std::vector<std::size_t> off(taps), back(taps);
  for (std::size_t kh = 0; kh < g.k; ++kh) {
    for (std::size_t kw = 0; kw < g.k; ++kw) {
      off[kh * g.k + kw] = kh * g.dil * p.wp + kw * g.dil;
      back[kh * g.k + kw] = slack - off[kh * g.k + kw];
    }
  }
  thread_local std::vector<double> pad, gbuf, gpad;
  pad.resize(p.padded);
  gbuf.assign(slack + p.hp * p.wp + slack, 0.0);
  gpad.resize(g.h * p.wp);
  for (std::size_t plane = 0; plane < g.n * g.c; ++plane) {
    const std::size_t c = plane % g.c;
    const double* gop = go + plane * g.ho * g.wo;
    // gradient rows laid out on the padded width; surplus columns stay zero
    double* ga = gbuf.data() + slack;
    for (std::size_t r = 0; r < g.ho; ++r) std::copy(gop + r * g.wo, gop + (r + 1) * g.wo, ga + r * p.wp);
    if (gw) {
      pad_plane(x + plane * g.h * g.w, g, p, pad.data());
      for (std::size_t t = 0; t < taps; ++t) gw[c * taps + t] += dot(ga, pad.data() + off[t], p.run);
    }
    if (gx) {
      // only the rows of the padded input that map back onto real pixels
      const std::size_t first = g.pad * p.wp;
      std::vector<double> wt(w + c * taps, w + (c + 1) * taps);
      tap_sum<false>(gbuf.data() + first, back.data(), wt.data(), taps, g.h * p.wp, gpad.data());
      double* gxp = gx + plane * g.h * g.w;
      for (std::size_t r = 0; r < g.h; ++r) {
        const double* src = gpad.data() + r * p.wp + g.pad;
        for (std::size_t col = 0; col < g.w; ++col) gxp[r * g.w + col] += src[col];
      }
    }
  }
}

enum class ConvPath { depthwise, pointwise, strided_pointwise, general };

ConvPath choose_path(const ConvGeometry& g) {
  if (is_depthwise_unit_stride(g)) return ConvPath::depthwise;
  if (g.k == 1 && g.pad == 0 && g.groups == 1) {
    return g.stride == 1 ? ConvPath::pointwise : ConvPath::strided_pointwise;
  }
  return ConvPath::general;
}

// c[m][:] += Σ_k A(m,k) · b[k][:] with A(m,k) = a[m·row + k·col]; rows of b and c
// hold `len` contiguous values. Four rows of c are produced per pass over b.
void gemm_accumulate(const double* a, std::size_t row, std::size_t col, const double* b, double* c, std::size_t rows,
                     std::size_t depth, std::size_t len) {
  std::size_t m = 0;
  for (; m + 4 <= rows; m += 4) {
    std::size_t q = 0;
    for (; q + kChunk <= len; q += kChunk) {
      v4d acc[4][2] = {};
      for (std::size_t k = 0; k < depth; ++k) {
        const v4d b0 = load4(b + k * len + q);
        const v4d b1 = load4(b + k * len + q + 4);
        for (std::size_t r = 0; r < 4; ++r) {
          const double ar = a[(m + r) * row + k * col];
          acc[r][0] += ar * b0;
          acc[r][1] += ar * b1;
        }
      }
      for (std::size_t r = 0; r < 4; ++r) {
        double* cr = c + (m + r) * len + q;
        store4(cr, load4(cr) + acc[r][0]);
        store4(cr + 4, load4(cr + 4) + acc[r][1]);
      }
    }
    for (; q < len; ++q) {
      for (std::size_t r = 0; r < 4; ++r) {
        double acc = 0.0;
        for (std::size_t k = 0; k < depth; ++k) acc += a[(m + r) * row + k * col] * b[k * len + q];
        c[(m + r) * len + q] += acc;
      }
    }
  }
  for (; m < rows; ++m) {
    for (std::size_t q = 0; q < len; ++q) {
      double acc = 0.0;
      for (std::size_t k = 0; k < depth; ++k) acc += a[m * row + k * col] * b[k * len + q];
      c[m * len + q] += acc;
    }
  }
}

// 1×1 convolution over planes of `plane` pixels: out[n] = W · x[n].
void pointwise_forward(const double* x, const double* w, const ConvGeometry& g, std::size_t plane, double* out) {
  for (std::size_t n = 0; n < g.n; ++n) {
    gemm_accumulate(w, g.c, 1, x + n * g.c * plane, out + n * g.cout * plane, g.cout, g.c, plane);
  }
}

void pointwise_backward(const double* x, const double* w, const double* go, const ConvGeometry& g,
                        std::size_t plane, double* gx, double* gw) {
  for (std::size_t n = 0; n < g.n; ++n) {
    const double* gon = go + n * g.cout * plane;
    const double* xn = x + n * g.c * plane;
    if (gx) gemm_accumulate(w, 1, g.c, gon, gx + n * g.c * plane, g.c, g.cout, plane);
    if (gw) {
      for (std::size_t co = 0; co < g.cout; ++co) {
        for (std::size_t ci = 0; ci < g.c; ++ci) gw[co * g.c + ci] += dot(gon + co * plane, xn + ci * plane, plane);
      }
    }
  }
}

// x[:, :, ::stride, ::stride] for unpadded 1×1 kernels
std::vector<double> subsample(const double* x, const ConvGeometry& g) {
  std::vector<double> xs(g.n * g.c * g.ho * g.wo);
  for (std::size_t p = 0; p < g.n * g.c; ++p) {
    for (std::size_t r = 0; r < g.ho; ++r) {
      const double* src = x + p * g.h * g.w + r * g.stride * g.w;
      double* dst = xs.data() + (p * g.ho + r) * g.wo;
      for (std::size_t col = 0; col < g.wo; ++col) dst[col] = src[col * g.stride];
    }
  }
  return xs;
}

void scatter_subsampled(const std::vector<double>& gxs, const ConvGeometry& g, double* gx) {
  for (std::size_t p = 0; p < g.n * g.c; ++p) {
    for (std::size_t r = 0; r < g.ho; ++r) {
      double* dst = gx + p * g.h * g.w + r * g.stride * g.w;
      const double* src = gxs.data() + (p * g.ho + r) * g.wo;
      for (std::size_t col = 0; col < g.wo; ++col) dst[col * g.stride] += src[col];
    }
  }
}

void general_forward(const double* x, const double* w, const ConvGeometry& g, double* o) {
  for_each_tap(g, [&](std::size_t out_row, std::size_t in_row, std::size_t wi, long long off) {
    std::size_t lo, hi;
    valid_columns(off, g.stride, g.w, g.wo, lo, hi);
    if (hi <= lo) return;
    const double wv = w[wi];
    double* orow = o + out_row + lo;
    const double* irow = x + in_row + static_cast<std::size_t>(static_cast<long long>(lo * g.stride) + off);
    const std::size_t len = hi - lo;
    if (g.stride == 1) {
      for (std::size_t i = 0; i < len; ++i) orow[i] += wv * irow[i];
    } else {
      for (std::size_t i = 0; i < len; ++i) orow[i] += wv * irow[i * g.stride];
    }
  });
}

void general_backward(const double* x, const double* w, const double* go, const ConvGeometry& g, double* gx,
                      double* gw) {
  for_each_tap(g, [&](std::size_t out_row, std::size_t in_row, std::size_t wi, long long off) {
    std::size_t lo, hi;
    valid_columns(off, g.stride, g.w, g.wo, lo, hi);
    if (hi <= lo) return;
    const double* orow = go + out_row + lo;
    const std::size_t base = in_row + static_cast<std::size_t>(static_cast<long long>(lo * g.stride) + off);
    const std::size_t len = hi - lo;
    if (gx) {
      const double wv = w[wi];
      double* girow = gx + base;
      if (g.stride == 1) {
        for (std::size_t i = 0; i < len; ++i) girow[i] += wv * orow[i];
      } else {
        for (std::size_t i = 0; i < len; ++i) girow[i * g.stride] += wv * orow[i];
      }
    }
    if (gw) {
      const double* irow = x + base;
      double acc = 0.0;
      if (g.stride == 1) {
        acc = dot(orow, irow, len);
      } else {
        for (std::size_t i = 0; i < len; ++i) acc += orow[i] * irow[i * g.stride];
      }
      gw[wi] += acc;
    }
  });
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Conv2dOptions& opt) {
  require_rank(input, 4, "conv2d");
  require_rank(kernel, 4, "conv2d kernel");
  if (opt.groups == 0 || opt.stride == 0 || opt.dilation == 0) {
    throw ConfigError("conv2d: stride, dilation and groups must be >= 1");
  }
  ConvGeometry g{};
  g.n = input.dim(0);
  g.c = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.cout = kernel.dim(0);
  g.cg = kernel.dim(1);
  g.k = kernel.dim(2);
  g.stride = opt.stride;
  g.pad = opt.padding;
  g.dil = opt.dilation;
  g.groups = opt.groups;
  if (g.c % g.groups != 0 || g.cout % g.groups != 0) {
    throw ConfigError("conv2d: groups " + std::to_string(g.groups) + " must divide channels " +
                      std::to_string(g.c) + " -> " + std::to_string(g.cout));
  }
  if (kernel.dim(3) != g.k) throw DimensionError("conv2d: kernel must be spatially square");
  if (g.cg != g.c / g.groups) {
    throw DimensionError("conv2d: kernel expects " + std::to_string(g.cg * g.groups) + " input channels, got " +
                         std::to_string(g.c));
  }
  g.cout_per_group = g.cout / g.groups;
  g.ho = conv_output_size(g.h, g.k, g.stride, g.pad, g.dil);
  g.wo = conv_output_size(g.w, g.k, g.stride, g.pad, g.dil);
  macs += static_cast<std::uint64_t>(g.n * g.cout * g.ho * g.wo * g.cg * g.k * g.k);

  std::vector<double> out(g.n * g.cout * g.ho * g.wo, 0.0);
  const double* x = input.data().data();
  const double* w = kernel.data().data();
  const ConvPath path = choose_path(g);
  switch (path) {
    case ConvPath::depthwise:
      depthwise_forward(x, w, g, out.data());
      break;
    case ConvPath::pointwise:
      pointwise_forward(x, w, g, g.h * g.w, out.data());
      break;
    case ConvPath::strided_pointwise: {
      auto xs = subsample(x, g);
      pointwise_forward(xs.data(), w, g, g.ho * g.wo, out.data());
      break;
    }
    case ConvPath::general:
      general_forward(x, w, g, out.data());
      break;
  }

  Shape shape{g.n, g.cout, g.ho, g.wo};
  return make_op_result(std::move(shape), std::move(out), {input, kernel}, "conv2d", [g, path](TensorImpl& self) {
    const double* x = self.inputs[0]->data.data();
    const double* w = self.inputs[1]->data.data();
    const double* go = self.grad.data();
    double* gx = self.input_needs_grad(0) ? self.inputs[0]->ensure_grad().data() : nullptr;
    double* gw = self.input_needs_grad(1) ? self.inputs[1]->ensure_grad().data() : nullptr;
    switch (path) {
      case ConvPath::depthwise:
        depthwise_backward(x, w, go, g, gx, gw);
        break;
      case ConvPath::pointwise:
        pointwise_backward(x, w, go, g, g.h * g.w, gx, gw);
        break;
      case ConvPath::strided_pointwise: {
        auto xs = subsample(x, g);
        std::vector<double> gxs(gx ? xs.size() : 0, 0.0);
        pointwise_backward(xs.data(), w, go, g, g.ho * g.wo, gx ? gxs.data() : nullptr, gw);
        if (gx) scatter_subsampled(gxs, g, gx);
        break;
      }
      case ConvPath::general:
        general_backward(x, w, go, g, gx, gw);
        break;
    }
  });
}

// --- pooling -------------------------------------------------------------------

Tensor pool2d(const Tensor& input, PoolKind kind, std::size_t window, std::size_t stride, std::size_t padding) {
  require_rank(input, 4, "pool2d");
  if (window == 0 || stride == 0) throw ConfigError("pool2d: window and stride must be >= 1");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t ho = conv_output_size(h, window, stride, padding, 1);
  const std::size_t wo = conv_output_size(w, window, stride, padding, 1);
  std::vector<double> out(n * c * ho * wo);
  auto x = input.data();
  const double inv_area = 1.0 / static_cast<double>(window * window);
  std::vector<std::size_t> argmax;
  if (kind == PoolKind::max) argmax.resize(out.size());

  for (std::size_t p = 0; p < n * c; ++p) {
    const std::size_t in_plane = p * h * w;
    for (std::size_t oh = 0; oh < ho; ++oh) {
      for (std::size_t ow = 0; ow < wo; ++ow) {
        const std::size_t oi = (p * ho + oh) * wo + ow;
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_i = 0;
        double acc = 0.0;
        for (std::size_t kh = 0; kh < window; ++kh) {
          const long long ih = static_cast<long long>(oh * stride + kh) - static_cast<long long>(padding);
          if (ih < 0 || ih >= static_cast<long long>(h)) continue;
          for (std::size_t kw = 0; kw < window; ++kw) {
            const long long iw = static_cast<long long>(ow * stride + kw) - static_cast<long long>(padding);
            if (iw < 0 || iw >= static_cast<long long>(w)) continue;
            const std::size_t ii = in_plane + static_cast<std::size_t>(ih) * w + static_cast<std::size_t>(iw);
            if (kind == PoolKind::max) {
              if (x[ii] > best) {
                best = x[ii];
                best_i = ii;
              }
            } else {
              acc += x[ii];
            }
          }
        }
        if (kind == PoolKind::max) {
          out[oi] = best;
          argmax[oi] = best_i;
        } else {
          out[oi] = acc * inv_area;
        }
      }
    }
  }
  Shape shape{n, c, ho, wo};
  if (kind == PoolKind::max) {
    return make_op_result(std::move(shape), std::move(out), {input}, "max_pool2d",
                          [argmax = std::move(argmax)](TensorImpl& self) {
                            auto& g = self.inputs[0]->ensure_grad();
                            for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += self.grad[i];
                          });
  }
  return make_op_result(std::move(shape), std::move(out), {input}, "avg_pool2d",
                        [n, c, h, w, ho, wo, window, stride, padding, inv_area](TensorImpl& self) {
                          auto& g = self.inputs[0]->ensure_grad();
                          for (std::size_t p = 0; p < n * c; ++p) {
                            for (std::size_t oh = 0; oh < ho; ++oh) {
                              for (std::size_t ow = 0; ow < wo; ++ow) {
                                const double go = self.grad[(p * ho + oh) * wo + ow] * inv_area;
                                for (std::size_t kh = 0; kh < window; ++kh) {
                                  const long long ih =
                                      static_cast<long long>(oh * stride + kh) - static_cast<long long>(padding);
                                  if (ih < 0 || ih >= static_cast<long long>(h)) continue;
                                  for (std::size_t kw = 0; kw < window; ++kw) {
                                    const long long iw =
                                        static_cast<long long>(ow * stride + kw) - static_cast<long long>(padding);
                                    if (iw < 0 || iw >= static_cast<long long>(w)) continue;
                                    g[p * h * w + static_cast<std::size_t>(ih) * w + static_cast<std::size_t>(iw)] +=
                                        go;
                                  }
                                }
                              }
                            }
                          }
                        });
}

Tensor global_avg_pool(const Tensor& input) {
  require_rank(input, 4, "global_avg_pool");
  const std::size_t n = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
  std::vector<double> out(n * c, 0.0);
  auto x = input.data();
  const double inv = 1.0 / static_cast<double>(plane);
  for (std::size_t p = 0; p < n * c; ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += x[p * plane + i];
    out[p] = s * inv;
  }
  return make_op_result({n, c}, std::move(out), {input}, "global_avg_pool", [plane, inv](TensorImpl& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t p = 0; p < self.grad.size(); ++p) {
      const double v = self.grad[p] * inv;
      for (std::size_t i = 0; i < plane; ++i) g[p * plane + i] += v;
    }
  });
}

// --- batch norm ----------------------------------------------------------------

Tensor batch_norm(const Tensor& input, BatchNormState& state, Mode mode, const Tensor& gamma, const Tensor& beta) {
  require_rank(input, 4, "batch_norm");
  if (state.eps <= 0.0) throw ConfigError("batch_norm: eps must be positive");
  const std::size_t n = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
  if (state.running_mean.size() != c || state.running_var.size() != c) {
    throw DimensionError("batch_norm: state has " + std::to_string(state.running_mean.size()) +
                         " channels, input has " + std::to_string(c));
  }
  const bool affine = gamma.defined() && beta.defined();
  if (affine && (gamma.numel() != c || beta.numel() != c)) {
    throw DimensionError("batch_norm: affine parameters must have one entry per channel");
  }
  const std::size_t m = n * plane;
  if (mode == Mode::train && m == 1) throw DimensionError("batch_norm: degenerate batch (N*H*W == 1) in train mode");

  auto x = input.data();
  std::vector<double> xhat(input.numel());
  std::vector<double> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu, var;
    if (mode == Mode::train) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b) s += total(x.data() + (b * c + ch) * plane, plane);
      mu = s / static_cast<double>(m);
      // second-pass correction; makes constant channels exactly zero-mean
      double corr = 0.0, unused = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        double part = 0.0;
        centered_sums(x.data() + (b * c + ch) * plane, mu, plane, part, unused);
        corr += part;
      }
      mu += corr / static_cast<double>(m);
      double sq = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        double part = 0.0, part_sq = 0.0;
        centered_sums(x.data() + (b * c + ch) * plane, mu, plane, part, part_sq);
        sq += part_sq;
      }
      var = sq / static_cast<double>(m);
      const double unbiased = sq / static_cast<double>(m - 1);
      state.running_mean[ch] = state.momentum * state.running_mean[ch] + (1.0 - state.momentum) * mu;
      state.running_var[ch] = state.momentum * state.running_var[ch] + (1.0 - state.momentum) * unbiased;
    } else {
      mu = state.running_mean[ch];
      var = state.running_var[ch];
    }
    const double is = 1.0 / std::sqrt(var + state.eps);
    inv_std[ch] = is;
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t o = (b * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) xhat[o + i] = (x[o + i] - mu) * is;
    }
  }

  std::vector<double> out;
  if (affine) {
    out.resize(xhat.size());
    auto gm = gamma.data();
    auto bt = beta.data();
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t o = (b * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) out[o + i] = gm[ch] * xhat[o + i] + bt[ch];
      }
    }
  } else {
    out = xhat;
  }

  std::vector<Tensor> inputs{input};
  if (affine) {
    inputs.push_back(gamma);
    inputs.push_back(beta);
  }
  const bool train = mode == Mode::train;
  return make_op_result(input.shape(), std::move(out), std::move(inputs), "batch_norm",
                        [xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, plane, m, affine,
                         train](TensorImpl& self) {
                          const auto& g = self.grad;
                          const double* gm = affine ? self.inputs[1]->data.data() : nullptr;
                          if (affine) {
                            const bool need_gamma = self.input_needs_grad(1);
                            const bool need_beta = self.input_needs_grad(2);
                            for (std::size_t ch = 0; ch < c; ++ch) {
                              double dg = 0.0, db = 0.0;
                              for (std::size_t b = 0; b < n; ++b) {
                                const std::size_t o = (b * c + ch) * plane;
                                dg += dot(g.data() + o, xhat.data() + o, plane);
                                db += total(g.data() + o, plane);
                              }
                              if (need_gamma) self.inputs[1]->ensure_grad()[ch] += dg;
                              if (need_beta) self.inputs[2]->ensure_grad()[ch] += db;
                            }
                          }
                          if (!self.input_needs_grad(0)) return;
                          auto& gx = self.inputs[0]->ensure_grad();
                          const double inv_m = 1.0 / static_cast<double>(m);
                          for (std::size_t ch = 0; ch < c; ++ch) {
                            const double scale_c = (gm ? gm[ch] : 1.0) * inv_std[ch];
                            if (!train) {
                              for (std::size_t b = 0; b < n; ++b) {
                                const std::size_t o = (b * c + ch) * plane;
                                for (std::size_t i = 0; i < plane; ++i) gx[o + i] += scale_c * g[o + i];
                              }
                              continue;
                            }
                            double sum_g = 0.0, sum_gx = 0.0;
                            for (std::size_t b = 0; b < n; ++b) {
                              const std::size_t o = (b * c + ch) * plane;
                              sum_g += total(g.data() + o, plane);
                              sum_gx += dot(g.data() + o, xhat.data() + o, plane);
                            }
                            const double mg = sum_g * inv_m;
                            const double mgx = sum_gx * inv_m;
                            for (std::size_t b = 0; b < n; ++b) {
                              const std::size_t o = (b * c + ch) * plane;
                              for (std::size_t i = 0; i < plane; ++i) {
                                gx[o + i] += scale_c * (g[o + i] - mg - xhat[o + i] * mgx);
                              }
                            }
                          }
                        });
}

// --- shape plumbing ------------------------------------------------------------

Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_channels: no inputs");
  for (const auto& p : parts) require_rank(p, 4, "concat_channels");
  const std::size_t n = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
  std::size_t c_total = 0;
  std::vector<std::size_t> cs;
  for (const auto& p : parts) {
    if (p.dim(0) != n || p.dim(2) != h || p.dim(3) != w) {
      throw DimensionError("concat_channels: incompatible " + shape_str(p.shape()) + " vs " +
                           shape_str(parts[0].shape()));
    }
    cs.push_back(p.dim(1));
    c_total += p.dim(1);
  }
  const std::size_t plane = h * w;
  std::vector<double> out(n * c_total * plane);
  for (std::size_t b = 0; b < n; ++b) {
    std::size_t c_off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      auto src = parts[k].data().subspan(b * cs[k] * plane, cs[k] * plane);
      std::copy(src.begin(), src.end(), out.begin() + static_cast<std::ptrdiff_t>((b * c_total + c_off) * plane));
      c_off += cs[k];
    }
  }
  return make_op_result({n, c_total, h, w}, std::move(out), parts, "concat_channels",
                        [cs, n, c_total, plane](TensorImpl& self) {
                          for (std::size_t b = 0; b < n; ++b) {
                            std::size_t c_off = 0;
                            for (std::size_t k = 0; k < cs.size(); ++k) {
                              if (self.input_needs_grad(k)) {
                                auto& g = self.inputs[k]->ensure_grad();
                                const double* src = self.grad.data() + (b * c_total + c_off) * plane;
                                double* dst = g.data() + b * cs[k] * plane;
                                for (std::size_t i = 0; i < cs[k] * plane; ++i) dst[i] += src[i];
                              }
                              c_off += cs[k];
                            }
                          }
                        });
}

Tensor crop(const Tensor& input, std::size_t top, std::size_t left, std::size_t height, std::size_t width) {
  require_rank(input, 4, "crop");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (top + height > h || left + width > w || height == 0 || width == 0) {
    throw DimensionError("crop window outside " + shape_str(input.shape()));
  }
  std::vector<double> out(n * c * height * width);
  auto x = input.data();
  for (std::size_t p = 0; p < n * c; ++p) {
    for (std::size_t i = 0; i < height; ++i) {
      for (std::size_t j = 0; j < width; ++j) {
        out[(p * height + i) * width + j] = x[p * h * w + (top + i) * w + left + j];
      }
    }
  }
  return make_op_result({n, c, height, width}, std::move(out), {input}, "crop",
                        [n, c, h, w, top, left, height, width](TensorImpl& self) {
                          auto& g = self.inputs[0]->ensure_grad();
                          for (std::size_t p = 0; p < n * c; ++p) {
                            for (std::size_t i = 0; i < height; ++i) {
                              for (std::size_t j = 0; j < width; ++j) {
                                g[p * h * w + (top + i) * w + left + j] += self.grad[(p * height + i) * width + j];
                              }
                            }
                          }
                        });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear weight");
  const std::size_t n = x.dim(0), f = x.dim(1), k = weight.dim(0);
  if (weight.dim(1) != f || bias.numel() != k) {
    throw DimensionError("linear: x " + shape_str(x.shape()) + ", weight " + shape_str(weight.shape()) +
                         ", bias " + shape_str(bias.shape()));
  }
  macs += static_cast<std::uint64_t>(n * f * k);
  std::vector<double> out(n * k);
  auto xd = x.data();
  auto wd = weight.data();
  auto bd = bias.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      double s = bd[j];
      for (std::size_t q = 0; q < f; ++q) s += xd[i * f + q] * wd[j * f + q];
      out[i * k + j] = s;
    }
  }
  return make_op_result({n, k}, std::move(out), {x, weight, bias}, "linear", [n, f, k](TensorImpl& self) {
    const auto& g = self.grad;
    const auto& xd = self.inputs[0]->data;
    const auto& wd = self.inputs[1]->data;
    if (self.input_needs_grad(0)) {
      auto& gx = self.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j)
          for (std::size_t q = 0; q < f; ++q) gx[i * f + q] += g[i * k + j] * wd[j * f + q];
    }
    if (self.input_needs_grad(1)) {
      auto& gw = self.inputs[1]->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j)
          for (std::size_t q = 0; q < f; ++q) gw[j * f + q] += g[i * k + j] * xd[i * f + q];
    }
    if (self.input_needs_grad(2)) {
      auto& gb = self.inputs[2]->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) gb[j] += g[i * k + j];
    }
  });
}

}  // namespace fnas
