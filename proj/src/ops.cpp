#include "milscene/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace milscene {

namespace {

struct Bchw {
  int b, c, h, w;
  bool batched;
};

Bchw split_bchw(const TensorPtr& x, const char* op) {
  if (x->rank() == 3) return {1, x->dim(0), x->dim(1), x->dim(2), false};
  if (x->rank() == 4) return {x->dim(0), x->dim(1), x->dim(2), x->dim(3), true};
  throw std::invalid_argument(std::string(op) + ": expected rank-3 (C,H,W) or rank-4 " +
                              "(B,C,H,W) input, got " + shape_str(x->shape));
}

Shape with_chw(const Bchw& d, int c, int h, int w) {
  if (d.batched) return {d.b, c, h, w};
  return {c, h, w};
}

// Attach parents and a backward closure when autograd is on and at least one
// input is tracked. Otherwise the node stays a constant.
void wire(const TensorPtr& out, std::vector<TensorPtr> parents, std::function<void()> fn) {
  if (!grad_enabled()) return;
  bool track = false;
  for (const auto& p : parents)
    if (p->tracked()) track = true;
  if (!track) return;
  out->parents = std::move(parents);
  out->backprop = std::move(fn);
}

}  // namespace

TensorPtr pointwise_conv(const TensorPtr& x, const TensorPtr& w) {
  const Bchw d = split_bchw(x, "pointwise_conv");
  if (w->rank() != 2)
    throw std::invalid_argument("pointwise_conv: kernel must be rank-2 (C_out,C_in), got " +
                                shape_str(w->shape));
  const int c_out = w->dim(0), c_in = w->dim(1);
  if (c_in != d.c)
    throw std::invalid_argument("pointwise_conv: kernel " + shape_str(w->shape) +
                                " does not match input channels of " + shape_str(x->shape));

  // Channel loops are blocked so each spatial row streams through the cache
  // once per block instead of once per channel pair. Summation order per
  // output element is unchanged.
  constexpr int kBlock = 8;
  const int64_t hw = static_cast<int64_t>(d.h) * d.w;
  auto out = make_tensor(with_chw(d, c_out, d.h, d.w));
  for (int b = 0; b < d.b; ++b) {
    const double* xb = x->data.data() + static_cast<int64_t>(b) * d.c * hw;
    double* ob = out->data.data() + static_cast<int64_t>(b) * c_out * hw;
    for (int o0 = 0; o0 < c_out; o0 += kBlock) {
      const int o1 = std::min(o0 + kBlock, c_out);
      for (int i = 0; i < c_in; ++i) {
        const double* xrow = xb + static_cast<int64_t>(i) * hw;
        for (int o = o0; o < o1; ++o) {
          const double wi = w->data[static_cast<size_t>(o) * c_in + i];
          double* orow = ob + static_cast<int64_t>(o) * hw;
          for (int64_t s = 0; s < hw; ++s) orow[s] += wi * xrow[s];
        }
      }
    }
  }

  Tensor* op = out.get();
  wire(out, {x, w}, [op, x, w, d, c_out, c_in, hw]() {
    constexpr int kBlock = 8;
    const double* g = op->grad.data();
    if (x->tracked()) {
      x->ensure_grad();
      for (int b = 0; b < d.b; ++b) {
        double* gx = x->grad.data() + static_cast<int64_t>(b) * c_in * hw;
        const double* gb = g + static_cast<int64_t>(b) * c_out * hw;
        for (int i0 = 0; i0 < c_in; i0 += kBlock) {
          const int i1 = std::min(i0 + kBlock, c_in);
          for (int o = 0; o < c_out; ++o) {
            const double* grow = gb + static_cast<int64_t>(o) * hw;
            for (int i = i0; i < i1; ++i) {
              const double wi = w->data[static_cast<size_t>(o) * c_in + i];
              double* gxrow = gx + static_cast<int64_t>(i) * hw;
              for (int64_t s = 0; s < hw; ++s) gxrow[s] += wi * grow[s];
            }
          }
        }
      }
    }
    if (w->tracked()) {
      w->ensure_grad();
      for (int b = 0; b < d.b; ++b) {
        const double* xb = x->data.data() + static_cast<int64_t>(b) * c_in * hw;
        const double* gb = g + static_cast<int64_t>(b) * c_out * hw;
        for (int o0 = 0; o0 < c_out; o0 += kBlock) {
          const int o1 = std::min(o0 + kBlock, c_out);
          for (int i = 0; i < c_in; ++i) {
            const double* xrow = xb + static_cast<int64_t>(i) * hw;
            double acc[kBlock] = {};
            for (int o = o0; o < o1; ++o) {
              const double* grow = gb + static_cast<int64_t>(o) * hw;
              double sum = 0.0;
              for (int64_t s = 0; s < hw; ++s) sum += grow[s] * xrow[s];
              acc[o - o0] = sum;
            }
            for (int o = o0; o < o1; ++o)
              w->grad[static_cast<size_t>(o) * c_in + i] += acc[o - o0];
          }
        }
      }
    }
  });
  return out;
}

TensorPtr axis_depthwise_conv(const TensorPtr& x, const TensorPtr& k, ConvAxis axis,
                              PaddingMode pad) {
  const Bchw d = split_bchw(x, "axis_depthwise_conv");
  if (k->rank() != 2)
    throw std::invalid_argument("axis_depthwise_conv: kernels must be rank-2 (C,K), got " +
                                shape_str(k->shape));
  if (k->dim(0) != d.c)
    throw std::invalid_argument("axis_depthwise_conv: kernel " + shape_str(k->shape) +
                                " does not match input channels of " + shape_str(x->shape));
  const int kk = k->dim(1);
  const int extent = (axis == ConvAxis::Frequency) ? d.h : d.w;
  if (pad == PaddingMode::Valid && kk > extent)
    throw std::invalid_argument("axis_depthwise_conv: kernel length " + std::to_string(kk) +
                                " exceeds axis extent " + std::to_string(extent) +
                                " under valid padding");

  const int left = (pad == PaddingMode::Same) ? (kk - 1) / 2 : 0;
  const int out_extent = (pad == PaddingMode::Same) ? extent : extent - kk + 1;
  const int oh = (axis == ConvAxis::Frequency) ? out_extent : d.h;
  const int ow = (axis == ConvAxis::Time) ? out_extent : d.w;
  auto out = make_tensor(with_chw(d, d.c, oh, ow));

  const int64_t in_plane = static_cast<int64_t>(d.h) * d.w;
  const int64_t out_plane = static_cast<int64_t>(oh) * ow;
  for (int b = 0; b < d.b; ++b) {
    for (int c = 0; c < d.c; ++c) {
      const double* xc = x->data.data() + (static_cast<int64_t>(b) * d.c + c) * in_plane;
      double* oc = out->data.data() + (static_cast<int64_t>(b) * d.c + c) * out_plane;
      const double* kc = k->data.data() + static_cast<size_t>(c) * kk;
      if (axis == ConvAxis::Frequency) {
        for (int h = 0; h < oh; ++h) {
          for (int t = 0; t < kk; ++t) {
            const int hin = h + t - left;
            if (hin < 0 || hin >= d.h) continue;
            const double kv = kc[t];
            const double* xrow = xc + static_cast<int64_t>(hin) * d.w;
            double* orow = oc + static_cast<int64_t>(h) * d.w;
            for (int wcol = 0; wcol < d.w; ++wcol) orow[wcol] += kv * xrow[wcol];
          }
        }
      } else {
        for (int h = 0; h < d.h; ++h) {
          const double* xrow = xc + static_cast<int64_t>(h) * d.w;
          double* orow = oc + static_cast<int64_t>(h) * ow;
          for (int t = 0; t < kk; ++t) {
            const double kv = kc[t];
            const int shift = t - left;
            const int w0 = std::max(0, -shift);
            const int w1 = std::min(ow, d.w - shift);
            for (int wcol = w0; wcol < w1; ++wcol) orow[wcol] += kv * xrow[wcol + shift];
          }
        }
      }
    }
  }

  Tensor* op = out.get();
  wire(out, {x, k}, [op, x, k, d, axis, kk, left, oh, ow, in_plane, out_plane]() {
    const double* g = op->grad.data();
    const bool gx_on = x->tracked();
    const bool gk_on = k->tracked();
    if (gx_on) x->ensure_grad();
    if (gk_on) k->ensure_grad();
    for (int b = 0; b < d.b; ++b) {
      for (int c = 0; c < d.c; ++c) {
        const int64_t in_off = (static_cast<int64_t>(b) * d.c + c) * in_plane;
        const int64_t out_off = (static_cast<int64_t>(b) * d.c + c) * out_plane;
        const double* xc = x->data.data() + in_off;
        const double* gc = g + out_off;
        const double* kc = k->data.data() + static_cast<size_t>(c) * kk;
        double* gxc = gx_on ? x->grad.data() + in_off : nullptr;
        double* gkc = gk_on ? k->grad.data() + static_cast<size_t>(c) * kk : nullptr;
        if (axis == ConvAxis::Frequency) {
          for (int h = 0; h < oh; ++h) {
            const double* grow = gc + static_cast<int64_t>(h) * d.w;
            for (int t = 0; t < kk; ++t) {
              const int hin = h + t - left;
              if (hin < 0 || hin >= d.h) continue;
              const double* xrow = xc + static_cast<int64_t>(hin) * d.w;
              if (gx_on) {
                double* gxrow = gxc + static_cast<int64_t>(hin) * d.w;
                const double kv = kc[t];
                for (int wcol = 0; wcol < d.w; ++wcol) gxrow[wcol] += kv * grow[wcol];
              }
              if (gk_on) {
                double acc = 0.0;
                for (int wcol = 0; wcol < d.w; ++wcol) acc += grow[wcol] * xrow[wcol];
                gkc[t] += acc;
              }
            }
          }
        } else {
          for (int h = 0; h < d.h; ++h) {
            const double* xrow = xc + static_cast<int64_t>(h) * d.w;
            const double* grow = gc + static_cast<int64_t>(h) * ow;
            double* gxrow = gx_on ? gxc + static_cast<int64_t>(h) * d.w : nullptr;
            for (int t = 0; t < kk; ++t) {
              const int shift = t - left;
              const int w0 = std::max(0, -shift);
              const int w1 = std::min(ow, d.w - shift);
              if (gx_on) {
                const double kv = kc[t];
                for (int wcol = w0; wcol < w1; ++wcol) gxrow[wcol + shift] += kv * grow[wcol];
              }
              if (gk_on) {
                double acc = 0.0;
                for (int wcol = w0; wcol < w1; ++wcol) acc += grow[wcol] * xrow[wcol + shift];
                gkc[t] += acc;
              }
            }
          }
        }
      }
    }
  });
  return out;
}

TensorPtr maxpool2(const TensorPtr& x) {
  const Bchw d = split_bchw(x, "maxpool2");
  if (d.h < 2 || d.w < 2)
    throw std::invalid_argument("maxpool2: spatial extents must be >= 2, got " +
                                shape_str(x->shape));
  const int oh = d.h / 2, ow = d.w / 2;
  auto out = make_tensor(with_chw(d, d.c, oh, ow));
  std::vector<int64_t> argmax(static_cast<size_t>(out->size()));

  const int64_t in_plane = static_cast<int64_t>(d.h) * d.w;
  const bool kinks = kink_tracking();
  int64_t oi = 0;
  for (int b = 0; b < d.b; ++b) {
    for (int c = 0; c < d.c; ++c) {
      const int64_t base = (static_cast<int64_t>(b) * d.c + c) * in_plane;
      for (int h = 0; h < oh; ++h) {
        for (int w = 0; w < ow; ++w, ++oi) {
          double best = -1e300, second = -1e300;
          int64_t best_at = -1;
          for (int dh = 0; dh < 2; ++dh) {
            const int64_t row = base + static_cast<int64_t>(2 * h + dh) * d.w + 2 * w;
            for (int dw = 0; dw < 2; ++dw) {
              const double v = x->data[static_cast<size_t>(row + dw)];
              if (v > best) {
                second = best;
                best = v;
                best_at = row + dw;
              } else if (v > second) {
                second = v;
              }
            }
          }
          out->data[static_cast<size_t>(oi)] = best;
          argmax[static_cast<size_t>(oi)] = best_at;
          // Exact ties are relu-clamped zeros in practice; both branches are
          // flat there, and the relu margins guard the underlying pre-acts.
          if (kinks && best != second) note_kink_margin(best - second);
        }
      }
    }
  }

  Tensor* op = out.get();
  wire(out, {x}, [op, x, argmax = std::move(argmax)]() {
    if (!x->tracked()) return;
    x->ensure_grad();
    for (size_t i = 0; i < argmax.size(); ++i)
      x->grad[static_cast<size_t>(argmax[i])] += op->grad[i];
  });
  return out;
}

namespace {

TensorPtr batchnorm_impl(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                         BatchNormState& state, NormMode mode, double eps, double momentum,
                         bool fused_relu) {
  const Bchw d = split_bchw(x, "batchnorm");
  auto check_c = [&](const TensorPtr& t, const char* what) {
    if (t->rank() != 1 || t->dim(0) != d.c)
      throw std::invalid_argument(std::string("batchnorm: ") + what + " must be (" +
                                  std::to_string(d.c) + "), got " + shape_str(t->shape));
  };
  check_c(gamma, "gamma");
  check_c(beta, "beta");
  check_c(state.running_mean, "running_mean");
  check_c(state.running_var, "running_var");

  const int64_t plane = static_cast<int64_t>(d.h) * d.w;
  const int64_t m = static_cast<int64_t>(d.b) * plane;
  auto out = make_tensor(x->shape);
  // Backward recomputes normalized values from x, so only per-channel
  // statistics are retained rather than a full activation copy.
  std::vector<double> means(static_cast<size_t>(d.c));
  std::vector<double> inv_std(static_cast<size_t>(d.c));

  for (int c = 0; c < d.c; ++c) {
    double mean, var;
    if (mode == NormMode::Train) {
      double sum = 0.0, sq = 0.0;
      for (int b = 0; b < d.b; ++b) {
        const double* xc = x->data.data() + (static_cast<int64_t>(b) * d.c + c) * plane;
        for (int64_t s = 0; s < plane; ++s) {
          sum += xc[s];
          sq += xc[s] * xc[s];
        }
      }
      mean = sum / static_cast<double>(m);
      var = std::max(0.0, sq / static_cast<double>(m) - mean * mean);
      state.running_mean->data[c] = (1.0 - momentum) * state.running_mean->data[c] +
                                    momentum * mean;
      state.running_var->data[c] = (1.0 - momentum) * state.running_var->data[c] +
                                   momentum * var;
    } else {
      mean = state.running_mean->data[c];
      var = state.running_var->data[c];
    }
    const double inv = 1.0 / std::sqrt(var + eps);
    means[static_cast<size_t>(c)] = mean;
    inv_std[static_cast<size_t>(c)] = inv;
    const double g = gamma->data[c], bt = beta->data[c];
    const bool kinks = fused_relu && kink_tracking();
    for (int b = 0; b < d.b; ++b) {
      const int64_t off = (static_cast<int64_t>(b) * d.c + c) * plane;
      const double* xc = x->data.data() + off;
      double* oc = out->data.data() + off;
      if (fused_relu) {
        for (int64_t s = 0; s < plane; ++s) {
          const double y = g * (xc[s] - mean) * inv + bt;
          oc[s] = y > 0.0 ? y : 0.0;
          if (kinks) note_kink_margin(std::fabs(y));
        }
      } else {
        for (int64_t s = 0; s < plane; ++s) oc[s] = g * (xc[s] - mean) * inv + bt;
      }
    }
  }

  Tensor* op = out.get();
  wire(out, {x, gamma, beta},
       [op, x, gamma, beta, d, plane, m, mode, fused_relu, means = std::move(means),
        inv_std = std::move(inv_std)]() {
         const double* g = op->grad.data();
         const double* o = op->data.data();
         const bool gx_on = x->tracked();
         if (gx_on) x->ensure_grad();
         const bool gg_on = gamma->tracked();
         if (gg_on) gamma->ensure_grad();
         const bool gb_on = beta->tracked();
         if (gb_on) beta->ensure_grad();
         // With the fused relu the upstream gradient is masked by out > 0.
         for (int c = 0; c < d.c; ++c) {
           const double mean = means[static_cast<size_t>(c)];
           const double inv = inv_std[static_cast<size_t>(c)];
           double sum_g = 0.0, sum_gx = 0.0;
           for (int b = 0; b < d.b; ++b) {
             const int64_t off = (static_cast<int64_t>(b) * d.c + c) * plane;
             const double* gc = g + off;
             const double* oc = o + off;
             const double* xc = x->data.data() + off;
             for (int64_t s = 0; s < plane; ++s) {
               const double gm = (fused_relu && oc[s] <= 0.0) ? 0.0 : gc[s];
               sum_g += gm;
               sum_gx += gm * (xc[s] - mean) * inv;
             }
           }
           if (gg_on) gamma->grad[c] += sum_gx;
           if (gb_on) beta->grad[c] += sum_g;
           if (!gx_on) continue;
           const double scale_c = gamma->data[c] * inv;
           if (mode == NormMode::Train) {
             const double mg = sum_g / static_cast<double>(m);
             const double mgx = sum_gx / static_cast<double>(m);
             for (int b = 0; b < d.b; ++b) {
               const int64_t off = (static_cast<int64_t>(b) * d.c + c) * plane;
               const double* gc = g + off;
               const double* oc = o + off;
               const double* xc = x->data.data() + off;
               double* gxc = x->grad.data() + off;
               for (int64_t s = 0; s < plane; ++s) {
                 const double gm = (fused_relu && oc[s] <= 0.0) ? 0.0 : gc[s];
                 gxc[s] += scale_c * (gm - mg - (xc[s] - mean) * inv * mgx);
               }
             }
           } else {
             for (int b = 0; b < d.b; ++b) {
               const int64_t off = (static_cast<int64_t>(b) * d.c + c) * plane;
               const double* gc = g + off;
               const double* oc = o + off;
               double* gxc = x->grad.data() + off;
               for (int64_t s = 0; s < plane; ++s) {
                 const double gm = (fused_relu && oc[s] <= 0.0) ? 0.0 : gc[s];
                 gxc[s] += scale_c * gm;
               }
             }
           }
         }
       });
  return out;
}

}  // namespace

TensorPtr batchnorm(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                    BatchNormState& state, NormMode mode, double eps, double momentum) {
  return batchnorm_impl(x, gamma, beta, state, mode, eps, momentum, false);
}

TensorPtr batchnorm_relu(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                         BatchNormState& state, NormMode mode, double eps, double momentum) {
  return batchnorm_impl(x, gamma, beta, state, mode, eps, momentum, true);
}

TensorPtr dense(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b) {
  if (x->rank() != 1 || w->rank() != 2 || b->rank() != 1 || w->dim(1) != x->dim(0) ||
      w->dim(0) != b->dim(0))
    throw std::invalid_argument("dense: incompatible shapes x" + shape_str(x->shape) + " w" +
                                shape_str(w->shape) + " b" + shape_str(b->shape));
  const int c = w->dim(0), dd = w->dim(1);
  auto out = make_tensor({c});
  for (int i = 0; i < c; ++i) {
    double acc = b->data[i];
    const double* wr = w->data.data() + static_cast<int64_t>(i) * dd;
    for (int j = 0; j < dd; ++j) acc += wr[j] * x->data[j];
    out->data[i] = acc;
  }
  Tensor* op = out.get();
  wire(out, {x, w, b}, [op, x, w, b, c, dd]() {
    const double* g = op->grad.data();
    if (x->tracked()) {
      x->ensure_grad();
      for (int i = 0; i < c; ++i) {
        const double* wr = w->data.data() + static_cast<int64_t>(i) * dd;
        for (int j = 0; j < dd; ++j) x->grad[j] += g[i] * wr[j];
      }
    }
    if (w->tracked()) {
      w->ensure_grad();
      for (int i = 0; i < c; ++i) {
        double* gw = w->grad.data() + static_cast<int64_t>(i) * dd;
        for (int j = 0; j < dd; ++j) gw[j] += g[i] * x->data[j];
      }
    }
    if (b->tracked()) {
      b->ensure_grad();
      for (int i = 0; i < c; ++i) b->grad[i] += g[i];
    }
  });
  return out;
}

TensorPtr linear_rows(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b) {
  if (x->rank() != 2 || w->rank() != 2 || b->rank() != 1 || w->dim(1) != x->dim(1) ||
      w->dim(0) != b->dim(0))
    throw std::invalid_argument("linear_rows: incompatible shapes x" + shape_str(x->shape) +
                                " w" + shape_str(w->shape) + " b" + shape_str(b->shape));
  const int n = x->dim(0), dd = x->dim(1), c = w->dim(0);
  auto out = make_tensor({n, c});
  for (int i = 0; i < n; ++i) {
    const double* xr = x->data.data() + static_cast<int64_t>(i) * dd;
    double* orow = out->data.data() + static_cast<int64_t>(i) * c;
    for (int cc = 0; cc < c; ++cc) {
      const double* wr = w->data.data() + static_cast<int64_t>(cc) * dd;
      double acc = b->data[cc];
      for (int j = 0; j < dd; ++j) acc += wr[j] * xr[j];
      orow[cc] = acc;
    }
  }
  Tensor* op = out.get();
  wire(out, {x, w, b}, [op, x, w, b, n, dd, c]() {
    const double* g = op->grad.data();
    if (x->tracked()) {
      x->ensure_grad();
      for (int i = 0; i < n; ++i) {
        const double* grow = g + static_cast<int64_t>(i) * c;
        double* gx = x->grad.data() + static_cast<int64_t>(i) * dd;
        for (int cc = 0; cc < c; ++cc) {
          const double* wr = w->data.data() + static_cast<int64_t>(cc) * dd;
          for (int j = 0; j < dd; ++j) gx[j] += grow[cc] * wr[j];
        }
      }
    }
    if (w->tracked()) {
      w->ensure_grad();
      for (int i = 0; i < n; ++i) {
        const double* grow = g + static_cast<int64_t>(i) * c;
        const double* xr = x->data.data() + static_cast<int64_t>(i) * dd;
        for (int cc = 0; cc < c; ++cc) {
          double* gw = w->grad.data() + static_cast<int64_t>(cc) * dd;
          for (int j = 0; j < dd; ++j) gw[j] += grow[cc] * xr[j];
        }
      }
    }
    if (b->tracked()) {
      b->ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int cc = 0; cc < c; ++cc) b->grad[cc] += g[static_cast<int64_t>(i) * c + cc];
    }
  });
  return out;
}

namespace {

double stable_sigmoid(double v) {
  if (v >= 0) {
    const double e = std::exp(-v);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

TensorPtr activate(const TensorPtr& x, ActKind kind) {
  auto out = make_tensor(x->shape);
  const int64_t n = x->size();
  switch (kind) {
    case ActKind::Sigmoid:
      for (int64_t i = 0; i < n; ++i) out->data[i] = stable_sigmoid(x->data[i]);
      break;
    case ActKind::Relu: {
      const bool kinks = kink_tracking();
      for (int64_t i = 0; i < n; ++i) {
        const double v = x->data[i];
        out->data[i] = v > 0.0 ? v : 0.0;
        if (kinks) note_kink_margin(std::fabs(v));
      }
      break;
    }
    case ActKind::SoftmaxRows: {
      if (x->rank() != 2)
        throw std::invalid_argument("activate: softmax_rows needs a rank-2 input, got " +
                                    shape_str(x->shape));
      const int rows = x->dim(0), cols = x->dim(1);
      for (int r = 0; r < rows; ++r) {
        const double* xr = x->data.data() + static_cast<int64_t>(r) * cols;
        double* orow = out->data.data() + static_cast<int64_t>(r) * cols;
        double mx = xr[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
        double sum = 0.0;
        for (int j = 0; j < cols; ++j) {
          orow[j] = std::exp(xr[j] - mx);
          sum += orow[j];
        }
        for (int j = 0; j < cols; ++j) orow[j] /= sum;
      }
      break;
    }
  }

  Tensor* op = out.get();
  wire(out, {x}, [op, x, kind]() {
    if (!x->tracked()) return;
    x->ensure_grad();
    const int64_t n = x->size();
    switch (kind) {
      case ActKind::Sigmoid:
        for (int64_t i = 0; i < n; ++i) {
          const double y = op->data[i];
          x->grad[i] += op->grad[i] * y * (1.0 - y);
        }
        break;
      case ActKind::Relu:
        for (int64_t i = 0; i < n; ++i)
          if (x->data[i] > 0.0) x->grad[i] += op->grad[i];
        break;
      case ActKind::SoftmaxRows: {
        const int rows = x->dim(0), cols = x->dim(1);
        for (int r = 0; r < rows; ++r) {
          const double* p = op->data.data() + static_cast<int64_t>(r) * cols;
          const double* g = op->grad.data() + static_cast<int64_t>(r) * cols;
          double dot = 0.0;
          for (int j = 0; j < cols; ++j) dot += g[j] * p[j];
          double* gx = x->grad.data() + static_cast<int64_t>(r) * cols;
          for (int j = 0; j < cols; ++j) gx[j] += p[j] * (g[j] - dot);
        }
        break;
      }
    }
  });
  return out;
}

RowMaxResult reduce_max_rows(const TensorPtr& x) {
  if (x->rank() != 2)
    throw std::invalid_argument("reduce_max_rows: expected rank-2 (N,C), got " +
                                shape_str(x->shape));
  const int n = x->dim(0), c = x->dim(1);
  auto out = make_tensor({c});
  std::vector<int> argmax(static_cast<size_t>(c), 0);
  const bool kinks = kink_tracking();
  for (int j = 0; j < c; ++j) {
    double best = x->data[j], second = -1e300;
    int at = 0;
    for (int i = 1; i < n; ++i) {
      const double v = x->data[static_cast<int64_t>(i) * c + j];
      if (v > best) {
        second = best;
        best = v;
        at = i;
      } else if (v > second) {
        second = v;
      }
    }
    out->data[j] = best;
    argmax[static_cast<size_t>(j)] = at;
    if (kinks && n > 1 && best != second) note_kink_margin(best - second);
  }

  Tensor* op = out.get();
  std::vector<int> arg_copy = argmax;
  wire(out, {x}, [op, x, c, arg_copy = std::move(arg_copy)]() {
    if (!x->tracked()) return;
    x->ensure_grad();
    for (int j = 0; j < c; ++j)
      x->grad[static_cast<int64_t>(arg_copy[static_cast<size_t>(j)]) * c + j] += op->grad[j];
  });
  return {out, std::move(argmax)};
}

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
  if (a->shape != b->shape)
    throw std::invalid_argument("add: shape mismatch " + shape_str(a->shape) + " vs " +
                                shape_str(b->shape));
  auto out = make_tensor(a->shape);
  const int64_t n = a->size();
  for (int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] + b->data[i];
  Tensor* op = out.get();
  wire(out, {a, b}, [op, a, b]() {
    const int64_t n = op->size();
    if (a->tracked()) {
      a->ensure_grad();
      for (int64_t i = 0; i < n; ++i) a->grad[i] += op->grad[i];
    }
    if (b->tracked()) {
      b->ensure_grad();
      for (int64_t i = 0; i < n; ++i) b->grad[i] += op->grad[i];
    }
  });
  return out;
}

TensorPtr add_n(const std::vector<TensorPtr>& terms) {
  if (terms.empty()) throw std::invalid_argument("add_n: need at least one term");
  for (const auto& t : terms)
    if (t->shape != terms[0]->shape)
      throw std::invalid_argument("add_n: shape mismatch " + shape_str(terms[0]->shape) +
                                  " vs " + shape_str(t->shape));
  const int64_t n = terms[0]->size();
  auto out = make_tensor(terms[0]->shape);
  for (int64_t i = 0; i < n; ++i) {
    double acc = terms[0]->data[i];
    for (size_t k = 1; k < terms.size(); ++k) acc += terms[k]->data[i];
    out->data[i] = acc;
  }
  Tensor* op = out.get();
  wire(out, terms, [op, terms]() {
    const int64_t n = op->size();
    for (const auto& t : terms) {
      if (!t->tracked()) continue;
      t->ensure_grad();
      for (int64_t i = 0; i < n; ++i) t->grad[i] += op->grad[i];
    }
  });
  return out;
}

TensorPtr scale(const TensorPtr& x, double s) {
  auto out = make_tensor(x->shape);
  const int64_t n = x->size();
  for (int64_t i = 0; i < n; ++i) out->data[i] = s * x->data[i];
  Tensor* op = out.get();
  wire(out, {x}, [op, x, s]() {
    if (!x->tracked()) return;
    x->ensure_grad();
    const int64_t n = op->size();
    for (int64_t i = 0; i < n; ++i) x->grad[i] += s * op->grad[i];
  });
  return out;
}

TensorPtr reshape(const TensorPtr& x, Shape target) {
  if (shape_numel(target) != x->size())
    throw std::invalid_argument("reshape: cannot view " + shape_str(x->shape) + " as " +
                                shape_str(target));
  auto out = make_tensor(std::move(target));
  out->data = x->data;
  Tensor* op = out.get();
  wire(out, {x}, [op, x]() {
    if (!x->tracked()) return;
    x->ensure_grad();
    const int64_t n = op->size();
    for (int64_t i = 0; i < n; ++i) x->grad[i] += op->grad[i];
  });
  return out;
}

TensorPtr transpose2d(const TensorPtr& x) {
  if (x->rank() != 2)
    throw std::invalid_argument("transpose2d: expected rank-2 input, got " +
                                shape_str(x->shape));
  const int r = x->dim(0), c = x->dim(1);
  auto out = make_tensor({c, r});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out->data[static_cast<int64_t>(j) * r + i] = x->data[static_cast<int64_t>(i) * c + j];
  Tensor* op = out.get();
  wire(out, {x}, [op, x, r, c]() {
    if (!x->tracked()) return;
    x->ensure_grad();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        x->grad[static_cast<int64_t>(i) * c + j] += op->grad[static_cast<int64_t>(j) * r + i];
  });
  return out;
}

TensorPtr slice_batch(const TensorPtr& x, int b) {
  if (x->rank() < 2)
    throw std::invalid_argument("slice_batch: expected rank >= 2, got " + shape_str(x->shape));
  const int bs = x->dim(0);
  if (b < 0 || b >= bs)
    throw std::invalid_argument("slice_batch: index " + std::to_string(b) +
                                " out of range for " + shape_str(x->shape));
  Shape rest(x->shape.begin() + 1, x->shape.end());
  auto out = make_tensor(rest);
  const int64_t n = out->size();
  const int64_t off = static_cast<int64_t>(b) * n;
  std::copy(x->data.begin() + off, x->data.begin() + off + n, out->data.begin());
  Tensor* op = out.get();
  wire(out, {x}, [op, x, off, n]() {
    if (!x->tracked()) return;
    x->ensure_grad();
    for (int64_t i = 0; i < n; ++i) x->grad[off + i] += op->grad[i];
  });
  return out;
}

void sgd_step(ParamSet& params, double lr, double momentum, double weight_decay) {
  for (const auto& name : params.names()) {
    TensorPtr p = params.find(name);
    if (p->grad.size() != p->data.size())
      throw std::runtime_error("sgd_step: parameter '" + name + "' has no gradient");
  }
  for (const auto& name : params.names()) {
    TensorPtr p = params.find(name);
    auto& v = params.momentum(name);
    const int64_t n = p->size();
    for (int64_t i = 0; i < n; ++i) {
      const double g = p->grad[i] + weight_decay * p->data[i];
      v[i] = momentum * v[i] + g;
      p->data[i] -= lr * v[i];
    }
    p->grad.clear();
    p->grad.shrink_to_fit();
  }
}

}  // namespace milscene
