// Shared test helpers: random tensors, independent brute-force oracles, and
// kink-aware gradient check sampling.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <stdexcept>
#include <vector>

#include "milscene/gradcheck.hpp"
#include "milscene/tensor.hpp"

namespace testsupport {

using milscene::Shape;
using milscene::TensorPtr;

inline TensorPtr random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0,
                               double hi = 1.0, bool requires_grad = false) {
  auto t = milscene::make_tensor(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : t->data) v = dist(rng);
  t->requires_grad = requires_grad;
  return t;
}

// Test-only scalar reduction node so gradient checks have a scalar root.
inline TensorPtr sum_all(const TensorPtr& x) {
  auto out = milscene::make_tensor({1}, 0.0);
  for (double v : x->data) out->data[0] += v;
  if (milscene::grad_enabled() && x->tracked()) {
    out->parents = {x};
    milscene::Tensor* op = out.get();
    out->backprop = [op, x]() {
      x->ensure_grad();
      for (auto& g : x->grad) g += op->grad[0];
    };
  }
  return out;
}

// --- independent brute-force oracles -------------------------------------

inline std::vector<double> pointwise_conv_oracle(const std::vector<double>& x, int c_in, int h,
                                                 int w, const std::vector<double>& k,
                                                 int c_out) {
  std::vector<double> out(static_cast<size_t>(c_out) * h * w, 0.0);
  for (int o = 0; o < c_out; ++o)
    for (int i = 0; i < c_in; ++i)
      for (int r = 0; r < h; ++r)
        for (int col = 0; col < w; ++col)
          out[(static_cast<size_t>(o) * h + r) * w + col] +=
              k[static_cast<size_t>(o) * c_in + i] *
              x[(static_cast<size_t>(i) * h + r) * w + col];
  return out;
}

// axis 0 = frequency (rows), axis 1 = time (columns); same_pad uses zeros.
inline std::vector<double> depthwise_conv_oracle(const std::vector<double>& x, int c, int h,
                                                 int w, const std::vector<double>& k, int kk,
                                                 int axis, bool same_pad) {
  const int left = same_pad ? (kk - 1) / 2 : 0;
  const int oh = axis == 0 ? (same_pad ? h : h - kk + 1) : h;
  const int ow = axis == 1 ? (same_pad ? w : w - kk + 1) : w;
  std::vector<double> out(static_cast<size_t>(c) * oh * ow, 0.0);
  for (int ch = 0; ch < c; ++ch)
    for (int r = 0; r < oh; ++r)
      for (int col = 0; col < ow; ++col) {
        double acc = 0.0;
        for (int t = 0; t < kk; ++t) {
          const int rr = axis == 0 ? r + t - left : r;
          const int cc = axis == 1 ? col + t - left : col;
          if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
          acc += k[static_cast<size_t>(ch) * kk + t] *
                 x[(static_cast<size_t>(ch) * h + rr) * w + cc];
        }
        out[(static_cast<size_t>(ch) * oh + r) * ow + col] = acc;
      }
  return out;
}

inline std::vector<double> dense_oracle(const std::vector<double>& x,
                                        const std::vector<double>& w,
                                        const std::vector<double>& b, int c, int d) {
  std::vector<double> out(static_cast<size_t>(c));
  for (int i = 0; i < c; ++i) {
    double acc = b[static_cast<size_t>(i)];
    for (int j = 0; j < d; ++j) acc += w[static_cast<size_t>(i) * d + j] * x[static_cast<size_t>(j)];
    out[static_cast<size_t>(i)] = acc;
  }
  return out;
}

inline int majority_vote_oracle(const std::vector<double>& scores, int n, int c) {
  std::vector<int> votes(static_cast<size_t>(c), 0);
  for (int i = 0; i < n; ++i) {
    int arg = 0;
    for (int j = 1; j < c; ++j)
      if (scores[static_cast<size_t>(i) * c + j] > scores[static_cast<size_t>(i) * c + arg])
        arg = j;
    ++votes[static_cast<size_t>(arg)];
  }
  int best = 0;
  for (int j = 1; j < c; ++j)
    if (votes[static_cast<size_t>(j)] > votes[static_cast<size_t>(best)]) best = j;
  return best;
}

// AUC = P(s+ > s-) + 0.5 P(s+ = s-) over all positive/negative pairs.
inline double pairwise_auc_oracle(const std::vector<double>& scores,
                                  const std::vector<uint8_t>& labels) {
  double wins = 0.0;
  int64_t pairs = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (!labels[i]) continue;
    for (size_t j = 0; j < scores.size(); ++j) {
      if (labels[j]) continue;
      ++pairs;
      if (scores[i] > scores[j]) {
        wins += 1.0;
      } else if (scores[i] == scores[j]) {
        wins += 0.5;
      }
    }
  }
  if (pairs == 0) throw std::invalid_argument("auc oracle: need both classes");
  return wins / static_cast<double>(pairs);
}

// --- kink-aware gradient checking -----------------------------------------

// Runs grad_check at sample points where the forward pass stays at least
// margin_min away from every relu/pool/argmax kink (grad_check requires
// differentiability at the sampled point). Returns the worst relative error
// over `accept` accepted points.
inline double sampled_grad_check(
    const milscene::ScalarFn& fn,
    const std::function<std::vector<TensorPtr>(std::mt19937_64&)>& make_inputs, int accept,
    uint64_t base_seed, double margin_min = 1e-3, int max_attempts = 400) {
  double worst = 0.0;
  int accepted = 0;
  for (int attempt = 0; attempt < max_attempts && accepted < accept; ++attempt) {
    std::mt19937_64 rng(base_seed + static_cast<uint64_t>(attempt) * 7919);
    auto inputs = make_inputs(rng);
    {
      milscene::KinkMeter meter;
      milscene::GradPause off;
      fn(inputs);
      if (meter.min_margin() < margin_min) continue;
    }
    worst = std::max(worst, milscene::grad_check(fn, inputs));
    ++accepted;
  }
  if (accepted < accept)
    throw std::runtime_error("sampled_grad_check: too few kink-free sample points");
  return worst;
}

}  // namespace testsupport
