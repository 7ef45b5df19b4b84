#pragma once

#include <algorithm>
#include <cmath>

#include "p3d/rng.hpp"
#include "p3d/tensor.hpp"

// Test-side oracles, kept deliberately naive and independent of the engine:
// a direct seven-loop convolution and the agreement/relative-error metrics the
// acceptance thresholds are stated in. Frozen before the engine was tuned.

namespace ref {

template <class T>
p3d::Tensor<T> conv3d(const p3d::Tensor<T>& x, const p3d::Tensor<T>& k,
                      const p3d::Tensor<T>& b, std::int64_t sT, std::int64_t sH,
                      std::int64_t sW, std::int64_t pT, std::int64_t pH, std::int64_t pW) {
  const auto& xs = x.shape();
  const auto& ks = k.shape();
  const std::int64_t N = xs[0], Cin = xs[1], Tt = xs[2], H = xs[3], W = xs[4];
  const std::int64_t Cout = ks[0], kT = ks[2], kH = ks[3], kW = ks[4];
  const std::int64_t To = (Tt + 2 * pT - kT) / sT + 1;
  const std::int64_t Ho = (H + 2 * pH - kH) / sH + 1;
  const std::int64_t Wo = (W + 2 * pW - kW) / sW + 1;
  p3d::Tensor<T> out(p3d::Shape{N, Cout, To, Ho, Wo});
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t co = 0; co < Cout; ++co)
      for (std::int64_t to = 0; to < To; ++to)
        for (std::int64_t ho = 0; ho < Ho; ++ho)
          for (std::int64_t wo = 0; wo < Wo; ++wo) {
            double acc = static_cast<double>(b[co]);
            for (std::int64_t ci = 0; ci < Cin; ++ci)
              for (std::int64_t kt = 0; kt < kT; ++kt)
                for (std::int64_t kh = 0; kh < kH; ++kh)
                  for (std::int64_t kw = 0; kw < kW; ++kw) {
                    const std::int64_t it = to * sT + kt - pT;
                    const std::int64_t ih = ho * sH + kh - pH;
                    const std::int64_t iw = wo * sW + kw - pW;
                    if (it < 0 || it >= Tt || ih < 0 || ih >= H || iw < 0 || iw >= W)
                      continue;
                    acc += static_cast<double>(
                               k[(((co * Cin + ci) * kT + kt) * kH + kh) * kW + kw]) *
                           static_cast<double>(
                               x[(((n * Cin + ci) * Tt + it) * H + ih) * W + iw]);
                  }
            out[(((n * Cout + co) * To + to) * Ho + ho) * Wo + wo] = static_cast<T>(acc);
          }
  return out;
}

// Max elementwise deviation scaled by the larger of 1 and the tensors' own
// magnitude, so the 1e-12 agreement bound is meaningful for near-zero sums.
template <class T>
double agreement(const p3d::Tensor<T>& a, const p3d::Tensor<T>& b) {
  if (a.shape() != b.shape()) return 1e300;
  double maxdiff = 0, maxmag = 1;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    maxdiff = std::max(maxdiff, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    maxmag = std::max({maxmag, std::abs(static_cast<double>(a[i])),
                       std::abs(static_cast<double>(b[i]))});
  }
  return maxdiff / maxmag;
}

// Relative error convention shared with the gradient-check harness: relative
// for large values, absolute once both fall under 1.
inline double rel_err(double a, double b) {
  const double diff = std::abs(a - b);
  return diff / std::max({1.0, std::abs(a), std::abs(b)});
}

template <class T>
p3d::Tensor<T> random_tensor(p3d::Shape shape, p3d::Rng& rng, T lo = T(-1), T hi = T(1)) {
  return p3d::Tensor<T>::uniform(std::move(shape), rng, lo, hi);
}

// Uniform values with |v| >= margin, for sampling away from abs/relu kinks.
template <class T>
p3d::Tensor<T> random_tensor_away_from_zero(p3d::Shape shape, p3d::Rng& rng, T margin,
                                            T hi = T(1)) {
  p3d::Tensor<T> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    const T mag = static_cast<T>(rng.uniform(static_cast<double>(margin), static_cast<double>(hi)));
    t[i] = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

}  // namespace ref
