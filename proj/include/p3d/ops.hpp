#pragma once

#include <cmath>
#include <cstring>
#include <vector>

#include "p3d/autodiff.hpp"
#include "p3d/gemm.hpp"

// Differentiable tensor ops. Activations use the [N,C,T,H,W] layout; every
// convolution lowers to im2col plus the accumulating GEMM kernels, and each
// backward closure recomputes its column buffer instead of caching it (the
// buffers are large, the copies are cheap next to the matmuls).
//
// Derivative conventions at kinks: abs and relu both take derivative 0 at 0,
// matching the elementwise sign/mask implementations below. Finite-difference
// checks use inputs bounded away from the kinks.

namespace p3d {

namespace detail {

struct ConvGeom {
  std::int64_t N, Cin, T, H, W;
  std::int64_t Cout, kT, kH, kW;
  std::int64_t sT, sH, sW, pT, pH, pW;
  std::int64_t To, Ho, Wo;

  std::int64_t ck() const { return Cin * kT * kH * kW; }
  std::int64_t patches() const { return To * Ho * Wo; }
};

inline std::int64_t conv_extent(std::int64_t in, std::int64_t k, std::int64_t stride,
                                std::int64_t pad, const char* opname, const char* axis) {
  const std::int64_t out = (in + 2 * pad - k) / stride + 1;
  if (in + 2 * pad < k || out < 1)
    throw ShapeError(std::string(opname) + ": output extent on " + axis +
                     " would be empty (input " + std::to_string(in) + ", kernel " +
                     std::to_string(k) + ", pad " + std::to_string(pad) + ", stride " +
                     std::to_string(stride) + ")");
  return out;
}

inline ConvGeom conv_geometry(const Shape& x, const Shape& k, std::int64_t sT,
                              std::int64_t sH, std::int64_t sW, std::int64_t pT,
                              std::int64_t pH, std::int64_t pW, const char* opname) {
  if (x.size() != 5)
    throw ShapeError(std::string(opname) + ": input must be [N,C,T,H,W], got " +
                     shape_str(x));
  if (k.size() != 5)
    throw ShapeError(std::string(opname) + ": kernel must be [Cout,Cin,kT,kH,kW], got " +
                     shape_str(k));
  if (sT < 1 || sH < 1 || sW < 1 || pT < 0 || pH < 0 || pW < 0)
    throw ShapeError(std::string(opname) + ": strides must be positive, pads non-negative");
  ConvGeom g;
  g.N = x[0], g.Cin = x[1], g.T = x[2], g.H = x[3], g.W = x[4];
  g.Cout = k[0], g.kT = k[2], g.kH = k[3], g.kW = k[4];
  if (k[1] != g.Cin)
    throw ShapeError(std::string(opname) + ": input C=" + std::to_string(g.Cin) +
                     " does not match kernel Cin=" + std::to_string(k[1]));
  g.sT = sT, g.sH = sH, g.sW = sW, g.pT = pT, g.pH = pH, g.pW = pW;
  g.To = conv_extent(g.T, g.kT, sT, pT, opname, "T");
  g.Ho = conv_extent(g.H, g.kH, sH, pH, opname, "H");
  g.Wo = conv_extent(g.W, g.kW, sW, pW, opname, "W");
  return g;
}

// Unfold one sample into col[ck, patches]. Row order matches the flattened
// kernel layout [Cin][kT][kH][kW]; out-of-range taps contribute zeros.
template <class T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const std::int64_t P = g.patches();
  const std::int64_t HoWo = g.Ho * g.Wo;
  std::int64_t ck = 0;
  for (std::int64_t cin = 0; cin < g.Cin; ++cin)
    for (std::int64_t kt = 0; kt < g.kT; ++kt)
      for (std::int64_t kh = 0; kh < g.kH; ++kh)
        for (std::int64_t kw = 0; kw < g.kW; ++kw, ++ck) {
          T* row = col + ck * P;
          for (std::int64_t to = 0; to < g.To; ++to) {
            const std::int64_t it = to * g.sT + kt - g.pT;
            T* trow = row + to * HoWo;
            if (it < 0 || it >= g.T) {
              std::memset(trow, 0, static_cast<std::size_t>(HoWo) * sizeof(T));
              continue;
            }
            for (std::int64_t ho = 0; ho < g.Ho; ++ho) {
              const std::int64_t ih = ho * g.sH + kh - g.pH;
              T* orow = trow + ho * g.Wo;
              if (ih < 0 || ih >= g.H) {
                std::memset(orow, 0, static_cast<std::size_t>(g.Wo) * sizeof(T));
                continue;
              }
              const T* src = x + ((cin * g.T + it) * g.H + ih) * g.W;
              if (g.sW == 1) {
                const std::int64_t iw0 = kw - g.pW;
                const std::int64_t lo = std::max<std::int64_t>(0, -iw0);
                const std::int64_t hi = std::min(g.Wo, g.W - iw0);
                for (std::int64_t wo = 0; wo < lo; ++wo) orow[wo] = T(0);
                if (hi > lo)
                  std::memcpy(orow + lo, src + iw0 + lo,
                              static_cast<std::size_t>(hi - lo) * sizeof(T));
                for (std::int64_t wo = std::max(lo, hi); wo < g.Wo; ++wo) orow[wo] = T(0);
              } else {
                for (std::int64_t wo = 0; wo < g.Wo; ++wo) {
                  const std::int64_t iw = wo * g.sW + kw - g.pW;
                  orow[wo] = (iw >= 0 && iw < g.W) ? src[iw] : T(0);
                }
              }
            }
          }
        }
}

// Scatter-add the column gradient back onto one input sample.
template <class T>
void col2im_add(const T* col, const ConvGeom& g, T* dx) {
  const std::int64_t P = g.patches();
  const std::int64_t HoWo = g.Ho * g.Wo;
  std::int64_t ck = 0;
  for (std::int64_t cin = 0; cin < g.Cin; ++cin)
    for (std::int64_t kt = 0; kt < g.kT; ++kt)
      for (std::int64_t kh = 0; kh < g.kH; ++kh)
        for (std::int64_t kw = 0; kw < g.kW; ++kw, ++ck) {
          const T* row = col + ck * P;
          for (std::int64_t to = 0; to < g.To; ++to) {
            const std::int64_t it = to * g.sT + kt - g.pT;
            if (it < 0 || it >= g.T) continue;
            const T* trow = row + to * HoWo;
            for (std::int64_t ho = 0; ho < g.Ho; ++ho) {
              const std::int64_t ih = ho * g.sH + kh - g.pH;
              if (ih < 0 || ih >= g.H) continue;
              const T* orow = trow + ho * g.Wo;
              T* dst = dx + ((cin * g.T + it) * g.H + ih) * g.W;
              if (g.sW == 1) {
                const std::int64_t iw0 = kw - g.pW;
                const std::int64_t lo = std::max<std::int64_t>(0, -iw0);
                const std::int64_t hi = std::min(g.Wo, g.W - iw0);
                for (std::int64_t wo = lo; wo < hi; ++wo) dst[iw0 + wo] += orow[wo];
              } else {
                for (std::int64_t wo = 0; wo < g.Wo; ++wo) {
                  const std::int64_t iw = wo * g.sW + kw - g.pW;
                  if (iw >= 0 && iw < g.W) dst[iw] += orow[wo];
                }
              }
            }
          }
        }
}

template <class T>
bool pointwise_no_copy(const ConvGeom& g) {
  return g.kT == 1 && g.kH == 1 && g.kW == 1 && g.sT == 1 && g.sH == 1 && g.sW == 1 &&
         g.pT == 0 && g.pH == 0 && g.pW == 0;
}

}  // namespace detail

// General convolution over [N,C,T,H,W]. The named wrappers below pin the
// kernel shapes the network actually uses; this entry point also serves the
// dense 3-D baseline.
template <class T>
Var<T> conv3d(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias, std::int64_t sT,
              std::int64_t sH, std::int64_t sW, std::int64_t pT, std::int64_t pH,
              std::int64_t pW, const char* opname = "conv3d") {
  const auto g =
      detail::conv_geometry(x->value.shape(), kernel->value.shape(), sT, sH, sW, pT, pH, pW, opname);
  if (bias->value.shape() != Shape{g.Cout})
    throw ShapeError(std::string(opname) + ": bias shape " + shape_str(bias->value.shape()) +
                     ", expected [" + std::to_string(g.Cout) + "]");

  const std::int64_t CK = g.ck(), P = g.patches();
  const bool direct = detail::pointwise_no_copy<T>(g);
  Tensor<T> out(Shape{g.N, g.Cout, g.To, g.Ho, g.Wo});
  {
    std::vector<T> col(direct ? 0 : static_cast<std::size_t>(CK * P));
    const T* kp = kernel->value.data();
    const T* bp = bias->value.data();
    for (std::int64_t n = 0; n < g.N; ++n) {
      const T* xs = x->value.data() + n * g.Cin * g.T * g.H * g.W;
      T* os = out.data() + n * g.Cout * P;
      const T* cols = direct ? xs : col.data();
      if (!direct) detail::im2col(xs, g, col.data());
      gemm_nn(g.Cout, P, CK, kp, CK, cols, P, os, P);
      for (std::int64_t co = 0; co < g.Cout; ++co) {
        const T bv = bp[co];
        T* row = os + co * P;
        for (std::int64_t p = 0; p < P; ++p) row[p] += bv;
      }
    }
  }
  madd_meter::add(static_cast<std::uint64_t>(g.N) * g.Cout * CK * P);

  auto node = make_constant(std::move(out), opname);
  if (grad_enabled() && detail::any_requires_grad<T>({x, kernel, bias})) {
    node->requires_grad = true;
    node->parents = {x, kernel, bias};
    Node<T>* self = node.get();
    auto xn = x, kn = kernel, bn = bias;
    node->backward_fn = [self, xn, kn, bn, g, CK, P, direct]() {
      const T* dout = self->grad.data();
      const bool need_x = xn->requires_grad, need_k = kn->requires_grad,
                 need_b = bn->requires_grad;
      if (need_x) xn->ensure_grad();
      if (need_k) kn->ensure_grad();
      if (need_b) bn->ensure_grad();
      std::vector<T> col((need_k && !direct) ? static_cast<std::size_t>(CK * P) : 0);
      std::vector<T> colg((need_x && !direct) ? static_cast<std::size_t>(CK * P) : 0);
      for (std::int64_t n = 0; n < g.N; ++n) {
        const T* ds = dout + n * g.Cout * P;
        const T* xs = xn->value.data() + n * g.Cin * g.T * g.H * g.W;
        if (need_k) {
          const T* cols = direct ? xs : col.data();
          if (!direct) detail::im2col(xs, g, col.data());
          gemm_nt(g.Cout, CK, P, ds, P, cols, P, kn->grad.data(), CK);
        }
        if (need_x) {
          T* dxs = xn->grad.data() + n * g.Cin * g.T * g.H * g.W;
          if (direct) {
            gemm_tn(CK, P, g.Cout, kn->value.data(), CK, ds, P, dxs, P);
          } else {
            std::fill(colg.begin(), colg.end(), T(0));
            gemm_tn(CK, P, g.Cout, kn->value.data(), CK, ds, P, colg.data(), P);
            detail::col2im_add(colg.data(), g, dxs);
          }
        }
        if (need_b) {
          T* db = bn->grad.data();
          for (std::int64_t co = 0; co < g.Cout; ++co) {
            const T* row = ds + co * P;
            T s = 0;
            for (std::int64_t p = 0; p < P; ++p) s += row[p];
            db[co] += s;
          }
        }
      }
    };
  }
  return node;
}

// Spatial path: [1,kH,kW] taps, stride and pad act on H and W only.
template <class T>
Var<T> conv_spatial(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias,
                    std::int64_t stride, std::int64_t pad) {
  const auto& k = kernel->value.shape();
  if (k.size() != 5 || k[2] != 1 || k[3] != k[4])
    throw ShapeError("conv_spatial: kernel must be [Cout,Cin,1,k,k], got " + shape_str(k));
  return conv3d(x, kernel, bias, 1, stride, stride, 0, pad, pad, "conv_spatial");
}

// Temporal path: [kT,1,1] taps, stride fixed at 1, pad acts on T only.
template <class T>
Var<T> conv_temporal(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias,
                     std::int64_t pad) {
  const auto& k = kernel->value.shape();
  if (k.size() != 5 || k[3] != 1 || k[4] != 1)
    throw ShapeError("conv_temporal: kernel must be [Cout,Cin,kT,1,1], got " + shape_str(k));
  return conv3d(x, kernel, bias, 1, 1, 1, pad, 0, 0, "conv_temporal");
}

// Channel mixer: kernel is stored [Cout,Cin]; stride (when 2) downsamples H,W.
template <class T>
Var<T> conv_pointwise(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias,
                      std::int64_t stride = 1) {
  const auto& k = kernel->value.shape();
  if (k.size() != 2)
    throw ShapeError("conv_pointwise: kernel must be [Cout,Cin], got " + shape_str(k));
  // Same values viewed as a 5-D kernel; gradient flows to the 2-D parameter.
  auto view = make_constant(kernel->value.reshaped(Shape{k[0], k[1], 1, 1, 1}), "view");
  if (grad_enabled() && kernel->requires_grad) {
    view->requires_grad = true;
    view->parents = {kernel};
    Node<T>* self = view.get();
    auto kp = kernel;
    view->backward_fn = [self, kp]() {
      kp->ensure_grad();
      const std::int64_t n = kp->grad.numel();
      for (std::int64_t i = 0; i < n; ++i) kp->grad[i] += self->grad[i];
    };
  }
  return conv3d(x, view, bias, 1, stride, stride, 0, 0, 0, "conv_pointwise");
}

namespace detail {

// Odometer walk over a broadcast index space: calls f(offset_a, offset_b,
// offset_out) once per output element. Strides are zeroed on broadcast axes.
template <class T, class F>
void broadcast_iterate(const Shape& out, const Shape& a, const Shape& b, F&& f) {
  const int rank = static_cast<int>(out.size());
  std::vector<std::int64_t> sa(rank), sb(rank), idx(rank, 0);
  std::int64_t stride = 1;
  for (int i = rank - 1; i >= 0; --i) {
    sa[i] = (a[i] == 1 && out[i] != 1) ? 0 : stride;
    stride *= a[i];
  }
  stride = 1;
  for (int i = rank - 1; i >= 0; --i) {
    sb[i] = (b[i] == 1 && out[i] != 1) ? 0 : stride;
    stride *= b[i];
  }
  const std::int64_t total = shape_numel(out);
  std::int64_t oa = 0, ob = 0;
  for (std::int64_t o = 0; o < total; ++o) {
    f(oa, ob, o);
    for (int i = rank - 1; i >= 0; --i) {
      ++idx[i];
      oa += sa[i];
      ob += sb[i];
      if (idx[i] < out[i]) break;
      oa -= sa[i] * out[i];
      ob -= sb[i] * out[i];
      idx[i] = 0;
    }
  }
}

// Sum a full-shape gradient down onto a (possibly broadcast) parent shape.
template <class T>
void reduce_into(const Tensor<T>& src, Tensor<T>& dst) {
  if (src.shape() == dst.shape()) {
    const std::int64_t n = src.numel();
    for (std::int64_t i = 0; i < n; ++i) dst[i] += src[i];
    return;
  }
  broadcast_iterate<T>(src.shape(), dst.shape(), dst.shape(),
                       [&](std::int64_t di, std::int64_t, std::int64_t si) {
                         dst[di] += src[si];
                       });
}

enum class BinKind { Add, Sub, Mul };

template <class T>
Var<T> binary_op(const Var<T>& a, const Var<T>& b, BinKind kind, const char* opname) {
  const Shape out_shape = broadcast_shapes(a->value.shape(), b->value.shape());
  Tensor<T> out(out_shape);
  const bool same = a->value.shape() == b->value.shape();
  auto apply = [kind](T x, T y) {
    switch (kind) {
      case BinKind::Add: return x + y;
      case BinKind::Sub: return x - y;
      default: return x * y;
    }
  };
  if (same) {
    const std::int64_t n = out.numel();
    const T* pa = a->value.data();
    const T* pb = b->value.data();
    T* po = out.data();
    switch (kind) {
      case BinKind::Add:
        for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
        break;
      case BinKind::Sub:
        for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
        break;
      case BinKind::Mul:
        for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
        break;
    }
  } else {
    broadcast_iterate<T>(out_shape, a->value.shape(), b->value.shape(),
                         [&](std::int64_t ia, std::int64_t ib, std::int64_t io) {
                           out[io] = apply(a->value[ia], b->value[ib]);
                         });
  }
  madd_meter::add(static_cast<std::uint64_t>(out.numel()));

  auto node = make_constant(std::move(out), opname);
  if (grad_enabled() && any_requires_grad<T>({a, b})) {
    node->requires_grad = true;
    node->parents = {a, b};
    Node<T>* self = node.get();
    auto an = a, bn = b;
    node->backward_fn = [self, an, bn, kind]() {
      const Tensor<T>& g = self->grad;
      if (an->requires_grad) {
        an->ensure_grad();
        if (kind == BinKind::Mul) {
          Tensor<T> tmp(g.shape());
          broadcast_iterate<T>(g.shape(), g.shape(), bn->value.shape(),
                               [&](std::int64_t ig, std::int64_t ib, std::int64_t io) {
                                 tmp[io] = g[ig] * bn->value[ib];
                               });
          reduce_into(tmp, an->grad);
        } else {
          reduce_into(g, an->grad);
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        if (kind == BinKind::Mul) {
          Tensor<T> tmp(g.shape());
          broadcast_iterate<T>(g.shape(), g.shape(), an->value.shape(),
                               [&](std::int64_t ig, std::int64_t ia, std::int64_t io) {
                                 tmp[io] = g[ig] * an->value[ia];
                               });
          reduce_into(tmp, bn->grad);
        } else if (kind == BinKind::Sub) {
          Tensor<T> tmp(g.shape());
          for (std::int64_t i = 0; i < tmp.numel(); ++i) tmp[i] = -g[i];
          reduce_into(tmp, bn->grad);
        } else {
          reduce_into(g, bn->grad);
        }
      }
    };
  }
  return node;
}

}  // namespace detail

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return detail::binary_op(a, b, detail::BinKind::Add, "add");
}
template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return detail::binary_op(a, b, detail::BinKind::Sub, "sub");
}
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return detail::binary_op(a, b, detail::BinKind::Mul, "mul");
}

namespace detail {

template <class T, class FwdF, class BwdF>
Var<T> unary_op(const Var<T>& x, const char* opname, FwdF fwd, BwdF bwd_factor) {
  Tensor<T> out(x->value.shape());
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out[i] = fwd(x->value[i]);
  madd_meter::add(static_cast<std::uint64_t>(n));

  auto node = make_constant(std::move(out), opname);
  if (grad_enabled() && x->requires_grad) {
    node->requires_grad = true;
    node->parents = {x};
    Node<T>* self = node.get();
    auto xn = x;
    node->backward_fn = [self, xn, bwd_factor]() {
      xn->ensure_grad();
      const std::int64_t m = self->grad.numel();
      for (std::int64_t i = 0; i < m; ++i)
        xn->grad[i] += self->grad[i] * bwd_factor(xn->value[i], self->value[i]);
    };
  }
  return node;
}

}  // namespace detail

template <class T>
Var<T> abs_val(const Var<T>& x) {
  return detail::unary_op(
      x, "abs", [](T v) { return v < T(0) ? -v : v; },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  return detail::unary_op(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); },
      [](T, T out) { return out > T(0) ? T(1) : T(0); });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary_op(
      x, "sigmoid",
      [](T v) {
        // Split by sign so exp never overflows.
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T out) { return out * (T(1) - out); });
}

// Mean over T,H,W per (n,c); output keeps rank as [N,C,1,1,1] so it can feed
// the broadcast ops directly. Costed at one madd per input element.
template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
  const auto& s = x->value.shape();
  if (s.size() != 5)
    throw ShapeError("global_avg_pool: input must be [N,C,T,H,W], got " + shape_str(s));
  const std::int64_t N = s[0], C = s[1], M = s[2] * s[3] * s[4];
  Tensor<T> out(Shape{N, C, 1, 1, 1});
  const T inv = T(1) / static_cast<T>(M);
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    const T* src = x->value.data() + nc * M;
    T acc = 0;
    for (std::int64_t i = 0; i < M; ++i) acc += src[i];
    out[nc] = acc * inv;
  }
  madd_meter::add(static_cast<std::uint64_t>(x->value.numel()));

  auto node = make_constant(std::move(out), "global_avg_pool");
  if (grad_enabled() && x->requires_grad) {
    node->requires_grad = true;
    node->parents = {x};
    Node<T>* self = node.get();
    auto xn = x;
    node->backward_fn = [self, xn, N, C, M, inv]() {
      xn->ensure_grad();
      for (std::int64_t nc = 0; nc < N * C; ++nc) {
        const T g = self->grad[nc] * inv;
        T* dst = xn->grad.data() + nc * M;
        for (std::int64_t i = 0; i < M; ++i) dst[i] += g;
      }
    };
  }
  return node;
}

// Stack along C. Inputs must agree on every other axis; the error names the
// first axis that differs.
template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  const auto& s0 = xs[0]->value.shape();
  if (s0.size() != 5)
    throw ShapeError("concat_channels: inputs must be [N,C,T,H,W], got " + shape_str(s0));
  std::int64_t Csum = 0;
  for (const auto& x : xs) {
    const auto& s = x->value.shape();
    if (s.size() != 5)
      throw ShapeError("concat_channels: inputs must be [N,C,T,H,W], got " + shape_str(s));
    for (int axis : {0, 2, 3, 4})
      if (s[static_cast<std::size_t>(axis)] != s0[static_cast<std::size_t>(axis)])
        throw ShapeError("concat_channels: extent mismatch on " + axis_name(5, axis) +
                         " (" + shape_str(s0) + " vs " + shape_str(s) + ")");
    Csum += s[1];
  }
  const std::int64_t N = s0[0], M = s0[2] * s0[3] * s0[4];
  Tensor<T> out(Shape{N, Csum, s0[2], s0[3], s0[4]});
  for (std::int64_t n = 0; n < N; ++n) {
    std::int64_t coff = 0;
    for (const auto& x : xs) {
      const std::int64_t Cx = x->value.dim(1);
      std::memcpy(out.data() + (n * Csum + coff) * M, x->value.data() + n * Cx * M,
                  static_cast<std::size_t>(Cx * M) * sizeof(T));
      coff += Cx;
    }
  }

  auto node = make_constant(std::move(out), "concat_channels");
  if (grad_enabled() && detail::any_requires_grad(xs)) {
    node->requires_grad = true;
    node->parents = xs;
    Node<T>* self = node.get();
    auto inputs = xs;
    node->backward_fn = [self, inputs, N, Csum, M]() {
      std::int64_t coff = 0;
      for (const auto& x : inputs) {
        const std::int64_t Cx = x->value.dim(1);
        if (x->requires_grad) {
          x->ensure_grad();
          for (std::int64_t n = 0; n < N; ++n) {
            const T* src = self->grad.data() + (n * Csum + coff) * M;
            T* dst = x->grad.data() + n * Cx * M;
            for (std::int64_t i = 0; i < Cx * M; ++i) dst[i] += src[i];
          }
        }
        coff += Cx;
      }
    };
  }
  return node;
}

// Fully connected head: x[N,Cin] * W[Cout,Cin]^T + b.
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const auto& xs = x->value.shape();
  const auto& ws = weight->value.shape();
  if (xs.size() != 2)
    throw ShapeError("linear: input must be [N,Cin], got " + shape_str(xs));
  if (ws.size() != 2)
    throw ShapeError("linear: weight must be [Cout,Cin], got " + shape_str(ws));
  if (xs[1] != ws[1])
    throw ShapeError("linear: input Cin=" + std::to_string(xs[1]) +
                     " does not match weight Cin=" + std::to_string(ws[1]));
  const std::int64_t N = xs[0], Cin = xs[1], Cout = ws[0];
  if (bias->value.shape() != Shape{Cout})
    throw ShapeError("linear: bias shape " + shape_str(bias->value.shape()) +
                     ", expected [" + std::to_string(Cout) + "]");

  Tensor<T> out(Shape{N, Cout});
  gemm_nt(N, Cout, Cin, x->value.data(), Cin, weight->value.data(), Cin, out.data(), Cout);
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < Cout; ++c) out[n * Cout + c] += bias->value[c];
  madd_meter::add(static_cast<std::uint64_t>(N) * Cout * Cin);

  auto node = make_constant(std::move(out), "linear");
  if (grad_enabled() && detail::any_requires_grad<T>({x, weight, bias})) {
    node->requires_grad = true;
    node->parents = {x, weight, bias};
    Node<T>* self = node.get();
    auto xn = x, wn = weight, bn = bias;
    node->backward_fn = [self, xn, wn, bn, N, Cin, Cout]() {
      const T* g = self->grad.data();
      if (xn->requires_grad) {
        xn->ensure_grad();
        gemm_nn(N, Cin, Cout, g, Cout, wn->value.data(), Cin, xn->grad.data(), Cin);
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        gemm_tn(Cout, Cin, N, g, Cout, xn->value.data(), Cin, wn->grad.data(), Cin);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::int64_t n = 0; n < N; ++n)
          for (std::int64_t c = 0; c < Cout; ++c) bn->grad[c] += g[n * Cout + c];
      }
    };
  }
  return node;
}

// Copy-reshape; gradient flows back with the inverse reshape.
template <class T>
Var<T> reshape(const Var<T>& x, Shape new_shape) {
  auto node = make_constant(x->value.reshaped(std::move(new_shape)), "reshape");
  if (grad_enabled() && x->requires_grad) {
    node->requires_grad = true;
    node->parents = {x};
    Node<T>* self = node.get();
    auto xn = x;
    node->backward_fn = [self, xn]() {
      xn->ensure_grad();
      const std::int64_t n = self->grad.numel();
      for (std::int64_t i = 0; i < n; ++i) xn->grad[i] += self->grad[i];
    };
  }
  return node;
}

// [N,C,1,1,1] or any tail of singletons down to [N,C] for the head.
template <class T>
Var<T> flatten2(const Var<T>& x) {
  const auto& s = x->value.shape();
  if (s.empty()) throw ShapeError("flatten2: scalar input");
  std::int64_t rest = 1;
  for (std::size_t i = 1; i < s.size(); ++i) rest *= s[i];
  return reshape(x, Shape{s[0], rest});
}

enum class BatchNormMode { train, eval };

template <class T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;

  explicit BatchNormState(std::int64_t channels = 0)
      : running_mean(channels > 0 ? Tensor<T>(Shape{channels}) : Tensor<T>()),
        running_var(channels > 0 ? Tensor<T>(Shape{channels}, T(1)) : Tensor<T>()) {}
};

// Per-channel batch normalization over [N,C,T,H,W] with biased batch variance.
// Train mode normalizes by batch statistics, updates the running buffers as a
// side effect, and backpropagates through the statistics; eval mode is a fixed
// affine map using the running buffers. Stat accumulation is done in double so
// float runs stay well conditioned.
template <class T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  BatchNormState<T>& state, BatchNormMode mode, double momentum = 0.1,
                  double eps = 1e-5) {
  const auto& s = x->value.shape();
  if (s.size() != 5)
    throw ShapeError("batch_norm: input must be [N,C,T,H,W], got " + shape_str(s));
  const std::int64_t N = s[0], C = s[1], M = s[2] * s[3] * s[4];
  const std::pair<const char*, const Tensor<T>*> per_channel[] = {
      {"gamma", &gamma->value},
      {"beta", &beta->value},
      {"running_mean", &state.running_mean},
      {"running_var", &state.running_var}};
  for (const auto& [name, t] : per_channel)
    if (t->shape() != Shape{C})
      throw ShapeError("batch_norm: " + std::string(name) + " shape " + shape_str(t->shape()) +
                       ", expected [" + std::to_string(C) + "]");
  const std::int64_t count = N * M;
  if (mode == BatchNormMode::train && count < 2)
    throw ShapeError("batch_norm: train mode needs at least 2 values per channel, got " +
                     std::to_string(count));

  Tensor<T> out(s);
  std::vector<T> mean_c(static_cast<std::size_t>(C)), inv_std_c(static_cast<std::size_t>(C));
  const T* xp = x->value.data();
  T* op = out.data();

  for (std::int64_t c = 0; c < C; ++c) {
    T mu, inv_std;
    if (mode == BatchNormMode::train) {
      double acc = 0;
      for (std::int64_t n = 0; n < N; ++n) {
        const T* blk = xp + (n * C + c) * M;
        for (std::int64_t i = 0; i < M; ++i) acc += blk[i];
      }
      mu = static_cast<T>(acc / static_cast<double>(count));
      double vacc = 0;
      for (std::int64_t n = 0; n < N; ++n) {
        const T* blk = xp + (n * C + c) * M;
        for (std::int64_t i = 0; i < M; ++i) {
          const double d = static_cast<double>(blk[i]) - static_cast<double>(mu);
          vacc += d * d;
        }
      }
      const T var = static_cast<T>(vacc / static_cast<double>(count));
      inv_std = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var) + eps));
      state.running_mean[c] =
          static_cast<T>((1.0 - momentum) * state.running_mean[c] + momentum * mu);
      state.running_var[c] =
          static_cast<T>((1.0 - momentum) * state.running_var[c] + momentum * var);
    } else {
      mu = state.running_mean[c];
      inv_std =
          static_cast<T>(1.0 / std::sqrt(static_cast<double>(state.running_var[c]) + eps));
    }
    mean_c[static_cast<std::size_t>(c)] = mu;
    inv_std_c[static_cast<std::size_t>(c)] = inv_std;
    const T scale = gamma->value[c] * inv_std;
    const T shift = beta->value[c] - mu * scale;
    for (std::int64_t n = 0; n < N; ++n) {
      const T* blk = xp + (n * C + c) * M;
      T* ob = op + (n * C + c) * M;
      for (std::int64_t i = 0; i < M; ++i) ob[i] = blk[i] * scale + shift;
    }
  }
  madd_meter::add(static_cast<std::uint64_t>(x->value.numel()));

  auto node = make_constant(std::move(out), "batch_norm");
  if (grad_enabled() && detail::any_requires_grad<T>({x, gamma, beta})) {
    node->requires_grad = true;
    node->parents = {x, gamma, beta};
    Node<T>* self = node.get();
    auto xn = x, gn = gamma, bn = beta;
    const bool train = mode == BatchNormMode::train;
    node->backward_fn = [self, xn, gn, bn, mean_c, inv_std_c, N, C, M, train]() {
      const std::int64_t count = N * M;
      const T invM = T(1) / static_cast<T>(count);
      if (xn->requires_grad) xn->ensure_grad();
      if (gn->requires_grad) gn->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      for (std::int64_t c = 0; c < C; ++c) {
        const T mu = mean_c[static_cast<std::size_t>(c)];
        const T inv = inv_std_c[static_cast<std::size_t>(c)];
        double s1 = 0, s2 = 0;  // sum(dy), sum(dy * xhat)
        for (std::int64_t n = 0; n < N; ++n) {
          const T* g = self->grad.data() + (n * C + c) * M;
          const T* xv = xn->value.data() + (n * C + c) * M;
          for (std::int64_t i = 0; i < M; ++i) {
            s1 += g[i];
            s2 += static_cast<double>(g[i]) * ((xv[i] - mu) * inv);
          }
        }
        if (gn->requires_grad) gn->grad[c] += static_cast<T>(s2);
        if (bn->requires_grad) bn->grad[c] += static_cast<T>(s1);
        if (xn->requires_grad) {
          const T scale = gn->value[c] * inv;
          if (train) {
            const T m1 = static_cast<T>(s1) * invM;
            const T m2 = static_cast<T>(s2) * invM;
            for (std::int64_t n = 0; n < N; ++n) {
              const T* g = self->grad.data() + (n * C + c) * M;
              const T* xv = xn->value.data() + (n * C + c) * M;
              T* dx = xn->grad.data() + (n * C + c) * M;
              for (std::int64_t i = 0; i < M; ++i) {
                const T xhat = (xv[i] - mu) * inv;
                dx[i] += scale * (g[i] - m1 - xhat * m2);
              }
            }
          } else {
            for (std::int64_t n = 0; n < N; ++n) {
              const T* g = self->grad.data() + (n * C + c) * M;
              T* dx = xn->grad.data() + (n * C + c) * M;
              for (std::int64_t i = 0; i < M; ++i) dx[i] += scale * g[i];
            }
          }
        }
      }
    };
  }
  return node;
}

// Mean cross-entropy over softmax of logits[N,K]. Returns a scalar node; the
// backward rule is the usual (p - onehot)/N. Not part of the inference cost
// model, so it leaves the madd meter alone.
template <class T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
  const auto& s = logits->value.shape();
  if (s.size() != 2)
    throw ShapeError("softmax_cross_entropy: logits must be [N,K], got " + shape_str(s));
  const std::int64_t N = s[0], K = s[1];
  if (static_cast<std::int64_t>(labels.size()) != N)
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for batch of " + std::to_string(N));
  for (int y : labels)
    if (y < 0 || y >= K)
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(y) +
                       " outside [0," + std::to_string(K) + ")");

  Tensor<T> probs(Shape{N, K});
  double loss_acc = 0;
  for (std::int64_t n = 0; n < N; ++n) {
    const T* row = logits->value.data() + n * K;
    T* prow = probs.data() + n * K;
    T mx = row[0];
    for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    double z = 0;
    for (std::int64_t k = 0; k < K; ++k) {
      const double e = std::exp(static_cast<double>(row[k] - mx));
      prow[k] = static_cast<T>(e);
      z += e;
    }
    const double invz = 1.0 / z;
    for (std::int64_t k = 0; k < K; ++k) prow[k] = static_cast<T>(prow[k] * invz);
    loss_acc -= static_cast<double>(row[labels[static_cast<std::size_t>(n)]] - mx) - std::log(z);
  }
  Tensor<T> loss(Shape{1});
  loss[0] = static_cast<T>(loss_acc / static_cast<double>(N));

  auto node = make_constant(std::move(loss), "softmax_cross_entropy");
  if (grad_enabled() && logits->requires_grad) {
    node->requires_grad = true;
    node->parents = {logits};
    Node<T>* self = node.get();
    auto ln = logits;
    auto labels_copy = labels;
    auto probs_ptr = std::make_shared<Tensor<T>>(std::move(probs));
    node->backward_fn = [self, ln, labels_copy, probs_ptr, N, K]() {
      ln->ensure_grad();
      const T g = self->grad[0] / static_cast<T>(N);
      for (std::int64_t n = 0; n < N; ++n) {
        const T* p = probs_ptr->data() + n * K;
        T* d = ln->grad.data() + n * K;
        const std::int64_t y = labels_copy[static_cast<std::size_t>(n)];
        for (std::int64_t k = 0; k < K; ++k) d[k] += g * (p[k] - (k == y ? T(1) : T(0)));
      }
    };
  }
  return node;
}

// sum(x * weights) as a scalar; harness helper for making a well-conditioned
// scalar loss out of an arbitrary op output. Uncosted.
template <class T>
Var<T> weighted_sum(const Var<T>& x, Tensor<T> weights) {
  if (weights.shape() != x->value.shape())
    throw ShapeError("weighted_sum: weights " + shape_str(weights.shape()) +
                     " vs input " + shape_str(x->value.shape()));
  Tensor<T> out(Shape{1});
  double acc = 0;
  for (std::int64_t i = 0; i < x->value.numel(); ++i)
    acc += static_cast<double>(x->value[i]) * static_cast<double>(weights[i]);
  out[0] = static_cast<T>(acc);

  auto node = make_constant(std::move(out), "weighted_sum");
  if (grad_enabled() && x->requires_grad) {
    node->requires_grad = true;
    node->parents = {x};
    Node<T>* self = node.get();
    auto xn = x;
    auto w = std::make_shared<Tensor<T>>(std::move(weights));
    node->backward_fn = [self, xn, w]() {
      xn->ensure_grad();
      const T g = self->grad[0];
      for (std::int64_t i = 0; i < xn->grad.numel(); ++i) xn->grad[i] += g * (*w)[i];
    };
  }
  return node;
}

}  // namespace p3d
