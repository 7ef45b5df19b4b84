#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "p3d/ops.hpp"
#include "p3d/rng.hpp"

// The bottleneck block: pointwise reduce (carries the spatial stride), then
// either parallel spatial (1x3x3) and temporal (3x1x1) convs over the same
// reduced feature with an optional feature-level temporal residual and channel
// self-attention (pseudo3d backend), or a single 3x3x3 conv (full3d backend).
// A pointwise restore maps the concatenated width back to out_channels, the
// shortcut joins pre-activation, ReLU finishes the block. BatchNorm+ReLU
// follow every conv except the restore; the shortcut projection is a bare
// kernel (no bias, no norm).

namespace p3d {

enum class ConvBackend { pseudo3d, full3d };

struct P3DBlockConfig {
  std::int64_t in_channels = 0;
  std::int64_t mid_channels = 0;  // C', the reduced width both paths run at
  std::int64_t out_channels = 0;
  std::int64_t spatial_stride = 1;
  bool enable_attention = true;
  bool enable_feature_residual = true;
  ConvBackend backend = ConvBackend::pseudo3d;
  bool normalize = true;  // BatchNorm toggle; exact-arithmetic tests turn it off

  // Channel width entering the restore conv.
  std::int64_t concat_width() const {
    if (backend == ConvBackend::full3d) return mid_channels;
    return (enable_feature_residual ? 3 : 2) * mid_channels;
  }
  bool needs_projection() const { return in_channels != out_channels || spatial_stride != 1; }

  void validate() const {
    if (in_channels < 1 || mid_channels < 1 || out_channels < 1)
      throw ConfigError("block: channel counts must be positive");
    if (spatial_stride != 1 && spatial_stride != 2)
      throw ConfigError("block: spatial_stride must be 1 or 2, got " +
                        std::to_string(spatial_stride));
  }
};

// One conv plus its optional normalization parameters.
template <class T>
struct ConvUnit {
  Var<T> kernel;
  Var<T> bias;
  Var<T> gamma, beta;  // empty when the unit is not normalized
  BatchNormState<T> bn;
};

template <class T>
struct P3DBlockParams {
  P3DBlockConfig config;
  ConvUnit<T> reduce;    // pointwise [C',Cin], stride lives here
  ConvUnit<T> spatial;   // [C',C',1,3,3] (pseudo3d)
  ConvUnit<T> temporal;  // [C',C',3,1,1] (pseudo3d)
  ConvUnit<T> full;      // [C',C',3,3,3] (full3d)
  Var<T> att_w;          // [width,width]
  Var<T> att_b;          // [width]
  ConvUnit<T> restore;   // pointwise [Cout,width], never normalized
  Var<T> proj_kernel;    // pointwise [Cout,Cin], only when needs_projection()
};

namespace detail {

template <class T>
Var<T> fan_in_uniform(const Shape& shape, std::int64_t fan_in, std::uint64_t seed,
                      const std::string& name) {
  Rng rng = Rng::stream(seed, name);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return make_param(Tensor<T>::uniform(shape, rng, static_cast<T>(-bound), static_cast<T>(bound)),
                    name);
}

template <class T>
ConvUnit<T> make_conv_unit(const Shape& kernel_shape, std::int64_t fan_in, bool normalized,
                           std::int64_t out_ch, std::uint64_t seed, const std::string& name) {
  ConvUnit<T> u;
  u.kernel = fan_in_uniform<T>(kernel_shape, fan_in, seed, name + ".kernel");
  u.bias = make_param(Tensor<T>(Shape{out_ch}, T(0)), name + ".bias");
  if (normalized) {
    u.gamma = make_param(Tensor<T>(Shape{out_ch}, T(1)), name + ".gamma");
    u.beta = make_param(Tensor<T>(Shape{out_ch}, T(0)), name + ".beta");
    u.bn = BatchNormState<T>(out_ch);
  }
  return u;
}

// conv -> [BN] -> ReLU, shared by every normalized unit.
template <class T>
Var<T> conv_bn_relu(Var<T> h, ConvUnit<T>& u, bool normalize, BatchNormMode mode) {
  if (normalize) h = batch_norm(h, u.gamma, u.beta, u.bn, mode);
  return relu(h);
}

}  // namespace detail

// Parameter init: kernels uniform in +-1/sqrt(fan_in); biases, attention W
// and b zero (training starts at a neutral 0.5 mask); BN gamma 1, beta 0.
// Every tensor draws from its own named stream so values do not depend on
// construction order.
template <class T>
P3DBlockParams<T> make_block(const P3DBlockConfig& config, std::uint64_t seed,
                             const std::string& name) {
  config.validate();
  P3DBlockParams<T> p;
  p.config = config;
  const std::int64_t cin = config.in_channels, mid = config.mid_channels,
                     cout = config.out_channels, width = config.concat_width();
  p.reduce = detail::make_conv_unit<T>(Shape{mid, cin}, cin, config.normalize, mid, seed,
                                       name + ".reduce");
  if (config.backend == ConvBackend::pseudo3d) {
    p.spatial = detail::make_conv_unit<T>(Shape{mid, mid, 1, 3, 3}, mid * 9, config.normalize,
                                          mid, seed, name + ".spatial");
    p.temporal = detail::make_conv_unit<T>(Shape{mid, mid, 3, 1, 1}, mid * 3, config.normalize,
                                           mid, seed, name + ".temporal");
    if (config.enable_attention) {
      p.att_w = make_param(Tensor<T>(Shape{width, width}, T(0)), name + ".att.w");
      p.att_b = make_param(Tensor<T>(Shape{width}, T(0)), name + ".att.b");
    }
  } else {
    p.full = detail::make_conv_unit<T>(Shape{mid, mid, 3, 3, 3}, mid * 27, config.normalize, mid,
                                       seed, name + ".full");
  }
  p.restore = detail::make_conv_unit<T>(Shape{cout, width}, width, false, cout, seed,
                                        name + ".restore");
  if (config.needs_projection())
    p.proj_kernel = detail::fan_in_uniform<T>(Shape{cout, cin}, cin, seed, name + ".proj");
  return p;
}

// Temporal feature residual: out[..,t,..] = |fm[..,t+1,..] - fm[..,t,..]|,
// with fm(T) := fm(T-1) so the last step is exactly zero and T is preserved.
template <class T>
Var<T> feature_residual(const Var<T>& fm) {
  const auto& s = fm->value.shape();
  if (s.size() != 5)
    throw ShapeError("feature_residual: input must be [N,C,T,H,W], got " + shape_str(s));
  const std::int64_t NC = s[0] * s[1], Tt = s[2], HW = s[3] * s[4];
  Tensor<T> out(s, T(0));
  const T* xp = fm->value.data();
  T* op = out.data();
  for (std::int64_t nc = 0; nc < NC; ++nc)
    for (std::int64_t t = 0; t + 1 < Tt; ++t) {
      const T* a = xp + (nc * Tt + t) * HW;
      const T* b = a + HW;
      T* o = op + (nc * Tt + t) * HW;
      for (std::int64_t i = 0; i < HW; ++i) {
        const T d = b[i] - a[i];
        o[i] = d < T(0) ? -d : d;
      }
    }
  madd_meter::add(static_cast<std::uint64_t>(out.numel()));

  auto node = make_constant(std::move(out), "feature_residual");
  if (grad_enabled() && fm->requires_grad) {
    node->requires_grad = true;
    node->parents = {fm};
    Node<T>* self = node.get();
    auto xn = fm;
    node->backward_fn = [self, xn, NC, Tt, HW]() {
      xn->ensure_grad();
      const T* xp = xn->value.data();
      const T* gp = self->grad.data();
      T* dx = xn->grad.data();
      for (std::int64_t nc = 0; nc < NC; ++nc)
        for (std::int64_t t = 0; t + 1 < Tt; ++t) {
          const T* a = xp + (nc * Tt + t) * HW;
          const T* b = a + HW;
          const T* g = gp + (nc * Tt + t) * HW;
          T* da = dx + (nc * Tt + t) * HW;
          T* db = da + HW;
          for (std::int64_t i = 0; i < HW; ++i) {
            const T d = b[i] - a[i];
            const T sg = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
            db[i] += g[i] * sg;
            da[i] -= g[i] * sg;
          }
        }
    };
  }
  return node;
}

// M_att = sigmoid(W pool(f) + b), one scalar gate per channel: [N,width,1,1,1].
template <class T>
Var<T> attention_mask(const Var<T>& f, const Var<T>& w, const Var<T>& b) {
  const auto& fs = f->value.shape();
  if (fs.size() != 5)
    throw ShapeError("attention_mask: input must be [N,C,T,H,W], got " + shape_str(fs));
  const std::int64_t width = fs[1];
  if (w->value.shape() != Shape{width, width})
    throw ShapeError("attention_mask: W shape " + shape_str(w->value.shape()) +
                     " must be square [" + std::to_string(width) + "," +
                     std::to_string(width) + "]");
  Var<T> pooled = flatten2(global_avg_pool(f));            // [N,width]
  Var<T> gate = sigmoid(linear(pooled, w, b));             // [N,width]
  return reshape(gate, Shape{fs[0], width, 1, 1, 1});
}

// f_att = f (*) M_att + f; the mask broadcasts over (T,H,W).
template <class T>
Var<T> apply_attention(const Var<T>& f, const Var<T>& mask) {
  return add(mul(f, mask), f);
}

// Forward through one block. Mode picks BatchNorm statistics (train updates
// running buffers); with config.normalize=false the convs are followed by
// ReLU only.
template <class T>
Var<T> block_forward(const Var<T>& x, P3DBlockParams<T>& p, BatchNormMode mode) {
  const P3DBlockConfig& c = p.config;
  Var<T> r = conv_pointwise(x, p.reduce.kernel, p.reduce.bias, c.spatial_stride);
  r = detail::conv_bn_relu(r, p.reduce, c.normalize, mode);

  Var<T> f;
  if (c.backend == ConvBackend::pseudo3d) {
    Var<T> fs = conv_spatial(r, p.spatial.kernel, p.spatial.bias, 1, 1);
    fs = detail::conv_bn_relu(fs, p.spatial, c.normalize, mode);
    Var<T> fm = conv_temporal(r, p.temporal.kernel, p.temporal.bias, 1);
    fm = detail::conv_bn_relu(fm, p.temporal, c.normalize, mode);
    std::vector<Var<T>> parts = {fs, fm};
    if (c.enable_feature_residual) parts.push_back(feature_residual(fm));
    f = concat_channels(parts);
    if (c.enable_attention) f = apply_attention(f, attention_mask(f, p.att_w, p.att_b));
  } else {
    Var<T> h = conv3d(r, p.full.kernel, p.full.bias, 1, 1, 1, 1, 1, 1, "conv_full3d");
    f = detail::conv_bn_relu(h, p.full, c.normalize, mode);
  }

  Var<T> out = conv_pointwise(f, p.restore.kernel, p.restore.bias);
  Var<T> shortcut = x;
  if (c.needs_projection()) {
    auto zero_bias = make_constant(Tensor<T>(Shape{c.out_channels}, T(0)), "proj_bias");
    shortcut = conv_pointwise(x, p.proj_kernel, zero_bias, c.spatial_stride);
  }
  return relu(add(out, shortcut));
}

// Closed-form cost of one block forward at the given input, mirroring the
// op-by-op counts the instrumented forward emits in eval mode: conv madds are
// the GEMM trip count Cout*Cin*kT*kH*kW per output position (bias adds
// uncounted), normalization and elementwise ops one madd per element, pooling
// one add per input element, concat free.
struct BlockCost {
  std::uint64_t madds = 0;
  std::int64_t params = 0;
};

inline BlockCost count_block_cost(const P3DBlockConfig& c, const Shape& input_shape) {
  c.validate();
  if (input_shape.size() != 5)
    throw ShapeError("count_block_cost: input must be [N,C,T,H,W], got " +
                     shape_str(input_shape));
  if (input_shape[1] != c.in_channels)
    throw ShapeError("count_block_cost: input C=" + std::to_string(input_shape[1]) +
                     " but block expects " + std::to_string(c.in_channels));
  const std::uint64_t N = static_cast<std::uint64_t>(input_shape[0]);
  const std::uint64_t Tt = static_cast<std::uint64_t>(input_shape[2]);
  const std::uint64_t Ho = static_cast<std::uint64_t>((input_shape[3] - 1) / c.spatial_stride + 1);
  const std::uint64_t Wo = static_cast<std::uint64_t>((input_shape[4] - 1) / c.spatial_stride + 1);
  const std::uint64_t pos = Tt * Ho * Wo;  // output positions of every conv in the block
  const std::uint64_t cin = static_cast<std::uint64_t>(c.in_channels);
  const std::uint64_t mid = static_cast<std::uint64_t>(c.mid_channels);
  const std::uint64_t cout = static_cast<std::uint64_t>(c.out_channels);
  const std::uint64_t width = static_cast<std::uint64_t>(c.concat_width());

  BlockCost cost;
  auto conv = [&](std::uint64_t out_ch, std::uint64_t in_ch, std::uint64_t taps) {
    cost.madds += N * out_ch * in_ch * taps * pos;
    cost.params += static_cast<std::int64_t>(out_ch * in_ch * taps + out_ch);
  };
  auto bn_relu = [&](std::uint64_t ch) {
    if (c.normalize) {
      cost.madds += N * ch * pos;  // batch_norm
      cost.params += static_cast<std::int64_t>(2 * ch);
    }
    cost.madds += N * ch * pos;  // relu
  };

  conv(mid, cin, 1);  // reduce
  bn_relu(mid);
  if (c.backend == ConvBackend::pseudo3d) {
    conv(mid, mid, 9);  // spatial
    bn_relu(mid);
    conv(mid, mid, 3);  // temporal
    bn_relu(mid);
    if (c.enable_feature_residual) cost.madds += N * mid * pos;  // feature_residual
    if (c.enable_attention) {
      cost.madds += N * width * pos;    // pool reads
      cost.madds += N * width * width;  // gate linear
      cost.madds += N * width;          // sigmoid
      cost.madds += 2 * N * width * pos;  // f*mask, +f
      cost.params += static_cast<std::int64_t>(width * width + width);
    }
  } else {
    conv(mid, mid, 27);  // full 3x3x3
    bn_relu(mid);
  }
  conv(cout, width, 1);  // restore (never normalized)
  if (c.needs_projection()) {
    cost.madds += N * cout * cin * pos;
    cost.params += static_cast<std::int64_t>(cout * cin);
  }
  cost.madds += N * cout * pos;  // shortcut add
  cost.madds += N * cout * pos;  // final relu
  return cost;
}

// Named parameters in fixed (checkpoint) order.
template <class T>
void collect_params(P3DBlockParams<T>& p, const std::string& prefix,
                    std::vector<std::pair<std::string, Var<T>>>& out) {
  auto unit = [&](ConvUnit<T>& u, const std::string& name) {
    if (!u.kernel) return;
    out.emplace_back(prefix + name + ".kernel", u.kernel);
    out.emplace_back(prefix + name + ".bias", u.bias);
    if (u.gamma) {
      out.emplace_back(prefix + name + ".gamma", u.gamma);
      out.emplace_back(prefix + name + ".beta", u.beta);
    }
  };
  unit(p.reduce, "reduce");
  unit(p.spatial, "spatial");
  unit(p.temporal, "temporal");
  unit(p.full, "full");
  if (p.att_w) {
    out.emplace_back(prefix + "att.w", p.att_w);
    out.emplace_back(prefix + "att.b", p.att_b);
  }
  unit(p.restore, "restore");
  if (p.proj_kernel) out.emplace_back(prefix + "proj.kernel", p.proj_kernel);
}

// Running-statistic buffers, same ordering contract.
template <class T>
void collect_buffers(P3DBlockParams<T>& p, const std::string& prefix,
                     std::vector<std::pair<std::string, Tensor<T>*>>& out) {
  auto unit = [&](ConvUnit<T>& u, const std::string& name) {
    if (!u.kernel || !u.gamma) return;
    out.emplace_back(prefix + name + ".running_mean", &u.bn.running_mean);
    out.emplace_back(prefix + name + ".running_var", &u.bn.running_var);
  };
  unit(p.reduce, "reduce");
  unit(p.spatial, "spatial");
  unit(p.temporal, "temporal");
  unit(p.full, "full");
}

}  // namespace p3d
