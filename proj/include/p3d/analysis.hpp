#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "p3d/network.hpp"

// Analytic cost model over the network graph plus the finite-difference
// gradient-check harness. The closed-form madd counts mirror, op for op, what
// the instrumented forward meter records in eval mode, so the two agree
// exactly: conv and linear cost their GEMM trip count, normalization and
// elementwise ops one madd per element, pooling one add per input element,
// concat and reshape are free, bias adds uncounted.

namespace p3d {

struct CostRow {
  std::string name;
  std::uint64_t madds = 0;
  std::int64_t params = 0;
  std::string output;
};

struct CostReport {
  std::vector<CostRow> rows;
  std::uint64_t total_madds = 0;
  std::int64_t total_params = 0;

  // The headline figure under both FLOP conventions.
  double gflops_madd() const { return static_cast<double>(total_madds) / 1e9; }
  double gflops_2x() const { return 2.0 * static_cast<double>(total_madds) / 1e9; }

  std::string text_table() const {
    std::ostringstream out;
    out << std::left << std::setw(14) << "layer" << std::right << std::setw(16) << "madds"
        << std::setw(12) << "params" << "  output\n";
    for (const auto& r : rows)
      out << std::left << std::setw(14) << r.name << std::right << std::setw(16) << r.madds
          << std::setw(12) << r.params << "  " << r.output << "\n";
    out << std::left << std::setw(14) << "total" << std::right << std::setw(16) << total_madds
        << std::setw(12) << total_params << "\n";
    char buf[128];
    std::snprintf(buf, sizeof(buf), "GFLOPs: %.3f (1 FLOP/madd) | %.3f (2 FLOPs/madd)\n",
                  gflops_madd(), gflops_2x());
    out << buf;
    return out.str();
  }

  std::string machine_lines() const {
    std::ostringstream out;
    for (const auto& r : rows)
      out << r.name << "\t" << r.madds << "\t" << r.params << "\t" << r.output << "\n";
    return out.str();
  }
};

// Closed-form cost of the full forward pass to logits for one batch.
inline CostReport profile(const NetworkConfig& c, std::int64_t batch = 1) {
  c.validate();
  CostReport rep;
  const std::uint64_t N = static_cast<std::uint64_t>(batch);
  const std::uint64_t T = static_cast<std::uint64_t>(c.clip_len);
  const std::uint64_t c1 = static_cast<std::uint64_t>(c.conv1_channels());
  const std::uint64_t H1 = static_cast<std::uint64_t>((c.crop + 6 - 7) / 2 + 1);
  auto dims = [](std::uint64_t t, std::uint64_t h, std::uint64_t w) {
    return std::to_string(t) + "x" + std::to_string(h) + "x" + std::to_string(w);
  };

  // Data layer per modality: 7x7 stride-2 conv, BN, ReLU, 3x1x1 conv, BN, ReLU.
  const std::uint64_t pos1 = T * H1 * H1;
  const std::uint64_t conv1_madds = N * c1 * (3 * 49) * pos1 + 2 * N * c1 * pos1 +
                                    N * c1 * (c1 * 3) * pos1 + 2 * N * c1 * pos1;
  const std::int64_t conv1_params = static_cast<std::int64_t>(
      c1 * 3 * 49 + c1 + 2 * c1 + c1 * c1 * 3 + c1 + 2 * c1);
  if (c.use_rgb) rep.rows.push_back({"conv1_rgb", conv1_madds, conv1_params, dims(T, H1, H1)});
  if (c.use_residual)
    rep.rows.push_back({"conv1_res", conv1_madds, conv1_params, dims(T, H1, H1)});

  std::int64_t in_ch = c.trunk_in_channels();
  std::int64_t H = static_cast<std::int64_t>(H1);
  for (std::size_t i = 0; i < c.stage_blocks.size(); ++i) {
    const std::int64_t out_ch = c.stage_out_channels(i);
    for (std::int64_t b = 0; b < c.stage_blocks[i]; ++b) {
      P3DBlockConfig bc;
      bc.in_channels = b == 0 ? in_ch : out_ch;
      bc.mid_channels = c.stage_channels[i];
      bc.out_channels = out_ch;
      bc.spatial_stride = (b == 0 && i > 0) ? 2 : 1;
      bc.enable_attention = c.enable_attention;
      bc.enable_feature_residual = c.enable_feature_residual;
      bc.backend = c.backend;
      const Shape in_shape{batch, bc.in_channels, c.clip_len, H, H};
      BlockCost bcost = count_block_cost(bc, in_shape);
      if (bc.spatial_stride == 2) H = (H - 1) / 2 + 1;
      rep.rows.push_back({stage_name(i) + ".b" + std::to_string(b), bcost.madds, bcost.params,
                          dims(T, static_cast<std::uint64_t>(H), static_cast<std::uint64_t>(H))});
    }
    in_ch = out_ch;
  }

  const std::uint64_t trunk_out = static_cast<std::uint64_t>(in_ch);
  rep.rows.push_back({"pool", N * trunk_out * T * static_cast<std::uint64_t>(H * H), 0, "1x1x1"});
  const std::uint64_t fc1w = static_cast<std::uint64_t>(c.fc1_width);
  rep.rows.push_back({"fc1", N * fc1w * trunk_out + N * fc1w,
                      static_cast<std::int64_t>(fc1w * trunk_out + fc1w),
                      std::to_string(c.fc1_width)});
  const std::uint64_t K = static_cast<std::uint64_t>(c.classes);
  rep.rows.push_back({"fc2", N * K * fc1w, static_cast<std::int64_t>(K * fc1w + K),
                      std::to_string(c.classes)});

  for (const auto& r : rep.rows) {
    rep.total_madds += r.madds;
    rep.total_params += r.params;
  }
  return rep;
}

// Signed parameter difference between two configurations.
inline std::int64_t param_count_delta(const NetworkConfig& a, const NetworkConfig& b) {
  return profile(a).total_params - profile(b).total_params;
}

// Published-total comparison: every (FLOP convention, restore width) pair,
// each scored against the 30 GFLOP pseudo3d and 163 GFLOP full3d claims and
// the full3d/pseudo3d ratio bracket.
struct ClaimEntry {
  const char* convention;  // "1 FLOP/madd" or "2 FLOPs/madd"
  RestoreWidth restore = RestoreWidth::table;
  double pseudo_gf = 0;
  double full_gf = 0;
  double ratio = 0;
  bool pseudo_ok = false;  // within +-15% of 30
  bool full_ok = false;    // within +-25% of 163
  bool ratio_ok = false;   // within [4.0, 6.8]
  bool all_ok() const { return pseudo_ok && full_ok && ratio_ok; }
};

struct ClaimReport {
  std::vector<ClaimEntry> entries;
  std::optional<std::size_t> matching;  // first entry satisfying all three

  std::string text() const {
    std::ostringstream out;
    out << "claim targets: pseudo3d 30 GFLOPs (+-15%), full3d 163 GFLOPs (+-25%), ratio in "
           "[4.0, 6.8]\n";
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const ClaimEntry& e = entries[i];
      char buf[192];
      std::snprintf(buf, sizeof(buf),
                    "  [%s, restore=%s] pseudo3d %.2f GF (%s) | full3d %.2f GF (%s) | ratio "
                    "%.2f (%s)\n",
                    e.convention, restore_name(e.restore), e.pseudo_gf,
                    e.pseudo_ok ? "ok" : "MISS", e.full_gf, e.full_ok ? "ok" : "MISS", e.ratio,
                    e.ratio_ok ? "ok" : "MISS");
      out << buf;
    }
    if (matching)
      out << "matching pair: " << entries[*matching].convention
          << ", restore=" << restore_name(entries[*matching].restore) << "\n";
    else
      out << "matching pair: none\n";
    return out.str();
  }
};

inline ClaimReport flop_claim_report(NetworkConfig base) {
  ClaimReport rep;
  for (RestoreWidth rw : {RestoreWidth::table, RestoreWidth::expand4x}) {
    NetworkConfig pseudo = base;
    pseudo.backend = ConvBackend::pseudo3d;
    pseudo.restore = rw;
    NetworkConfig full = pseudo;
    full.backend = ConvBackend::full3d;
    const double pseudo_madds = static_cast<double>(profile(pseudo).total_madds) / 1e9;
    const double full_madds = static_cast<double>(profile(full).total_madds) / 1e9;
    const double ratio = full_madds / pseudo_madds;
    for (double scale : {1.0, 2.0}) {
      ClaimEntry e;
      e.convention = scale == 1.0 ? "1 FLOP/madd" : "2 FLOPs/madd";
      e.restore = rw;
      e.pseudo_gf = scale * pseudo_madds;
      e.full_gf = scale * full_madds;
      e.ratio = ratio;  // convention cancels in the ratio
      e.pseudo_ok = std::abs(e.pseudo_gf - 30.0) <= 0.15 * 30.0;
      e.full_ok = std::abs(e.full_gf - 163.0) <= 0.25 * 163.0;
      e.ratio_ok = ratio >= 4.0 && ratio <= 6.8;
      if (e.all_ok() && !rep.matching) rep.matching = rep.entries.size();
      rep.entries.push_back(e);
    }
  }
  return rep;
}

// Finite-difference gradient checking. rel_err(a,b) = |a-b| / max(1,|a|,|b|),
// the same normalization the acceptance thresholds are stated in.
inline double grad_rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0;
  std::int64_t argmax = -1;
  std::int64_t coords_checked = 0;
  std::int64_t coords_skipped = 0;  // straddled a kink; central FD invalid there
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double eps = 0;
  std::uint64_t seed = 0;

  double worst() const {
    double w = 0;
    for (const auto& e : entries) w = std::max(w, e.max_rel_err);
    return w;
  }
  std::string worst_name() const {
    double w = -1;
    std::string name;
    for (const auto& e : entries)
      if (e.max_rel_err > w) {
        w = e.max_rel_err;
        name = e.name;
      }
    return name;
  }
  std::string text() const {
    std::ostringstream out;
    for (const auto& e : entries) {
      char buf[160];
      std::snprintf(buf, sizeof(buf),
                    "  %-28s max rel err %.3e (coord %lld of %lld checked, %lld at kinks)\n",
                    e.name.c_str(), e.max_rel_err, static_cast<long long>(e.argmax),
                    static_cast<long long>(e.coords_checked),
                    static_cast<long long>(e.coords_skipped));
      out << buf;
    }
    char buf[96];
    std::snprintf(buf, sizeof(buf), "  worst: %.3e (%s), eps %.1e\n", worst(),
                  worst_name().c_str(), eps);
    out << buf;
    return out.str();
  }
};

// Central differences on a random coordinate subsample of each listed tensor.
// build_loss must rebuild the graph from current parameter values and return
// a scalar; it is invoked once with gradients on, then twice per coordinate.
//
// Coordinates whose perturbation straddles a ReLU/abs kink are excluded: there
// the loss is not C1 and central differences measure an average of one-sided
// slopes, not the derivative. Straddling is detected by the second difference
// up + dn - 2*f0, which is O(eps^2) for smooth coordinates but jumps to the
// order of the first differences across a kink. Zero-initialized biases make
// exact-kink hits reproducible rather than rare, so this is load-bearing. A
// wrong backward rule leaves the loss smooth and is still caught.
template <class BuildLoss>
GradCheckReport grad_check(const std::vector<std::pair<std::string, Var<double>>>& params,
                           BuildLoss&& build_loss, double eps = 1e-5, std::uint64_t seed = 1,
                           std::int64_t max_coords = 200) {
  GradCheckReport rep;
  rep.eps = eps;
  rep.seed = seed;

  std::vector<Var<double>> vars;
  for (const auto& [name, v] : params) vars.push_back(v);
  zero_grad(vars);
  {
    auto loss = build_loss();
    backward(loss);
  }
  std::vector<Tensor<double>> grads;
  for (const auto& [name, v] : params) {
    if (!v->has_grad())
      throw ShapeError("grad_check: no gradient reached parameter '" + name + "'");
    grads.push_back(v->grad);
  }

  auto value_of = [&]() {
    NoGradGuard g;
    return build_loss()->value[0];
  };
  const double f0 = value_of();

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const auto& [name, v] = params[pi];
    const std::int64_t n = v->value.numel();
    Rng rng = Rng::stream(seed, "gradcheck:" + name);
    std::vector<std::int64_t> coords;
    if (n <= max_coords) {
      coords.resize(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
    } else {
      for (std::int64_t i = 0; i < max_coords; ++i)
        coords.push_back(static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(n))));
    }

    GradCheckEntry entry;
    entry.name = name;
    for (std::int64_t i : coords) {
      const double save = v->value[i];
      v->value[i] = save + eps;
      const double up = value_of();
      v->value[i] = save - eps;
      const double dn = value_of();
      v->value[i] = save;
      const double curvature = std::abs(up + dn - 2 * f0);
      const double first_diffs = std::abs(up - f0) + std::abs(dn - f0);
      if (curvature > 0.05 * first_diffs + 1e-12 * std::max(1.0, std::abs(f0))) {
        ++entry.coords_skipped;
        continue;
      }
      const double fd = (up - dn) / (2 * eps);
      const double err = grad_rel_err(fd, grads[pi][i]);
      if (err > entry.max_rel_err) {
        entry.max_rel_err = err;
        entry.argmax = i;
      }
      ++entry.coords_checked;
    }
    rep.entries.push_back(std::move(entry));
  }
  return rep;
}

namespace detail {

inline Tensor<double> margin_uniform(const Shape& shape, Rng& rng, double margin, double hi) {
  Tensor<double> t(shape);
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    const double mag = margin + rng.uniform() * (hi - margin);
    t[i] = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

}  // namespace detail

// Negative-control fixture: forward is ReLU but the backward rule is scaled
// by 1.25, so a healthy harness must report a large error.
template <class T>
Var<T> corrupted_relu(const Var<T>& x) {
  Tensor<T> out(x->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = x->value[i] > T(0) ? x->value[i] : T(0);
  auto node = make_constant(std::move(out), "corrupted_relu");
  if (grad_enabled() && x->requires_grad) {
    node->requires_grad = true;
    node->parents = {x};
    Node<T>* self = node.get();
    auto xn = x;
    node->backward_fn = [self, xn]() {
      xn->ensure_grad();
      for (std::int64_t i = 0; i < self->grad.numel(); ++i)
        if (self->value[i] > T(0)) xn->grad[i] += T(1.25) * self->grad[i];
    };
  }
  return node;
}

// Per-op gradient sweep shared by the CLI and the acceptance gate: every
// differentiable op on small shapes, inputs kept a margin away from the
// abs/ReLU kinks.
inline GradCheckReport grad_check_ops(std::uint64_t seed = 1, double eps = 1e-5,
                                      std::int64_t max_coords = 200) {
  GradCheckReport all;
  all.eps = eps;
  all.seed = seed;
  auto merge = [&](GradCheckReport r) {
    for (auto& e : r.entries) all.entries.push_back(std::move(e));
  };
  Rng rng = Rng::stream(seed, "gradcheck-inputs");
  auto margin_param = [&](const Shape& s) {
    return make_param(detail::margin_uniform(s, rng, 0.05, 1.0));
  };
  auto weights = [&](const Shape& s) { return detail::margin_uniform(s, rng, 0.0, 1.0); };

  {
    auto x = margin_param(Shape{2, 3, 4, 5, 5});
    auto k = margin_param(Shape{4, 3, 3, 3, 3});
    auto b = margin_param(Shape{4});
    Tensor<double> w = weights(Shape{2, 4, 2, 3, 3});
    merge(grad_check(
        {{"conv3d.input", x}, {"conv3d.kernel", k}, {"conv3d.bias", b}},
        [&] { return weighted_sum(conv3d(x, k, b, 2, 2, 2, 1, 1, 1), w); }, eps, seed,
        max_coords));
  }
  {
    auto x = margin_param(Shape{1, 3, 3, 6, 6});
    auto k = margin_param(Shape{2, 3, 1, 3, 3});
    auto b = margin_param(Shape{2});
    Tensor<double> w = weights(Shape{1, 2, 3, 3, 3});
    merge(grad_check(
        {{"conv_spatial.input", x}, {"conv_spatial.kernel", k}, {"conv_spatial.bias", b}},
        [&] { return weighted_sum(conv_spatial(x, k, b, 2, 1), w); }, eps, seed, max_coords));
  }
  {
    auto x = margin_param(Shape{1, 2, 5, 3, 3});
    auto k = margin_param(Shape{3, 2, 3, 1, 1});
    auto b = margin_param(Shape{3});
    Tensor<double> w = weights(Shape{1, 3, 5, 3, 3});
    merge(grad_check(
        {{"conv_temporal.input", x}, {"conv_temporal.kernel", k}, {"conv_temporal.bias", b}},
        [&] { return weighted_sum(conv_temporal(x, k, b, 1), w); }, eps, seed, max_coords));
  }
  {
    auto x = margin_param(Shape{2, 3, 2, 4, 4});
    auto k = margin_param(Shape{5, 3});
    auto b = margin_param(Shape{5});
    Tensor<double> w = weights(Shape{2, 5, 2, 2, 2});
    merge(grad_check(
        {{"conv_pointwise.input", x}, {"conv_pointwise.kernel", k}, {"conv_pointwise.bias", b}},
        [&] { return weighted_sum(conv_pointwise(x, k, b, 2), w); }, eps, seed, max_coords));
  }
  {
    auto x = margin_param(Shape{3, 4});
    auto wgt = margin_param(Shape{6, 4});
    auto b = margin_param(Shape{6});
    Tensor<double> w = weights(Shape{3, 6});
    merge(grad_check(
        {{"linear.input", x}, {"linear.weight", wgt}, {"linear.bias", b}},
        [&] { return weighted_sum(linear(x, wgt, b), w); }, eps, seed, max_coords));
  }
  {
    auto x = margin_param(Shape{2, 3, 2, 3, 3});
    auto gamma = margin_param(Shape{3});
    auto beta = margin_param(Shape{3});
    Tensor<double> w = weights(Shape{2, 3, 2, 3, 3});
    BatchNormState<double> bn(3);
    merge(grad_check(
        {{"batch_norm.input", x}, {"batch_norm.gamma", gamma}, {"batch_norm.beta", beta}},
        [&] {
          return weighted_sum(batch_norm(x, gamma, beta, bn, BatchNormMode::train), w);
        },
        eps, seed, max_coords));
  }
  {
    auto a = margin_param(Shape{2, 3, 2, 2, 2});
    auto b = margin_param(Shape{1, 3, 1, 1, 1});
    Tensor<double> w = weights(Shape{2, 3, 2, 2, 2});
    merge(grad_check(
        {{"elementwise.a", a}, {"elementwise.b", b}},
        [&] { return weighted_sum(mul(add(a, b), sub(a, b)), w); }, eps, seed, max_coords));
  }
  {
    auto x = margin_param(Shape{2, 2, 2, 3, 3});
    Tensor<double> w = weights(Shape{2, 2, 2, 3, 3});
    merge(grad_check(
        {{"relu.input", x}}, [&] { return weighted_sum(relu(x), w); }, eps, seed, max_coords));
    merge(grad_check(
        {{"abs.input", x}}, [&] { return weighted_sum(abs_val(x), w); }, eps, seed, max_coords));
    merge(grad_check(
        {{"sigmoid.input", x}}, [&] { return weighted_sum(sigmoid(x), w); }, eps, seed,
        max_coords));
    Tensor<double> wp = weights(Shape{2, 2, 1, 1, 1});
    merge(grad_check(
        {{"global_avg_pool.input", x}},
        [&] { return weighted_sum(global_avg_pool(x), wp); }, eps, seed, max_coords));
  }
  {
    auto a = margin_param(Shape{1, 2, 2, 3, 3});
    auto b = margin_param(Shape{1, 3, 2, 3, 3});
    Tensor<double> w = weights(Shape{1, 5, 2, 3, 3});
    merge(grad_check(
        {{"concat.a", a}, {"concat.b", b}},
        [&] { return weighted_sum(concat_channels<double>({a, b}), w); }, eps, seed, max_coords));
  }
  {
    auto x = margin_param(Shape{1, 2, 4, 3, 3});
    Tensor<double> w = weights(Shape{1, 2, 4, 3, 3});
    merge(grad_check(
        {{"feature_residual.input", x}},
        [&] { return weighted_sum(feature_residual(x), w); }, eps, seed, max_coords));
  }
  {
    auto f = margin_param(Shape{2, 4, 2, 3, 3});
    Rng wr = Rng::stream(seed, "gradcheck-attw");
    auto aw = make_param(Tensor<double>::uniform(Shape{4, 4}, wr, -0.4, 0.4));
    auto ab = make_param(Tensor<double>::uniform(Shape{4}, wr, -0.2, 0.2));
    Tensor<double> w = weights(Shape{2, 4, 2, 3, 3});
    merge(grad_check(
        {{"attention.f", f}, {"attention.w", aw}, {"attention.b", ab}},
        [&] { return weighted_sum(apply_attention(f, attention_mask(f, aw, ab)), w); }, eps,
        seed, max_coords));
  }
  {
    auto logits = margin_param(Shape{3, 5});
    const std::vector<int> labels = {0, 3, 2};
    merge(grad_check(
        {{"softmax_xent.logits", logits}},
        [&] { return softmax_cross_entropy(logits, labels); }, eps, seed, max_coords));
  }
  return all;
}

// The corrupted fixture through the same harness; callers assert the error
// exceeds 1e-2.
inline GradCheckReport grad_check_negative_control(std::uint64_t seed = 1, double eps = 1e-5) {
  Rng rng = Rng::stream(seed, "gradcheck-negctl");
  auto x = make_param(detail::margin_uniform(Shape{2, 2, 2, 3, 3}, rng, 0.05, 1.0));
  Tensor<double> w = detail::margin_uniform(Shape{2, 2, 2, 3, 3}, rng, 0.0, 1.0);
  return grad_check(
      {{"negative_control.input", x}}, [&] { return weighted_sum(corrupted_relu(x), w); }, eps,
      seed, 200);
}

// Full bottleneck block at the documented tiny geometry (C'=2, T=4, H=W=5).
inline GradCheckReport grad_check_block(std::uint64_t seed = 1, double eps = 1e-5,
                                        std::int64_t max_coords = 200) {
  P3DBlockConfig cfg;
  cfg.in_channels = 3;
  cfg.mid_channels = 2;
  cfg.out_channels = 4;
  auto p = make_block<double>(cfg, seed, "gc");
  Rng arng = Rng::stream(seed, "gradcheck-block-att");
  for (auto* v : {&p.att_w, &p.att_b})
    for (std::int64_t i = 0; i < (*v)->value.numel(); ++i)
      (*v)->value[i] = arng.uniform(-0.2, 0.2);

  Rng rng = Rng::stream(seed, "gradcheck-block-x");
  auto x = make_param(detail::margin_uniform(Shape{1, 3, 4, 5, 5}, rng, 0.05, 1.0));
  Tensor<double> w = detail::margin_uniform(Shape{1, 4, 4, 5, 5}, rng, 0.0, 1.0);

  std::vector<std::pair<std::string, Var<double>>> params;
  collect_params(p, "block.", params);
  params.emplace_back("block.input", x);
  return grad_check(
      params, [&] { return weighted_sum(block_forward(x, p, BatchNormMode::train), w); }, eps,
      seed, max_coords);
}

// Tiny end-to-end network, parameters only (inputs are constants).
inline GradCheckReport grad_check_model(std::uint64_t seed = 1, double eps = 1e-5,
                                        std::int64_t max_coords = 40) {
  NetworkConfig c;
  c.clip_len = 4;
  c.crop = 16;
  c.stage_blocks = {1, 1, 1, 1};
  c.stage_channels = {2, 2, 4, 4};
  c.classes = 3;
  c.fc1_width = 8;
  auto m = build_model<double>(c, seed);
  Rng rng = Rng::stream(seed, "gradcheck-model-x");
  Tensor<double> rgb = detail::margin_uniform(Shape{1, 3, 4, 16, 16}, rng, 0.05, 1.0);
  Tensor<double> res = detail::margin_uniform(Shape{1, 3, 4, 16, 16}, rng, 0.05, 1.0);
  const std::vector<int> labels = {2};

  std::vector<std::pair<std::string, Var<double>>> params;
  collect_model_params(m, params);
  return grad_check(
      params,
      [&] {
        return softmax_cross_entropy(forward(m, &rgb, &res, BatchNormMode::train), labels);
      },
      eps, seed, max_coords);
}

}  // namespace p3d
