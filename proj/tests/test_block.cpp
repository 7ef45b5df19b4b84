#include <doctest.h>

#include <algorithm>

#include "p3d/block.hpp"
#include "reference_ops.hpp"

using namespace p3d;

namespace {

template <class T>
std::int64_t param_numel(P3DBlockParams<T>& p) {
  std::vector<std::pair<std::string, Var<T>>> params;
  collect_params(p, "", params);
  std::int64_t n = 0;
  for (auto& [name, v] : params) n += v->value.numel();
  return n;
}

double fd_loss(P3DBlockParams<double>& p, const Var<double>& x, const Tensor<double>& w,
               BatchNormMode mode) {
  NoGradGuard g;
  Var<double> out = block_forward(x, p, mode);
  double acc = 0;
  for (std::int64_t i = 0; i < out->value.numel(); ++i) acc += out->value[i] * w[i];
  return acc;
}

}  // namespace

TEST_CASE("feature residual formula, edge rule, and offset invariance") {
  // One position, T=3, values (1,4,2) -> (3,2,0).
  auto x = make_param(Tensor<double>(Shape{1, 1, 3, 1, 1}, {1, 4, 2}));
  Var<double> r = feature_residual(x);
  CHECK(r->value[0] == 3.0);
  CHECK(r->value[1] == 2.0);
  CHECK(r->value[2] == 0.0);

  // Time-constant input -> exact zeros; random input -> zero last step.
  Rng rng = Rng::stream(7, "fres");
  Tensor<double> base = Tensor<double>::uniform(Shape{2, 3, 1, 4, 4}, rng, -1.0, 1.0);
  Tensor<double> rep(Shape{2, 3, 5, 4, 4});
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t t = 0; t < 5; ++t)
        for (std::int64_t i = 0; i < 16; ++i)
          rep[((n * 3 + c) * 5 + t) * 16 + i] = base[(n * 3 + c) * 16 + i];
  Var<double> constant = feature_residual(make_param(std::move(rep)));
  for (std::int64_t i = 0; i < constant->value.numel(); ++i) CHECK(constant->value[i] == 0.0);

  Tensor<double> rand = Tensor<double>::uniform(Shape{1, 2, 4, 3, 3}, rng, -2.0, 2.0);
  Var<double> rr = feature_residual(make_param(rand));
  for (std::int64_t i = 0; i < rr->value.numel(); ++i) CHECK(rr->value[i] >= 0.0);
  const std::int64_t HW = 9;
  for (std::int64_t nc = 0; nc < 2; ++nc)
    for (std::int64_t i = 0; i < HW; ++i) CHECK(rr->value[(nc * 4 + 3) * HW + i] == 0.0);

  // Adding a time-constant offset cancels exactly (same floats subtracted).
  Tensor<double> shifted = rand;
  for (std::int64_t nc = 0; nc < 2; ++nc)
    for (std::int64_t t = 0; t < 4; ++t)
      for (std::int64_t i = 0; i < HW; ++i) shifted[(nc * 4 + t) * HW + i] += 0.8125;
  Var<double> rs = feature_residual(make_param(std::move(shifted)));
  CHECK(rs->value.bit_equal(rr->value));
}

TEST_CASE("feature residual gradient matches finite differences") {
  Rng rng = Rng::stream(11, "fres-grad");
  Tensor<double> xv = ref::random_tensor_away_from_zero(Shape{1, 2, 4, 3, 3}, rng, 0.05, 1.0);
  // Keep |x(t+1)-x(t)| away from the abs kink so FD is clean.
  auto x = make_param(xv);
  Tensor<double> w = ref::random_tensor<double>(Shape{1, 2, 4, 3, 3}, rng);
  auto loss = weighted_sum(feature_residual(x), w);
  backward(loss);

  double worst = 0;
  for (std::int64_t i = 0; i < xv.numel(); i += 7) {
    const double save = x->value[i];
    x->value[i] = save + 1e-6;
    double up = 0;
    {
      NoGradGuard g;
      auto o = feature_residual(x);
      for (std::int64_t j = 0; j < w.numel(); ++j) up += o->value[j] * w[j];
    }
    x->value[i] = save - 1e-6;
    double dn = 0;
    {
      NoGradGuard g;
      auto o = feature_residual(x);
      for (std::int64_t j = 0; j < w.numel(); ++j) dn += o->value[j] * w[j];
    }
    x->value[i] = save;
    worst = std::max(worst, ref::rel_err((up - dn) / 2e-6, x->grad[i]));
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("attention mask values, permutation invariance, and width guard") {
  const std::int64_t width = 6;
  // Grid-valued input: pooling sums small dyadic rationals exactly, so the
  // mask is bitwise invariant to element permutations within a channel.
  Rng rng = Rng::stream(13, "att");
  Tensor<double> fv(Shape{2, width, 3, 4, 4});
  for (std::int64_t i = 0; i < fv.numel(); ++i)
    fv[i] = static_cast<double>(rng.uniform_int(512)) / 1024.0 - 0.25;
  auto f = make_param(fv);

  auto w0 = make_param(Tensor<double>(Shape{width, width}, 0.0));
  auto b0 = make_param(Tensor<double>(Shape{width}, 0.0));
  Var<double> mask = attention_mask(f, w0, b0);
  CHECK(mask->value.shape() == Shape{2, width, 1, 1, 1});
  for (std::int64_t i = 0; i < mask->value.numel(); ++i) CHECK(mask->value[i] == 0.5);

  // At b=+1000 the gate saturates; IEEE rounding lands on 1.0 exactly, so
  // strict openness is asserted only at bounded logits below.
  auto bsat = make_param(Tensor<double>(Shape{width}, 1000.0));
  Var<double> sat = attention_mask(f, w0, bsat);
  for (std::int64_t i = 0; i < sat->value.numel(); ++i) {
    CHECK(sat->value[i] > 0.999999);
    CHECK(sat->value[i] <= 1.0);
  }

  // Constant-per-channel f with identity W: mask[c] = sigmoid(f_c).
  Tensor<double> cpc(Shape{1, width, 2, 2, 2});
  for (std::int64_t c = 0; c < width; ++c)
    for (std::int64_t i = 0; i < 8; ++i) cpc[c * 8 + i] = 0.25 * static_cast<double>(c) - 0.5;
  Tensor<double> eye(Shape{width, width}, 0.0);
  for (std::int64_t c = 0; c < width; ++c) eye[c * width + c] = 1.0;
  Var<double> mc = attention_mask(make_param(cpc), make_param(eye), b0);
  for (std::int64_t c = 0; c < width; ++c) {
    const double z = 0.25 * static_cast<double>(c) - 0.5;
    CHECK(mc->value[c] == doctest::Approx(1.0 / (1.0 + std::exp(-z))).epsilon(1e-12));
  }

  // Permute each channel's (T,H,W) elements: same mask bitwise.
  Tensor<double> perm = fv;
  Rng prng = Rng::stream(17, "att-perm");
  for (std::int64_t nc = 0; nc < 2 * width; ++nc) {
    double* blk = perm.data() + nc * 48;
    prng.shuffle(blk, blk + 48);
  }
  Rng wr = Rng::stream(19, "att-w");
  auto wrnd = make_param(Tensor<double>::uniform(Shape{width, width}, wr, -0.3, 0.3));
  Var<double> m1 = attention_mask(f, wrnd, b0);
  Var<double> m2 = attention_mask(make_param(perm), wrnd, b0);
  CHECK(m1->value.bit_equal(m2->value));
  for (std::int64_t i = 0; i < m1->value.numel(); ++i) {
    CHECK(m1->value[i] > 0.0);
    CHECK(m1->value[i] < 1.0);
  }

  auto wbad = make_param(Tensor<double>(Shape{width, width - 1}, 0.0));
  CHECK_THROWS_WITH_AS(attention_mask(f, wbad, b0)->value.numel(),
                       doctest::Contains("square"), ShapeError);
}

TEST_CASE("apply_attention gain, sign preservation, and bounds") {
  Rng rng = Rng::stream(23, "appat");
  for (int trial = 0; trial < 50; ++trial) {
    Tensor<float> fv = Tensor<float>::uniform(Shape{1, 4, 2, 3, 3}, rng, -2.0f, 2.0f);
    Tensor<float> mv = Tensor<float>::uniform(Shape{1, 4, 1, 1, 1}, rng, 1e-6f, 1.0f);
    auto fa = apply_attention(make_param(fv), make_param(mv));
    for (std::int64_t c = 0; c < 4; ++c)
      for (std::int64_t i = 0; i < 18; ++i) {
        const float fi = fv[c * 18 + i];
        const float oi = fa->value[c * 18 + i];
        CHECK(((fi > 0 && oi > 0) || (fi < 0 && oi < 0) || (fi == 0 && oi == 0)));
        CHECK(std::abs(oi) >= std::abs(fi) * (1.0f - 1e-6f));
        CHECK(std::abs(oi) <= 2.0f * std::abs(fi) * (1.0f + 1e-6f));
      }
  }

  // Half mask: f*0.5+f rounds identically to 1.5*f, so the gain is exact.
  Tensor<float> fv = Tensor<float>::uniform(Shape{2, 3, 2, 2, 2}, rng, -1.0f, 1.0f);
  auto fa = apply_attention(make_param(fv), make_param(Tensor<float>(Shape{2, 3, 1, 1, 1}, 0.5f)));
  for (std::int64_t i = 0; i < fv.numel(); ++i) CHECK(fa->value[i] == 1.5f * fv[i]);
}

TEST_CASE("zero kernels with identity shortcut reduce the block to ReLU") {
  P3DBlockConfig cfg;
  cfg.in_channels = 4;
  cfg.mid_channels = 2;
  cfg.out_channels = 4;
  cfg.spatial_stride = 1;
  cfg.enable_attention = false;
  cfg.enable_feature_residual = false;
  auto p = make_block<float>(cfg, 5, "z");
  for (auto* u : {&p.reduce, &p.spatial, &p.temporal, &p.restore})
    if (u->kernel) std::fill(u->kernel->value.data(), u->kernel->value.data() + u->kernel->value.numel(), 0.0f);
  CHECK_FALSE(static_cast<bool>(p.proj_kernel));

  Rng rng = Rng::stream(29, "zeroblk");
  Tensor<float> xv = Tensor<float>::uniform(Shape{2, 4, 3, 5, 5}, rng, -1.0f, 1.0f);
  auto x = make_param(xv);
  NoGradGuard g;
  Var<float> y = block_forward(x, p, BatchNormMode::eval);
  REQUIRE(y->value.shape() == xv.shape());
  for (std::int64_t i = 0; i < xv.numel(); ++i)
    CHECK(y->value[i] == (xv[i] > 0 ? xv[i] : 0.0f));
}

TEST_CASE("block geometry follows the stride and width rules") {
  P3DBlockConfig cfg;
  cfg.in_channels = 8;
  cfg.mid_channels = 4;
  cfg.out_channels = 8;
  auto p = make_block<float>(cfg, 1, "g1");
  Rng rng = Rng::stream(31, "geom");
  auto x = make_param(Tensor<float>::uniform(Shape{1, 8, 6, 10, 10}, rng, -1.0f, 1.0f));
  NoGradGuard g;
  CHECK(block_forward(x, p, BatchNormMode::eval)->value.shape() == Shape{1, 8, 6, 10, 10});

  cfg.out_channels = 16;
  cfg.spatial_stride = 2;
  auto p2 = make_block<float>(cfg, 1, "g2");
  CHECK(static_cast<bool>(p2.proj_kernel));
  CHECK(block_forward(x, p2, BatchNormMode::eval)->value.shape() == Shape{1, 16, 6, 5, 5});

  cfg.backend = ConvBackend::full3d;
  auto p3 = make_block<float>(cfg, 1, "g3");
  CHECK(block_forward(x, p3, BatchNormMode::eval)->value.shape() == Shape{1, 16, 6, 5, 5});
  CHECK_FALSE(static_cast<bool>(p3.att_w));
}

TEST_CASE("block gradients match finite differences on the tiny config") {
  P3DBlockConfig cfg;
  cfg.in_channels = 3;
  cfg.mid_channels = 2;
  cfg.out_channels = 4;
  cfg.spatial_stride = 1;  // projection still needed: 3 != 4
  auto p = make_block<double>(cfg, 77, "fd");
  // Nudge attention params off their zero init so their gradients are generic.
  {
    Rng arng = Rng::stream(78, "fd-att");
    for (auto* v : {&p.att_w, &p.att_b})
      for (std::int64_t i = 0; i < (*v)->value.numel(); ++i)
        (*v)->value[i] = arng.uniform(-0.2, 0.2);
  }

  Rng rng = Rng::stream(79, "fd-x");
  Tensor<double> xv = ref::random_tensor_away_from_zero(Shape{1, 3, 4, 5, 5}, rng, 0.05, 1.0);
  auto x = make_param(xv);
  Tensor<double> w = ref::random_tensor<double>(Shape{1, 4, 4, 5, 5}, rng);

  const BatchNormMode mode = BatchNormMode::train;
  auto out = block_forward(x, p, mode);
  REQUIRE(out->value.shape() == Shape{1, 4, 4, 5, 5});
  auto loss = weighted_sum(out, w);
  backward(loss);

  std::vector<std::pair<std::string, Var<double>>> params;
  collect_params(p, "", params);
  params.emplace_back("input", x);
  double worst = 0;
  std::string worst_name;
  for (auto& [name, v] : params) {
    REQUIRE(v->has_grad());
    const std::int64_t n = v->value.numel();
    const std::int64_t stride = std::max<std::int64_t>(1, n / 25);
    for (std::int64_t i = 0; i < n; i += stride) {
      const double save = v->value[i];
      v->value[i] = save + 1e-5;
      const double up = fd_loss(p, x, w, mode);
      v->value[i] = save - 1e-5;
      const double dn = fd_loss(p, x, w, mode);
      v->value[i] = save;
      const double err = ref::rel_err((up - dn) / 2e-5, v->grad[i]);
      if (err > worst) {
        worst = err;
        worst_name = name;
      }
    }
  }
  INFO("worst param: ", worst_name);
  CHECK(worst <= 1e-4);
}

TEST_CASE("closed-form block cost equals the instrumented meter") {
  for (ConvBackend backend : {ConvBackend::pseudo3d, ConvBackend::full3d})
    for (bool att : {true, false})
      for (bool fres : {true, false})
        for (std::int64_t stride : {1, 2}) {
          P3DBlockConfig cfg;
          cfg.in_channels = 5;
          cfg.mid_channels = 3;
          cfg.out_channels = 7;
          cfg.spatial_stride = stride;
          cfg.enable_attention = att;
          cfg.enable_feature_residual = fres;
          cfg.backend = backend;
          auto p = make_block<float>(cfg, 3, "cost");
          Rng rng = Rng::stream(41, "cost-x", static_cast<std::uint64_t>(stride),
                                static_cast<std::uint64_t>(att));
          auto x = make_param(Tensor<float>::uniform(Shape{2, 5, 4, 9, 9}, rng, -1.0f, 1.0f));

          madd_meter::arm();
          {
            NoGradGuard g;
            block_forward(x, p, BatchNormMode::eval);
          }
          const std::uint64_t measured = madd_meter::value();
          madd_meter::disarm();

          BlockCost cost = count_block_cost(cfg, Shape{2, 5, 4, 9, 9});
          CHECK(cost.madds == measured);
          CHECK(cost.params == param_numel(p));
        }
}

TEST_CASE("ablation parameter deltas follow the closed forms") {
  P3DBlockConfig cfg;
  cfg.in_channels = 16;
  cfg.mid_channels = 8;
  cfg.out_channels = 16;
  const Shape in{1, 16, 4, 8, 8};

  // Attention toggle: width^2 + width with the residual feature in place.
  const std::int64_t w3 = 3 * cfg.mid_channels;
  P3DBlockConfig noatt = cfg;
  noatt.enable_attention = false;
  CHECK(count_block_cost(cfg, in).params - count_block_cost(noatt, in).params == w3 * w3 + w3);

  // Residual-feature toggle resizes W (3C' -> 2C') and the restore kernel.
  P3DBlockConfig nofres = cfg;
  nofres.enable_feature_residual = false;
  const std::int64_t w2 = 2 * cfg.mid_channels;
  const std::int64_t want = (w3 * w3 - w2 * w2) + (w3 - w2)  // attention W and b
                            + cfg.out_channels * (w3 - w2);  // restore kernel columns
  CHECK(count_block_cost(cfg, in).params - count_block_cost(nofres, in).params == want);

  // Decoupled vs full kernels at equal widths: (9+3) vs 27 taps per C'^2.
  P3DBlockConfig bare = cfg;
  bare.enable_attention = false;
  bare.enable_feature_residual = false;
  P3DBlockConfig full = bare;
  full.backend = ConvBackend::full3d;
  const std::int64_t m = cfg.mid_channels;
  const std::int64_t conv_delta = 27 * m * m - (9 + 3) * m * m;
  const std::int64_t unit_delta = m + 2 * m;              // one conv's bias+BN vs two convs'
  const std::int64_t restore_delta = cfg.out_channels * (w2 - m);
  CHECK(count_block_cost(full, in).params - count_block_cost(bare, in).params ==
        conv_delta - unit_delta - restore_delta);

  // Identical configs: zero delta.
  CHECK(count_block_cost(cfg, in).params == count_block_cost(cfg, in).params);
}
