#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "p3d/rng.hpp"
#include "p3d/tensor.hpp"

// Frame-domain transforms: fps resampling, short-side resize, residual frames,
// clip assembly with padding policy, train-time augmentation and the uniform
// test-clip sampler. Everything here is pure, works on [0,1] float pixels in
// [T,H,W,C] layout, and takes Rng streams explicitly so results depend only on
// (seed, purpose, keys).

namespace p3d {

enum class Modality { rgb, residual };
enum class PadPolicy { repeat_last, none };

inline const char* modality_name(Modality m) {
  return m == Modality::rgb ? "rgb" : "residual";
}

struct FrameSequence {
  Tensor<float> data;  // [L,H,W,3], values in [0,1]
  double fps = 0;
  std::string id;

  std::int64_t length() const { return data.numel() ? data.dim(0) : 0; }
  std::int64_t height() const { return data.dim(1); }
  std::int64_t width() const { return data.dim(2); }

  const float* frame(std::int64_t t) const {
    return data.data() + t * data.dim(1) * data.dim(2) * 3;
  }
  float* frame(std::int64_t t) { return data.data() + t * data.dim(1) * data.dim(2) * 3; }
};

struct Clip {
  Tensor<float> data;  // [T,H,W,3]
  Modality modality = Modality::rgb;
  std::int64_t step_size = 0;  // residual clips record their s
  std::string source_id;
  std::int64_t start = 0;

  std::int64_t frames() const { return data.dim(0); }
  std::int64_t height() const { return data.dim(1); }
  std::int64_t width() const { return data.dim(2); }
};

// Round-half-up, the rounding rule used across the pipeline (resize extents,
// test-clip starts).
inline std::int64_t round_half_up(double v) {
  return static_cast<std::int64_t>(std::floor(v + 0.5));
}

namespace detail {

// Bilinear sampling with half-pixel centers; identity when out extents equal
// in extents (so scale-1.0 augmentation is exactly crop-only).
inline void resize_bilinear_frame(const float* src, std::int64_t H, std::int64_t W,
                                  float* dst, std::int64_t Ho, std::int64_t Wo) {
  if (Ho == H && Wo == W) {
    std::copy(src, src + H * W * 3, dst);
    return;
  }
  const double sy = static_cast<double>(H) / static_cast<double>(Ho);
  const double sx = static_cast<double>(W) / static_cast<double>(Wo);
  for (std::int64_t y = 0; y < Ho; ++y) {
    double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
    if (fy < 0) fy = 0;
    if (fy > static_cast<double>(H - 1)) fy = static_cast<double>(H - 1);
    const std::int64_t y0 = static_cast<std::int64_t>(fy);
    const std::int64_t y1 = std::min(y0 + 1, H - 1);
    const float wy = static_cast<float>(fy - static_cast<double>(y0));
    for (std::int64_t x = 0; x < Wo; ++x) {
      double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
      if (fx < 0) fx = 0;
      if (fx > static_cast<double>(W - 1)) fx = static_cast<double>(W - 1);
      const std::int64_t x0 = static_cast<std::int64_t>(fx);
      const std::int64_t x1 = std::min(x0 + 1, W - 1);
      const float wx = static_cast<float>(fx - static_cast<double>(x0));
      const float* p00 = src + (y0 * W + x0) * 3;
      const float* p01 = src + (y0 * W + x1) * 3;
      const float* p10 = src + (y1 * W + x0) * 3;
      const float* p11 = src + (y1 * W + x1) * 3;
      float* out = dst + (y * Wo + x) * 3;
      for (int c = 0; c < 3; ++c) {
        const float top = p00[c] + (p01[c] - p00[c]) * wx;
        const float bot = p10[c] + (p11[c] - p10[c]) * wx;
        out[c] = top + (bot - top) * wy;
      }
    }
  }
}

}  // namespace detail

// Nearest-index frame-rate fix followed by aspect-preserving short-side
// resize. short_side = 0 skips the resize (small synthetic frames).
inline FrameSequence resample_and_resize(const FrameSequence& seq, double target_fps = 15.0,
                                         std::int64_t short_side = 256) {
  if (seq.fps <= 0) throw ConfigError("resample: source fps must be positive");
  if (target_fps <= 0) throw ConfigError("resample: target fps must be positive");
  const std::int64_t L = seq.length();
  const double ratio = seq.fps / target_fps;

  std::vector<std::int64_t> picks;
  for (std::int64_t i = 0;; ++i) {
    const std::int64_t idx = round_half_up(static_cast<double>(i) * ratio);
    if (idx >= L) break;
    picks.push_back(idx);
  }
  if (picks.size() < 2)
    throw ConfigError("resample: sequence '" + seq.id + "' has fewer than 2 frames at " +
                      std::to_string(target_fps) + " fps");

  const std::int64_t H = seq.height(), W = seq.width();
  std::int64_t Ho = H, Wo = W;
  if (short_side > 0 && std::min(H, W) != short_side) {
    const double scale = static_cast<double>(short_side) / static_cast<double>(std::min(H, W));
    if (H <= W) {
      Ho = short_side;
      Wo = round_half_up(static_cast<double>(W) * scale);
    } else {
      Wo = short_side;
      Ho = round_half_up(static_cast<double>(H) * scale);
    }
  }

  FrameSequence out;
  out.fps = target_fps;
  out.id = seq.id;
  out.data = Tensor<float>(Shape{static_cast<std::int64_t>(picks.size()), Ho, Wo, 3});
  for (std::size_t i = 0; i < picks.size(); ++i)
    detail::resize_bilinear_frame(seq.frame(picks[i]), H, W, out.frame(static_cast<std::int64_t>(i)),
                                  Ho, Wo);
  return out;
}

// |frame(t1+s) - frame(t1)| per pixel per channel.
inline Tensor<float> residual_frame(const FrameSequence& seq, std::int64_t t1, std::int64_t s) {
  if (s < 1) throw ConfigError("residual_frame: step size must be >= 1");
  if (t1 < 0 || t1 + s >= seq.length())
    throw ShapeError("residual_frame: frames " + std::to_string(t1) + " and " +
                     std::to_string(t1 + s) + " out of range (length " +
                     std::to_string(seq.length()) + ")");
  const std::int64_t n = seq.height() * seq.width() * 3;
  Tensor<float> out(Shape{seq.height(), seq.width(), 3});
  const float* a = seq.frame(t1);
  const float* b = seq.frame(t1 + s);
  for (std::int64_t i = 0; i < n; ++i) out[i] = std::abs(b[i] - a[i]);
  return out;
}

// RGB clip over [start, start+T). Indices past the end repeat the last frame
// under repeat_last (short-video policy); PadPolicy::none rejects instead.
inline Clip build_rgb_clip(const FrameSequence& seq, std::int64_t start, std::int64_t T,
                           PadPolicy pad = PadPolicy::repeat_last) {
  const std::int64_t L = seq.length();
  if (start < 0 || start >= L)
    throw ShapeError("build_rgb_clip: start " + std::to_string(start) +
                     " out of range (length " + std::to_string(L) + ")");
  if (T < 1) throw ConfigError("build_rgb_clip: clip length must be >= 1");
  if (pad == PadPolicy::none && start + T > L)
    throw ShapeError("build_rgb_clip: window [" + std::to_string(start) + "," +
                     std::to_string(start + T) + ") exceeds length " + std::to_string(L) +
                     " and padding is disabled");
  Clip clip;
  clip.modality = Modality::rgb;
  clip.source_id = seq.id;
  clip.start = start;
  clip.data = Tensor<float>(Shape{T, seq.height(), seq.width(), 3});
  const std::int64_t fsz = seq.height() * seq.width() * 3;
  for (std::int64_t i = 0; i < T; ++i) {
    const std::int64_t idx = std::min(start + i, L - 1);
    std::copy(seq.frame(idx), seq.frame(idx) + fsz, clip.data.data() + i * fsz);
  }
  return clip;
}

// Residual clip over the same window as the RGB clip: T-s native residual
// frames, then the padding policy restores length T (repeat_last) or leaves
// the native T-s (none).
inline Clip build_residual_clip(const FrameSequence& seq, std::int64_t start, std::int64_t T,
                                std::int64_t s, PadPolicy pad = PadPolicy::repeat_last) {
  if (s < 1) throw ConfigError("build_residual_clip: step size must be >= 1");
  if (T <= s)
    throw ConfigError("build_residual_clip: step size must be < clip length (s=" +
                      std::to_string(s) + ", T=" + std::to_string(T) + ")");
  const std::int64_t L = seq.length();
  if (start < 0 || start >= L)
    throw ShapeError("build_residual_clip: start " + std::to_string(start) +
                     " out of range (length " + std::to_string(L) + ")");
  const std::int64_t native = T - s;
  const std::int64_t total = pad == PadPolicy::repeat_last ? T : native;
  const std::int64_t fsz = seq.height() * seq.width() * 3;

  Clip clip;
  clip.modality = Modality::residual;
  clip.step_size = s;
  clip.source_id = seq.id;
  clip.start = start;
  clip.data = Tensor<float>(Shape{total, seq.height(), seq.width(), 3});
  // Window frame j is frame(min(start+j, L-1)): the repeat-last short-video
  // policy applied at the source, so residuals of padded frames vanish.
  auto window_frame = [&](std::int64_t j) { return seq.frame(std::min(start + j, L - 1)); };
  for (std::int64_t i = 0; i < native; ++i) {
    const float* a = window_frame(i);
    const float* b = window_frame(i + s);
    float* dst = clip.data.data() + i * fsz;
    for (std::int64_t p = 0; p < fsz; ++p) dst[p] = std::abs(b[p] - a[p]);
  }
  for (std::int64_t i = native; i < total; ++i)
    std::copy(clip.data.data() + (native - 1) * fsz, clip.data.data() + native * fsz,
              clip.data.data() + i * fsz);
  return clip;
}

// Recompute residuals from an (already augmented) RGB clip; the alternative
// data-layer ordering behind the residual_after_augment flag.
inline Clip residual_from_rgb_clip(const Clip& rgb, std::int64_t s,
                                   PadPolicy pad = PadPolicy::repeat_last) {
  if (rgb.modality != Modality::rgb)
    throw ConfigError("residual_from_rgb_clip: input must be an rgb clip");
  const std::int64_t T = rgb.frames();
  if (s < 1 || T <= s)
    throw ConfigError("residual_from_rgb_clip: step size must be in [1, T)");
  const std::int64_t native = T - s;
  const std::int64_t total = pad == PadPolicy::repeat_last ? T : native;
  const std::int64_t fsz = rgb.height() * rgb.width() * 3;
  Clip clip;
  clip.modality = Modality::residual;
  clip.step_size = s;
  clip.source_id = rgb.source_id;
  clip.start = rgb.start;
  clip.data = Tensor<float>(Shape{total, rgb.height(), rgb.width(), 3});
  for (std::int64_t i = 0; i < native; ++i) {
    const float* a = rgb.data.data() + i * fsz;
    const float* b = rgb.data.data() + (i + s) * fsz;
    float* dst = clip.data.data() + i * fsz;
    for (std::int64_t p = 0; p < fsz; ++p) dst[p] = std::abs(b[p] - a[p]);
  }
  for (std::int64_t i = native; i < total; ++i)
    std::copy(clip.data.data() + (native - 1) * fsz, clip.data.data() + native * fsz,
              clip.data.data() + i * fsz);
  return clip;
}

// Uniform test-clip starts: n evenly spaced over [0, length-T], first 0, last
// length-T, round half up. Short videos collapse to start 0 (padding happens
// at clip build).
inline std::vector<std::int64_t> sample_test_clips(std::int64_t length, std::int64_t T,
                                                   std::int64_t n_clips = 10) {
  if (n_clips < 1) throw ConfigError("sample_test_clips: need at least one clip");
  std::vector<std::int64_t> starts(static_cast<std::size_t>(n_clips), 0);
  const std::int64_t span = length - T;
  if (span <= 0 || n_clips == 1) return starts;
  for (std::int64_t k = 0; k < n_clips; ++k)
    starts[static_cast<std::size_t>(k)] = round_half_up(
        static_cast<double>(k) * static_cast<double>(span) / static_cast<double>(n_clips - 1));
  return starts;
}

// One sampled geometry, shared verbatim by both modalities of a pair.
struct AugmentChoice {
  double scale = 1.0;
  int corner = 4;  // 0 TL, 1 TR, 2 BL, 3 BR, 4 center
};

inline AugmentChoice sample_augment(Rng& rng, const std::vector<double>& scale_choices) {
  if (scale_choices.empty()) throw ConfigError("augment: no scale choices");
  AugmentChoice c;
  c.scale = scale_choices[rng.uniform_int(scale_choices.size())];
  c.corner = static_cast<int>(rng.uniform_int(5));
  return c;
}

inline Clip apply_augment(const Clip& clip, const AugmentChoice& choice, std::int64_t crop) {
  const std::int64_t H = clip.height(), W = clip.width();
  const std::int64_t Hs = round_half_up(static_cast<double>(H) * choice.scale);
  const std::int64_t Ws = round_half_up(static_cast<double>(W) * choice.scale);
  if (crop > Hs || crop > Ws)
    throw ShapeError("augment: crop " + std::to_string(crop) + " exceeds scaled frame " +
                     std::to_string(Hs) + "x" + std::to_string(Ws));
  std::int64_t oy = 0, ox = 0;
  switch (choice.corner) {
    case 0: oy = 0, ox = 0; break;
    case 1: oy = 0, ox = Ws - crop; break;
    case 2: oy = Hs - crop, ox = 0; break;
    case 3: oy = Hs - crop, ox = Ws - crop; break;
    default: oy = (Hs - crop) / 2, ox = (Ws - crop) / 2; break;
  }

  Clip out;
  out.modality = clip.modality;
  out.step_size = clip.step_size;
  out.source_id = clip.source_id;
  out.start = clip.start;
  const std::int64_t T = clip.frames();
  out.data = Tensor<float>(Shape{T, crop, crop, 3});
  std::vector<float> scaled(static_cast<std::size_t>(Hs * Ws * 3));
  for (std::int64_t t = 0; t < T; ++t) {
    const float* src = clip.data.data() + t * H * W * 3;
    const float* plane = src;
    if (Hs != H || Ws != W) {
      detail::resize_bilinear_frame(src, H, W, scaled.data(), Hs, Ws);
      plane = scaled.data();
    }
    float* dst = out.data.data() + t * crop * crop * 3;
    for (std::int64_t y = 0; y < crop; ++y)
      std::copy(plane + ((oy + y) * Ws + ox) * 3, plane + ((oy + y) * Ws + ox + crop) * 3,
                dst + y * crop * 3);
  }
  return out;
}

// Train-time augmentation: one (scale, corner) pair drawn from rng, applied
// identically to both modalities. Returns the transformed pair.
inline std::pair<Clip, Clip> augment_train(const Clip& rgb, const Clip& res, std::int64_t crop,
                                           const std::vector<double>& scale_choices, Rng& rng,
                                           AugmentChoice* chosen = nullptr) {
  if (rgb.height() != res.height() || rgb.width() != res.width())
    throw ShapeError("augment: rgb and residual clips disagree on frame size");
  const AugmentChoice c = sample_augment(rng, scale_choices);
  if (chosen) *chosen = c;
  return {apply_augment(rgb, c, crop), apply_augment(res, c, crop)};
}

inline Clip center_crop(const Clip& clip, std::int64_t crop) {
  return apply_augment(clip, AugmentChoice{1.0, 4}, crop);
}

// Standardize and permute one clip into row n of a [N,3,T,H,W] batch tensor.
inline void write_clip_to_batch(const Clip& clip, const float mean[3], const float stdev[3],
                                Tensor<float>& batch, std::int64_t n) {
  const std::int64_t T = clip.frames(), H = clip.height(), W = clip.width();
  if (batch.rank() != 5 || batch.dim(1) != 3 || batch.dim(2) != T || batch.dim(3) != H ||
      batch.dim(4) != W)
    throw ShapeError("write_clip_to_batch: batch " + shape_str(batch.shape()) +
                     " does not accept clip [T,H,W,C]=[" + std::to_string(T) + "," +
                     std::to_string(H) + "," + std::to_string(W) + ",3]");
  float inv[3];
  for (int c = 0; c < 3; ++c) {
    if (stdev[c] <= 0) throw ConfigError("write_clip_to_batch: std must be positive");
    inv[c] = 1.0f / stdev[c];
  }
  const float* src = clip.data.data();
  float* dst = batch.data() + n * 3 * T * H * W;
  const std::int64_t HW = H * W;
  for (std::int64_t t = 0; t < T; ++t)
    for (std::int64_t p = 0; p < HW; ++p)
      for (int c = 0; c < 3; ++c)
        dst[(c * T + t) * HW + p] = (src[(t * HW + p) * 3 + c] - mean[c]) * inv[c];
}

}  // namespace p3d
