#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <thread>
#include <vector>

#include "p3d/dataset.hpp"
#include "p3d/frames.hpp"
#include "p3d/network.hpp"

// SGD training loop, the 10-clip evaluation protocol, and the batch assembly
// that feeds both. Every random decision is drawn from a stream keyed by
// (seed, purpose, epoch, video), so runs are reproducible, order-independent
// across loader workers, and resumable without serializing generator state.

namespace p3d {

struct TrainConfig {
  double lr = 0.02;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::int64_t batch_size = 8;
  std::int64_t epochs = 60;
  std::vector<double> milestones = {0.5, 0.75};  // fractions of epochs; lr x0.1 at each
  std::uint64_t seed = 1;
  std::int64_t workers = 1;
  std::int64_t checkpoint_every = 1;  // epochs between snapshots; final always written

  // Data pipeline. Zeros mean "leave the source timing/size alone".
  double target_fps = 0;
  std::int64_t short_side = 0;
  std::vector<double> scale_choices = {1.0};
  bool residual_after_augment = false;
  PadPolicy pad = PadPolicy::repeat_last;
  std::array<float, 3> rgb_mean{0.45f, 0.45f, 0.45f};
  std::array<float, 3> rgb_std{0.225f, 0.225f, 0.225f};
  std::array<float, 3> res_mean{0.f, 0.f, 0.f};
  std::array<float, 3> res_std{0.225f, 0.225f, 0.225f};
  std::int64_t eval_clips = 10;

  void validate() const {
    if (lr < 0 || momentum < 0 || momentum >= 1 || weight_decay < 0)
      throw ConfigError("train: lr/momentum/weight_decay out of range");
    if (batch_size < 1 || epochs < 1 || workers < 1 || eval_clips < 1)
      throw ConfigError("train: batch_size/epochs/workers/eval_clips must be positive");
    if (checkpoint_every < 0) throw ConfigError("train: checkpoint_every must be >= 0");
    double prev = 0;
    for (double m : milestones) {
      if (m <= prev || m > 1) throw ConfigError("train: milestones must increase within (0,1]");
      prev = m;
    }
    if (scale_choices.empty()) throw ConfigError("train: need at least one scale choice");
    for (double s : scale_choices)
      if (s <= 0) throw ConfigError("train: scale choices must be positive");
    for (float s : rgb_std)
      if (s <= 0) throw ConfigError("train: rgb_std must be positive");
    for (float s : res_std)
      if (s <= 0) throw ConfigError("train: res_std must be positive");
    if (target_fps < 0 || short_side < 0)
      throw ConfigError("train: target_fps/short_side must be >= 0");
  }
};

// Step-decay schedule: epoch e (1-based) runs at lr * 0.1^k where k counts
// milestones with e > ceil(frac * epochs). Ceiling keeps short runs at base
// lr instead of letting a fractional milestone round down to epoch zero.
inline double lr_at(const TrainConfig& tc, std::int64_t epoch) {
  double lr = tc.lr;
  for (double frac : tc.milestones)
    if (epoch > static_cast<std::int64_t>(std::ceil(frac * static_cast<double>(tc.epochs))))
      lr *= 0.1;
  return lr;
}

// SGD with momentum and decoupled-from-nothing classic L2: v = mu*v + g + wd*p,
// p -= lr*v. All arithmetic in 32-bit so runs are bitwise reproducible.
struct Sgd {
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<std::pair<std::string, Var<float>>> params;
  std::vector<Tensor<float>> vel;

  Sgd(std::vector<std::pair<std::string, Var<float>>> p, double mu, double wd)
      : momentum(mu), weight_decay(wd), params(std::move(p)) {
    for (auto& [name, v] : params) vel.emplace_back(v->value.shape());
  }

  void step(double lr) {
    const float mu = static_cast<float>(momentum);
    const float wd = static_cast<float>(weight_decay);
    const float rate = static_cast<float>(lr);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& v = params[i].second;
      if (!v->has_grad()) continue;  // parameter not on this loss path
      Tensor<float>& vel_i = vel[i];
      for (std::int64_t j = 0; j < vel_i.numel(); ++j) {
        vel_i[j] = mu * vel_i[j] + v->grad[j] + wd * v->value[j];
        v->value[j] -= rate * vel_i[j];
      }
    }
  }

  void append_state(std::vector<std::pair<std::string, Tensor<float>>>& records) const {
    for (std::size_t i = 0; i < params.size(); ++i)
      records.emplace_back("opt." + params[i].first + ".v", vel[i]);
  }

  // Missing records leave the matching velocity at zero (fresh optimizer).
  void restore_state(const Checkpoint<float>& ck) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Tensor<float>* t = ck.find("opt." + params[i].first + ".v");
      if (!t) continue;
      if (t->shape() != vel[i].shape())
        throw ShapeError("checkpoint: optimizer state " + params[i].first + " has shape " +
                         shape_str(t->shape()) + ", expected " + shape_str(vel[i].shape()));
      vel[i] = *t;
    }
  }
};

namespace detail {

inline FrameSequence load_pipeline(const DatasetIndex& idx, const VideoEntry& entry,
                                   const TrainConfig& tc) {
  FrameSequence seq = load_frames(idx, entry);
  if (tc.target_fps > 0 || tc.short_side > 0) {
    const double fps = tc.target_fps > 0 ? tc.target_fps : seq.fps;
    seq = resample_and_resize(seq, fps, tc.short_side);
  }
  return seq;
}

// One training sample: random window, one augmentation applied identically to
// both modalities, standardized into row n of the batch tensors.
inline void build_train_sample(const DatasetIndex& idx, const NetworkConfig& nc,
                               const TrainConfig& tc, std::int64_t epoch, std::int64_t video,
                               Tensor<float>* rgb_batch, Tensor<float>* res_batch,
                               std::int64_t n) {
  const VideoEntry& entry = idx.entries[static_cast<std::size_t>(video)];
  FrameSequence seq = load_pipeline(idx, entry, tc);
  Rng rng = Rng::stream(tc.seed, "sample", static_cast<std::uint64_t>(epoch),
                        static_cast<std::uint64_t>(video));
  const std::int64_t span = std::max<std::int64_t>(0, seq.length() - nc.clip_len);
  const std::int64_t start =
      span > 0 ? static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(span + 1)))
               : 0;
  const AugmentChoice choice = sample_augment(rng, tc.scale_choices);

  Clip rgb;
  const bool need_rgb = nc.use_rgb || (nc.use_residual && tc.residual_after_augment);
  if (need_rgb) rgb = build_rgb_clip(seq, start, nc.clip_len, tc.pad);

  if (nc.use_residual) {
    Clip res;
    if (tc.residual_after_augment) {
      Clip aug_rgb = apply_augment(rgb, choice, nc.crop);
      res = residual_from_rgb_clip(aug_rgb, nc.step_size, tc.pad);
      if (nc.use_rgb) write_clip_to_batch(aug_rgb, tc.rgb_mean.data(), tc.rgb_std.data(),
                                          *rgb_batch, n);
      write_clip_to_batch(res, tc.res_mean.data(), tc.res_std.data(), *res_batch, n);
      return;
    }
    res = apply_augment(build_residual_clip(seq, start, nc.clip_len, nc.step_size, tc.pad),
                        choice, nc.crop);
    write_clip_to_batch(res, tc.res_mean.data(), tc.res_std.data(), *res_batch, n);
  }
  if (nc.use_rgb)
    write_clip_to_batch(apply_augment(rgb, choice, nc.crop), tc.rgb_mean.data(),
                        tc.rgb_std.data(), *rgb_batch, n);
}

// Rows are disjoint, each sample's randomness is self-keyed, so worker count
// never changes the assembled batch.
template <class BuildRow>
void parallel_rows(std::int64_t rows, std::int64_t workers, BuildRow&& build) {
  if (workers <= 1 || rows <= 1) {
    for (std::int64_t r = 0; r < rows; ++r) build(r);
    return;
  }
  const std::int64_t n_threads = std::min(workers, rows);
  std::vector<std::thread> pool;
  std::mutex err_mu;
  std::exception_ptr first_err;
  for (std::int64_t t = 0; t < n_threads; ++t)
    pool.emplace_back([&, t]() {
      try {
        for (std::int64_t r = t; r < rows; r += n_threads) build(r);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!first_err) first_err = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  if (first_err) std::rethrow_exception(first_err);
}

// Rank of the true class under "lower id wins ties": strictly better scores
// plus equal scores at lower ids.
template <class S>
std::int64_t label_rank(const S* scores, std::int64_t classes, int label) {
  std::int64_t rank = 0;
  for (std::int64_t k = 0; k < classes; ++k) {
    if (scores[k] > scores[label]) ++rank;
    if (k < label && scores[k] == scores[label]) ++rank;
  }
  return rank;
}

}  // namespace detail

struct EpochStats {
  std::int64_t epoch = 0;
  double lr = 0;
  double loss = 0;
  double top1 = 0;
  double top5 = 0;
  double wall = 0;  // seconds
};

struct TrainResult {
  std::vector<EpochStats> epochs;
};

// Runs epochs start_epoch+1 .. tc.epochs, appending to out_dir/epochs.log and
// snapshotting checkpoints. Pass the checkpoint that restored the model as
// `resume` so optimizer velocity continues instead of restarting from zero.
// until_epoch (when nonzero) stops early WITHOUT shortening the lr schedule,
// emulating an interrupted run that a later call resumes.
inline TrainResult train(Model<float>& model, const DatasetIndex& data, const TrainConfig& tc,
                         const std::filesystem::path& out_dir, std::int64_t start_epoch = 0,
                         const Checkpoint<float>* resume = nullptr,
                         std::int64_t until_epoch = 0) {
  tc.validate();
  const NetworkConfig& nc = model.config;
  if (data.entries.empty()) throw ConfigError("train: dataset is empty");
  for (const auto& e : data.entries)
    if (e.label < 0 || e.label >= nc.classes)
      throw ConfigError("train: label " + std::to_string(e.label) + " outside " +
                        std::to_string(nc.classes) + " classes (" + e.rel_path + ")");

  std::filesystem::create_directories(out_dir);
  std::ofstream log(out_dir / "epochs.log", std::ios::app);
  if (!log) throw IoError("train: cannot open " + (out_dir / "epochs.log").string());

  std::vector<std::pair<std::string, Var<float>>> params;
  collect_model_params(model, params);
  Sgd opt(std::move(params), tc.momentum, tc.weight_decay);
  if (resume) opt.restore_state(*resume);

  std::vector<Var<float>> param_vars;
  for (auto& [name, v] : opt.params) param_vars.push_back(v);

  TrainResult result;
  std::vector<std::int64_t> order(data.entries.size());
  std::iota(order.begin(), order.end(), 0);

  const std::int64_t last_epoch =
      until_epoch > 0 ? std::min(until_epoch, tc.epochs) : tc.epochs;
  for (std::int64_t epoch = start_epoch + 1; epoch <= last_epoch; ++epoch) {
    const auto wall_start = std::chrono::steady_clock::now();
    const double lr = lr_at(tc, epoch);
    // Shuffle from identity so the order is a pure function of (seed, epoch);
    // shuffling in place would make it depend on which epochs ran before,
    // breaking exact resume.
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng = Rng::stream(tc.seed, "shuffle", static_cast<std::uint64_t>(epoch));
    shuffle_rng.shuffle(order.begin(), order.end());

    double loss_sum = 0;
    std::int64_t seen = 0, hit1 = 0, hit5 = 0;
    for (std::size_t off = 0; off < order.size(); off += static_cast<std::size_t>(tc.batch_size)) {
      const std::int64_t n =
          std::min<std::int64_t>(tc.batch_size, static_cast<std::int64_t>(order.size() - off));
      const Shape batch_shape{n, 3, nc.clip_len, nc.crop, nc.crop};
      Tensor<float> rgb_batch, res_batch;
      if (nc.use_rgb) rgb_batch = Tensor<float>(batch_shape);
      if (nc.use_residual) res_batch = Tensor<float>(batch_shape);
      std::vector<int> labels(static_cast<std::size_t>(n));
      detail::parallel_rows(n, tc.workers, [&](std::int64_t r) {
        const std::int64_t video = order[off + static_cast<std::size_t>(r)];
        labels[static_cast<std::size_t>(r)] = data.entries[static_cast<std::size_t>(video)].label;
        detail::build_train_sample(data, nc, tc, epoch, video,
                                   nc.use_rgb ? &rgb_batch : nullptr,
                                   nc.use_residual ? &res_batch : nullptr, r);
      });

      zero_grad(param_vars);
      auto logits = forward(model, nc.use_rgb ? &rgb_batch : nullptr,
                            nc.use_residual ? &res_batch : nullptr, BatchNormMode::train);
      auto loss = softmax_cross_entropy(logits, labels);
      const float batch_loss = loss->value[0];
      if (!std::isfinite(batch_loss))
        throw NumericError("train: loss diverged at epoch " + std::to_string(epoch) +
                           " (lr too high?)");
      backward(loss);
      opt.step(lr);

      loss_sum += static_cast<double>(batch_loss) * static_cast<double>(n);
      for (std::int64_t r = 0; r < n; ++r) {
        const float* row = logits->value.data() + r * nc.classes;
        const std::int64_t rank =
            detail::label_rank(row, nc.classes, labels[static_cast<std::size_t>(r)]);
        hit1 += rank < 1;
        hit5 += rank < 5;
      }
      seen += n;
    }

    EpochStats st;
    st.epoch = epoch;
    st.lr = lr;
    st.loss = loss_sum / static_cast<double>(seen);
    st.top1 = static_cast<double>(hit1) / static_cast<double>(seen);
    st.top5 = static_cast<double>(hit5) / static_cast<double>(seen);
    st.wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
    result.epochs.push_back(st);

    char line[160];
    std::snprintf(line, sizeof(line), "%lld %.9g %.9g %.6f %.6f %.3f\n",
                  static_cast<long long>(st.epoch), st.lr, st.loss, st.top1, st.top5, st.wall);
    log << line;
    log.flush();

    const bool stop = epoch == last_epoch;
    if (stop || (tc.checkpoint_every > 0 && epoch % tc.checkpoint_every == 0)) {
      Checkpoint<float> ck = checkpoint_from_model(model, static_cast<std::uint64_t>(epoch),
                                                   tc.seed);
      opt.append_state(ck.records);
      char name[32];
      std::snprintf(name, sizeof(name), "epoch_%04lld.ckpt", static_cast<long long>(epoch));
      write_checkpoint(out_dir / name, ck);
      if (epoch == tc.epochs) write_checkpoint(out_dir / "final.ckpt", ck);
    }
  }
  return result;
}

struct EvalResult {
  double top1 = 0;
  double top5 = 0;
  std::int64_t videos = 0;
};

// 10-clip protocol: per video, uniformly spaced windows, center crop, softmax
// scores averaged in double, then video-level top-1/top-5. Per-video work is
// independent and integer hits are order-free, so index order cannot matter.
inline EvalResult evaluate(Model<float>& model, const DatasetIndex& data,
                           const TrainConfig& tc) {
  tc.validate();
  const NetworkConfig& nc = model.config;
  EvalResult out;
  if (data.entries.empty()) return out;

  NoGradGuard guard;
  std::vector<double> scores(static_cast<std::size_t>(nc.classes));
  for (const auto& entry : data.entries) {
    FrameSequence seq = detail::load_pipeline(data, entry, tc);
    const std::vector<std::int64_t> starts =
        sample_test_clips(seq.length(), nc.clip_len, tc.eval_clips);
    const std::int64_t n = static_cast<std::int64_t>(starts.size());
    const Shape batch_shape{n, 3, nc.clip_len, nc.crop, nc.crop};
    Tensor<float> rgb_batch, res_batch;
    if (nc.use_rgb) rgb_batch = Tensor<float>(batch_shape);
    if (nc.use_residual) res_batch = Tensor<float>(batch_shape);
    detail::parallel_rows(n, tc.workers, [&](std::int64_t r) {
      const std::int64_t start = starts[static_cast<std::size_t>(r)];
      if (nc.use_rgb)
        write_clip_to_batch(center_crop(build_rgb_clip(seq, start, nc.clip_len, tc.pad), nc.crop),
                            tc.rgb_mean.data(), tc.rgb_std.data(), rgb_batch, r);
      if (nc.use_residual)
        write_clip_to_batch(
            center_crop(
                build_residual_clip(seq, start, nc.clip_len, nc.step_size, tc.pad), nc.crop),
            tc.res_mean.data(), tc.res_std.data(), res_batch, r);
    });

    auto logits = forward(model, nc.use_rgb ? &rgb_batch : nullptr,
                          nc.use_residual ? &res_batch : nullptr, BatchNormMode::eval);
    std::fill(scores.begin(), scores.end(), 0.0);
    for (std::int64_t r = 0; r < n; ++r) {
      const float* row = logits->value.data() + r * nc.classes;
      float mx = row[0];
      for (std::int64_t k = 1; k < nc.classes; ++k) mx = std::max(mx, row[k]);
      double denom = 0;
      for (std::int64_t k = 0; k < nc.classes; ++k)
        denom += std::exp(static_cast<double>(row[k] - mx));
      for (std::int64_t k = 0; k < nc.classes; ++k)
        scores[static_cast<std::size_t>(k)] +=
            std::exp(static_cast<double>(row[k] - mx)) / denom;
    }
    for (double& s : scores) s /= static_cast<double>(n);

    const std::int64_t rank = detail::label_rank(scores.data(), nc.classes, entry.label);
    out.top1 += rank < 1;
    out.top5 += rank < 5;
    ++out.videos;
  }
  out.top1 /= static_cast<double>(out.videos);
  out.top5 /= static_cast<double>(out.videos);
  return out;
}

}  // namespace p3d
