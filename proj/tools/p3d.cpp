#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "p3d/analysis.hpp"
#include "p3d/config.hpp"
#include "p3d/dataset.hpp"
#include "p3d/trainer.hpp"

// Batch command-line front end. Exit codes: 0 ok, 1 threshold failure,
// 2 usage/config error, 3 numeric abort (diverged loss).

namespace fs = std::filesystem;
using namespace p3d;

namespace {

RunConfig load_config_or_default(const std::string& path) {
  return path.empty() ? parse_run_config("") : load_run_config(path);
}

// Env var beats the config file so schedulers can set parallelism without
// editing (and thus re-hashing) the run config.
void apply_worker_env(RunConfig& rc) {
  const char* env = std::getenv("P3D_NUM_WORKERS");
  if (!env || !*env) return;
  std::int64_t v = 0;
  try {
    v = std::stoll(env);
  } catch (...) {
    throw ConfigError("P3D_NUM_WORKERS is not an integer: " + std::string(env));
  }
  if (v < 1) throw ConfigError("P3D_NUM_WORKERS must be >= 1");
  rc.train.workers = v;
}

int cmd_inspect_shapes(const std::string& config_path) {
  const RunConfig rc = load_config_or_default(config_path);
  const auto rows = shape_walkthrough(rc.net);
  std::size_t w_stage = 5, w_filters = 7;
  for (const auto& r : rows) {
    w_stage = std::max(w_stage, r.stage.size());
    w_filters = std::max(w_filters, r.filters.size());
  }
  std::printf("%-*s  %-*s  %s\n", static_cast<int>(w_stage), "stage",
              static_cast<int>(w_filters), "filters", "output");
  for (const auto& r : rows)
    std::printf("%-*s  %-*s  %s\n", static_cast<int>(w_stage), r.stage.c_str(),
                static_cast<int>(w_filters), r.filters.c_str(), r.output.c_str());
  return 0;
}

int cmd_flops(const std::string& config_path) {
  const RunConfig rc = load_config_or_default(config_path);
  const CostReport rep = profile(rc.net);
  std::fputs(rep.text_table().c_str(), stdout);
  std::printf("\nmachine-readable (name<TAB>madds<TAB>params<TAB>output):\n%s",
              rep.machine_lines().c_str());

  // Backend comparison at otherwise identical settings; the madd ratio is
  // convention-independent.
  NetworkConfig alt = rc.net;
  alt.backend =
      rc.net.backend == ConvBackend::pseudo3d ? ConvBackend::full3d : ConvBackend::pseudo3d;
  const CostReport other = profile(alt);
  const CostReport& p3d_rep = rc.net.backend == ConvBackend::pseudo3d ? rep : other;
  const CostReport& full_rep = rc.net.backend == ConvBackend::pseudo3d ? other : rep;
  std::printf("\npseudo3d vs full3d at these settings:\n");
  std::printf("  pseudo3d %.3f Gmadd (%.3f GFLOPs at 2 flops/madd)\n", p3d_rep.gflops_madd(),
              p3d_rep.gflops_2x());
  std::printf("  full3d   %.3f Gmadd (%.3f GFLOPs at 2 flops/madd)\n", full_rep.gflops_madd(),
              full_rep.gflops_2x());
  std::printf("  ratio full3d/pseudo3d %.3f\n",
              static_cast<double>(full_rep.total_madds) / static_cast<double>(p3d_rep.total_madds));

  std::printf("\npublished-total comparison over (convention, restore-width) pairs:\n%s",
              flop_claim_report(rc.net).text().c_str());
  return 0;
}

int cmd_gradcheck(const std::string& target, double threshold, std::uint64_t seed) {
  GradCheckReport rep;
  if (target == "ops")
    rep = grad_check_ops(seed);
  else if (target == "block")
    rep = grad_check_block(seed);
  else if (target == "model")
    rep = grad_check_model(seed);
  else
    throw ConfigError("gradcheck: target must be block, ops, or model (got '" + target + "')");
  std::fputs(rep.text().c_str(), stdout);

  const GradCheckReport neg = grad_check_negative_control(seed);
  const bool neg_flagged = neg.worst() > 1e-2;
  std::printf("negative control (corrupted backward): rel err %.3e, %s\n", neg.worst(),
              neg_flagged ? "flagged" : "NOT FLAGGED");

  const bool ok = rep.worst() <= threshold && neg_flagged;
  std::printf("%s: worst rel err %.3e vs threshold %.1e\n", ok ? "PASS" : "FAIL", rep.worst(),
              threshold);
  return ok ? 0 : 1;
}

int cmd_train(const std::string& config_path, const std::string& resume_path) {
  RunConfig rc = load_run_config(config_path);
  apply_worker_env(rc);
  if (rc.train_dir.empty()) throw ConfigError("train: config must set train_dir");

  const fs::path run_dir = fs::path(rc.out_root) / run_dir_name(rc);
  fs::create_directories(run_dir);
  {
    std::ofstream echo(run_dir / "config.txt", std::ios::binary);
    if (!echo) throw IoError("train: cannot write " + (run_dir / "config.txt").string());
    echo << run_config_text(rc);
  }

  const DatasetIndex data = load_or_scan(rc.train_dir);
  auto model = build_model<float>(rc.net, rc.train.seed);

  Checkpoint<float> ck;
  std::int64_t start_epoch = 0;
  if (!resume_path.empty()) {
    ck = read_checkpoint<float>(resume_path);
    load_model_from_checkpoint(model, ck);
    start_epoch = static_cast<std::int64_t>(ck.epoch);
    std::printf("resuming from %s at epoch %lld\n", resume_path.c_str(),
                static_cast<long long>(start_epoch));
  }

  std::printf("run directory: %s\n", run_dir.string().c_str());
  const TrainResult r = train(model, data, rc.train, run_dir, start_epoch,
                              resume_path.empty() ? nullptr : &ck);
  if (r.epochs.empty()) {
    std::printf("nothing to do: checkpoint is already at epoch %lld of %lld\n",
                static_cast<long long>(start_epoch), static_cast<long long>(rc.train.epochs));
    return 0;
  }
  const EpochStats& last = r.epochs.back();
  std::printf("trained epochs %lld..%lld  final loss %.6g  train top1 %.4f\n",
              static_cast<long long>(r.epochs.front().epoch), static_cast<long long>(last.epoch),
              last.loss, last.top1);
  return 0;
}

int cmd_eval(const std::string& config_path, const std::string& ckpt_path) {
  RunConfig rc = load_run_config(config_path);
  apply_worker_env(rc);
  if (rc.val_dir.empty()) throw ConfigError("eval: config must set val_dir");

  const DatasetIndex data = load_or_scan(rc.val_dir);
  auto model = build_model<float>(rc.net, rc.train.seed);
  const auto ck = read_checkpoint<float>(ckpt_path);
  load_model_from_checkpoint(model, ck);

  const EvalResult ev = evaluate(model, data, rc.train);
  std::printf("videos %lld\ntop1 %.6f\ntop5 %.6f\n", static_cast<long long>(ev.videos), ev.top1,
              ev.top5);
  return 0;
}

int cmd_extract_residuals(const std::string& input, const std::string& output, std::int64_t step,
                          std::int64_t clip_len, const std::string& pad_name) {
  if (step < 1) throw ConfigError("step size must be >= 1");
  if (step >= clip_len) throw ConfigError("step size must be < clip length");
  PadPolicy pad;
  if (pad_name == "repeat")
    pad = PadPolicy::repeat_last;
  else if (pad_name == "none")
    pad = PadPolicy::none;
  else
    throw ConfigError("extract-residuals: --pad must be repeat or none");

  const DatasetIndex idx = load_or_scan(input);
  const fs::path out_root(output);
  fs::create_directories(out_root);
  std::ofstream manifest(out_root / "manifest.tsv", std::ios::binary);
  if (!manifest) throw IoError("extract-residuals: cannot write manifest in " + output);

  std::int64_t n_clips = 0;
  for (const auto& entry : idx.entries) {
    const FrameSequence seq = load_frames(idx, entry);
    const std::int64_t L = seq.length();
    fs::create_directories(out_root / fs::path(entry.rel_path).parent_path());
    // Consecutive non-overlapping windows; under "repeat" a final short
    // window is padded, under "none" it is dropped.
    for (std::int64_t start = 0, k = 0;
         pad == PadPolicy::repeat_last ? start < L : start + clip_len <= L;
         start += clip_len, ++k) {
      const Clip clip = build_residual_clip(seq, start, clip_len, step, pad);
      const fs::path rel = fs::path(entry.rel_path + "_" + std::to_string(k) + ".p3dt");
      save_tensor(out_root / rel, clip.data);
      manifest << rel.generic_string() << '\t' << entry.rel_path << '\t' << entry.label << '\t'
               << start << '\n';
      ++n_clips;
    }
  }
  if (!manifest) throw IoError("extract-residuals: manifest write failed");
  std::printf("wrote %lld clips from %zu videos to %s\n", static_cast<long long>(n_clips),
              idx.entries.size(), output.c_str());
  return 0;
}

int cmd_make_toy(const std::string& output, std::int64_t train_n, std::int64_t val_n,
                 std::int64_t frames, std::int64_t image, std::int64_t square, std::int64_t speed,
                 std::uint64_t seed) {
  ToySpec spec;
  spec.videos_per_class_train = train_n;
  spec.videos_per_class_val = val_n;
  spec.frames = frames;
  spec.image = image;
  spec.square = square;
  spec.speed = speed;
  const auto metas = generate_toy_dataset(spec, seed, output);
  std::printf("wrote %zu videos under %s (train/ and val/)\n", metas.size(), output.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pseudo-3D residual-frame action recognition toolkit"};
  app.require_subcommand(1);

  std::string config_path, resume_path, ckpt_path, target = "ops", pad_name = "repeat";
  std::string in_dir, out_dir;
  double threshold = 1e-4;
  std::uint64_t seed = 1;
  std::int64_t step = 1, clip_len = 32;
  std::int64_t toy_train = 50, toy_val = 20, toy_frames = 24, toy_image = 64, toy_square = 8,
               toy_speed = 2;

  auto* shapes = app.add_subcommand("inspect-shapes", "print the stage/output-size walkthrough");
  shapes->add_option("--config", config_path, "run config file (default: built-in canonical)");

  auto* flops = app.add_subcommand("flops", "print the analytic cost report");
  flops->add_option("--config", config_path, "run config file (default: built-in canonical)");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient check");
  grad->add_option("--target", target, "block, ops, or model")->required();
  grad->add_option("--threshold", threshold, "max allowed relative error (default 1e-4)");
  grad->add_option("--seed", seed, "sampling seed (default 1)");

  auto* train_cmd = app.add_subcommand("train", "train a model from a run config");
  train_cmd->add_option("--config", config_path, "run config file")->required();
  train_cmd->add_option("--resume", resume_path, "checkpoint to continue from");

  auto* eval_cmd = app.add_subcommand("eval", "10-clip evaluation of a checkpoint");
  eval_cmd->add_option("--config", config_path, "run config file")->required();
  eval_cmd->add_option("--ckpt", ckpt_path, "checkpoint file")->required();

  auto* extract = app.add_subcommand("extract-residuals", "write residual clips as tensor files");
  extract->add_option("--input", in_dir, "dataset root (class/video/frames layout)")->required();
  extract->add_option("--output", out_dir, "output directory")->required();
  extract->add_option("--step", step, "residual step size (default 1)");
  extract->add_option("--clip-len", clip_len, "frames per clip (default 32)");
  extract->add_option("--pad", pad_name, "short-window policy: repeat or none (default repeat)");

  auto* toy = app.add_subcommand("make-toy", "generate the synthetic motion dataset");
  toy->add_option("--output", out_dir, "output directory (gets train/ and val/)")->required();
  toy->add_option("--train-per-class", toy_train, "train videos per class (default 50)");
  toy->add_option("--val-per-class", toy_val, "val videos per class (default 20)");
  toy->add_option("--frames", toy_frames, "frames per video (default 24)");
  toy->add_option("--image", toy_image, "image side in pixels (default 64)");
  toy->add_option("--square", toy_square, "square side in pixels (default 8)");
  toy->add_option("--speed", toy_speed, "pixels per frame (default 2)");
  toy->add_option("--seed", seed, "generation seed (default 1)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (shapes->parsed()) return cmd_inspect_shapes(config_path);
    if (flops->parsed()) return cmd_flops(config_path);
    if (grad->parsed()) return cmd_gradcheck(target, threshold, seed);
    if (train_cmd->parsed()) return cmd_train(config_path, resume_path);
    if (eval_cmd->parsed()) return cmd_eval(config_path, ckpt_path);
    if (extract->parsed()) return cmd_extract_residuals(in_dir, out_dir, step, clip_len, pad_name);
    if (toy->parsed()) return cmd_make_toy(out_dir, toy_train, toy_val, toy_frames, toy_image,
                                           toy_square, toy_speed, seed);
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric abort: %s\n", e.what());
    return 3;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 2;  // unreachable with require_subcommand(1)
}
