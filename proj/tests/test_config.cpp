#include <doctest.h>

#include "p3d/config.hpp"

using namespace p3d;

TEST_CASE("canonical config text is a parse fixed point") {
  RunConfig rc;
  const std::string text = run_config_text(rc);
  RunConfig back = parse_run_config(text);
  CHECK(run_config_text(back) == text);

  // An empty file is the all-defaults config.
  RunConfig empty = parse_run_config("");
  CHECK(run_config_text(empty) == text);
}

TEST_CASE("every field round-trips through the echoed text") {
  RunConfig rc;
  rc.net.use_rgb = false;
  rc.net.step_size = 4;
  rc.net.clip_len = 16;
  rc.net.crop = 56;
  rc.net.stage_blocks = {1, 2, 3, 1};
  rc.net.stage_channels = {16, 32, 64, 128};
  rc.net.classes = 4;
  rc.net.fc1_width = 64;
  rc.net.enable_attention = false;
  rc.net.backend = ConvBackend::full3d;
  rc.net.restore = RestoreWidth::expand4x;
  rc.train.lr = 0.1 + 0.2;  // exercises shortest round-trip float printing
  rc.train.momentum = 0.85;
  rc.train.weight_decay = 5e-4;
  rc.train.batch_size = 4;
  rc.train.epochs = 7;
  rc.train.milestones = {0.25, 0.5, 0.9};
  rc.train.seed = 123456789012345ull;
  rc.train.workers = 3;
  rc.train.checkpoint_every = 0;
  rc.train.target_fps = 12.5;
  rc.train.short_side = 64;
  rc.train.scale_choices = {1.0, 0.875, 0.75};
  rc.train.residual_after_augment = true;
  rc.train.pad = PadPolicy::none;
  rc.train.rgb_mean = {0.1f, 0.2f, 0.3f};
  rc.train.res_std = {0.5f, 0.5f, 0.25f};
  rc.train.eval_clips = 3;
  rc.train_dir = "data/toy/train";
  rc.val_dir = "data/toy/val";
  rc.out_root = "out";

  RunConfig back = parse_run_config(run_config_text(rc));
  CHECK(run_config_text(back) == run_config_text(rc));
  CHECK(back.net.use_rgb == false);
  CHECK(back.net.use_residual == true);
  CHECK(back.net.backend == ConvBackend::full3d);
  CHECK(back.net.restore == RestoreWidth::expand4x);
  CHECK(back.train.lr == rc.train.lr);  // bitwise, not approximate
  CHECK(back.train.seed == rc.train.seed);
  CHECK(back.train.pad == PadPolicy::none);
  CHECK(back.train.scale_choices == rc.train.scale_choices);
  CHECK(back.train.rgb_mean == rc.train.rgb_mean);
  CHECK(back.train_dir == "data/toy/train");
}

TEST_CASE("comments, blank lines, and spacing are tolerated") {
  RunConfig rc = parse_run_config(
      "# toy run\n"
      "\n"
      "  classes = 4  \n"
      "modality=residual\n"
      "\t# trailing comment line\n");
  CHECK(rc.net.classes == 4);
  CHECK(rc.net.use_rgb == false);
  CHECK(rc.net.use_residual == true);
}

TEST_CASE("typos and malformed lines are rejected loudly") {
  CHECK_THROWS_AS(parse_run_config("clip_length=16\n"), ConfigError);  // unknown key
  CHECK_THROWS_AS(parse_run_config("crop=56\ncrop=112\n"), ConfigError);  // duplicate
  CHECK_THROWS_AS(parse_run_config("lr=fast\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("enable_attention=yes\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("modality=flow\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("modality=rgb,rgb\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("pad=zero\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("rgb_mean=0.5,0.5\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("just a line\n"), ConfigError);
  // Parses but fails component validation.
  CHECK_THROWS_AS(parse_run_config("lr=-1\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("step_size=99\nclip_len=8\n"), ConfigError);
}

TEST_CASE("modality order is canonicalized") {
  RunConfig rc = parse_run_config("modality=residual,rgb\n");
  CHECK(rc.net.use_rgb);
  CHECK(rc.net.use_residual);
  CHECK(run_config_text(rc).rfind("modality=rgb,residual\n", 0) == 0);
}

TEST_CASE("run directory name is the config hash plus the seed") {
  RunConfig rc;
  const std::string name = run_dir_name(rc);
  CHECK(name == config_hash12(rc) + "_s1");
  CHECK(config_hash12(rc).size() == 12);

  // Seed does not move the hash prefix; any other field does.
  RunConfig reseeded = rc;
  reseeded.train.seed = 999;
  CHECK(config_hash12(reseeded) == config_hash12(rc));
  CHECK(run_dir_name(reseeded) != run_dir_name(rc));

  RunConfig cropped = rc;
  cropped.net.crop = 56;
  CHECK(config_hash12(cropped) != config_hash12(rc));

  // Comment and ordering differences in the source file cancel out because
  // the hash covers the canonical echo.
  RunConfig a = parse_run_config("crop=56\nclasses=4\n");
  RunConfig b = parse_run_config("# reordered\nclasses=4\n\ncrop=56\n");
  CHECK(config_hash12(a) == config_hash12(b));
}
