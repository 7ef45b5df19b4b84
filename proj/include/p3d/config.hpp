#pragma once

#include <filesystem>
#include <string>

#include "p3d/network.hpp"
#include "p3d/trainer.hpp"

// Flat key=value run description covering the network, the trainer, and the
// dataset paths. One file fully determines a run; the canonical echo of the
// effective config is written into the run directory so any run can be
// reproduced from its own artifacts.
//
// File syntax: one key=value per line, '#' starts a comment, blank lines
// ignored. Unknown and duplicate keys are errors so typos cannot silently
// fall back to defaults. Every key has a default (the struct initializers);
// an empty file is the canonical two-modality 112/T=32 configuration.

namespace p3d {

struct RunConfig {
  NetworkConfig net;
  TrainConfig train;
  std::string train_dir;
  std::string val_dir;
  std::string out_root = "runs";

  void validate() const {
    net.validate();
    train.validate();
  }
};

// Canonical serialization: fixed key order, shortest round-trip number
// formatting. parse(run_config_text(rc)) reproduces rc exactly.
std::string run_config_text(const RunConfig& rc);

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

// FNV-1a 64 over the canonical text with the seed line excluded, first 12 hex
// chars. Runs that differ only by seed share the prefix and are told apart by
// the seed suffix in run_dir_name.
std::string config_hash12(const RunConfig& rc);
std::string run_dir_name(const RunConfig& rc);

}  // namespace p3d
