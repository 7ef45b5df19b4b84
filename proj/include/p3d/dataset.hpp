#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "p3d/frames.hpp"

// On-disk dataset access. Layout: root/<class>/<video>/img_00001.png (or
// .jpg), frames numbered from 1. An index file (root/index.txt, one line per
// video: rel_path,label,frames,fps) plus root/classes.txt caches the scan.

namespace p3d {

struct VideoEntry {
  std::string rel_path;  // "<class>/<video>" relative to the dataset root
  int label = 0;
  std::int64_t frames = 0;
  double fps = 0;
};

struct DatasetIndex {
  std::filesystem::path root;
  std::vector<std::string> classes;  // label id -> class name
  std::vector<VideoEntry> entries;
};

// Walk the layout; classes and videos are taken in sorted order so label ids
// and entry order are stable across filesystems.
DatasetIndex scan_dataset(const std::filesystem::path& root, double default_fps = 15.0);

void save_index(const DatasetIndex& index);
DatasetIndex load_index(const std::filesystem::path& root);

// load_index if index.txt exists, otherwise scan and save.
DatasetIndex load_or_scan(const std::filesystem::path& root, double default_fps = 15.0);

// Decode all frames of one video into a [L,H,W,3] float sequence in [0,1].
FrameSequence load_frames(const DatasetIndex& index, const VideoEntry& entry);

// Synthetic motion-direction dataset: one white square per video moving at a
// constant velocity on a torus, direction decided by the class, start
// position uniform. Single frames are identically distributed across classes;
// only motion separates them.
struct ToySpec {
  std::int64_t videos_per_class_train = 50;
  std::int64_t videos_per_class_val = 20;
  std::int64_t frames = 24;
  std::int64_t image = 64;
  std::int64_t square = 8;
  std::int64_t speed = 2;  // pixels per frame
  double fps = 15.0;
};

struct ToyVideoMeta {
  std::string split;     // "train" or "val"
  std::string rel_path;  // relative to the split root
  int label = 0;
  std::vector<std::array<std::int64_t, 2>> positions;  // per-frame square top-left (y,x)
};

inline const std::array<const char*, 4>& toy_class_names() {
  static const std::array<const char*, 4> names = {"move_down", "move_left", "move_right",
                                                   "move_up"};
  return names;
}

// Writes out_root/train and out_root/val as independent dataset roots (with
// index files) and returns per-video trajectories for verification.
std::vector<ToyVideoMeta> generate_toy_dataset(const ToySpec& spec, std::uint64_t seed,
                                               const std::filesystem::path& out_root);

}  // namespace p3d
