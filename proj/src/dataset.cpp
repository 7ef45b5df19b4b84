#include "p3d/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "p3d/image_io.hpp"

namespace fs = std::filesystem;

namespace p3d {

namespace {

std::string frame_file(std::int64_t number, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "img_%05lld.%s", static_cast<long long>(number), ext);
  return buf;
}

// Frames are numbered img_00001 onward; probe both extensions.
fs::path frame_path(const fs::path& video_dir, std::int64_t number) {
  fs::path png = video_dir / frame_file(number, "png");
  if (fs::exists(png)) return png;
  fs::path jpg = video_dir / frame_file(number, "jpg");
  if (fs::exists(jpg)) return jpg;
  throw IoError("missing frame " + frame_file(number, "png") + " (or .jpg) in " +
                video_dir.string());
}

std::int64_t count_frames(const fs::path& video_dir) {
  std::int64_t n = 0;
  for (const auto& e : fs::directory_iterator(video_dir)) {
    if (!e.is_regular_file()) continue;
    const std::string name = e.path().filename().string();
    if (name.rfind("img_", 0) != 0) continue;
    const std::string ext = e.path().extension().string();
    if (ext == ".png" || ext == ".jpg") ++n;
  }
  return n;
}

std::vector<std::string> sorted_subdirs(const fs::path& dir) {
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  return names;
}

}  // namespace

DatasetIndex scan_dataset(const fs::path& root, double default_fps) {
  if (!fs::is_directory(root)) throw IoError("dataset root not found: " + root.string());
  DatasetIndex index;
  index.root = root;
  index.classes = sorted_subdirs(root);
  if (index.classes.empty()) throw IoError("dataset root has no class directories: " + root.string());
  for (std::size_t label = 0; label < index.classes.size(); ++label) {
    const fs::path class_dir = root / index.classes[label];
    for (const std::string& video : sorted_subdirs(class_dir)) {
      VideoEntry e;
      e.rel_path = index.classes[label] + "/" + video;
      e.label = static_cast<int>(label);
      e.frames = count_frames(class_dir / video);
      e.fps = default_fps;
      if (e.frames < 1) throw IoError("video has no frames: " + (class_dir / video).string());
      index.entries.push_back(std::move(e));
    }
  }
  if (index.entries.empty()) throw IoError("dataset has no videos: " + root.string());
  return index;
}

void save_index(const DatasetIndex& index) {
  {
    std::ofstream out(index.root / "classes.txt");
    if (!out) throw IoError("cannot write " + (index.root / "classes.txt").string());
    for (const auto& c : index.classes) out << c << "\n";
  }
  std::ofstream out(index.root / "index.txt");
  if (!out) throw IoError("cannot write " + (index.root / "index.txt").string());
  for (const auto& e : index.entries) {
    char fps[32];
    std::snprintf(fps, sizeof(fps), "%.9g", e.fps);
    out << e.rel_path << "," << e.label << "," << e.frames << "," << fps << "\n";
  }
}

DatasetIndex load_index(const fs::path& root) {
  DatasetIndex index;
  index.root = root;
  {
    std::ifstream in(root / "classes.txt");
    if (!in) throw IoError("cannot read " + (root / "classes.txt").string());
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) index.classes.push_back(line);
  }
  std::ifstream in(root / "index.txt");
  if (!in) throw IoError("cannot read " + (root / "index.txt").string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string path_part, label_part, frames_part, fps_part;
    if (!std::getline(ss, path_part, ',') || !std::getline(ss, label_part, ',') ||
        !std::getline(ss, frames_part, ',') || !std::getline(ss, fps_part))
      throw IoError("index.txt line " + std::to_string(lineno) +
                    ": expected rel_path,label,frames,fps");
    VideoEntry e;
    e.rel_path = path_part;
    e.label = std::stoi(label_part);
    e.frames = std::stoll(frames_part);
    e.fps = std::stod(fps_part);
    if (e.label < 0 || static_cast<std::size_t>(e.label) >= index.classes.size())
      throw IoError("index.txt line " + std::to_string(lineno) + ": label " + label_part +
                    " outside classes.txt (size " + std::to_string(index.classes.size()) + ")");
    index.entries.push_back(std::move(e));
  }
  if (index.entries.empty()) throw IoError("index.txt is empty: " + (root / "index.txt").string());
  return index;
}

DatasetIndex load_or_scan(const fs::path& root, double default_fps) {
  if (fs::exists(root / "index.txt") && fs::exists(root / "classes.txt")) return load_index(root);
  DatasetIndex index = scan_dataset(root, default_fps);
  save_index(index);
  return index;
}

FrameSequence load_frames(const DatasetIndex& index, const VideoEntry& entry) {
  const fs::path video_dir = index.root / entry.rel_path;
  FrameSequence seq;
  seq.fps = entry.fps;
  seq.id = entry.rel_path;
  for (std::int64_t t = 0; t < entry.frames; ++t) {
    ImageU8 img = load_image(frame_path(video_dir, t + 1));
    if (t == 0) {
      seq.data = Tensor<float>(Shape{entry.frames, img.height, img.width, 3});
    } else if (img.height != seq.height() || img.width != seq.width()) {
      throw ShapeError("video " + entry.rel_path + ": frame " + std::to_string(t + 1) +
                       " is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                       ", expected " + std::to_string(seq.height()) + "x" +
                       std::to_string(seq.width()));
    }
    float* dst = seq.frame(t);
    const std::size_t n = img.rgb.size();
    for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<float>(img.rgb[i]) * (1.0f / 255.0f);
  }
  return seq;
}

namespace {

// Direction per class, in the sorted-name order scan_dataset will assign:
// move_down, move_left, move_right, move_up.
constexpr std::array<std::array<std::int64_t, 2>, 4> kToyDirections = {
    {{1, 0}, {0, -1}, {0, 1}, {-1, 0}}};

void render_toy_frame(ImageU8& img, std::int64_t image, std::int64_t square,
                      std::array<std::int64_t, 2> pos) {
  std::fill(img.rgb.begin(), img.rgb.end(), std::uint8_t{0});
  for (std::int64_t dy = 0; dy < square; ++dy) {
    const std::int64_t y = ((pos[0] + dy) % image + image) % image;
    for (std::int64_t dx = 0; dx < square; ++dx) {
      const std::int64_t x = ((pos[1] + dx) % image + image) % image;
      std::uint8_t* px = img.rgb.data() + (y * image + x) * 3;
      px[0] = px[1] = px[2] = 255;
    }
  }
}

}  // namespace

std::vector<ToyVideoMeta> generate_toy_dataset(const ToySpec& spec, std::uint64_t seed,
                                               const fs::path& out_root) {
  if (spec.speed < 1) throw ConfigError("toy dataset: speed must be >= 1 pixel/frame");
  if (spec.frames < 2) throw ConfigError("toy dataset: need at least 2 frames");
  if (spec.square < 1 || spec.square >= spec.image)
    throw ConfigError("toy dataset: square must fit inside the image");
  if (spec.videos_per_class_train < 1 || spec.videos_per_class_val < 1)
    throw ConfigError("toy dataset: each split needs at least one video per class");

  std::vector<ToyVideoMeta> metas;
  ImageU8 img;
  img.height = spec.image;
  img.width = spec.image;
  img.rgb.assign(static_cast<std::size_t>(spec.image * spec.image * 3), 0);

  const std::array<std::pair<const char*, std::int64_t>, 2> splits = {
      {{"train", spec.videos_per_class_train}, {"val", spec.videos_per_class_val}}};
  for (const auto& [split, per_class] : splits) {
    const fs::path split_root = out_root / split;
    for (int label = 0; label < 4; ++label) {
      const std::string class_name = toy_class_names()[static_cast<std::size_t>(label)];
      for (std::int64_t v = 0; v < per_class; ++v) {
        // Independent stream per (split, class, video): regeneration of any
        // subset reproduces the same pixels.
        Rng rng = Rng::stream(seed, std::string("toy-") + split,
                              static_cast<std::uint64_t>(label), static_cast<std::uint64_t>(v));
        ToyVideoMeta meta;
        meta.split = split;
        char vbuf[24];
        std::snprintf(vbuf, sizeof(vbuf), "v%04lld", static_cast<long long>(v));
        meta.rel_path = class_name + "/" + vbuf;
        meta.label = label;

        const fs::path video_dir = split_root / meta.rel_path;
        fs::create_directories(video_dir);
        std::array<std::int64_t, 2> pos = {
            static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(spec.image))),
            static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(spec.image)))};
        const auto dir = kToyDirections[static_cast<std::size_t>(label)];
        for (std::int64_t t = 0; t < spec.frames; ++t) {
          meta.positions.push_back(pos);
          render_toy_frame(img, spec.image, spec.square, pos);
          save_png(video_dir / frame_file(t + 1, "png"), img);
          pos[0] = ((pos[0] + dir[0] * spec.speed) % spec.image + spec.image) % spec.image;
          pos[1] = ((pos[1] + dir[1] * spec.speed) % spec.image + spec.image) % spec.image;
        }
        metas.push_back(std::move(meta));
      }
    }
    DatasetIndex index = scan_dataset(split_root, spec.fps);
    save_index(index);
  }
  return metas;
}

}  // namespace p3d
