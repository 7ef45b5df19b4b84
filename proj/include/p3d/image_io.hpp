#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "p3d/common.hpp"

namespace p3d {

// 8-bit interleaved RGB frame as stored on disk. The frame pipeline converts
// to [0,1] floats at ingestion; keeping the byte form here lets the dataset
// cache stay small.
struct ImageU8 {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::uint8_t> rgb;  // height*width*3, row-major
};

// Decodes PNG or JPEG based on file magic. Grayscale and alpha inputs are
// expanded/stripped to plain RGB.
ImageU8 load_image(const std::filesystem::path& path);

void save_png(const std::filesystem::path& path, const ImageU8& img);

}  // namespace p3d
