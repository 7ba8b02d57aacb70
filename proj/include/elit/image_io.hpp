#pragma once

#include <filesystem>
#include <span>

#include "elit/tensor.hpp"

namespace elit {

// Raised when a file cannot be read or written.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// 8-bit PNG, 1 channel as gray and 3 channels as RGB. Pixel values in
// [lo, hi] map linearly to [0, 255] and are clamped.
void write_png(const std::filesystem::path& path, const Image& image, float lo = -1.0f, float hi = 1.0f);
Image read_png(const std::filesystem::path& path, float lo = -1.0f, float hi = 1.0f);

// Tiles equally sized images into a grid with `cols` columns and a one
// pixel separator.
Image tile_images(std::span<const Image> images, int cols, float separator = -1.0f);

// Nearest-neighbour upscaling by an integer factor.
Image upscale(const Image& image, int factor);

} // namespace elit
