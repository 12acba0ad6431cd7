#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "facepaint/grid.hpp"

namespace facepaint {

// Decodes 8-bit PNG or JPEG bytes into an RGB grid in [0, 1].
ImageGrid decode_image(std::span<const std::uint8_t> bytes);
ImageGrid read_image(const std::filesystem::path& path);
bool looks_like_image(std::span<const std::uint8_t> bytes);

// 8-bit PNG; 1-channel grids become grayscale, 3-channel grids RGB.
std::vector<std::uint8_t> encode_png(const Grid& grid);
void write_png(const std::filesystem::path& path, const Grid& grid);
Mask read_mask_png(const std::filesystem::path& path, MaskKind kind);

// Snap values to the 8-bit levels k / 255 a PNG round trip preserves.
Grid quantize8(const Grid& grid);

ImageGrid resize_bilinear(const ImageGrid& image, int height, int width);
// Center-crop to a square and resize to size x size. No-op when already there.
ImageGrid prepare_image(const ImageGrid& image, int size);

// Regular .png / .jpg / .jpeg files directly inside `dir`, sorted by path.
// IoError when the directory does not exist.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace facepaint
