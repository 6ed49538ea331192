#pragma once

#include <filesystem>
#include <string>

#include "advobj/tensor.hpp"

namespace advobj {

/// Writes a [3,H,W] image in [0,1] as 8-bit RGB PNG; each value maps to
/// round(v * 255) after clamping.
void write_png(const Tensor& image, const std::filesystem::path& path);

/// Reads an 8-bit RGB(A) PNG as [3,H,W] with values byte / 255.
Tensor read_png(const std::filesystem::path& path);

/// The 8-bit quantisation applied by write_png followed by read_png.
Tensor quantize_8bit(const Tensor& image);

}  // namespace advobj
