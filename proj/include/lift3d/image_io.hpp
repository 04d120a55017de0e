#pragma once

#include <string>

#include "lift3d/image.hpp"

namespace lift3d {

// 8-bit PNG, grayscale for 1-channel buffers and RGB for 3-channel ones.
// Values are clamped to [0, 1] and scaled by 255 with rounding; no gamma is
// applied in either direction.
void save_png(const std::string& path, const ImageBuffer& image);
ImageBuffer load_png(const std::string& path);

// Binary PFM ("Pf", single channel, float32) with scale -1.0, i.e. little
// endian, rows stored bottom-to-top as the format prescribes.
void save_pfm(const std::string& path, const ImageBuffer& image);
ImageBuffer load_pfm(const std::string& path);

}  // namespace lift3d
