#pragma once

#include <string>

#include "nrgs/image.hpp"

namespace nrgs {

/// Reads an 8-bit PNG as a 3-channel image with values in [0,1].
Image loadPng8(const std::string& path);

/// Writes a 1- or 3-channel image as 8-bit PNG, clamping values to [0,1].
void savePng8(const std::string& path, const Image& img);

/// Depth maps are stored as 16-bit grayscale PNG at 0.1 mm per unit.
inline constexpr double kDepthPngScale = 0.1;  // mm per 16-bit step

Image loadDepthPng16(const std::string& path);
void saveDepthPng16(const std::string& path, const Image& depthMm);

}  // namespace nrgs
