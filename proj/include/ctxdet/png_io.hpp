#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ctxdet {

/// 8-bit RGB PNG with fixed encoder settings so identical pixels produce
/// identical files.
void write_png_rgb8(const std::string& path, const std::vector<std::uint8_t>& pixels, int width,
                    int height);

std::vector<std::uint8_t> read_png_rgb8(const std::string& path, int* width, int* height);

}  // namespace ctxdet
