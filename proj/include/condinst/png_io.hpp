#pragma once
// Thin libpng wrappers for the three image kinds the dataset format uses:
// 8-bit RGB scene images, 8-bit grayscale instance masks, and 16-bit
// grayscale panoptic id maps.  All failures surface as ErrorKind::data with
// the offending path in the message.

#include <cstdint>
#include <string>
#include <vector>

#include "condinst/feature_map.hpp"

namespace condinst {

/// Interleaved 8-bit image; channels is 1 (gray) or 3 (RGB).
struct ImageU8 {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<uint8_t> data;  // row-major, interleaved

    ImageU8() = default;
    ImageU8(int w, int h, int c)
        : width(w), height(h), channels(c), data(static_cast<size_t>(w) * h * c, 0) {}
};

/// Single-channel 16-bit image (panoptic id maps).
struct ImageU16 {
    int width = 0;
    int height = 0;
    std::vector<uint16_t> data;  // row-major

    ImageU16() = default;
    ImageU16(int w, int h) : width(w), height(h), data(static_cast<size_t>(w) * h, 0) {}
};

void write_png_u8(const std::string& path, const ImageU8& image);
ImageU8 read_png_u8(const std::string& path);

void write_png_u16(const std::string& path, const ImageU16& image);
ImageU16 read_png_u16(const std::string& path);

}  // namespace condinst
