#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ccis {

struct PngImage {
    int height = 0;
    int width = 0;
    int channels = 0;           // 1 or 3
    std::vector<uint8_t> data;  // HxWxC row-major
};

// Encoders use fixed settings (no filtering, zlib level 6) so identical pixels
// always produce identical bytes.
std::vector<uint8_t> png_encode(const PngImage& img);
void png_write(const std::string& path, const PngImage& img);
PngImage png_read(const std::string& path);

}  // namespace ccis
