#include "ccis/util/png_io.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <fstream>

#include "ccis/core/errors.hpp"

namespace ccis {

namespace {
void append_bytes(png_structp png, png_bytep data, png_size_t n) {
    auto* out = static_cast<std::vector<uint8_t>*>(png_get_io_ptr(png));
    out->insert(out->end(), data, data + n);
}
void flush_noop(png_structp) {}

struct MemReader {
    const uint8_t* p;
    size_t n;
    size_t pos;
};
void read_bytes(png_structp png, png_bytep data, png_size_t n) {
    auto* r = static_cast<MemReader*>(png_get_io_ptr(png));
    if (r->pos + n > r->n) png_error(png, "png: truncated stream");
    std::memcpy(data, r->p + r->pos, n);
    r->pos += n;
}
}  // namespace

std::vector<uint8_t> png_encode(const PngImage& img) {
    if (img.channels != 1 && img.channels != 3) throw IoError("png_encode: channels must be 1 or 3");
    if (img.data.size() != size_t(img.height) * img.width * img.channels)
        throw IoError("png_encode: data size mismatch");

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_encode: init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png_encode: info init failed");
    }
    std::vector<uint8_t> out;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("png_encode: libpng failure");
    }
    png_set_write_fn(png, &out, append_bytes, flush_noop);
    png_set_compression_level(png, 6);
    png_set_filter(png, 0, PNG_FILTER_NONE);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height),
                 8, img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const size_t stride = size_t(img.width) * img.channels;
    for (int y = 0; y < img.height; ++y)
        png_write_row(png, const_cast<png_bytep>(img.data.data() + size_t(y) * stride));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

void png_write(const std::string& path, const PngImage& img) {
    const auto bytes = png_encode(img);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for write: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path);
}

PngImage png_read(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_read: init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("png_read: info init failed");
    }
    MemReader reader{bytes.data(), bytes.size(), 0};
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("png_read: corrupt png: " + path);
    }
    png_set_read_fn(png, &reader, read_bytes);
    png_read_info(png, info);

    png_set_strip_16(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    PngImage img;
    img.width = static_cast<int>(png_get_image_width(png, info));
    img.height = static_cast<int>(png_get_image_height(png, info));
    img.channels = static_cast<int>(png_get_channels(png, info));
    if (img.channels != 1 && img.channels != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("png_read: unsupported channel count in " + path);
    }
    img.data.resize(size_t(img.height) * img.width * img.channels);
    const size_t stride = size_t(img.width) * img.channels;
    for (int y = 0; y < img.height; ++y) png_read_row(png, img.data.data() + size_t(y) * stride, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

}  // namespace ccis
