#include "condinst/png_io.hpp"

#include <png.h>

#include <cstdio>

namespace condinst {

namespace {

// Owns the C-side handles so every exit path (including libpng's longjmp)
// releases them exactly once.
struct PngWriteHandles {
    FILE* fp = nullptr;
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngWriteHandles() {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        if (fp) std::fclose(fp);
    }
};

struct PngReadHandles {
    FILE* fp = nullptr;
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngReadHandles() {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        if (fp) std::fclose(fp);
    }
};

bool host_is_little_endian() {
    const uint16_t probe = 1;
    return *reinterpret_cast<const uint8_t*>(&probe) == 1;
}

}  // namespace

void write_png_u8(const std::string& path, const ImageU8& image) {
    require(image.channels == 1 || image.channels == 3, ErrorKind::usage,
            "png write: channels must be 1 or 3");
    require(image.width > 0 && image.height > 0 &&
                image.data.size() ==
                    static_cast<size_t>(image.width) * image.height * image.channels,
            ErrorKind::usage, "png write: inconsistent image dimensions");

    PngWriteHandles h;
    std::vector<png_bytep> rows(image.height);
    h.fp = std::fopen(path.c_str(), "wb");
    require(h.fp != nullptr, ErrorKind::data, "cannot open for writing: " + path);
    h.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    require(h.png != nullptr, ErrorKind::data, "png writer allocation failed: " + path);
    h.info = png_create_info_struct(h.png);
    require(h.info != nullptr, ErrorKind::data, "png writer allocation failed: " + path);
    if (setjmp(png_jmpbuf(h.png))) throw Error(ErrorKind::data, "png write failed: " + path);

    png_init_io(h.png, h.fp);
    png_set_IHDR(h.png, h.info, image.width, image.height, 8,
                 image.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(h.png, h.info);
    const size_t row_bytes = static_cast<size_t>(image.width) * image.channels;
    for (int y = 0; y < image.height; ++y)
        rows[y] = const_cast<png_bytep>(image.data.data() + y * row_bytes);
    png_write_image(h.png, rows.data());
    png_write_end(h.png, nullptr);
}

ImageU8 read_png_u8(const std::string& path) {
    PngReadHandles h;
    ImageU8 image;
    std::vector<png_bytep> rows;
    h.fp = std::fopen(path.c_str(), "rb");
    require(h.fp != nullptr, ErrorKind::data, "cannot open: " + path);
    h.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    require(h.png != nullptr, ErrorKind::data, "png reader allocation failed: " + path);
    h.info = png_create_info_struct(h.png);
    require(h.info != nullptr, ErrorKind::data, "png reader allocation failed: " + path);
    if (setjmp(png_jmpbuf(h.png)))
        throw Error(ErrorKind::data, "corrupt or truncated png: " + path);

    png_init_io(h.png, h.fp);
    png_read_info(h.png, h.info);
    const int bit_depth = png_get_bit_depth(h.png, h.info);
    const int color_type = png_get_color_type(h.png, h.info);
    require(bit_depth == 8, ErrorKind::data, "expected 8-bit png: " + path);
    require(color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_RGB,
            ErrorKind::data, "expected gray or RGB png: " + path);

    image = ImageU8(png_get_image_width(h.png, h.info), png_get_image_height(h.png, h.info),
                    color_type == PNG_COLOR_TYPE_RGB ? 3 : 1);
    rows.resize(image.height);
    const size_t row_bytes = static_cast<size_t>(image.width) * image.channels;
    require(png_get_rowbytes(h.png, h.info) == row_bytes, ErrorKind::data,
            "unexpected png row size: " + path);
    for (int y = 0; y < image.height; ++y) rows[y] = image.data.data() + y * row_bytes;
    png_read_image(h.png, rows.data());
    png_read_end(h.png, nullptr);
    return image;
}

void write_png_u16(const std::string& path, const ImageU16& image) {
    require(image.width > 0 && image.height > 0 &&
                image.data.size() == static_cast<size_t>(image.width) * image.height,
            ErrorKind::usage, "png write: inconsistent image dimensions");

    PngWriteHandles h;
    std::vector<png_bytep> rows(image.height);
    h.fp = std::fopen(path.c_str(), "wb");
    require(h.fp != nullptr, ErrorKind::data, "cannot open for writing: " + path);
    h.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    require(h.png != nullptr, ErrorKind::data, "png writer allocation failed: " + path);
    h.info = png_create_info_struct(h.png);
    require(h.info != nullptr, ErrorKind::data, "png writer allocation failed: " + path);
    if (setjmp(png_jmpbuf(h.png))) throw Error(ErrorKind::data, "png write failed: " + path);

    png_init_io(h.png, h.fp);
    png_set_IHDR(h.png, h.info, image.width, image.height, 16, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(h.png, h.info);
    if (host_is_little_endian()) png_set_swap(h.png);  // PNG stores 16-bit big-endian
    for (int y = 0; y < image.height; ++y)
        rows[y] = const_cast<png_bytep>(
            reinterpret_cast<const png_byte*>(image.data.data() + static_cast<size_t>(y) * image.width));
    png_write_image(h.png, rows.data());
    png_write_end(h.png, nullptr);
}

ImageU16 read_png_u16(const std::string& path) {
    PngReadHandles h;
    ImageU16 image;
    std::vector<png_bytep> rows;
    h.fp = std::fopen(path.c_str(), "rb");
    require(h.fp != nullptr, ErrorKind::data, "cannot open: " + path);
    h.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    require(h.png != nullptr, ErrorKind::data, "png reader allocation failed: " + path);
    h.info = png_create_info_struct(h.png);
    require(h.info != nullptr, ErrorKind::data, "png reader allocation failed: " + path);
    if (setjmp(png_jmpbuf(h.png)))
        throw Error(ErrorKind::data, "corrupt or truncated png: " + path);

    png_init_io(h.png, h.fp);
    png_read_info(h.png, h.info);
    require(png_get_bit_depth(h.png, h.info) == 16 &&
                png_get_color_type(h.png, h.info) == PNG_COLOR_TYPE_GRAY,
            ErrorKind::data, "expected 16-bit grayscale png: " + path);
    if (host_is_little_endian()) png_set_swap(h.png);

    image = ImageU16(png_get_image_width(h.png, h.info), png_get_image_height(h.png, h.info));
    rows.resize(image.height);
    for (int y = 0; y < image.height; ++y)
        rows[y] = reinterpret_cast<png_byte*>(image.data.data() + static_cast<size_t>(y) * image.width);
    png_read_image(h.png, rows.data());
    png_read_end(h.png, nullptr);
    return image;
}

}  // namespace condinst
