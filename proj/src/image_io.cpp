#include "elit/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

namespace elit {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

} // namespace

void write_png(const std::filesystem::path& path, const Image& image, float lo, float hi) {
    if (image.channels != 1 && image.channels != 3) throw ShapeError("write_png: only 1 or 3 channels supported");
    if (!(hi > lo)) throw std::invalid_argument("write_png: empty value range");
    File f(std::fopen(path.c_str(), "wb"));
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("libpng initialization failed");
    }
    std::vector<png_byte> row(static_cast<size_t>(image.width) * image.channels);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed writing " + path.string());
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, image.width, image.height, 8, image.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    // no timestamps or other variable chunks, so identical images give identical files
    png_write_info(png, info);
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x) {
            for (int c = 0; c < image.channels; ++c) {
                const float v = (image.at(c, y, x) - lo) / (hi - lo);
                row[static_cast<size_t>(x) * image.channels + c] =
                    static_cast<png_byte>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
            }
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image read_png(const std::filesystem::path& path, float lo, float hi) {
    File f(std::fopen(path.c_str(), "rb"));
    if (!f) throw IoError("cannot open " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("libpng initialization failed");
    }
    Image out;
    std::vector<png_byte> row;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("failed reading " + path.string());
    }
    png_init_io(png, f.get());
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_packing(png);
    png_set_expand(png);
    const png_byte type = png_get_color_type(png, info);
    if (type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    png_read_update_info(png, info);
    const int width = static_cast<int>(png_get_image_width(png, info));
    const int height = static_cast<int>(png_get_image_height(png, info));
    const int channels = png_get_channels(png, info);
    out = Image(channels, height, width);
    row.resize(png_get_rowbytes(png, info));
    for (int y = 0; y < height; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < width; ++x)
            for (int c = 0; c < channels; ++c)
                out.at(c, y, x) = lo + (hi - lo) * static_cast<float>(row[static_cast<size_t>(x) * channels + c]) / 255.0f;
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

Image tile_images(std::span<const Image> images, int cols, float separator) {
    if (images.empty()) throw ShapeError("tile_images: no images");
    if (cols < 1) throw std::invalid_argument("tile_images: cols must be >= 1");
    const Image& first = images[0];
    const int n = static_cast<int>(images.size());
    const int rows = (n + cols - 1) / cols;
    const int used_cols = std::min(cols, n);
    Image out(first.channels, rows * (first.height + 1) - 1, used_cols * (first.width + 1) - 1, separator);
    for (int i = 0; i < n; ++i) {
        if (!images[i].same_shape(first)) throw ShapeError("tile_images: mixed shapes");
        const int oy = (i / cols) * (first.height + 1);
        const int ox = (i % cols) * (first.width + 1);
        for (int c = 0; c < first.channels; ++c)
            for (int y = 0; y < first.height; ++y)
                for (int x = 0; x < first.width; ++x) out.at(c, oy + y, ox + x) = images[i].at(c, y, x);
    }
    return out;
}

Image upscale(const Image& image, int factor) {
    if (factor < 1) throw std::invalid_argument("upscale: factor must be >= 1");
    Image out(image.channels, image.height * factor, image.width * factor);
    for (int c = 0; c < out.channels; ++c)
        for (int y = 0; y < out.height; ++y)
            for (int x = 0; x < out.width; ++x) out.at(c, y, x) = image.at(c, y / factor, x / factor);
    return out;
}

} // namespace elit

#include <bit>
#include <fstream>
#include <zlib.h>

#include "elit/binary_io.hpp"

namespace elit {

static_assert(std::endian::native == std::endian::little, "archives assume a little-endian host");

std::uint32_t crc32_of(const void* data, size_t size) {
    uLong crc = crc32(0L, Z_NULL, 0);
    const auto* p = static_cast<const Bytef*>(data);
    while (size > 0) {
        const uInt chunk = static_cast<uInt>(std::min<size_t>(size, 1u << 30));
        crc = crc32(crc, p, chunk);
        p += chunk;
        size -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("failed reading " + path);
    return bytes;
}

void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp + " for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("failed writing " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move " + tmp + " to " + path + ": " + ec.message());
}

} // namespace elit
