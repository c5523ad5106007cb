#include "ace/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>
#include <sstream>

namespace ace {

Image::Image(int h, int w, int c, float fill)
    : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {
    if (h < 0 || w < 0 || c < 0) throw std::invalid_argument("negative image dimension");
}

bool bitwise_equal(const Image& a, const Image& b) {
    if (!a.same_shape(b)) return false;
    return std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0;
}

std::uint8_t to_byte(float v) {
    const float c = std::clamp(v, 0.0f, 1.0f);
    return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

namespace {

struct PngWriteBuffer {
    std::vector<std::uint8_t> bytes;
};

void png_write_cb(png_structp png, png_bytep data, png_size_t len) {
    auto* buf = static_cast<PngWriteBuffer*>(png_get_io_ptr(png));
    buf->bytes.insert(buf->bytes.end(), data, data + len);
}

void png_flush_cb(png_structp) {}

struct PngReadCursor {
    std::span<const std::uint8_t> bytes;
    std::size_t offset = 0;
};

void png_read_cb(png_structp png, png_bytep out, png_size_t len) {
    auto* cur = static_cast<PngReadCursor*>(png_get_io_ptr(png));
    if (cur->offset + len > cur->bytes.size()) png_error(png, "truncated PNG stream");
    std::memcpy(out, cur->bytes.data() + cur->offset, len);
    cur->offset += len;
}

[[noreturn]] void png_error_cb(png_structp png, png_const_charp msg) {
    auto* err = static_cast<std::string*>(png_get_error_ptr(png));
    if (err) *err = msg;
    png_longjmp(png, 1);
}

void png_warning_cb(png_structp, png_const_charp) {}

}  // namespace

std::vector<std::uint8_t> encode_png(const Image& img) {
    if (img.channels != 1 && img.channels != 3) throw ImageIoError("PNG encoder supports 1 or 3 channels");
    if (img.height == 0 || img.width == 0) throw ImageIoError("cannot encode empty image");

    std::string err;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_error_cb, png_warning_cb);
    if (!png) throw ImageIoError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    // State touched after setjmp lives on the heap so longjmp cannot clobber it.
    auto buffer_ptr = std::make_unique<PngWriteBuffer>();
    auto row_ptr = std::make_unique<std::vector<std::uint8_t>>(static_cast<std::size_t>(img.width) * img.channels);
    PngWriteBuffer& buffer = *buffer_ptr;
    std::vector<std::uint8_t>& row = *row_ptr;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw ImageIoError("PNG encode failed: " + err);
    }
    png_set_write_fn(png, &buffer, png_write_cb, png_flush_cb);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < img.height; ++y) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            row[i] = to_byte(img.data[static_cast<std::size_t>(y) * row.size() + i]);
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return std::move(buffer.bytes);
}

Image decode_png(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw ImageIoError("not a PNG stream");

    std::string err;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_error_cb, png_warning_cb);
    if (!png) throw ImageIoError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    auto cursor_ptr = std::make_unique<PngReadCursor>(PngReadCursor{bytes, 0});
    auto img_ptr = std::make_unique<Image>();
    auto row_ptr = std::make_unique<std::vector<std::uint8_t>>();
    PngReadCursor& cursor = *cursor_ptr;
    Image& img = *img_ptr;
    std::vector<std::uint8_t>& row = *row_ptr;

    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ImageIoError("PNG decode failed: " + err);
    }
    png_set_read_fn(png, &cursor, png_read_cb);
    png_read_info(png, info);

    const auto color = png_get_color_type(png, info);
    const auto depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    const int width = static_cast<int>(png_get_image_width(png, info));
    const int height = static_cast<int>(png_get_image_height(png, info));
    const int channels = png_get_channels(png, info);
    if (channels != 1 && channels != 3) png_error(png, "unsupported channel count");

    img = Image(height, width, channels);
    row.resize(static_cast<std::size_t>(width) * channels);
    for (int y = 0; y < height; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (std::size_t i = 0; i < row.size(); ++i) {
            img.data[static_cast<std::size_t>(y) * row.size() + i] = static_cast<float>(row[i]) / 255.0f;
        }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return std::move(img);
}

std::vector<std::uint8_t> encode_pnm(const Image& img) {
    if (img.channels != 1 && img.channels != 3) throw ImageIoError("PNM encoder supports 1 or 3 channels");
    std::ostringstream header;
    header << (img.channels == 3 ? "P6" : "P5") << '\n' << img.width << ' ' << img.height << "\n255\n";
    const std::string h = header.str();
    std::vector<std::uint8_t> out(h.begin(), h.end());
    out.reserve(out.size() + img.data.size());
    for (float v : img.data) out.push_back(to_byte(v));
    return out;
}

Image decode_pnm(std::span<const std::uint8_t> bytes) {
    std::size_t pos = 0;
    auto skip_space_and_comments = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(bytes[pos])) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto read_int = [&] {
        skip_space_and_comments();
        long v = 0;
        bool any = false;
        while (pos < bytes.size() && std::isdigit(bytes[pos])) {
            v = v * 10 + (bytes[pos++] - '0');
            any = true;
            if (v > (1L << 24)) throw ImageIoError("PNM dimension too large");
        }
        if (!any) throw ImageIoError("malformed PNM header");
        return static_cast<int>(v);
    };

    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '6' && bytes[1] != '5')) {
        throw ImageIoError("not a binary PPM/PGM stream");
    }
    const int channels = bytes[1] == '6' ? 3 : 1;
    pos = 2;
    const int width = read_int();
    const int height = read_int();
    const int maxval = read_int();
    if (maxval != 255) throw ImageIoError("only 8-bit PNM is supported");
    ++pos;  // single whitespace before raster

    Image img(height, width, channels);
    if (bytes.size() < pos + img.data.size()) throw ImageIoError("truncated PNM raster");
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>(bytes[pos + i]) / 255.0f;
    return img;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ImageIoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ImageIoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

namespace {
std::string lower_ext(const std::filesystem::path& p) {
    std::string e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
    return e;
}
}  // namespace

void write_image(const std::filesystem::path& path, const Image& img) {
    const std::string ext = lower_ext(path);
    if (ext == ".png") {
        write_file_bytes(path, encode_png(img));
    } else if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") {
        write_file_bytes(path, encode_pnm(img));
    } else {
        throw ImageIoError("unsupported image extension: " + ext);
    }
}

Image read_image(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    const std::string ext = lower_ext(path);
    if (ext == ".png") return decode_png(bytes);
    if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") return decode_pnm(bytes);
    throw ImageIoError("unsupported image extension: " + ext);
}

}  // namespace ace
