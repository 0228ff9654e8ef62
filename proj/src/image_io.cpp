#include "expofuse/errors.hpp"
#include "expofuse/image.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <string>

namespace expofuse {

namespace {

std::string lower_ext(const std::filesystem::path& p) {
    std::string e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char ch) { return std::tolower(ch); });
    return e;
}

struct FileCloser {
    void operator()(std::FILE* f) const noexcept { if (f) std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_error_fn(png_structp png, png_const_charp msg) {
    auto* err = static_cast<std::string*>(png_get_error_ptr(png));
    if (err) *err = msg;
    png_longjmp(png, 1);
}
void png_warning_fn(png_structp, png_const_charp) {}

Image load_png(const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open " + path.string());
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        throw FormatError(path.string() + ": not a PNG file");

    std::string err;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warning_fn);
    if (!png) throw IoError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("png_create_info_struct failed");
    }

    Image img;
    std::vector<unsigned char> raw;
    std::vector<png_bytep> rows;
    int depth = 0;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError(path.string() + ": " + err);
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    const int color = png_get_color_type(png, info);
    depth = png_get_bit_depth(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) {
        png_set_palette_to_rgb(png);
        depth = 8;
    }
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) {
        png_set_expand_gray_1_2_4_to_8(png);
        depth = 8;
    }
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
    if (depth != 8 && depth != 16) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError(path.string() + ": unsupported bit depth " + std::to_string(depth));
    }
    if (depth == 16) png_set_swap(png); // little-endian host order
    png_read_update_info(png, info);

    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    const int ch = png_get_channels(png, info);
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    raw.resize(rowbytes * h);
    rows.resize(h);
    for (int y = 0; y < h; ++y) rows[y] = raw.data() + rowbytes * y;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    if (ch != 1 && ch != 3) throw FormatError(path.string() + ": unsupported channel count");
    img = Image(w, h, ch);
    const std::size_t n = img.data.size();
    if (depth == 8) {
        for (std::size_t i = 0; i < n; ++i) img.data[i] = raw[i] / 255.0f;
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            const unsigned v = raw[2 * i] | (static_cast<unsigned>(raw[2 * i + 1]) << 8);
            img.data[i] = static_cast<float>(v / 65535.0);
        }
    }
    return img;
}

void save_png(const Image& img, const std::filesystem::path& path, int bit_depth) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot write " + path.string());
    std::string err;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warning_fn);
    if (!png) throw IoError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png_create_info_struct failed");
    }

    const std::size_t n = img.data.size();
    const int bytes = bit_depth / 8;
    std::vector<unsigned char> raw(n * bytes);
    const double maxval = bit_depth == 8 ? 255.0 : 65535.0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto q = static_cast<unsigned>(std::lround(std::clamp(img.data[i], 0.0f, 1.0f) * maxval));
        if (bytes == 1) {
            raw[i] = static_cast<unsigned char>(q);
        } else {
            raw[2 * i] = static_cast<unsigned char>(q >> 8); // PNG is big-endian
            raw[2 * i + 1] = static_cast<unsigned char>(q & 0xff);
        }
    }
    std::vector<png_bytep> rows(img.height);
    const std::size_t rowbytes = static_cast<std::size_t>(img.width) * img.channels * bytes;
    for (int y = 0; y < img.height; ++y) rows[y] = raw.data() + rowbytes * y;

    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError(path.string() + ": " + err);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, img.width, img.height, bit_depth,
                 img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

// PNM header token, skipping whitespace and '#' comments.
int read_pnm_int(std::istream& in, const std::string& name) {
    int c = in.peek();
    while (c != EOF) {
        if (std::isspace(c)) {
            in.get();
        } else if (c == '#') {
            std::string skip;
            std::getline(in, skip);
        } else {
            break;
        }
        c = in.peek();
    }
    int v = 0;
    if (!(in >> v) || v <= 0) throw FormatError(name + ": malformed PNM header");
    return v;
}

Image load_pnm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    char magic[2] = {};
    in.read(magic, 2);
    if (!in || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6'))
        throw FormatError(path.string() + ": only binary P5/P6 are supported");
    const int ch = magic[1] == '6' ? 3 : 1;
    const int w = read_pnm_int(in, path.string());
    const int h = read_pnm_int(in, path.string());
    const int maxval = read_pnm_int(in, path.string());
    if (maxval > 65535) throw FormatError(path.string() + ": unsupported maxval");
    in.get(); // single whitespace after maxval

    Image img(w, h, ch);
    const std::size_t n = img.data.size();
    const int bytes = maxval < 256 ? 1 : 2;
    std::vector<unsigned char> raw(n * bytes);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size())
        throw FormatError(path.string() + ": truncated pixel data");
    for (std::size_t i = 0; i < n; ++i) {
        const unsigned v = bytes == 1 ? raw[i] : (static_cast<unsigned>(raw[2 * i]) << 8) | raw[2 * i + 1];
        img.data[i] = static_cast<float>(static_cast<double>(v) / maxval);
    }
    return img;
}

void save_pnm(const Image& img, const std::filesystem::path& path, int bit_depth) {
    const bool want_rgb = lower_ext(path) == ".ppm";
    if (want_rgb != (img.channels == 3))
        throw FormatError(path.string() + ": .ppm needs 3 channels, .pgm needs 1");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    const int maxval = bit_depth == 8 ? 255 : 65535;
    out << (want_rgb ? "P6" : "P5") << '\n' << img.width << ' ' << img.height << '\n' << maxval << '\n';
    const std::size_t n = img.data.size();
    const int bytes = bit_depth / 8;
    std::vector<unsigned char> raw(n * bytes);
    for (std::size_t i = 0; i < n; ++i) {
        const auto q = static_cast<unsigned>(std::lround(std::clamp(img.data[i], 0.0f, 1.0f) * maxval));
        if (bytes == 1) {
            raw[i] = static_cast<unsigned char>(q);
        } else {
            raw[2 * i] = static_cast<unsigned char>(q >> 8);
            raw[2 * i + 1] = static_cast<unsigned char>(q & 0xff);
        }
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

} // namespace

Image load_image(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw IoError("no such file: " + path.string());
    const std::string ext = lower_ext(path);
    if (ext == ".png") return load_png(path);
    if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") return load_pnm(path);
    throw FormatError(path.string() + ": unsupported file extension");
}

void save_image(const Image& img, const std::filesystem::path& path, int bit_depth) {
    require(img.valid(), "save_image: invalid image");
    require(bit_depth == 8 || bit_depth == 16, "save_image: bit depth must be 8 or 16");
    const std::string ext = lower_ext(path);
    if (ext == ".png") return save_png(img, path, bit_depth);
    if (ext == ".ppm" || ext == ".pgm") return save_pnm(img, path, bit_depth);
    throw FormatError(path.string() + ": unsupported file extension");
}

} // namespace expofuse
