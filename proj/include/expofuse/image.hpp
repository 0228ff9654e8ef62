#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

namespace expofuse {

// Row-major interleaved raster, nominal range [0,1].
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<float> data;

    Image() = default;
    Image(int w, int h, int c, float fill = 0.0f);

    bool empty() const noexcept { return data.empty(); }
    std::size_t pixel_count() const noexcept { return static_cast<std::size_t>(width) * height; }
    std::size_t index(int x, int y, int c = 0) const noexcept {
        return (static_cast<std::size_t>(y) * width + x) * channels + c;
    }
    float& at(int x, int y, int c = 0) noexcept { return data[index(x, y, c)]; }
    float at(int x, int y, int c = 0) const noexcept { return data[index(x, y, c)]; }

    bool same_shape(const Image& o) const noexcept {
        return width == o.width && height == o.height && channels == o.channels;
    }
    // Size matches dims and every value is finite.
    bool valid() const noexcept;

    friend bool operator==(const Image&, const Image&) = default;
};

enum class FlipAxis { vertical, horizontal, diagonal };

// PNG (8/16-bit, gray or RGB; alpha is dropped) and binary PGM/PPM.
Image load_image(const std::filesystem::path& path);

// Format follows the extension (.png, .ppm, .pgm). bit_depth is 8 or 16.
// Values are clamped to [0,1] before quantization.
void save_image(const Image& img, const std::filesystem::path& path, int bit_depth = 8);

// vertical: rows reversed; horizontal: columns reversed; diagonal: transpose.
Image flip(const Image& img, FlipAxis axis);

// Bilinear, half-pixel centred sampling, clamp-to-edge.
Image resize(const Image& img, int width, int height);

Image rgb_to_gray(const Image& img);

// Extract / combine individual channels.
Image channel(const Image& img, int c);
Image clamp01(Image img);

double max_abs_diff(const Image& a, const Image& b);

} // namespace expofuse
