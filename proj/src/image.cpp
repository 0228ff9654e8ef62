#include "expofuse/image.hpp"

#include "expofuse/errors.hpp"

#include <algorithm>
#include <cmath>

namespace expofuse {

Image::Image(int w, int h, int c, float fill)
    : width(w), height(h), channels(c),
      data(static_cast<std::size_t>(w) * h * c, fill) {
    require(w >= 0 && h >= 0 && c >= 0, "image dimensions must be non-negative");
}

bool Image::valid() const noexcept {
    if (width <= 0 || height <= 0 || (channels != 1 && channels != 3)) return false;
    if (data.size() != static_cast<std::size_t>(width) * height * channels) return false;
    return std::all_of(data.begin(), data.end(), [](float v) { return std::isfinite(v); });
}

Image flip(const Image& img, FlipAxis axis) {
    const int w = img.width, h = img.height, c = img.channels;
    Image out = axis == FlipAxis::diagonal ? Image(h, w, c) : Image(w, h, c);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            int ox = x, oy = y;
            switch (axis) {
            case FlipAxis::vertical: oy = h - 1 - y; break;
            case FlipAxis::horizontal: ox = w - 1 - x; break;
            case FlipAxis::diagonal: ox = y; oy = x; break;
            }
            for (int k = 0; k < c; ++k) out.at(ox, oy, k) = img.at(x, y, k);
        }
    }
    return out;
}

namespace {

struct Tap {
    int i0, i1;
    float w1;
};

// Half-pixel centred source coordinate for every destination index.
std::vector<Tap> bilinear_taps(int src, int dst) {
    std::vector<Tap> taps(dst);
    const double scale = static_cast<double>(src) / dst;
    for (int i = 0; i < dst; ++i) {
        double s = (i + 0.5) * scale - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(src - 1));
        const int i0 = static_cast<int>(std::floor(s));
        const int i1 = std::min(i0 + 1, src - 1);
        taps[i] = {i0, i1, static_cast<float>(s - i0)};
    }
    return taps;
}

} // namespace

Image resize(const Image& img, int width, int height) {
    require(width >= 1 && height >= 1, "resize: target dims must be >= 1");
    require(img.width >= 1 && img.height >= 1, "resize: empty source image");
    if (width == img.width && height == img.height) return img;
    const auto tx = bilinear_taps(img.width, width);
    const auto ty = bilinear_taps(img.height, height);
    Image out(width, height, img.channels);
    for (int y = 0; y < height; ++y) {
        const Tap& vy = ty[y];
        for (int x = 0; x < width; ++x) {
            const Tap& vx = tx[x];
            for (int c = 0; c < img.channels; ++c) {
                const float top = img.at(vx.i0, vy.i0, c) * (1 - vx.w1) + img.at(vx.i1, vy.i0, c) * vx.w1;
                const float bot = img.at(vx.i0, vy.i1, c) * (1 - vx.w1) + img.at(vx.i1, vy.i1, c) * vx.w1;
                out.at(x, y, c) = top * (1 - vy.w1) + bot * vy.w1;
            }
        }
    }
    return out;
}

Image rgb_to_gray(const Image& img) {
    require(img.channels == 3, "rgb_to_gray: image must have 3 channels");
    Image out(img.width, img.height, 1);
    const std::size_t n = img.pixel_count();
    for (std::size_t i = 0; i < n; ++i) {
        const float* p = &img.data[i * 3];
        out.data[i] = 0.299f * p[0] + 0.587f * p[1] + 0.114f * p[2];
    }
    return out;
}

Image channel(const Image& img, int c) {
    require(c >= 0 && c < img.channels, "channel index out of range");
    Image out(img.width, img.height, 1);
    const std::size_t n = img.pixel_count();
    for (std::size_t i = 0; i < n; ++i) out.data[i] = img.data[i * img.channels + c];
    return out;
}

Image clamp01(Image img) {
    for (float& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
    return img;
}

double max_abs_diff(const Image& a, const Image& b) {
    require(a.same_shape(b), "max_abs_diff: shape mismatch");
    double m = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a.data[i]) - b.data[i]));
    return m;
}

} // namespace expofuse
