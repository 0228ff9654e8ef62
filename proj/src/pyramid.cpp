#include "expofuse/pyramid.hpp"

#include "expofuse/errors.hpp"

#include <algorithm>
#include <cmath>

namespace expofuse {

namespace {

constexpr float kKernel[5] = {1 / 16.f, 4 / 16.f, 6 / 16.f, 4 / 16.f, 1 / 16.f};

// Half-sample symmetric index: ... 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
int reflect(int i, int n) {
    const int period = 2 * n;
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - 1 - i;
}

void check_depth(const Image& img, int depth) {
    require(img.width >= 1 && img.height >= 1, "pyramid: empty image");
    require(depth >= 1, "pyramid: depth must be >= 1");
    require(depth <= max_depth(img.width, img.height),
            "pyramid: depth too large for image size (coarsest level would be smaller than 2)");
}

} // namespace

int max_depth(int width, int height) {
    int w = width, h = height, depth = 1;
    if (std::min(w, h) < 2) return 1;
    while (true) {
        const int nw = (w + 1) / 2, nh = (h + 1) / 2;
        if (std::min(nw, nh) < 2) break;
        w = nw;
        h = nh;
        ++depth;
    }
    return depth;
}

int default_depth(int width, int height) {
    const int m = std::min(width, height);
    const int d = (m >= 1 ? static_cast<int>(std::floor(std::log2(static_cast<double>(m)))) : 0) - 1;
    return std::clamp(d, 1, std::max(1, max_depth(width, height)));
}

Image blur5(const Image& img) {
    const int w = img.width, h = img.height, c = img.channels;
    Image tmp(w, h, c), out(w, h, c);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int k = 0; k < c; ++k) {
                float s = 0;
                for (int t = -2; t <= 2; ++t) s += kKernel[t + 2] * img.at(reflect(x + t, w), y, k);
                tmp.at(x, y, k) = s;
            }
        }
    }
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int k = 0; k < c; ++k) {
                float s = 0;
                for (int t = -2; t <= 2; ++t) s += kKernel[t + 2] * tmp.at(x, reflect(y + t, h), k);
                out.at(x, y, k) = s;
            }
        }
    }
    return out;
}

Image downsample(const Image& img) {
    const Image b = blur5(img);
    const int w = (img.width + 1) / 2, h = (img.height + 1) / 2, c = img.channels;
    Image out(w, h, c);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int k = 0; k < c; ++k) out.at(x, y, k) = b.at(2 * x, 2 * y, k);
    return out;
}

// Equivalent to zero insertion followed by a 4x-gain blur, with the border
// reflection applied on the coarse grid so constants stay constant.
Image upsample(const Image& img, int width, int height) {
    require((width + 1) / 2 == img.width && (height + 1) / 2 == img.height,
            "upsample: target dims must halve (rounding up) to the source dims");
    const int c = img.channels;
    // Along x: out[x] = sum_j 2*k(x - 2j) * in[reflect(j)].
    auto taps = [](int x, int n, int* idx, float* wt) {
        int count = 0;
        for (int j = (x - 2 + 1) / 2 - 1; j <= (x + 2) / 2 + 1; ++j) {
            const int d = x - 2 * j;
            if (d < -2 || d > 2) continue;
            idx[count] = reflect(j, n);
            wt[count] = 2 * kKernel[d + 2];
            ++count;
        }
        return count;
    };
    Image tmp(width, img.height, c);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < width; ++x) {
            int idx[4];
            float wt[4];
            const int n = taps(x, img.width, idx, wt);
            for (int k = 0; k < c; ++k) {
                float s = 0;
                for (int t = 0; t < n; ++t) s += wt[t] * img.at(idx[t], y, k);
                tmp.at(x, y, k) = s;
            }
        }
    }
    Image out(width, height, c);
    for (int y = 0; y < height; ++y) {
        int idx[4];
        float wt[4];
        const int n = taps(y, img.height, idx, wt);
        for (int x = 0; x < width; ++x) {
            for (int k = 0; k < c; ++k) {
                float s = 0;
                for (int t = 0; t < n; ++t) s += wt[t] * tmp.at(x, idx[t], k);
                out.at(x, y, k) = s;
            }
        }
    }
    return out;
}

GaussianPyramid gaussian_pyramid(const Image& img, int depth) {
    check_depth(img, depth);
    GaussianPyramid pyr;
    pyr.levels.reserve(depth);
    pyr.levels.push_back(img);
    for (int k = 1; k < depth; ++k) pyr.levels.push_back(downsample(pyr.levels.back()));
    return pyr;
}

LaplacianPyramid laplacian_decompose(const Image& img, int depth) {
    GaussianPyramid g = gaussian_pyramid(img, depth);
    LaplacianPyramid lap;
    lap.bands.reserve(depth - 1);
    for (int k = 0; k + 1 < depth; ++k) {
        const Image& fine = g.levels[k];
        Image band = fine;
        const Image up = upsample(g.levels[k + 1], fine.width, fine.height);
        for (std::size_t i = 0; i < band.data.size(); ++i) band.data[i] -= up.data[i];
        lap.bands.push_back(std::move(band));
    }
    lap.residual = std::move(g.levels.back());
    return lap;
}

Image laplacian_collapse(const LaplacianPyramid& pyr) {
    require(!pyr.residual.empty(), "laplacian_collapse: missing residual");
    Image cur = pyr.residual;
    for (int k = static_cast<int>(pyr.bands.size()) - 1; k >= 0; --k) {
        const Image& band = pyr.bands[k];
        require(band.channels == cur.channels && (band.width + 1) / 2 == cur.width &&
                    (band.height + 1) / 2 == cur.height,
                "laplacian_collapse: band dimension mismatch");
        Image up = upsample(cur, band.width, band.height);
        for (std::size_t i = 0; i < up.data.size(); ++i) up.data[i] += band.data[i];
        cur = std::move(up);
    }
    return cur;
}

Image contrast_measure(const Image& img) {
    const Image gray = img.channels == 3 ? rgb_to_gray(img) : channel(img, 0);
    const int w = gray.width, h = gray.height;
    Image out(w, h, 1);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const float lap = gray.at(reflect(x - 1, w), y) + gray.at(reflect(x + 1, w), y) +
                              gray.at(x, reflect(y - 1, h)) + gray.at(x, reflect(y + 1, h)) -
                              4 * gray.at(x, y);
            out.at(x, y) = std::abs(lap);
        }
    }
    return out;
}

Image saturation_measure(const Image& img) {
    Image out(img.width, img.height, 1);
    if (img.channels == 1) return out;
    const int c = img.channels;
    const std::size_t n = img.pixel_count();
    for (std::size_t i = 0; i < n; ++i) {
        const float* p = &img.data[i * c];
        float mu = 0;
        for (int k = 0; k < c; ++k) mu += p[k];
        mu /= c;
        float var = 0;
        for (int k = 0; k < c; ++k) var += (p[k] - mu) * (p[k] - mu);
        out.data[i] = std::sqrt(var / c);
    }
    return out;
}

Image exposedness_measure(const Image& img, double sigma) {
    require(sigma > 0, "exposedness: sigma must be positive");
    Image out(img.width, img.height, 1);
    const int c = img.channels;
    const double denom = 2 * sigma * sigma;
    const std::size_t n = img.pixel_count();
    for (std::size_t i = 0; i < n; ++i) {
        double e = 1;
        for (int k = 0; k < c; ++k) {
            const double d = img.data[i * c + k] - 0.5;
            e *= std::exp(-d * d / denom);
        }
        out.data[i] = static_cast<float>(e);
    }
    return out;
}

namespace {

void check_stack(std::span<const Image> stack) {
    require(stack.size() >= 2, "fusion needs at least 2 images");
    for (const Image& im : stack) {
        require(im.same_shape(stack[0]), "fusion: images must share dims and channels");
        require(im.channels == 1 || im.channels == 3, "fusion: images must have 1 or 3 channels");
    }
}

void check_params(const FusionParams& p) {
    require(p.sigma > 0 && p.epsilon > 0, "fusion params: sigma and epsilon must be positive");
    require(p.w_contrast >= 0 && p.w_saturation >= 0 && p.w_exposedness >= 0,
            "fusion params: exponents must be non-negative");
}

} // namespace

std::vector<Image> raw_quality_weights(std::span<const Image> stack, const FusionParams& params) {
    check_stack(stack);
    check_params(params);
    std::vector<Image> weights;
    weights.reserve(stack.size());
    for (const Image& im : stack) {
        const Image c = contrast_measure(im);
        const Image s = saturation_measure(im);
        const Image e = exposedness_measure(im, params.sigma);
        Image w(im.width, im.height, 1);
        for (std::size_t i = 0; i < w.data.size(); ++i) {
            const double v = std::pow(static_cast<double>(c.data[i]), params.w_contrast) *
                             std::pow(static_cast<double>(s.data[i]), params.w_saturation) *
                             std::pow(static_cast<double>(e.data[i]), params.w_exposedness);
            w.data[i] = static_cast<float>(v + params.epsilon);
        }
        weights.push_back(std::move(w));
    }
    return weights;
}

std::vector<Image> quality_weights(std::span<const Image> stack, const FusionParams& params) {
    std::vector<Image> weights = raw_quality_weights(stack, params);
    const std::size_t n = weights[0].data.size();
    for (std::size_t i = 0; i < n; ++i) {
        double sum = 0;
        for (const Image& w : weights) sum += w.data[i];
        for (Image& w : weights) w.data[i] = static_cast<float>(w.data[i] / sum);
    }
    return weights;
}

Image exposure_fuse_unclamped(std::span<const Image> stack, const FusionParams& params) {
    const std::vector<Image> weights = quality_weights(stack, params);
    const Image& first = stack[0];
    const int depth = params.depth > 0 ? params.depth : default_depth(first.width, first.height);
    const int c = first.channels;

    LaplacianPyramid fused;
    for (std::size_t i = 0; i < stack.size(); ++i) {
        const LaplacianPyramid lap = laplacian_decompose(stack[i], depth);
        const GaussianPyramid wg = gaussian_pyramid(weights[i], depth);
        if (i == 0) {
            fused.bands.reserve(lap.bands.size());
            for (const Image& b : lap.bands) fused.bands.emplace_back(b.width, b.height, c);
            fused.residual = Image(lap.residual.width, lap.residual.height, c);
        }
        auto accumulate = [c](Image& dst, const Image& band, const Image& wt) {
            const std::size_t n = band.pixel_count();
            for (std::size_t p = 0; p < n; ++p)
                for (int k = 0; k < c; ++k) dst.data[p * c + k] += wt.data[p] * band.data[p * c + k];
        };
        for (std::size_t k = 0; k < lap.bands.size(); ++k) accumulate(fused.bands[k], lap.bands[k], wg.levels[k]);
        accumulate(fused.residual, lap.residual, wg.levels.back());
    }
    return laplacian_collapse(fused);
}

Image exposure_fuse(std::span<const Image> stack, const FusionParams& params) {
    return clamp01(exposure_fuse_unclamped(stack, params));
}

Image ghost_fuse(const Image& reference, std::span<const Image> non_reference, const FusionParams& params) {
    std::vector<Image> stack;
    stack.reserve(non_reference.size() + 1);
    stack.push_back(reference);
    stack.insert(stack.end(), non_reference.begin(), non_reference.end());
    return exposure_fuse(stack, params);
}

} // namespace expofuse
