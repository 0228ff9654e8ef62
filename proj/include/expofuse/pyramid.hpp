#pragma once

#include "expofuse/image.hpp"

#include <span>
#include <vector>

namespace expofuse {

// Level 0 is full resolution; level k+1 has dims ceil(level k / 2).
struct GaussianPyramid {
    std::vector<Image> levels;
    int depth() const noexcept { return static_cast<int>(levels.size()); }
};

struct LaplacianPyramid {
    std::vector<Image> bands; // finest first
    Image residual;
    int depth() const noexcept { return static_cast<int>(bands.size()) + 1; }
};

// Mertens-style weighting knobs. Defaults are the canonical ones.
struct FusionParams {
    double w_contrast = 1.0;
    double w_saturation = 1.0;
    double w_exposedness = 1.0;
    double sigma = 0.2;
    double epsilon = 1e-12;
    int depth = 0; // 0 selects default_depth()
};

// floor(log2(min(w,h))) - 1, at least 1.
int default_depth(int width, int height);
// Deepest pyramid whose coarsest level keeps min dim >= 2.
int max_depth(int width, int height);

// Separable [1 4 6 4 1]/16 blur, half-sample symmetric borders.
Image blur5(const Image& img);
// blur5 then keep even rows/cols.
Image downsample(const Image& img);
// Interpolating 2x upsample onto a (width x height) grid; exact on constants.
Image upsample(const Image& img, int width, int height);

GaussianPyramid gaussian_pyramid(const Image& img, int depth);
LaplacianPyramid laplacian_decompose(const Image& img, int depth);
// Not clamped.
Image laplacian_collapse(const LaplacianPyramid& pyr);

// |3x3 Laplacian| of the luma (or the single channel).
Image contrast_measure(const Image& img);
// Per-pixel population std-dev over channels; zero for 1-channel images.
Image saturation_measure(const Image& img);
// prod_c exp(-(v-0.5)^2 / (2 sigma^2)).
Image exposedness_measure(const Image& img, double sigma);

// Unnormalized W_i = C^wc * S^ws * E^we + epsilon.
std::vector<Image> raw_quality_weights(std::span<const Image> stack, const FusionParams& params);
// Normalized so the weights sum to one at every pixel.
std::vector<Image> quality_weights(std::span<const Image> stack, const FusionParams& params);

// Blended pyramid collapsed but not clamped.
Image exposure_fuse_unclamped(std::span<const Image> stack, const FusionParams& params = {});
// Collapsed and clamped to [0,1].
Image exposure_fuse(std::span<const Image> stack, const FusionParams& params = {});

// exposure_fuse({reference} + non_reference); misalignment is left in on purpose.
Image ghost_fuse(const Image& reference, std::span<const Image> non_reference,
                 const FusionParams& params = {});

} // namespace expofuse
