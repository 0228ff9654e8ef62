#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace expofuse {

// NCHW array with an optional gradient buffer of the same length.
template <typename T>
struct Tensor {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<T> values;
    std::vector<T> grad;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_, T fill = T(0));

    std::size_t size() const noexcept { return static_cast<std::size_t>(n) * c * h * w; }
    std::size_t plane_size() const noexcept { return static_cast<std::size_t>(h) * w; }
    std::size_t offset(int b, int ch) const noexcept { return (static_cast<std::size_t>(b) * c + ch) * plane_size(); }
    T& at(int b, int ch, int y, int x) noexcept { return values[offset(b, ch) + static_cast<std::size_t>(y) * w + x]; }
    T at(int b, int ch, int y, int x) const noexcept { return values[offset(b, ch) + static_cast<std::size_t>(y) * w + x]; }

    bool same_shape(const Tensor& o) const noexcept { return n == o.n && c == o.c && h == o.h && w == o.w; }
    void zero_grad() { grad.assign(size(), T(0)); }
    bool finite() const noexcept;
};

// Convolution weights are out x in x kh x kw. Transposed convolution reuses
// the struct with weights laid out in x out x kh x kw, i.e. the same array a
// convolution going the opposite way would hold.
template <typename T>
struct ConvParams {
    int in_channels = 0;
    int out_channels = 0;
    int kh = 0, kw = 0;
    int stride = 1;
    int ph = 0, pw = 0;
    std::vector<T> weights;
    std::vector<T> bias;

    std::size_t weight_count() const noexcept {
        return static_cast<std::size_t>(in_channels) * out_channels * kh * kw;
    }
    bool consistent() const noexcept;
};

template <typename T>
ConvParams<T> make_conv(int in_channels, int out_channels, int kernel, int stride, int pad);

template <typename T>
struct ConvGrads {
    Tensor<T> grad_x;
    std::vector<T> grad_w;
    std::vector<T> grad_b;
};

// floor((H + 2ph - kh)/s) + 1
int conv_out_dim(int in, int k, int s, int pad);
// (H - 1)s - 2ph + kh
int deconv_out_dim(int in, int k, int s, int pad);

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const ConvParams<T>& p);
template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const ConvParams<T>& p, const Tensor<T>& grad_out);

template <typename T>
Tensor<T> deconv2d_forward(const Tensor<T>& x, const ConvParams<T>& p);
template <typename T>
ConvGrads<T> deconv2d_backward(const Tensor<T>& x, const ConvParams<T>& p, const Tensor<T>& grad_out);

// Channel-axis concatenation.
template <typename T>
Tensor<T> concat(std::span<const Tensor<T>* const> xs);
// Splits grad_out back into per-input slices with the given channel counts.
template <typename T>
std::vector<Tensor<T>> concat_backward(const Tensor<T>& grad_out, std::span<const int> channels);

template <typename T>
Tensor<T> leaky_relu_forward(const Tensor<T>& x, T slope);
// Subgradient at exactly zero is taken as the negative-side slope.
template <typename T>
Tensor<T> leaky_relu_backward(const Tensor<T>& x, const Tensor<T>& grad_out, T slope);

template <typename T>
struct LossResult {
    T value;
    Tensor<T> grad;
};

// Mean absolute error and its gradient sign(pred - target) / count.
template <typename T>
LossResult<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target);

// Half-pixel centred bilinear scaling of every plane.
template <typename T>
Tensor<T> bilinear_resize_tensor(const Tensor<T>& x, int h, int w);
template <typename T>
Tensor<T> bilinear_resize_backward(const Tensor<T>& grad_out, int in_h, int in_w);

// C[M x P] += A[M x K] B[K x P]; each element sums over k in ascending order.
template <typename T>
void gemm_accumulate(int M, int K, int P, const T* A, const T* B, T* C);

} // namespace expofuse
