#include "expofuse/tensor.hpp"

#include "expofuse/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace expofuse {

template <typename T>
Tensor<T>::Tensor(int n_, int c_, int h_, int w_, T fill) : n(n_), c(c_), h(h_), w(w_) {
    require(n_ >= 0 && c_ >= 0 && h_ >= 0 && w_ >= 0, "tensor dims must be non-negative");
    values.assign(size(), fill);
}

template <typename T>
bool Tensor<T>::finite() const noexcept {
    return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
bool ConvParams<T>::consistent() const noexcept {
    return in_channels > 0 && out_channels > 0 && kh > 0 && kw > 0 && stride > 0 && ph >= 0 && pw >= 0 &&
           weights.size() == weight_count() && bias.size() == static_cast<std::size_t>(out_channels);
}

template <typename T>
ConvParams<T> make_conv(int in_channels, int out_channels, int kernel, int stride, int pad) {
    ConvParams<T> p;
    p.in_channels = in_channels;
    p.out_channels = out_channels;
    p.kh = p.kw = kernel;
    p.stride = stride;
    p.ph = p.pw = pad;
    p.weights.assign(p.weight_count(), T(0));
    p.bias.assign(out_channels, T(0));
    return p;
}

int conv_out_dim(int in, int k, int s, int pad) {
    const int span = in + 2 * pad - k;
    return span < 0 ? 0 : span / s + 1;
}

int deconv_out_dim(int in, int k, int s, int pad) { return (in - 1) * s - 2 * pad + k; }

namespace {

// Register-blocked kernel: IB rows of C times JB columns kept in accumulators.
// A, B and C point at the block origin; only the first jn columns are stored
// (B must be readable for all JB columns).
template <typename T, int IB, int JB>
inline void gemm_block(int K, const T* __restrict A, int lda, const T* __restrict B, int ldb, T* __restrict C,
                       int ldc, int jn) {
    T acc[IB][JB];
    for (int r = 0; r < IB; ++r)
        for (int j = 0; j < JB; ++j) acc[r][j] = j < jn ? C[static_cast<std::size_t>(r) * ldc + j] : T(0);
    const T* arow[IB];
    for (int r = 0; r < IB; ++r) arow[r] = A + static_cast<std::size_t>(r) * lda;
    for (int k = 0; k < K; ++k) {
        const T* b = B + static_cast<std::size_t>(k) * ldb;
        T a[IB];
        for (int r = 0; r < IB; ++r) a[r] = arow[r][k];
        for (int j = 0; j < JB; ++j) {
            const T bv = b[j];
            for (int r = 0; r < IB; ++r) acc[r][j] += a[r] * bv;
        }
    }
    for (int r = 0; r < IB; ++r)
        for (int j = 0; j < jn; ++j) C[static_cast<std::size_t>(r) * ldc + j] = acc[r][j];
}

// Splits rows into register blocks of IB, then 4/2/1 for the remainder.
template <typename T, int IB, int JB>
void gemm_columns(int M, int K, const T* A, const T* B, int ldb, T* C, int ldc, int jn) {
    int i0 = 0;
    auto at = [&](int i) { return std::pair{A + static_cast<std::size_t>(i) * K, C + static_cast<std::size_t>(i) * ldc}; };
    for (; i0 + IB <= M; i0 += IB) {
        auto [a, c] = at(i0);
        gemm_block<T, IB, JB>(K, a, K, B, ldb, c, ldc, jn);
    }
    if constexpr (IB > 4)
        if (M - i0 >= 4) {
            auto [a, c] = at(i0);
            gemm_block<T, 4, JB>(K, a, K, B, ldb, c, ldc, jn);
            i0 += 4;
        }
    if (M - i0 >= 2) {
        auto [a, c] = at(i0);
        gemm_block<T, 2, JB>(K, a, K, B, ldb, c, ldc, jn);
        i0 += 2;
    }
    if (M - i0 >= 1) {
        auto [a, c] = at(i0);
        gemm_block<T, 1, JB>(K, a, K, B, ldb, c, ldc, jn);
    }
}

} // namespace

template <typename T>
void gemm_accumulate(int M, int K, int P, const T* A, const T* B, T* C) {
    constexpr int JB = 256 / sizeof(T);
    constexpr int JN = 64 / sizeof(T); // narrow blocks for the tail and thin outputs
    const int wide = P / JB;
    const int narrow = (P - wide * JB + JN - 1) / JN;
#pragma omp parallel for schedule(static) if (static_cast<long>(M) * K * P > (1L << 20))
    for (int jb = 0; jb < wide + narrow; ++jb) {
        if (jb < wide) {
            gemm_columns<T, 4, JB>(M, K, A, B + jb * JB, P, C + jb * JB, P, JB);
            continue;
        }
        const int j0 = wide * JB + (jb - wide) * JN;
        const int jn = std::min(JN, P - j0);
        if (jn == JN) {
            gemm_columns<T, 8, JN>(M, K, A, B + j0, P, C + j0, P, JN);
        } else {
            // Zero-padded copy of the partial panel so the kernel stays full width.
            std::vector<T> panel(static_cast<std::size_t>(K) * JN, T(0));
            for (int k = 0; k < K; ++k)
                std::copy_n(B + static_cast<std::size_t>(k) * P + j0, jn, panel.data() + static_cast<std::size_t>(k) * JN);
            gemm_columns<T, 8, JN>(M, K, A, panel.data(), JN, C + j0, P, jn);
        }
    }
}

namespace {

struct Geometry {
    int channels, ih, iw; // "image" side
    int kh, kw, stride, ph, pw;
    int oh, ow; // sliding-window grid
    int rows() const { return channels * kh * kw; }
    int cols() const { return oh * ow; }
};

// col[K x P], K = (c, ky, kx), P = (oy, ox).
template <typename T>
void im2col(const T* img, const Geometry& g, T* col) {
    const int P = g.cols();
    for (int c = 0; c < g.channels; ++c) {
        const T* plane = img + static_cast<std::size_t>(c) * g.ih * g.iw;
        for (int ky = 0; ky < g.kh; ++ky) {
            for (int kx = 0; kx < g.kw; ++kx) {
                T* dst = col + static_cast<std::size_t>((c * g.kh + ky) * g.kw + kx) * P;
                for (int oy = 0; oy < g.oh; ++oy) {
                    const int iy = oy * g.stride - g.ph + ky;
                    T* d = dst + static_cast<std::size_t>(oy) * g.ow;
                    if (iy < 0 || iy >= g.ih) {
                        std::fill(d, d + g.ow, T(0));
                        continue;
                    }
                    const T* src = plane + static_cast<std::size_t>(iy) * g.iw;
                    for (int ox = 0; ox < g.ow; ++ox) {
                        const int ix = ox * g.stride - g.pw + kx;
                        d[ox] = (ix >= 0 && ix < g.iw) ? src[ix] : T(0);
                    }
                }
            }
        }
    }
}

// dst[cols x rows] = src[rows x cols]^T, tiled for cache reuse.
template <typename T>
void transpose_into(const T* src, int rows, int cols, T* dst) {
    constexpr int TB = 32;
    for (int r0 = 0; r0 < rows; r0 += TB)
        for (int c0 = 0; c0 < cols; c0 += TB) {
            const int r1 = std::min(rows, r0 + TB), c1 = std::min(cols, c0 + TB);
            for (int r = r0; r < r1; ++r)
                for (int c = c0; c < c1; ++c)
                    dst[static_cast<std::size_t>(c) * rows + r] = src[static_cast<std::size_t>(r) * cols + c];
        }
}

// Transposed layout colT[P x K]; scratch holds K x P.
template <typename T>
void im2col_t(const T* img, const Geometry& g, T* scratch, T* colt) {
    im2col(img, g, scratch);
    transpose_into(scratch, g.rows(), g.cols(), colt);
}

// Scatter-add col[K x P] back onto the image.
template <typename T>
void col2im(const T* col, const Geometry& g, T* img) {
    const int P = g.cols();
    for (int c = 0; c < g.channels; ++c) {
        T* plane = img + static_cast<std::size_t>(c) * g.ih * g.iw;
        for (int ky = 0; ky < g.kh; ++ky) {
            for (int kx = 0; kx < g.kw; ++kx) {
                const T* src = col + static_cast<std::size_t>((c * g.kh + ky) * g.kw + kx) * P;
                for (int oy = 0; oy < g.oh; ++oy) {
                    const int iy = oy * g.stride - g.ph + ky;
                    if (iy < 0 || iy >= g.ih) continue;
                    T* dst = plane + static_cast<std::size_t>(iy) * g.iw;
                    const T* s = src + static_cast<std::size_t>(oy) * g.ow;
                    for (int ox = 0; ox < g.ow; ++ox) {
                        const int ix = ox * g.stride - g.pw + kx;
                        if (ix >= 0 && ix < g.iw) dst[ix] += s[ox];
                    }
                }
            }
        }
    }
}

template <typename T>
std::vector<T> transpose(const std::vector<T>& m, int rows, int cols) {
    std::vector<T> t(m.size());
    transpose_into(m.data(), rows, cols, t.data());
    return t;
}

// Stride-1 convolution without a column buffer, for layers with few output
// channels where im2col traffic would dominate. Accumulates in the same
// (c, ky, kx) order as the GEMM path; padding contributes explicit zeros.
constexpr int direct_max_out = 4;

template <typename T>
bool use_direct(const ConvParams<T>& p) {
    return p.stride == 1 && p.out_channels <= direct_max_out;
}

// Copies an h x w plane into a zero border of (top, left) and total dims (ph, pw).
template <typename T>
void pad_plane(const T* src, int h, int w, int top, int left, int ph, int pw, std::vector<T>& dst) {
    dst.assign(static_cast<std::size_t>(ph) * pw, T(0));
    for (int y = 0; y < h; ++y)
        std::copy_n(src + static_cast<std::size_t>(y) * w, w, dst.data() + static_cast<std::size_t>(y + top) * pw + left);
}

template <typename T>
std::size_t widx(const ConvParams<T>& p, int m, int c, int ky, int kx) {
    return ((static_cast<std::size_t>(m) * p.in_channels + c) * p.kh + ky) * p.kw + kx;
}

template <typename T>
void direct_forward(const T* x, const Geometry& g, const ConvParams<T>& p, T* out) {
    const int C = g.channels, H = g.ih, W = g.iw, OH = g.oh, OW = g.ow, M = p.out_channels;
    const int HP = H + 2 * g.ph, WP = W + 2 * g.pw;
    const std::size_t plane = static_cast<std::size_t>(OH) * OW;
    for (int m = 0; m < M; ++m) std::fill(out + m * plane, out + (m + 1) * plane, p.bias[m]);
    std::vector<T> xp;
    for (int c = 0; c < C; ++c) {
        pad_plane(x + static_cast<std::size_t>(c) * H * W, H, W, g.ph, g.pw, HP, WP, xp);
        for (int oy = 0; oy < OH; ++oy)
            for (int m = 0; m < M; ++m) {
                T* __restrict orow = out + m * plane + static_cast<std::size_t>(oy) * OW;
                for (int ky = 0; ky < g.kh; ++ky) {
                    const T* xrow = xp.data() + static_cast<std::size_t>(oy + ky) * WP;
                    for (int kx = 0; kx < g.kw; ++kx) {
                        const T w = p.weights[widx(p, m, c, ky, kx)];
                        const T* __restrict xr = xrow + kx;
                        for (int ox = 0; ox < OW; ++ox) orow[ox] += w * xr[ox];
                    }
                }
            }
    }
}

template <typename T>
void direct_backward(const T* x, const T* go, const Geometry& g, const ConvParams<T>& p, T* gx, T* gw) {
    constexpr int L = 64 / sizeof(T);
    const int C = g.channels, H = g.ih, W = g.iw, OH = g.oh, OW = g.ow, M = p.out_channels;
    const int HP = H + 2 * g.ph, WP = W + 2 * g.pw;
    const int top = g.kh - 1 - g.ph, left = g.kw - 1 - g.pw;
    const int GH = OH + 2 * top, GW = OW + 2 * left;
    const std::size_t oplane = static_cast<std::size_t>(OH) * OW;
    std::vector<std::vector<T>> gp(M);
    for (int m = 0; m < M; ++m) pad_plane(go + m * oplane, OH, OW, top, left, GH, GW, gp[m]);
    std::vector<T> xp;
    for (int c = 0; c < C; ++c) {
        // Input gradient: correlation of the padded output gradient with the flipped kernel.
        T* gxc = gx + static_cast<std::size_t>(c) * H * W;
        for (int iy = 0; iy < H; ++iy) {
            T* __restrict grow = gxc + static_cast<std::size_t>(iy) * W;
            for (int m = 0; m < M; ++m)
                for (int ky = 0; ky < g.kh; ++ky) {
                    const T* rrow = gp[m].data() + static_cast<std::size_t>(iy + g.kh - 1 - ky) * GW;
                    for (int kx = 0; kx < g.kw; ++kx) {
                        const T w = p.weights[widx(p, m, c, ky, kx)];
                        const T* __restrict rr = rrow + g.kw - 1 - kx;
                        for (int ix = 0; ix < W; ++ix) grow[ix] += w * rr[ix];
                    }
                }
        }
        // Weight gradient with fixed-lane partial sums: deterministic and vectorizable.
        pad_plane(x + static_cast<std::size_t>(c) * H * W, H, W, g.ph, g.pw, HP, WP, xp);
        for (int m = 0; m < M; ++m)
            for (int ky = 0; ky < g.kh; ++ky)
                for (int kx = 0; kx < g.kw; ++kx) {
                    T acc[L] = {};
                    for (int oy = 0; oy < OH; ++oy) {
                        const T* a = go + m * oplane + static_cast<std::size_t>(oy) * OW;
                        const T* b = xp.data() + static_cast<std::size_t>(oy + ky) * WP + kx;
                        int i = 0;
                        for (; i + L <= OW; i += L)
                            for (int j = 0; j < L; ++j) acc[j] += a[i + j] * b[i + j];
                        for (int j = 0; i + j < OW; ++j) acc[j] += a[i + j] * b[i + j];
                    }
                    T s = T(0);
                    for (int j = 0; j < L; ++j) s += acc[j];
                    gw[widx(p, m, c, ky, kx)] += s;
                }
    }
}

template <typename T>
void check_params(const ConvParams<T>& p, const char* op) {
    require(p.consistent(), std::string(op) + ": inconsistent ConvParams");
}

} // namespace

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const ConvParams<T>& p) {
    check_params(p, "conv2d");
    require(x.c == p.in_channels, "conv2d: input channels " + std::to_string(x.c) + " != " + std::to_string(p.in_channels));
    const Geometry g{x.c, x.h, x.w, p.kh, p.kw, p.stride, p.ph, p.pw,
                     conv_out_dim(x.h, p.kh, p.stride, p.ph), conv_out_dim(x.w, p.kw, p.stride, p.pw)};
    require(g.oh > 0 && g.ow > 0, "conv2d: input too small for kernel");
    Tensor<T> out(x.n, p.out_channels, g.oh, g.ow);
    if (use_direct(p)) {
        for (int b = 0; b < x.n; ++b)
            direct_forward(x.values.data() + x.offset(b, 0), g, p, out.values.data() + out.offset(b, 0));
        return out;
    }
    std::vector<T> col(static_cast<std::size_t>(g.rows()) * g.cols());
    const std::size_t P = g.cols();
    for (int b = 0; b < x.n; ++b) {
        im2col(x.values.data() + x.offset(b, 0), g, col.data());
        T* o = out.values.data() + out.offset(b, 0);
        for (int oc = 0; oc < p.out_channels; ++oc) std::fill(o + oc * P, o + (oc + 1) * P, p.bias[oc]);
        gemm_accumulate(p.out_channels, g.rows(), g.cols(), p.weights.data(), col.data(), o);
    }
    return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const ConvParams<T>& p, const Tensor<T>& grad_out) {
    check_params(p, "conv2d_backward");
    require(x.c == p.in_channels, "conv2d_backward: input channel mismatch");
    const Geometry g{x.c, x.h, x.w, p.kh, p.kw, p.stride, p.ph, p.pw,
                     conv_out_dim(x.h, p.kh, p.stride, p.ph), conv_out_dim(x.w, p.kw, p.stride, p.pw)};
    require(grad_out.n == x.n && grad_out.c == p.out_channels && grad_out.h == g.oh && grad_out.w == g.ow,
            "conv2d_backward: grad_out shape mismatch");
    ConvGrads<T> r;
    r.grad_x = Tensor<T>(x.n, x.c, x.h, x.w);
    r.grad_w.assign(p.weight_count(), T(0));
    r.grad_b.assign(p.out_channels, T(0));
    const int K = g.rows(), P = g.cols();
    if (use_direct(p)) {
        for (int b = 0; b < x.n; ++b) {
            const T* go = grad_out.values.data() + grad_out.offset(b, 0);
            for (int oc = 0; oc < p.out_channels; ++oc) {
                T s = r.grad_b[oc];
                for (int i = 0; i < P; ++i) s += go[static_cast<std::size_t>(oc) * P + i];
                r.grad_b[oc] = s;
            }
            direct_backward(x.values.data() + x.offset(b, 0), go, g, p, r.grad_x.values.data() + r.grad_x.offset(b, 0),
                            r.grad_w.data());
        }
        return r;
    }
    const std::vector<T> wt = transpose(p.weights, p.out_channels, K);
    std::vector<T> colt(static_cast<std::size_t>(P) * K), gcol(static_cast<std::size_t>(K) * P);
    for (int b = 0; b < x.n; ++b) {
        const T* go = grad_out.values.data() + grad_out.offset(b, 0);
        for (int oc = 0; oc < p.out_channels; ++oc) {
            T s = r.grad_b[oc];
            for (int i = 0; i < P; ++i) s += go[static_cast<std::size_t>(oc) * P + i];
            r.grad_b[oc] = s;
        }
        im2col_t(x.values.data() + x.offset(b, 0), g, gcol.data(), colt.data());
        gemm_accumulate(p.out_channels, P, K, go, colt.data(), r.grad_w.data());
        std::fill(gcol.begin(), gcol.end(), T(0));
        gemm_accumulate(K, p.out_channels, P, wt.data(), go, gcol.data());
        col2im(gcol.data(), g, r.grad_x.values.data() + r.grad_x.offset(b, 0));
    }
    return r;
}

template <typename T>
Tensor<T> deconv2d_forward(const Tensor<T>& x, const ConvParams<T>& p) {
    check_params(p, "deconv2d");
    require(x.c == p.in_channels, "deconv2d: input channels " + std::to_string(x.c) + " != " + std::to_string(p.in_channels));
    const int oh = deconv_out_dim(x.h, p.kh, p.stride, p.ph), ow = deconv_out_dim(x.w, p.kw, p.stride, p.pw);
    require(oh > 0 && ow > 0, "deconv2d: empty output");
    const Geometry g{p.out_channels, oh, ow, p.kh, p.kw, p.stride, p.ph, p.pw, x.h, x.w};
    Tensor<T> out(x.n, p.out_channels, oh, ow);
    const int K = g.rows(), P = g.cols();
    const std::vector<T> wt = transpose(p.weights, p.in_channels, K);
    std::vector<T> col(static_cast<std::size_t>(K) * P);
    const std::size_t plane = static_cast<std::size_t>(oh) * ow;
    for (int b = 0; b < x.n; ++b) {
        std::fill(col.begin(), col.end(), T(0));
        gemm_accumulate(K, p.in_channels, P, wt.data(), x.values.data() + x.offset(b, 0), col.data());
        T* o = out.values.data() + out.offset(b, 0);
        for (int oc = 0; oc < p.out_channels; ++oc) std::fill(o + oc * plane, o + (oc + 1) * plane, p.bias[oc]);
        col2im(col.data(), g, o);
    }
    return out;
}

template <typename T>
ConvGrads<T> deconv2d_backward(const Tensor<T>& x, const ConvParams<T>& p, const Tensor<T>& grad_out) {
    check_params(p, "deconv2d_backward");
    require(x.c == p.in_channels, "deconv2d_backward: input channel mismatch");
    const int oh = deconv_out_dim(x.h, p.kh, p.stride, p.ph), ow = deconv_out_dim(x.w, p.kw, p.stride, p.pw);
    require(grad_out.n == x.n && grad_out.c == p.out_channels && grad_out.h == oh && grad_out.w == ow,
            "deconv2d_backward: grad_out shape mismatch");
    const Geometry g{p.out_channels, oh, ow, p.kh, p.kw, p.stride, p.ph, p.pw, x.h, x.w};
    ConvGrads<T> r;
    r.grad_x = Tensor<T>(x.n, x.c, x.h, x.w);
    r.grad_w.assign(p.weight_count(), T(0));
    r.grad_b.assign(p.out_channels, T(0));
    const int K = g.rows(), P = g.cols();
    std::vector<T> gcol(static_cast<std::size_t>(K) * P), gcolt(static_cast<std::size_t>(P) * K);
    const std::size_t plane = static_cast<std::size_t>(oh) * ow;
    for (int b = 0; b < x.n; ++b) {
        const T* go = grad_out.values.data() + grad_out.offset(b, 0);
        for (int oc = 0; oc < p.out_channels; ++oc) {
            T s = r.grad_b[oc];
            for (std::size_t i = 0; i < plane; ++i) s += go[oc * plane + i];
            r.grad_b[oc] = s;
        }
        im2col(go, g, gcol.data());
        gemm_accumulate(p.in_channels, K, P, p.weights.data(), gcol.data(), r.grad_x.values.data() + r.grad_x.offset(b, 0));
        transpose_into(gcol.data(), K, P, gcolt.data());
        gemm_accumulate(p.in_channels, P, K, x.values.data() + x.offset(b, 0), gcolt.data(), r.grad_w.data());
    }
    return r;
}

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>* const> xs) {
    require(!xs.empty(), "concat: no inputs");
    const Tensor<T>& f = *xs[0];
    int channels = 0;
    for (const Tensor<T>* t : xs) {
        require(t->n == f.n && t->h == f.h && t->w == f.w, "concat: batch/spatial dims must match");
        channels += t->c;
    }
    Tensor<T> out(f.n, channels, f.h, f.w);
    for (int b = 0; b < f.n; ++b) {
        T* dst = out.values.data() + out.offset(b, 0);
        for (const Tensor<T>* t : xs) {
            const std::size_t len = static_cast<std::size_t>(t->c) * t->plane_size();
            const T* src = t->values.data() + t->offset(b, 0);
            std::copy(src, src + len, dst);
            dst += len;
        }
    }
    return out;
}

template <typename T>
std::vector<Tensor<T>> concat_backward(const Tensor<T>& grad_out, std::span<const int> channels) {
    int total = 0;
    for (int c : channels) total += c;
    require(total == grad_out.c, "concat_backward: channel counts do not add up");
    std::vector<Tensor<T>> out;
    out.reserve(channels.size());
    for (int c : channels) out.emplace_back(grad_out.n, c, grad_out.h, grad_out.w);
    for (int b = 0; b < grad_out.n; ++b) {
        const T* src = grad_out.values.data() + grad_out.offset(b, 0);
        for (Tensor<T>& t : out) {
            const std::size_t len = static_cast<std::size_t>(t.c) * t.plane_size();
            std::copy(src, src + len, t.values.data() + t.offset(b, 0));
            src += len;
        }
    }
    return out;
}

template <typename T>
Tensor<T> leaky_relu_forward(const Tensor<T>& x, T slope) {
    Tensor<T> y = x;
    for (T& v : y.values)
        if (!(v >= T(0))) v *= slope;
    return y;
}

template <typename T>
Tensor<T> leaky_relu_backward(const Tensor<T>& x, const Tensor<T>& grad_out, T slope) {
    require(x.same_shape(grad_out), "leaky_relu_backward: shape mismatch");
    Tensor<T> g = grad_out;
    for (std::size_t i = 0; i < g.values.size(); ++i)
        if (!(x.values[i] > T(0))) g.values[i] *= slope;
    return g;
}

template <typename T>
LossResult<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    require(pred.same_shape(target), "l1_loss: shape mismatch");
    require(pred.size() > 0, "l1_loss: empty tensors");
    LossResult<T> r{T(0), Tensor<T>(pred.n, pred.c, pred.h, pred.w)};
    const T inv = T(1) / static_cast<T>(pred.size());
    double sum = 0;
    for (std::size_t i = 0; i < pred.values.size(); ++i) {
        const T d = pred.values[i] - target.values[i];
        sum += std::abs(static_cast<double>(d));
        r.grad.values[i] = d > T(0) ? inv : (d < T(0) ? -inv : T(0));
    }
    r.value = static_cast<T>(sum / static_cast<double>(pred.size()));
    return r;
}

namespace {

struct Lerp {
    int i0, i1;
    double w1;
};

std::vector<Lerp> lerp_taps(int src, int dst) {
    std::vector<Lerp> taps(dst);
    const double scale = static_cast<double>(src) / dst;
    for (int i = 0; i < dst; ++i) {
        const double s = std::clamp((i + 0.5) * scale - 0.5, 0.0, static_cast<double>(src - 1));
        const int i0 = static_cast<int>(std::floor(s));
        taps[i] = {i0, std::min(i0 + 1, src - 1), s - i0};
    }
    return taps;
}

} // namespace

template <typename T>
Tensor<T> bilinear_resize_tensor(const Tensor<T>& x, int h, int w) {
    require(h >= 1 && w >= 1 && x.h >= 1 && x.w >= 1, "bilinear_resize_tensor: dims must be >= 1");
    if (h == x.h && w == x.w) return x;
    const auto ty = lerp_taps(x.h, h), tx = lerp_taps(x.w, w);
    Tensor<T> out(x.n, x.c, h, w);
    for (int b = 0; b < x.n; ++b) {
        for (int c = 0; c < x.c; ++c) {
            const T* src = x.values.data() + x.offset(b, c);
            T* dst = out.values.data() + out.offset(b, c);
            for (int y = 0; y < h; ++y) {
                const Lerp& ly = ty[y];
                const T wy = static_cast<T>(ly.w1);
                for (int xx = 0; xx < w; ++xx) {
                    const Lerp& lx = tx[xx];
                    const T wx = static_cast<T>(lx.w1);
                    const T top = src[ly.i0 * x.w + lx.i0] * (1 - wx) + src[ly.i0 * x.w + lx.i1] * wx;
                    const T bot = src[ly.i1 * x.w + lx.i0] * (1 - wx) + src[ly.i1 * x.w + lx.i1] * wx;
                    dst[y * w + xx] = top * (1 - wy) + bot * wy;
                }
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> bilinear_resize_backward(const Tensor<T>& grad_out, int in_h, int in_w) {
    require(in_h >= 1 && in_w >= 1, "bilinear_resize_backward: dims must be >= 1");
    if (grad_out.h == in_h && grad_out.w == in_w) return grad_out;
    const int h = grad_out.h, w = grad_out.w;
    const auto ty = lerp_taps(in_h, h), tx = lerp_taps(in_w, w);
    Tensor<T> gx(grad_out.n, grad_out.c, in_h, in_w);
    for (int b = 0; b < grad_out.n; ++b) {
        for (int c = 0; c < grad_out.c; ++c) {
            const T* g = grad_out.values.data() + grad_out.offset(b, c);
            T* dst = gx.values.data() + gx.offset(b, c);
            for (int y = 0; y < h; ++y) {
                const Lerp& ly = ty[y];
                const T wy = static_cast<T>(ly.w1);
                for (int xx = 0; xx < w; ++xx) {
                    const Lerp& lx = tx[xx];
                    const T wx = static_cast<T>(lx.w1);
                    const T v = g[y * w + xx];
                    dst[ly.i0 * in_w + lx.i0] += v * (1 - wy) * (1 - wx);
                    dst[ly.i0 * in_w + lx.i1] += v * (1 - wy) * wx;
                    dst[ly.i1 * in_w + lx.i0] += v * wy * (1 - wx);
                    dst[ly.i1 * in_w + lx.i1] += v * wy * wx;
                }
            }
        }
    }
    return gx;
}

#define EXPOFUSE_INSTANTIATE(T)                                                                            \
    template struct Tensor<T>;                                                                             \
    template struct ConvParams<T>;                                                                         \
    template ConvParams<T> make_conv<T>(int, int, int, int, int);                                          \
    template void gemm_accumulate<T>(int, int, int, const T*, const T*, T*);                               \
    template Tensor<T> conv2d_forward<T>(const Tensor<T>&, const ConvParams<T>&);                          \
    template ConvGrads<T> conv2d_backward<T>(const Tensor<T>&, const ConvParams<T>&, const Tensor<T>&);    \
    template Tensor<T> deconv2d_forward<T>(const Tensor<T>&, const ConvParams<T>&);                        \
    template ConvGrads<T> deconv2d_backward<T>(const Tensor<T>&, const ConvParams<T>&, const Tensor<T>&);  \
    template Tensor<T> concat<T>(std::span<const Tensor<T>* const>);                                       \
    template std::vector<Tensor<T>> concat_backward<T>(const Tensor<T>&, std::span<const int>);            \
    template Tensor<T> leaky_relu_forward<T>(const Tensor<T>&, T);                                         \
    template Tensor<T> leaky_relu_backward<T>(const Tensor<T>&, const Tensor<T>&, T);                      \
    template LossResult<T> l1_loss<T>(const Tensor<T>&, const Tensor<T>&);                                 \
    template Tensor<T> bilinear_resize_tensor<T>(const Tensor<T>&, int, int);                              \
    template Tensor<T> bilinear_resize_backward<T>(const Tensor<T>&, int, int);

EXPOFUSE_INSTANTIATE(float)
EXPOFUSE_INSTANTIATE(double)

#undef EXPOFUSE_INSTANTIATE

} // namespace expofuse
