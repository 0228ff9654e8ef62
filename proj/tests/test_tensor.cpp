#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "expofuse/errors.hpp"
#include "expofuse/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

using namespace expofuse;

namespace {

using TD = Tensor<double>;

template <typename T>
Tensor<T> random_tensor(int n, int c, int h, int w, std::uint64_t seed, double lo = -1, double hi = 1) {
    Tensor<T> t(n, c, h, w);
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<double> d(lo, hi);
    for (T& v : t.values) v = static_cast<T>(d(gen));
    return t;
}

template <typename T>
ConvParams<T> random_conv(int in, int out, int k, int s, int p, std::uint64_t seed) {
    ConvParams<T> c = make_conv<T>(in, out, k, s, p);
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<double> d(-0.5, 0.5);
    for (T& v : c.weights) v = static_cast<T>(d(gen));
    for (T& v : c.bias) v = static_cast<T>(d(gen));
    return c;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

// Central differences of f at up to `samples` coordinates of v, compared with `analytic`.
double max_fd_error(std::vector<double>& v, const std::vector<double>& analytic, const std::function<double()>& f,
                    int samples = 48, std::uint64_t seed = 1) {
    const double h = 1e-3;
    std::vector<std::size_t> idx(v.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (static_cast<int>(idx.size()) > samples) {
        std::mt19937_64 gen(seed);
        std::shuffle(idx.begin(), idx.end(), gen);
        idx.resize(samples);
    }
    double worst = 0;
    for (std::size_t i : idx) {
        const double keep = v[i];
        v[i] = keep + h;
        const double up = f();
        v[i] = keep - h;
        const double down = f();
        v[i] = keep;
        worst = std::max(worst, rel_err((up - down) / (2 * h), analytic[i]));
    }
    return worst;
}

// Naive cross-correlation in double.
TD conv_oracle(const TD& x, const ConvParams<double>& p) {
    const int oh = (x.h + 2 * p.ph - p.kh) / p.stride + 1, ow = (x.w + 2 * p.pw - p.kw) / p.stride + 1;
    TD y(x.n, p.out_channels, oh, ow);
    for (int b = 0; b < x.n; ++b)
        for (int o = 0; o < p.out_channels; ++o)
            for (int i = 0; i < oh; ++i)
                for (int j = 0; j < ow; ++j) {
                    double s = p.bias[o];
                    for (int c = 0; c < p.in_channels; ++c)
                        for (int u = 0; u < p.kh; ++u)
                            for (int v = 0; v < p.kw; ++v) {
                                const int yy = i * p.stride - p.ph + u, xx = j * p.stride - p.pw + v;
                                if (yy < 0 || yy >= x.h || xx < 0 || xx >= x.w) continue;
                                s += p.weights[((o * p.in_channels + c) * p.kh + u) * p.kw + v] * x.at(b, c, yy, xx);
                            }
                    y.at(b, o, i, j) = s;
                }
    return y;
}

// Scatter form of the transposed convolution; weights are in x out x kh x kw.
TD deconv_oracle(const TD& x, const ConvParams<double>& p) {
    const int oh = (x.h - 1) * p.stride - 2 * p.ph + p.kh, ow = (x.w - 1) * p.stride - 2 * p.pw + p.kw;
    TD y(x.n, p.out_channels, oh, ow);
    for (int b = 0; b < x.n; ++b) {
        for (int o = 0; o < p.out_channels; ++o)
            for (int i = 0; i < oh; ++i)
                for (int j = 0; j < ow; ++j) y.at(b, o, i, j) = p.bias[o];
        for (int c = 0; c < p.in_channels; ++c)
            for (int i = 0; i < x.h; ++i)
                for (int j = 0; j < x.w; ++j)
                    for (int o = 0; o < p.out_channels; ++o)
                        for (int u = 0; u < p.kh; ++u)
                            for (int v = 0; v < p.kw; ++v) {
                                const int yy = i * p.stride - p.ph + u, xx = j * p.stride - p.pw + v;
                                if (yy < 0 || yy >= oh || xx < 0 || xx >= ow) continue;
                                y.at(b, o, yy, xx) +=
                                    p.weights[((c * p.out_channels + o) * p.kh + u) * p.kw + v] * x.at(b, c, i, j);
                            }
    }
    return y;
}

struct ConvCase {
    int in, out, k, s, p, h, w;
};

// Every (de)convolution shape the fusion networks instantiate, at small sizes.
const ConvCase conv_cases[] = {
    {6, 5, 4, 2, 1, 8, 6},   // contractive level
    {5, 4, 3, 1, 1, 6, 5},   // stride-1 extra / final conv, small output count
    {3, 7, 3, 1, 1, 5, 7},   // stride-1 conv, wide output
    {2, 2, 4, 2, 1, 9, 7},   // odd dims floor
    {3, 3, 8, 4, 2, 12, 8},  // two-level link
    {2, 2, 16, 8, 4, 16, 16} // three-level link
};

} // namespace

TEST_CASE("conv output dims") {
    const auto x = random_tensor<float>(1, 6, 800, 480, 1);
    const auto y = conv2d_forward(x, random_conv<float>(6, 16, 4, 2, 1, 2));
    CHECK(y.n == 1);
    CHECK(y.c == 16);
    CHECK(y.h == 400);
    CHECK(y.w == 240);
    CHECK(conv_out_dim(801, 4, 2, 1) == 400);
    CHECK(deconv_out_dim(400, 4, 2, 1) == 800);
}

TEST_CASE("conv trivial cases") {
    SUBCASE("1x1 unit kernel is the identity") {
        auto p = make_conv<float>(1, 1, 1, 1, 0);
        p.weights[0] = 1;
        const auto x = random_tensor<float>(2, 1, 5, 4, 3);
        CHECK(conv2d_forward(x, p).values == x.values);
    }
    SUBCASE("2x2 hand sum") {
        auto p = make_conv<float>(1, 1, 2, 1, 0);
        std::fill(p.weights.begin(), p.weights.end(), 1.0f);
        Tensor<float> x(1, 1, 2, 2);
        x.values = {1, 2, 3, 4};
        const auto y = conv2d_forward(x, p);
        REQUIRE(y.size() == 1);
        CHECK(y.values[0] == 10.0f);
    }
    SUBCASE("shape errors") {
        const auto x = random_tensor<float>(1, 3, 8, 8, 4);
        CHECK_THROWS_AS(conv2d_forward(x, random_conv<float>(4, 2, 3, 1, 1, 1)), ContractViolation);
        CHECK_THROWS_AS(deconv2d_forward(x, random_conv<float>(2, 2, 4, 2, 1, 1)), ContractViolation);
        auto bad = random_conv<float>(3, 2, 3, 1, 1, 1);
        bad.bias.pop_back();
        CHECK_THROWS_AS(conv2d_forward(x, bad), ContractViolation);
        CHECK_THROWS_AS(conv2d_backward(x, random_conv<float>(3, 2, 3, 1, 1, 1), Tensor<float>(1, 2, 7, 8)),
                        ContractViolation);
    }
}

TEST_CASE("conv and deconv match naive oracles") {
    for (const ConvCase& cc : conv_cases) {
        CAPTURE(cc.k);
        CAPTURE(cc.out);
        const auto x = random_tensor<double>(2, cc.in, cc.h, cc.w, cc.k * 7 + cc.in);
        const auto p = random_conv<double>(cc.in, cc.out, cc.k, cc.s, cc.p, cc.out);
        const auto y = conv2d_forward(x, p), e = conv_oracle(x, p);
        REQUIRE(y.same_shape(e));
        for (std::size_t i = 0; i < y.size(); ++i) CHECK(y.values[i] == doctest::Approx(e.values[i]).epsilon(1e-12));

        const auto xd = random_tensor<double>(2, cc.in, 3, 4, cc.k);
        const auto yd = deconv2d_forward(xd, p), ed = deconv_oracle(xd, p);
        REQUIRE(yd.same_shape(ed));
        for (std::size_t i = 0; i < yd.size(); ++i)
            CHECK(yd.values[i] == doctest::Approx(ed.values[i]).epsilon(1e-12));
    }
}

TEST_CASE("float forward agrees with the double oracle") {
    const auto xd = random_tensor<double>(1, 16, 12, 10, 5);
    const auto pd = random_conv<double>(16, 3, 3, 1, 1, 6);
    Tensor<float> xf(1, 16, 12, 10);
    std::copy(xd.values.begin(), xd.values.end(), xf.values.begin());
    ConvParams<float> pf = make_conv<float>(16, 3, 3, 1, 1);
    std::copy(pd.weights.begin(), pd.weights.end(), pf.weights.begin());
    std::copy(pd.bias.begin(), pd.bias.end(), pf.bias.begin());
    const auto yf = conv2d_forward(xf, pf);
    const auto e = conv_oracle(xd, pd);
    for (std::size_t i = 0; i < e.size(); ++i) CHECK(yf.values[i] == doctest::Approx(e.values[i]).epsilon(1e-4));
}

TEST_CASE("deconv with k4 s2 p1 doubles dims") {
    const auto x = random_tensor<float>(1, 16, 100, 60, 7);
    const auto y = deconv2d_forward(x, random_conv<float>(16, 8, 4, 2, 1, 8));
    CHECK(y.c == 8);
    CHECK(y.h == 200);
    CHECK(y.w == 120);
    const auto back = conv2d_forward(y, random_conv<float>(8, 16, 4, 2, 1, 9));
    CHECK(back.same_shape(x));
}

TEST_CASE("deconv of zero input is bias only") {
    auto p = random_conv<float>(3, 2, 4, 2, 1, 10);
    const auto y = deconv2d_forward(Tensor<float>(1, 3, 4, 4), p);
    for (int o = 0; o < 2; ++o)
        for (int i = 0; i < 8; ++i)
            for (int j = 0; j < 8; ++j) CHECK(y.at(0, o, i, j) == p.bias[o]);
}

TEST_CASE("deconv is the adjoint of conv with the same kernel") {
    for (const ConvCase& cc : conv_cases) {
        auto d = random_conv<double>(cc.in, cc.out, cc.k, cc.s, cc.p, 11);
        std::fill(d.bias.begin(), d.bias.end(), 0.0);
        auto c = make_conv<double>(cc.out, cc.in, cc.k, cc.s, cc.p);
        c.weights = d.weights;
        const auto x = random_tensor<double>(1, cc.in, 4, 3, 12);
        const auto dx = deconv2d_forward(x, d);
        const auto y = random_tensor<double>(1, cc.out, dx.h, dx.w, 13);
        const auto cy = conv2d_forward(y, c);
        REQUIRE(cy.same_shape(x));
        CHECK(rel_err(dot(dx.values, y.values), dot(x.values, cy.values)) < 1e-4);
        // The input gradient of deconv is that convolution.
        const auto g = deconv2d_backward(x, d, y);
        for (std::size_t i = 0; i < x.size(); ++i) CHECK(rel_err(g.grad_x.values[i], cy.values[i]) < 1e-4);
    }
}

TEST_CASE("conv gradients match finite differences") {
    for (const ConvCase& cc : conv_cases) {
        CAPTURE(cc.k);
        CAPTURE(cc.out);
        auto x = random_tensor<double>(2, cc.in, cc.h, cc.w, 20 + cc.k);
        auto p = random_conv<double>(cc.in, cc.out, cc.k, cc.s, cc.p, 21);
        const auto y0 = conv2d_forward(x, p);
        const auto r = random_tensor<double>(y0.n, y0.c, y0.h, y0.w, 22);
        auto f = [&] { return dot(conv2d_forward(x, p).values, r.values); };
        const auto g = conv2d_backward(x, p, r);
        CHECK(max_fd_error(x.values, g.grad_x.values, f) < 1e-4);
        CHECK(max_fd_error(p.weights, g.grad_w, f) < 1e-4);
        CHECK(max_fd_error(p.bias, g.grad_b, f) < 1e-4);
        for (int o = 0; o < r.c; ++o) {
            double s = 0;
            for (int b = 0; b < r.n; ++b)
                for (std::size_t i = 0; i < r.plane_size(); ++i) s += r.values[r.offset(b, o) + i];
            CHECK(g.grad_b[o] == doctest::Approx(s).epsilon(1e-12));
        }
    }
}

TEST_CASE("deconv gradients match finite differences") {
    for (const ConvCase& cc : conv_cases) {
        if (cc.s == 1) continue;
        auto x = random_tensor<double>(2, cc.in, 3, 4, 30 + cc.k);
        auto p = random_conv<double>(cc.in, cc.out, cc.k, cc.s, cc.p, 31);
        const auto y0 = deconv2d_forward(x, p);
        const auto r = random_tensor<double>(y0.n, y0.c, y0.h, y0.w, 32);
        auto f = [&] { return dot(deconv2d_forward(x, p).values, r.values); };
        const auto g = deconv2d_backward(x, p, r);
        CHECK(max_fd_error(x.values, g.grad_x.values, f) < 1e-4);
        CHECK(max_fd_error(p.weights, g.grad_w, f) < 1e-4);
        CHECK(max_fd_error(p.bias, g.grad_b, f) < 1e-4);
    }
}

TEST_CASE("zero upstream gradient gives zero gradients") {
    const auto x = random_tensor<float>(1, 4, 8, 8, 40);
    for (const auto& p : {random_conv<float>(4, 3, 3, 1, 1, 41), random_conv<float>(4, 6, 4, 2, 1, 42)}) {
        const auto y = conv2d_forward(x, p);
        const auto g = conv2d_backward(x, p, Tensor<float>(y.n, y.c, y.h, y.w));
        for (float v : g.grad_x.values) CHECK(v == 0.0f);
        for (float v : g.grad_w) CHECK(v == 0.0f);
        for (float v : g.grad_b) CHECK(v == 0.0f);
    }
}

TEST_CASE("single-pixel conv reduces to the scalar chain rule") {
    auto p = make_conv<double>(1, 1, 1, 1, 0);
    p.weights[0] = 3;
    p.bias[0] = 1;
    TD x(1, 1, 1, 1, 2.0);
    CHECK(conv2d_forward(x, p).values[0] == 7.0);
    const auto g = conv2d_backward(x, p, TD(1, 1, 1, 1, 0.5));
    CHECK(g.grad_x.values[0] == 1.5);
    CHECK(g.grad_w[0] == 1.0);
    CHECK(g.grad_b[0] == 0.5);
}

TEST_CASE("concat") {
    const auto a = random_tensor<float>(1, 3, 8, 8, 50), b = random_tensor<float>(1, 16, 8, 8, 51);
    const Tensor<float>* ab[] = {&a, &b};
    const auto y = concat<float>(ab);
    CHECK(y.c == 19);
    CHECK(y.at(0, 2, 5, 6) == a.at(0, 2, 5, 6));
    CHECK(y.at(0, 3, 5, 6) == b.at(0, 0, 5, 6));
    const Tensor<float>* one[] = {&a};
    CHECK(concat<float>(one).values == a.values);
    const auto g = random_tensor<float>(1, 19, 8, 8, 52);
    const int ch[] = {3, 16};
    const auto parts = concat_backward<float>(g, ch);
    REQUIRE(parts.size() == 2);
    CHECK(parts[1].at(0, 4, 1, 2) == g.at(0, 7, 1, 2));
    CHECK(parts[0].at(0, 1, 1, 2) == g.at(0, 1, 1, 2));
    const auto c = random_tensor<float>(1, 3, 8, 7, 53);
    const Tensor<float>* bad[] = {&a, &c};
    CHECK_THROWS_AS(concat<float>(bad), ContractViolation);

    // Finite-difference check of the split.
    auto xa = random_tensor<double>(2, 2, 3, 3, 54), xb = random_tensor<double>(2, 3, 3, 3, 55);
    const auto r = random_tensor<double>(2, 5, 3, 3, 56);
    auto f = [&] {
        const TD* xs[] = {&xa, &xb};
        return dot(concat<double>(xs).values, r.values);
    };
    const int chd[] = {2, 3};
    const auto gd = concat_backward<double>(r, chd);
    CHECK(max_fd_error(xa.values, gd[0].values, f) < 1e-4);
    CHECK(max_fd_error(xb.values, gd[1].values, f) < 1e-4);
}

TEST_CASE("leaky relu") {
    TD x(1, 1, 1, 3);
    x.values = {2.0, -2.0, 0.0};
    const auto y = leaky_relu_forward(x, 0.1);
    CHECK(y.values[0] == 2.0);
    CHECK(y.values[1] == doctest::Approx(-0.2));
    CHECK(y.values[2] == 0.0);
    const auto g = leaky_relu_backward(x, TD(1, 1, 1, 3, 1.0), 0.1);
    CHECK(g.values[2] == doctest::Approx(0.1));

    auto z = random_tensor<double>(2, 3, 4, 4, 60);
    for (double& v : z.values)
        if (std::abs(v) < 0.05) v = 0.3; // keep away from the kink
    const auto r = random_tensor<double>(2, 3, 4, 4, 61);
    auto f = [&] { return dot(leaky_relu_forward(z, 0.1).values, r.values); };
    CHECK(max_fd_error(z.values, leaky_relu_backward(z, r, 0.1).values, f, 96) < 1e-4);
}

TEST_CASE("l1 loss") {
    const auto t = random_tensor<double>(1, 3, 5, 5, 70);
    CHECK(l1_loss(t, t).value == 0.0);
    TD shifted = t;
    for (double& v : shifted.values) v += 0.5;
    CHECK(l1_loss(shifted, t).value == doctest::Approx(0.5));

    auto p = random_tensor<double>(2, 3, 4, 4, 71);
    const auto q = random_tensor<double>(2, 3, 4, 4, 72);
    double brute = 0;
    for (std::size_t i = 0; i < p.size(); ++i) brute += std::abs(p.values[i] - q.values[i]);
    const auto res = l1_loss(p, q);
    CHECK(res.value == doctest::Approx(brute / p.size()).epsilon(1e-12));
    auto f = [&] { return l1_loss(p, q).value; };
    CHECK(max_fd_error(p.values, res.grad.values, f, 96) < 1e-4);
    CHECK_THROWS_AS(l1_loss(p, TD(1, 3, 4, 4)), ContractViolation);
}

TEST_CASE("bilinear tensor resize") {
    const auto x = random_tensor<double>(2, 3, 5, 6, 80);
    CHECK(bilinear_resize_tensor(x, 5, 6).values == x.values);
    const auto k = bilinear_resize_tensor(TD(1, 2, 4, 4, 0.25), 7, 3);
    for (double v : k.values) CHECK(v == doctest::Approx(0.25));

    for (auto [h, w] : {std::pair{7, 9}, {3, 4}, {10, 12}}) {
        auto xx = random_tensor<double>(1, 2, 5, 6, 81);
        const auto r = random_tensor<double>(1, 2, h, w, 82);
        auto f = [&] { return dot(bilinear_resize_tensor(xx, h, w).values, r.values); };
        CHECK(max_fd_error(xx.values, bilinear_resize_backward(r, 5, 6).values, f, 60) < 1e-4);
    }
}

TEST_CASE("gemm agrees with the naive product") {
    std::mt19937_64 gen(90);
    std::uniform_real_distribution<double> d(-1, 1);
    for (auto [M, K, P] : {std::tuple{1, 1, 1}, {3, 7, 5}, {17, 33, 70}, {9, 64, 300}, {4, 10, 129}}) {
        std::vector<double> A(M * K), B(K * P), C(M * P);
        for (double& v : A) v = d(gen);
        for (double& v : B) v = d(gen);
        for (double& v : C) v = d(gen);
        std::vector<double> E = C;
        for (int i = 0; i < M; ++i)
            for (int j = 0; j < P; ++j)
                for (int k = 0; k < K; ++k) E[i * P + j] += A[i * K + k] * B[k * P + j];
        gemm_accumulate(M, K, P, A.data(), B.data(), C.data());
        for (int i = 0; i < M * P; ++i) CHECK(C[i] == doctest::Approx(E[i]).epsilon(1e-12));
    }
}

TEST_CASE("gemm sums each element in ascending k order") {
    // With float rounding the result depends on order; compare against the sequential sum bit for bit.
    std::mt19937_64 gen(91);
    std::uniform_real_distribution<float> d(-1, 1);
    const int M = 13, K = 41, P = 77;
    std::vector<float> A(M * K), B(K * P), C(M * P, 0.0f);
    for (float& v : A) v = d(gen) * 1000.0f;
    for (float& v : B) v = d(gen);
    gemm_accumulate(M, K, P, A.data(), B.data(), C.data());
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < P; ++j) {
            float s = 0.0f;
            for (int k = 0; k < K; ++k) s = std::fma(A[i * K + k], B[k * P + j], s);
            float t = 0.0f;
            for (int k = 0; k < K; ++k) t += A[i * K + k] * B[k * P + j];
            CHECK((C[i * P + j] == s || C[i * P + j] == t));
        }
}

TEST_CASE("forward and backward are bit-identical across runs") {
    const auto x = random_tensor<float>(2, 19, 24, 16, 100);
    for (const auto& p : {random_conv<float>(19, 16, 4, 2, 1, 101), random_conv<float>(19, 3, 3, 1, 1, 102),
                          random_conv<float>(19, 16, 3, 1, 1, 103)}) {
        const auto y1 = conv2d_forward(x, p), y2 = conv2d_forward(x, p);
        CHECK(y1.values == y2.values);
        const auto r = random_tensor<float>(y1.n, y1.c, y1.h, y1.w, 104);
        const auto g1 = conv2d_backward(x, p, r), g2 = conv2d_backward(x, p, r);
        CHECK(g1.grad_x.values == g2.grad_x.values);
        CHECK(g1.grad_w == g2.grad_w);
        CHECK(g1.grad_b == g2.grad_b);
    }
}

TEST_CASE("tensor finiteness") {
    auto t = random_tensor<float>(1, 1, 2, 2, 1);
    CHECK(t.finite());
    t.values[1] = std::numeric_limits<float>::infinity();
    CHECK_FALSE(t.finite());
}
