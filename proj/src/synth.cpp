#include "expofuse/dataset.hpp"

#include "expofuse/errors.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace expofuse {

namespace {

// mt19937_64 output is fully specified; the std distributions are not.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}
    double unit() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }
    double uniform(double a, double b) { return a + (b - a) * unit(); }
    double log_uniform(double a, double b) { return std::exp(uniform(std::log(a), std::log(b))); }
    int integer(int lo, int hi) { return lo + static_cast<int>(unit() * (hi - lo + 1)); }

private:
    std::mt19937_64 gen_;
};

struct Shape {
    bool disc = false;
    double cx = 0, cy = 0, rx = 0, ry = 0;
    double radiance[3] = {};
    double stripe_freq = 0; // 0 = flat
    double stripe_amp = 0;
};

Shape random_shape(Rng& rng, int cw, int h) {
    Shape s;
    s.disc = rng.unit() < 0.5;
    s.cx = rng.uniform(0, cw);
    s.cy = rng.uniform(0, h);
    s.rx = rng.uniform(0.06, 0.22) * h;
    s.ry = rng.uniform(0.06, 0.22) * h;
    const double level = rng.log_uniform(0.01, 0.95);
    for (double& c : s.radiance) c = level * rng.uniform(0.55, 1.0);
    if (rng.unit() < 0.4) {
        s.stripe_freq = rng.uniform(0.2, 0.8);
        s.stripe_amp = rng.uniform(0.2, 0.5);
    }
    return s;
}

// Soft coverage in [0,1] with a one-pixel ramp at the boundary.
double coverage(const Shape& s, double x, double y) {
    double d; // signed distance-ish, negative inside
    if (s.disc) {
        const double nx = (x - s.cx) / s.rx, ny = (y - s.cy) / s.ry;
        d = (std::sqrt(nx * nx + ny * ny) - 1.0) * std::min(s.rx, s.ry);
    } else {
        d = std::max(std::abs(x - s.cx) - s.rx, std::abs(y - s.cy) - s.ry);
    }
    return std::clamp(0.5 - d, 0.0, 1.0);
}

struct SceneModel {
    int canvas_w = 0, h = 0;
    double base[3] = {}, gx[3] = {}, gy[3] = {};
    double wave_fx = 0, wave_fy = 0, wave_amp = 0;
    std::vector<Shape> shapes;
    Shape mover;
};

void render_radiance(const SceneModel& m, const Shape& mover, std::vector<double>& out) {
    out.assign(static_cast<std::size_t>(m.canvas_w) * m.h * 3, 0.0);
    for (int y = 0; y < m.h; ++y) {
        for (int x = 0; x < m.canvas_w; ++x) {
            const double u = static_cast<double>(x) / m.canvas_w, v = static_cast<double>(y) / m.h;
            const double wave = 1 + m.wave_amp * std::sin(m.wave_fx * x) * std::sin(m.wave_fy * y);
            double px[3];
            for (int c = 0; c < 3; ++c) px[c] = std::max(0.002, (m.base[c] + m.gx[c] * u + m.gy[c] * v) * wave);
            auto paint = [&](const Shape& s) {
                const double a = coverage(s, x + 0.5, y + 0.5);
                if (a <= 0) return;
                const double stripe =
                    s.stripe_freq > 0 ? 1 + s.stripe_amp * std::sin(s.stripe_freq * (x + 0.7 * y)) : 1.0;
                for (int c = 0; c < 3; ++c) px[c] = (1 - a) * px[c] + a * s.radiance[c] * stripe;
            };
            for (const Shape& s : m.shapes) paint(s);
            paint(mover);
            for (int c = 0; c < 3; ++c)
                out[(static_cast<std::size_t>(y) * m.canvas_w + x) * 3 + c] = std::clamp(px[c], 0.0, 1.0);
        }
    }
}

Image expose(const std::vector<double>& radiance, int canvas_w, int h, int x0, int w, double ev) {
    Image img(w, h, 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                const double r = radiance[(static_cast<std::size_t>(y) * canvas_w + x0 + x) * 3 + c];
                img.at(x, y, c) = static_cast<float>(std::pow(std::min(1.0, r * ev), 1.0 / 2.2));
            }
    return img;
}

} // namespace

Scene synth_scene(std::uint64_t seed, int width, int height, const SynthOptions& opts) {
    require(width >= 16 && height >= 16, "synth_scene: dims must be at least 16x16");
    require(opts.exposures >= 2, "synth_scene: need at least 2 exposures");
    require(opts.ratio >= 1, "synth_scene: ratio must be >= 1");
    require(opts.disparity >= 0, "synth_scene: disparity must be non-negative");

    Rng rng(seed);
    SceneModel m;
    m.canvas_w = width + opts.disparity;
    m.h = height;
    const double floor_level = rng.log_uniform(0.02, 0.25);
    for (int c = 0; c < 3; ++c) {
        m.base[c] = floor_level * rng.uniform(0.6, 1.0);
        m.gx[c] = rng.uniform(-0.5, 1.0) * floor_level;
        m.gy[c] = rng.uniform(-0.5, 1.0) * floor_level;
    }
    m.wave_fx = rng.uniform(0.05, 0.4);
    m.wave_fy = rng.uniform(0.05, 0.4);
    m.wave_amp = rng.uniform(0.0, 0.3);
    for (int i = 0; i < opts.shapes; ++i) m.shapes.push_back(random_shape(rng, m.canvas_w, height));
    m.mover = random_shape(rng, m.canvas_w, height);
    m.mover.cx = rng.uniform(0.25, 0.75) * m.canvas_w;
    m.mover.cy = rng.uniform(0.25, 0.75) * height;

    Shape moved = m.mover;
    if (opts.object_motion) {
        const double max_shift = std::max(2.0, width / 8.0);
        const double sx = rng.uniform(0.4, 1.0) * max_shift * (rng.unit() < 0.5 ? -1 : 1);
        const double sy = rng.uniform(0.4, 1.0) * max_shift * (rng.unit() < 0.5 ? -1 : 1);
        moved.cx += sx;
        moved.cy += sy;
    }

    std::vector<double> left_rad, right_rad;
    render_radiance(m, m.mover, left_rad);
    render_radiance(m, moved, right_rad);

    Scene scene;
    scene.id = "synth-" + std::to_string(seed);
    for (int k = 0; k < opts.exposures; ++k) {
        const double ev = std::pow(opts.ratio, static_cast<double>(k) / (opts.exposures - 1));
        const Role role = k == 0 ? Role::under : (k == opts.exposures - 1 ? Role::over : Role::mid);
        // Left camera sees the canvas offset by the disparity.
        scene.shots.push_back({"", {ev, View::left, role}, expose(left_rad, m.canvas_w, height, opts.disparity, width, ev)});
        scene.shots.push_back({"", {ev, View::right, role}, expose(right_rad, m.canvas_w, height, 0, width, ev)});
    }
    return scene;
}

} // namespace expofuse
