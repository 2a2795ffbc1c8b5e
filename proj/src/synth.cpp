#include "etta/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace etta {

DomainSpec DomainSpec::source() {
    DomainSpec d;
    d.name = "source";
    d.means = {0.2f, 0.8f, 0.5f};
    d.noise_sigma = 0.02f;
    d.gamma = 1.0f;
    d.bias_amplitude = 0.0f;
    return d;
}

DomainSpec DomainSpec::target() {
    DomainSpec d;
    d.name = "target";
    d.means = {0.3f, 0.6f, 0.45f};
    d.noise_sigma = 0.08f;
    d.gamma = 1.6f;
    d.bias_amplitude = 0.15f;
    d.bias_scale = 2.0f;
    return d;
}

DomainSpec DomainSpec::by_name(const std::string& name) {
    if (name == "source") return source();
    if (name == "target") return target();
    throw std::invalid_argument("unknown domain '" + name + "' (source|target)");
}

namespace {

struct Shape {
    double cx, cy, a, b, theta, outer;  // outer = radial scale of ring edge
};

// Geometry stream is keyed only by (seed, H, W) so every domain sees the
// identical mask for a given seed.
Shape draw_shape(uint64_t seed, int64_t h, int64_t w) {
    Rng rng(derive_seed(seed, 0x73686170ull));
    for (int attempt = 0; attempt < 100; ++attempt) {
        double a = rng.uniform(6.0, 14.0);
        double b = rng.uniform(6.0, 14.0);
        double theta = rng.uniform(0.0, std::numbers::pi);
        double thickness = rng.uniform(2.0, 5.0);
        double outer = 1.0 + thickness / std::min(a, b);
        double reach = std::max(a, b) * outer + 2.0;
        if (reach * 2.0 >= static_cast<double>(std::min(h, w))) continue;  // cannot fit
        double cx = rng.uniform(reach, static_cast<double>(w) - reach);
        double cy = rng.uniform(reach, static_cast<double>(h) - reach);
        return {cx, cy, a, b, theta, outer};
    }
    throw std::runtime_error("generate_sample: no placeable shape after 100 attempts (" +
                             std::to_string(h) + "x" + std::to_string(w) + ")");
}

}  // namespace

Sample generate_sample(uint64_t seed, int64_t h, int64_t w, const DomainSpec& domain) {
    if (h % 16 != 0 || w % 16 != 0)
        throw std::invalid_argument("generate_sample: H and W must be divisible by 16");
    Shape sh = draw_shape(seed, h, w);

    Sample s;
    s.h = h;
    s.w = w;
    s.domain = domain.name;
    s.seed = seed;
    s.mask.resize(static_cast<size_t>(h * w), 0);
    s.image.resize(static_cast<size_t>(h * w), 0.0f);

    const double ct = std::cos(sh.theta), st = std::sin(sh.theta);
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            double dx = (static_cast<double>(x) + 0.5) - sh.cx;
            double dy = (static_cast<double>(y) + 0.5) - sh.cy;
            double u = (dx * ct + dy * st) / sh.a;
            double v = (-dx * st + dy * ct) / sh.b;
            double r = std::sqrt(u * u + v * v);
            if (r <= 1.0)
                s.mask[y * w + x] = 1;
            else if (r <= sh.outer)
                s.mask[y * w + x] = 2;
        }
    }

    Rng rng(derive_seed(seed ^ 0x696d61676500ull, 0x72656e64ull));
    const double fx = rng.uniform(0.5, static_cast<double>(domain.bias_scale));
    const double fy = rng.uniform(0.5, static_cast<double>(domain.bias_scale));
    const double px = rng.uniform(), py = rng.uniform();
    const double two_pi = 2.0 * std::numbers::pi;
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            double base = domain.means[s.mask[y * w + x]];
            double bias = domain.bias_amplitude *
                          std::sin(two_pi * (fx * (x + 0.5) / w + px)) *
                          std::sin(two_pi * (fy * (y + 0.5) / h + py));
            double val = std::pow(base * (1.0 + bias), static_cast<double>(domain.gamma));
            val += domain.noise_sigma * rng.normal();
            s.image[y * w + x] = static_cast<float>(std::clamp(val, 0.0, 1.0));
        }
    }
    return s;
}

namespace {

float bilinear(const std::vector<float>& img, int64_t h, int64_t w, double sy, double sx) {
    if (sx < -0.5 || sy < -0.5 || sx > w - 0.5 || sy > h - 0.5) return 0.0f;
    double x0f = std::floor(sx), y0f = std::floor(sy);
    int64_t x0 = static_cast<int64_t>(x0f), y0 = static_cast<int64_t>(y0f);
    double ax = sx - x0f, ay = sy - y0f;
    auto at = [&](int64_t yy, int64_t xx) -> double {
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
        return img[yy * w + xx];
    };
    return static_cast<float>((1 - ay) * ((1 - ax) * at(y0, x0) + ax * at(y0, x0 + 1)) +
                              ay * ((1 - ax) * at(y0 + 1, x0) + ax * at(y0 + 1, x0 + 1)));
}

uint8_t nearest(const std::vector<uint8_t>& m, int64_t h, int64_t w, double sy, double sx) {
    int64_t x = static_cast<int64_t>(std::lround(sx));
    int64_t y = static_cast<int64_t>(std::lround(sy));
    if (x < 0 || x >= w || y < 0 || y >= h) return 0;  // background fill
    return m[y * w + x];
}

}  // namespace

Sample flip_horizontal(const Sample& s) {
    Sample out = s;
    for (int64_t y = 0; y < s.h; ++y)
        for (int64_t x = 0; x < s.w; ++x) {
            out.image[y * s.w + x] = s.image[y * s.w + (s.w - 1 - x)];
            out.mask[y * s.w + x] = s.mask[y * s.w + (s.w - 1 - x)];
        }
    return out;
}

Sample flip_vertical(const Sample& s) {
    Sample out = s;
    for (int64_t y = 0; y < s.h; ++y)
        for (int64_t x = 0; x < s.w; ++x) {
            out.image[y * s.w + x] = s.image[(s.h - 1 - y) * s.w + x];
            out.mask[y * s.w + x] = s.mask[(s.h - 1 - y) * s.w + x];
        }
    return out;
}

Sample translate(const Sample& s, int dx, int dy) {
    Sample out = s;
    for (int64_t y = 0; y < s.h; ++y)
        for (int64_t x = 0; x < s.w; ++x) {
            int64_t sx = x - dx, sy = y - dy;
            bool in = sx >= 0 && sx < s.w && sy >= 0 && sy < s.h;
            out.image[y * s.w + x] = in ? s.image[sy * s.w + sx] : 0.0f;
            out.mask[y * s.w + x] = in ? s.mask[sy * s.w + sx] : 0;
        }
    return out;
}

Sample rotate(const Sample& s, double radians) {
    Sample out = s;
    const double ct = std::cos(radians), st = std::sin(radians);
    const double cx = (s.w - 1) / 2.0, cy = (s.h - 1) / 2.0;
    for (int64_t y = 0; y < s.h; ++y)
        for (int64_t x = 0; x < s.w; ++x) {
            // inverse mapping: rotate destination back into the source frame
            double dx = x - cx, dy = y - cy;
            double sx = cx + ct * dx + st * dy;
            double sy = cy - st * dx + ct * dy;
            out.image[y * s.w + x] = bilinear(s.image, s.h, s.w, sy, sx);
            out.mask[y * s.w + x] = nearest(s.mask, s.h, s.w, sy, sx);
        }
    return out;
}

Sample augment(const Sample& s, double p, Rng& rng) {
    if (!rng.bernoulli(p)) return s;
    Sample out = rng.bernoulli(0.5) ? flip_horizontal(s) : flip_vertical(s);
    int dx = static_cast<int>(rng.uniform_int(17)) - 8;
    int dy = static_cast<int>(rng.uniform_int(17)) - 8;
    out = translate(out, dx, dy);
    double deg15 = 15.0 * std::numbers::pi / 180.0;
    return rotate(out, rng.uniform(-deg15, deg15));
}

}  // namespace etta
