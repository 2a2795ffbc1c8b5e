#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "etta/rng.hpp"

namespace etta {

// Intensity rendering recipe for one acquisition domain. The geometry is
// drawn from a domain-independent stream, so two specs with the same seed
// produce identical masks and differ only in the image (covariate shift).
struct DomainSpec {
    std::string name;
    std::array<float, 3> means{};  // per-class intensity
    float noise_sigma = 0.0f;
    float gamma = 1.0f;
    float bias_amplitude = 0.0f;
    float bias_scale = 2.0f;

    static DomainSpec source();
    static DomainSpec target();
    static DomainSpec by_name(const std::string& name);
};

struct Sample {
    std::vector<float> image;   // H*W, values in [0,1]
    std::vector<uint8_t> mask;  // H*W, classes {0 background, 1 disk, 2 ring}
    int64_t h = 0, w = 0;
    std::string domain;
    uint64_t seed = 0;
};

// Rotated-ellipse disk (class 1) wrapped by a touching ring (class 2) on
// background, rendered per the DomainSpec. Deterministic in all arguments.
Sample generate_sample(uint64_t seed, int64_t h, int64_t w, const DomainSpec& domain);

// Geometric helpers, image bilinear / mask nearest, background fill.
Sample flip_horizontal(const Sample& s);
Sample flip_vertical(const Sample& s);
Sample translate(const Sample& s, int dx, int dy);
Sample rotate(const Sample& s, double radians);

// With probability p: one random flip, then an integer translation of up to
// 8 px per axis, then a rotation within +-15 degrees.
Sample augment(const Sample& s, double p, Rng& rng);

}  // namespace etta
