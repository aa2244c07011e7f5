#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "grow/tensor.hpp"

namespace grow {

// Channel-0 frames of the first sample, laid out left to right as one P5
// strip. Pixel values are min/max normalized over the whole strip.
template <typename S>
void write_pgm_strip(const Tensor<S>& latent, const std::string& path) {
    if (latent.rank() != 5) fail(ErrorKind::shape, "pgm strip expects a (B,C,T,H,W) latent");
    int64_t c = latent.size(1), t = latent.size(2), h = latent.size(3), w = latent.size(4);
    (void)c;
    const S* plane = latent.data();  // sample 0, channel 0
    double lo = double(plane[0]), hi = double(plane[0]);
    for (int64_t i = 0; i < t * h * w; ++i) {
        lo = std::min(lo, double(plane[i]));
        hi = std::max(hi, double(plane[i]));
    }
    double range = hi - lo;
    std::string pixels(size_t(h * t * w), '\0');
    for (int64_t f = 0; f < t; ++f)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
                double v = double(plane[(f * h + y) * w + x]);
                int g = range > 1e-12 ? int(std::lround((v - lo) / range * 255.0)) : 0;
                pixels[size_t(y * (t * w) + f * w + x)] = char(std::clamp(g, 0, 255));
            }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::io, "cannot open '" + path + "' for writing");
    out << "P5\n" << t * w << " " << h << "\n255\n";
    out.write(pixels.data(), std::streamsize(pixels.size()));
    if (!out) fail(ErrorKind::io, "short write to '" + path + "'");
}

}  // namespace grow
