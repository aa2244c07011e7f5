#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "grow/conditioning.hpp"
#include "grow/diffusion.hpp"
#include "grow/dit.hpp"

namespace grow {

// Procedural "moving blob" latents: a Gaussian bump over (H, W) translating
// across T frames on a torus. Channels encode (intensity, dx, dy, class);
// channels beyond 4 are zero.

struct BlobClass {
    const char* name;
    double sigma;
    double amplitude;
    double speed;  // cells per frame; 0 freezes the blob
};

inline const std::array<BlobClass, 4>& blob_classes() {
    static const std::array<BlobClass, 4> classes{{
        {"square", 1.0, 1.5, 1.0},
        {"circle", 1.8, 1.0, 1.0},
        {"spark", 0.7, 2.0, 2.0},
        {"anchor", 1.4, 1.2, 0.0},
    }};
    return classes;
}

struct BlobDirection {
    const char* name;
    int dx, dy;
};

inline const std::array<BlobDirection, 8>& blob_directions() {
    static const std::array<BlobDirection, 8> dirs{{
        {"right", 1, 0},
        {"down-right", 1, 1},
        {"down", 0, 1},
        {"down-left", -1, 1},
        {"left", -1, 0},
        {"up-left", -1, -1},
        {"up", 0, -1},
        {"up-right", 1, -1},
    }};
    return dirs;
}

struct SyntheticSample {
    int64_t class_id = 0;
    int64_t motion_id = 0;
    std::string p;
    std::string p_l;
};

inline std::string blob_short_prompt(int64_t class_id, int64_t motion_id) {
    const BlobClass& c = blob_classes()[size_t(class_id)];
    if (c.speed == 0.0) return std::string(c.name) + " holding still";
    return std::string(c.name) + " moving " + blob_directions()[size_t(motion_id)].name;
}

inline std::string blob_long_prompt(int64_t class_id, int64_t motion_id, int64_t frames) {
    const BlobClass& c = blob_classes()[size_t(class_id)];
    const BlobDirection& d = blob_directions()[size_t(motion_id)];
    std::string motion = c.speed == 0.0
                             ? "It stays fixed in place for the whole clip"
                             : "It drifts steadily " + std::string(d.name) + " and wraps around the borders";
    return "The video shows a bright " + std::string(c.name) + " shaped as a gaussian bump of width " +
           std::to_string(c.sigma).substr(0, 3) + " against a dark background. " + motion + " across all " +
           std::to_string(frames) + " frames of the scene.";
}

// Latent for one sample; deterministic function of (class, motion, start).
template <typename S>
std::vector<S> blob_latent(const ModelConfig& cfg, int64_t class_id, int64_t motion_id, double start_h,
                           double start_w) {
    const BlobClass& cls = blob_classes()[size_t(class_id)];
    const BlobDirection& dir = blob_directions()[size_t(motion_id)];
    int64_t c = cfg.channels, t = cfg.frames, h = cfg.height, w = cfg.width;
    std::vector<S> out(size_t(c * t * h * w), S(0));
    double dx = cls.speed * dir.dx, dy = cls.speed * dir.dy;
    double class_code = -1.0 + 2.0 * double(class_id + 1) / double(blob_classes().size());
    auto wrap = [](double v, double n) {
        double r = std::fmod(v, n);
        return r < 0 ? r + n : r;
    };
    for (int64_t f = 0; f < t; ++f) {
        double ch = wrap(start_h + dy * double(f), double(h));
        double cw = wrap(start_w + dx * double(f), double(w));
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                // nearest torus displacement
                double ddy = std::abs(double(y) - ch);
                ddy = std::min(ddy, double(h) - ddy);
                double ddx = std::abs(double(x) - cw);
                ddx = std::min(ddx, double(w) - ddx);
                double g = cls.amplitude * std::exp(-(ddx * ddx + ddy * ddy) / (2.0 * cls.sigma * cls.sigma));
                int64_t base = (f * h + y) * w + x;
                out[size_t(0 * t * h * w + base)] = S(g);
                if (c > 1) out[size_t(1 * t * h * w + base)] = S(dx * 0.5);
                if (c > 2) out[size_t(2 * t * h * w + base)] = S(dy * 0.5);
                if (c > 3) out[size_t(3 * t * h * w + base)] = S(class_code);
            }
        }
    }
    return out;
}

template <typename S>
struct SyntheticDataset {
    ModelConfig cfg;
    std::vector<SyntheticSample> meta;
    std::vector<TrainExample<S>> examples;

    int64_t size() const { return int64_t(examples.size()); }
};

template <typename S>
SyntheticDataset<S> gen_synthetic_dataset(int64_t n, const ModelConfig& cfg, uint64_t seed,
                                          const EncoderConfig& enc) {
    if (n < 1) fail(ErrorKind::usage, "gen_synthetic_dataset: n must be >= 1");
    SyntheticDataset<S> ds;
    ds.cfg = cfg;
    Rng rng(seed, 0xDA7Aull);
    for (int64_t i = 0; i < n; ++i) {
        SyntheticSample s;
        s.class_id = int64_t(rng.uniform_int(blob_classes().size()));
        s.motion_id = int64_t(rng.uniform_int(blob_directions().size()));
        double start_h = rng.uniform() * double(cfg.height);
        double start_w = rng.uniform() * double(cfg.width);
        s.p = blob_short_prompt(s.class_id, s.motion_id);
        s.p_l = blob_long_prompt(s.class_id, s.motion_id, cfg.frames);
        TrainExample<S> ex;
        ex.latent = blob_latent<S>(cfg, s.class_id, s.motion_id, start_h, start_w);
        ex.prompts = make_prompt_set(s.p, s.p_l, enc.tmpl, enc.separator);
        ds.meta.push_back(std::move(s));
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

}  // namespace grow
