#pragma once

// Single-plane image utilities shared by the phantom renderer, augmentation
// and rater perturbation. Planes are rank-2 tensors [H, W].

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "filmseg/errors.hpp"
#include "filmseg/tensor.hpp"

namespace filmseg {

using Plane = Tensor<float>;

inline Plane make_plane(std::size_t h, std::size_t w, float fill = 0.0f) { return Plane(Shape{h, w}, fill); }

// Normalized Gaussian taps truncated at 3 sigma.
inline std::vector<double> gaussian_taps(double sigma) {
    if (sigma <= 0) return {1.0};
    const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * r + 1);
    double s = 0;
    for (int i = -r; i <= r; ++i) s += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (double& v : k) v /= s;
    return k;
}

// Separable Gaussian blur with replicated borders, accumulated in double.
inline Plane gaussian_blur(const Plane& in, double sigma) {
    if (sigma <= 0) return in;
    const std::size_t H = in.dim(0), W = in.dim(1);
    const auto k = gaussian_taps(sigma);
    const long r = static_cast<long>(k.size() / 2);
    const auto clampi = [](long v, std::size_t n) { return static_cast<std::size_t>(std::clamp(v, 0L, long(n) - 1)); };
    std::vector<double> tmp(H * W);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            double acc = 0;
            for (long i = -r; i <= r; ++i) acc += k[i + r] * in[y * W + clampi(long(x) + i, W)];
            tmp[y * W + x] = acc;
        }
    Plane out(in.shape());
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            double acc = 0;
            for (long i = -r; i <= r; ++i) acc += k[i + r] * tmp[clampi(long(y) + i, H) * W + x];
            out[y * W + x] = static_cast<float>(acc);
        }
    return out;
}

// Bilinear lookup at (y, x) in pixel-center coordinates; zero outside.
inline float sample_bilinear(const Plane& p, double y, double x) {
    const long H = static_cast<long>(p.dim(0)), W = static_cast<long>(p.dim(1));
    const double fy = std::floor(y), fx = std::floor(x);
    const long y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
    const double ty = y - fy, tx = x - fx;
    const auto at = [&](long yy, long xx) -> double {
        return (yy < 0 || xx < 0 || yy >= H || xx >= W) ? 0.0 : p[static_cast<std::size_t>(yy * W + xx)];
    };
    const double top = (1 - tx) * at(y0, x0) + tx * at(y0, x0 + 1);
    const double bot = (1 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1);
    return static_cast<float>((1 - ty) * top + ty * bot);
}

inline float sample_nearest(const Plane& p, double y, double x) {
    const long H = static_cast<long>(p.dim(0)), W = static_cast<long>(p.dim(1));
    const long yy = std::lround(y), xx = std::lround(x);
    return (yy < 0 || xx < 0 || yy >= H || xx >= W) ? 0.0f : p[static_cast<std::size_t>(yy * W + xx)];
}

// Binary dilation (or erosion) by a disk of integer radius. Pixels outside
// the plane count as background for both operations.
inline Plane morph_disk(const Plane& mask, int radius, bool dilate) {
    if (radius <= 0) return mask;
    const long H = static_cast<long>(mask.dim(0)), W = static_cast<long>(mask.dim(1));
    std::vector<std::pair<long, long>> disk;
    for (long dy = -radius; dy <= radius; ++dy)
        for (long dx = -radius; dx <= radius; ++dx)
            if (dy * dy + dx * dx <= long(radius) * radius) disk.emplace_back(dy, dx);
    Plane out(mask.shape());
    for (long y = 0; y < H; ++y)
        for (long x = 0; x < W; ++x) {
            bool hit = !dilate;
            for (auto [dy, dx] : disk) {
                const long yy = y + dy, xx = x + dx;
                const bool on = yy >= 0 && xx >= 0 && yy < H && xx < W && mask[yy * W + xx] != 0.0f;
                if (dilate && on) {
                    hit = true;
                    break;
                }
                if (!dilate && !on) {
                    hit = false;
                    break;
                }
            }
            out[y * W + x] = hit ? 1.0f : 0.0f;
        }
    return out;
}

// Centroid (y, x) of the non-zero pixels; ValidationError when there are none.
inline std::pair<double, double> centroid(const Plane& mask) {
    const std::size_t W = mask.dim(1);
    double sy = 0, sx = 0, n = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i] == 0.0f) continue;
        sy += static_cast<double>(i / W);
        sx += static_cast<double>(i % W);
        n += 1;
    }
    if (n == 0) throw ValidationError("centroid of an empty mask");
    return {sy / n, sx / n};
}

inline std::size_t count_nonzero(std::span<const float> v) {
    return static_cast<std::size_t>(std::count_if(v.begin(), v.end(), [](float x) { return x != 0.0f; }));
}

} // namespace filmseg
