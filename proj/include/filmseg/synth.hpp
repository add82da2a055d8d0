#pragma once

// Synthetic two-contrast spinal-cord phantoms, ROI cropping, augmentation,
// simulated rater disagreement and phantom-level splitting.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "filmseg/errors.hpp"
#include "filmseg/film.hpp"
#include "filmseg/image.hpp"
#include "filmseg/rng.hpp"
#include "filmseg/tensor.hpp"

namespace filmseg {

inline constexpr std::size_t kPhantomSize = 64;
inline constexpr std::size_t kCropSize = 48;
inline constexpr std::size_t kSlicesPerPhantom = 4;

enum class PhantomMode { Natural, ContrastFlip };

inline std::string mode_name(PhantomMode m) { return m == PhantomMode::Natural ? "natural" : "contrast_flip"; }

inline PhantomMode parse_mode(const std::string& s) {
    if (s == "natural") return PhantomMode::Natural;
    if (s == "contrast_flip") return PhantomMode::ContrastFlip;
    throw ConfigError("unknown phantom mode '" + s + "' (expected natural or contrast_flip)");
}

struct Sample {
    std::string id;
    Tensor<float> image; // [1, H, W], values in [0, 1]
    Tensor<float> mask;  // [1, H, W], values in {0, 1}
    std::string contrast;
    std::string phantom_id;

    friend bool operator==(const Sample&, const Sample&) = default;
};

// Rotated ellipse in pixel coordinates.
struct Ellipse {
    double cy = 0, cx = 0, a = 1, b = 1, angle = 0;

    // Squared normalized radius; <= 1 inside.
    double rho2(double y, double x) const {
        const double dy = y - cy, dx = x - cx;
        const double c = std::cos(angle), s = std::sin(angle);
        const double u = c * dx + s * dy, v = -s * dx + c * dy;
        return (u * u) / (a * a) + (v * v) / (b * b);
    }
    bool contains(double y, double x) const { return rho2(y, x) <= 1.0; }

    // Point at normalized polar coordinates (r, t) inside the ellipse.
    std::pair<double, double> point(double r, double t) const {
        const double u = r * a * std::cos(t), v = r * b * std::sin(t);
        const double c = std::cos(angle), s = std::sin(angle);
        return {cy + s * u + c * v, cx + c * u - s * v};
    }
};

struct PhantomSpec {
    std::uint64_t seed = 0;
    std::string id;
    std::size_t contrast_index = 0;
    PhantomMode mode = PhantomMode::Natural;
    Ellipse cord;
    double csf_scale = 1.45;
    std::vector<Ellipse> lesions;
    std::vector<Ellipse> distractors; // contrast_flip only: opposite-polarity decoys
    double noise_sigma = 0.03;
};

// Tissue intensities and texture grain of one contrast.
struct TissueProfile {
    float background, csf, cord, lesion, distractor;
    double grain_sigma;
};

inline TissueProfile tissue_profile(PhantomMode mode, std::size_t contrast_index) {
    if (mode == PhantomMode::Natural) {
        // Lesions are brighter than cord in both contrasts; the contrasts
        // differ in base levels and texture.
        if (contrast_index % 2 == 0) return {0.20f, 0.80f, 0.40f, 0.70f, 0.0f, 1.0};
        return {0.30f, 0.65f, 0.50f, 0.78f, 0.0f, 2.0};
    }
    // Identical intensity statistics in every contrast: the bright and dark
    // blobs are both present, and only the label says which one is lesion.
    if (contrast_index % 2 == 0) return {0.25f, 0.70f, 0.50f, 0.80f, 0.20f, 1.5};
    return {0.25f, 0.70f, 0.50f, 0.20f, 0.80f, 1.5};
}

namespace detail {

inline std::size_t draw_lesion_count(CounterRng& rng) {
    const double u = rng.uniform();
    if (u < 0.1) return 0;
    if (u < 0.5) return 1;
    if (u < 0.8) return 2;
    return 3;
}

inline Ellipse draw_blob(const Ellipse& cord, CounterRng& rng) {
    const double r = 0.6 * std::sqrt(rng.uniform());
    const double t = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const auto [y, x] = cord.point(r, t);
    return Ellipse{y, x, rng.uniform(2.0, 4.5), rng.uniform(2.0, 4.5), rng.uniform(0.0, std::numbers::pi)};
}

inline bool overlaps(const Ellipse& e, const std::vector<Ellipse>& others) {
    for (const auto& o : others) {
        const double d = std::hypot(e.cy - o.cy, e.cx - o.cx);
        if (d < std::max(e.a, e.b) + std::max(o.a, o.b) + 1.0) return true;
    }
    return false;
}

} // namespace detail

// Draws the geometry of slice `slice` of phantom `phantom`. The cord shape is
// shared by all slices of a phantom (up to a one-pixel jitter); lesions are
// drawn per slice.
inline PhantomSpec draw_phantom_spec(std::uint64_t seed, std::size_t phantom, std::size_t slice,
                                     std::size_t contrast_index, PhantomMode mode) {
    const std::string pid = "p" + std::to_string(phantom);
    CounterRng prng(seed, Stream::Phantom, pid);
    PhantomSpec s;
    s.seed = seed;
    s.id = pid + "_s" + std::to_string(slice);
    s.contrast_index = contrast_index;
    s.mode = mode;
    s.cord.cy = 32.0 + prng.uniform(-5.0, 5.0);
    s.cord.cx = 32.0 + prng.uniform(-5.0, 5.0);
    s.cord.a = prng.uniform(10.0, 14.0);
    s.cord.b = prng.uniform(7.0, 10.0);
    s.cord.angle = prng.uniform(-0.5, 0.5);

    CounterRng rng(seed, Stream::Phantom, s.id);
    s.cord.cy += rng.uniform(-1.0, 1.0);
    s.cord.cx += rng.uniform(-1.0, 1.0);
    s.noise_sigma = rng.uniform(0.02, 0.05);
    const std::size_t n = detail::draw_lesion_count(rng);
    for (std::size_t i = 0; i < n; ++i) s.lesions.push_back(detail::draw_blob(s.cord, rng));
    if (mode == PhantomMode::ContrastFlip) {
        const std::size_t m = detail::draw_lesion_count(rng);
        for (std::size_t i = 0; i < m; ++i) {
            // Decoys keep clear of lesions so every blob has one polarity.
            for (int attempt = 0; attempt < 20; ++attempt) {
                const Ellipse e = detail::draw_blob(s.cord, rng);
                if (!detail::overlaps(e, s.lesions) && !detail::overlaps(e, s.distractors)) {
                    s.distractors.push_back(e);
                    break;
                }
            }
        }
    }
    return s;
}

struct Phantom {
    Plane image;     // [64, 64]
    Plane mask;      // lesions intersected with cord
    Plane cord_mask; // cord region
};

inline Phantom generate_phantom(const PhantomSpec& spec) {
    constexpr std::size_t N = kPhantomSize;
    const TissueProfile tp = tissue_profile(spec.mode, spec.contrast_index);
    Ellipse csf = spec.cord;
    csf.a *= spec.csf_scale;
    csf.b *= spec.csf_scale;

    Phantom ph{make_plane(N, N), make_plane(N, N), make_plane(N, N)};
    Plane clean = make_plane(N, N, tp.background);
    for (std::size_t y = 0; y < N; ++y)
        for (std::size_t x = 0; x < N; ++x) {
            const double py = static_cast<double>(y), px = static_cast<double>(x);
            const std::size_t i = y * N + x;
            if (csf.contains(py, px)) clean[i] = tp.csf;
            if (!spec.cord.contains(py, px)) continue;
            ph.cord_mask[i] = 1.0f;
            clean[i] = tp.cord;
            for (const auto& d : spec.distractors)
                if (d.contains(py, px)) clean[i] = tp.distractor;
            for (const auto& l : spec.lesions)
                if (l.contains(py, px)) {
                    clean[i] = tp.lesion;
                    ph.mask[i] = 1.0f;
                }
        }

    // Partial-volume blur, then low-frequency texture and white noise.
    CounterRng rng(spec.seed, Stream::Phantom, spec.id + "/noise");
    Plane grain = make_plane(N, N);
    for (auto& v : grain.values()) v = static_cast<float>(rng.normal());
    grain = gaussian_blur(grain, tp.grain_sigma);
    double rms = 0;
    for (float v : grain.values()) rms += double(v) * v;
    rms = std::sqrt(rms / static_cast<double>(grain.size()));
    const Plane blurred = gaussian_blur(clean, 0.6);
    for (std::size_t i = 0; i < N * N; ++i) {
        const double v = blurred[i] + 0.03 * grain[i] / rms + spec.noise_sigma * rng.normal();
        ph.image[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
    return ph;
}

// Fixed-size window centered on the rounded cord centroid, zero padded.
inline std::tuple<Plane, Plane> crop_roi(const Plane& image, const Plane& mask, const Plane& cord_mask,
                                         std::size_t size = kCropSize) {
    require_rank(image.shape(), 2, "crop_roi image");
    require_shape(mask.shape(), image.shape(), "crop_roi mask");
    require_shape(cord_mask.shape(), image.shape(), "crop_roi cord mask");
    if (count_nonzero(cord_mask.values()) == 0) throw ValidationError("crop_roi: cord mask is empty");
    const auto [cy, cx] = centroid(cord_mask);
    const long top = std::lround(cy) - static_cast<long>(size / 2);
    const long left = std::lround(cx) - static_cast<long>(size / 2);
    const long H = static_cast<long>(image.dim(0)), W = static_cast<long>(image.dim(1));
    Plane ci = make_plane(size, size), cm = make_plane(size, size);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const long sy = top + static_cast<long>(y), sx = left + static_cast<long>(x);
            if (sy < 0 || sx < 0 || sy >= H || sx >= W) continue;
            ci[y * size + x] = image[sy * W + sx];
            cm[y * size + x] = mask[sy * W + sx];
        }
    return {ci, cm};
}

// Renders, crops and labels one slice.
inline Sample make_sample(const PhantomSpec& spec, const Vocabulary& vocab) {
    const Phantom ph = generate_phantom(spec);
    auto [img, msk] = crop_roi(ph.image, ph.mask, ph.cord_mask);
    const Shape s{1, kCropSize, kCropSize};
    return Sample{spec.id, img.reshaped(s), msk.reshaped(s), vocab.names().at(spec.contrast_index % vocab.size()),
                  spec.id.substr(0, spec.id.find('_'))};
}

// `phantoms` subjects with four slices each; slice k has contrast k mod V.
// When `contrasts` is given, only slices of those labels are kept.
inline std::vector<Sample> generate_dataset(PhantomMode mode, std::size_t phantoms, std::uint64_t seed,
                                            const Vocabulary& vocab,
                                            const std::optional<std::vector<std::string>>& contrasts = std::nullopt) {
    if (contrasts) {
        for (const auto& c : *contrasts) vocab.index_of(c);
    }
    std::vector<Sample> out;
    for (std::size_t p = 0; p < phantoms; ++p)
        for (std::size_t k = 0; k < kSlicesPerPhantom; ++k) {
            const std::size_t ci = k % vocab.size();
            if (contrasts && std::find(contrasts->begin(), contrasts->end(), vocab.names()[ci]) == contrasts->end())
                continue;
            out.push_back(make_sample(draw_phantom_spec(seed, p, k, ci, mode), vocab));
        }
    return out;
}

struct AugmentConfig {
    double rotation_deg = 10.0;
    double translation_px = 3.0;
    double scale_min = 0.9;
    double scale_max = 1.1;
    double elastic_alpha = 1.5; // RMS displacement, px
    double elastic_sigma = 3.0; // smoothing width, px
    double p_affine = 0.8;
    double p_elastic = 0.5;

    void validate() const {
        if (rotation_deg < 0 || translation_px < 0 || elastic_alpha < 0 || elastic_sigma < 0 || scale_min <= 0 ||
            scale_max < scale_min || p_affine < 0 || p_affine > 1 || p_elastic < 0 || p_elastic > 1) {
            throw ConfigError("augmentation config has negative amplitudes or invalid ranges");
        }
    }

    bool is_identity() const {
        return rotation_deg == 0 && translation_px == 0 && scale_min == 1 && scale_max == 1 && elastic_alpha == 0;
    }

    static AugmentConfig none() { return {0, 0, 1, 1, 0, 3.0, 0, 0}; }
};

// One random affine draw plus one smoothed displacement field, applied to
// image (bilinear) and mask (nearest). Deterministic in (seed, sample.id).
inline Sample augment_sample(const Sample& sample, std::uint64_t seed, const AugmentConfig& cfg) {
    cfg.validate();
    if (cfg.is_identity()) return sample;
    CounterRng rng(seed, Stream::Augment, sample.id);
    const std::size_t H = sample.image.dim(1), W = sample.image.dim(2);

    // Draws are made unconditionally so the stream layout is fixed.
    const bool do_affine = rng.uniform() < cfg.p_affine;
    const double theta = rng.uniform(-1.0, 1.0) * cfg.rotation_deg * std::numbers::pi / 180.0;
    const double scale = rng.uniform(cfg.scale_min, cfg.scale_max);
    const double ty = rng.uniform(-1.0, 1.0) * cfg.translation_px;
    const double tx = rng.uniform(-1.0, 1.0) * cfg.translation_px;
    const bool do_elastic = rng.uniform() < cfg.p_elastic && cfg.elastic_alpha > 0;

    Plane dy = make_plane(H, W), dx = make_plane(H, W);
    if (do_elastic) {
        for (auto& v : dy.values()) v = static_cast<float>(rng.normal());
        for (auto& v : dx.values()) v = static_cast<float>(rng.normal());
        dy = gaussian_blur(dy, cfg.elastic_sigma);
        dx = gaussian_blur(dx, cfg.elastic_sigma);
        double ms = 0;
        for (std::size_t i = 0; i < H * W; ++i) ms += double(dy[i]) * dy[i] + double(dx[i]) * dx[i];
        const double k = cfg.elastic_alpha / std::sqrt(ms / static_cast<double>(H * W) + 1e-300);
        for (std::size_t i = 0; i < H * W; ++i) {
            dy[i] = static_cast<float>(dy[i] * k);
            dx[i] = static_cast<float>(dx[i] * k);
        }
    }

    const double c = std::cos(theta), s = std::sin(theta);
    const double oy = (static_cast<double>(H) - 1) / 2, ox = (static_cast<double>(W) - 1) / 2;
    const Plane img = sample.image.reshaped(Shape{H, W}), msk = sample.mask.reshaped(Shape{H, W});
    Plane out_img = make_plane(H, W), out_msk = make_plane(H, W);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const std::size_t i = y * W + x;
            double py = static_cast<double>(y) + dy[i], px = static_cast<double>(x) + dx[i];
            if (do_affine) {
                // Inverse of: rotate and scale about the center, then translate.
                const double ry = py - oy - ty, rx = px - ox - tx;
                py = oy + (c * ry - s * rx) / scale;
                px = ox + (s * ry + c * rx) / scale;
            }
            out_img[i] = std::clamp(sample_bilinear(img, py, px), 0.0f, 1.0f);
            out_msk[i] = sample_nearest(msk, py, px);
        }
    Sample out = sample;
    out.image = out_img.reshaped(sample.image.shape());
    out.mask = out_msk.reshaped(sample.mask.shape());
    return out;
}

struct RaterPerturbConfig {
    double strength = 0.0;  // s in [0, 1]
    int max_radius = 3;     // disk radius at s = 1
    double max_shift = 2.0; // px at s = 1
    double max_rotation_deg = 10.0;

    void validate() const {
        if (strength < 0 || strength > 1) throw ConfigError("rater strength must lie in [0, 1]");
        if (max_radius < 0 || max_shift < 0 || max_rotation_deg < 0) {
            throw ConfigError("rater perturbation amplitudes must be non-negative");
        }
    }
};

// One simulated rater: dilate or erode by a disk of radius ceil(u s R), then
// a small rigid jitter about the mask centroid. The uniforms are drawn
// before the strength is applied, so calls that share an rng state but
// differ in strength see the same underlying randomness.
inline Plane perturb_ground_truth(const Plane& mask, CounterRng& rng, const RaterPerturbConfig& cfg) {
    cfg.validate();
    const double u_radius = rng.uniform();
    const bool dilate = rng.uniform() < 0.5;
    const double u_ty = rng.uniform(-1.0, 1.0), u_tx = rng.uniform(-1.0, 1.0), u_rot = rng.uniform(-1.0, 1.0);
    const double s = cfg.strength;
    if (s == 0.0) return mask;

    const int radius = static_cast<int>(std::ceil(u_radius * s * cfg.max_radius));
    const Plane m = morph_disk(mask, radius, dilate);
    if (count_nonzero(m.values()) == 0) return m;

    const auto [cy, cx] = centroid(m);
    const double ty = u_ty * s * cfg.max_shift, tx = u_tx * s * cfg.max_shift;
    const double theta = u_rot * s * cfg.max_rotation_deg * std::numbers::pi / 180.0;
    const double c = std::cos(theta), sn = std::sin(theta);
    const std::size_t H = m.dim(0), W = m.dim(1);
    Plane out = make_plane(H, W);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const double ry = static_cast<double>(y) - cy - ty, rx = static_cast<double>(x) - cx - tx;
            out[y * W + x] = sample_nearest(m, cy + c * ry - sn * rx, cx + sn * ry + c * rx);
        }
    return out;
}

inline Plane perturb_ground_truth(const Plane& mask, std::uint64_t seed, const RaterPerturbConfig& cfg) {
    CounterRng rng(seed, Stream::RaterPerturb, 0);
    return perturb_ground_truth(mask, rng, cfg);
}

struct Split {
    std::vector<std::string> train, val, test;
};

// Seeded 60/20/20 partition of phantom ids (floors for train and val).
inline Split split_dataset(std::vector<std::string> ids, std::uint64_t seed) {
    if (ids.size() < 5) throw UsageError("split_dataset needs at least 5 phantoms, got " + std::to_string(ids.size()));
    // Sorting first makes the partition independent of the input order.
    std::sort(ids.begin(), ids.end());
    CounterRng rng(seed, Stream::Split, 0);
    shuffle(ids, rng);
    const std::size_t n = ids.size(), ntr = n * 6 / 10, nva = n * 2 / 10;
    Split s;
    s.train.assign(ids.begin(), ids.begin() + static_cast<long>(ntr));
    s.val.assign(ids.begin() + static_cast<long>(ntr), ids.begin() + static_cast<long>(ntr + nva));
    s.test.assign(ids.begin() + static_cast<long>(ntr + nva), ids.end());
    return s;
}

inline std::vector<std::string> phantom_ids(const std::vector<Sample>& samples) {
    std::vector<std::string> ids;
    for (const auto& s : samples) ids.push_back(s.phantom_id);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    return ids;
}

inline std::vector<Sample> select_phantoms(const std::vector<Sample>& samples, const std::vector<std::string>& ids) {
    std::vector<std::string> sorted = ids;
    std::sort(sorted.begin(), sorted.end());
    std::vector<Sample> out;
    for (const auto& s : samples)
        if (std::binary_search(sorted.begin(), sorted.end(), s.phantom_id)) out.push_back(s);
    return out;
}

} // namespace filmseg
