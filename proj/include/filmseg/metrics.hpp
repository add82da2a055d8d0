#pragma once

// Evaluation reports and calibration of the simulated rater disagreement.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "filmseg/dataset_io.hpp"
#include "filmseg/errors.hpp"
#include "filmseg/optim.hpp"
#include "filmseg/synth.hpp"

namespace filmseg {

struct ContrastStats {
    std::size_t count = 0;
    double mean = 0;
    double std = 0; // sample standard deviation; 0 for a single sample
};

struct SampleScore {
    std::string id;
    std::string contrast;
    double dice = 0;
};

struct EvalReport {
    std::map<std::string, ContrastStats> per_contrast;
    std::vector<SampleScore> samples; // sorted by id
    double overall_mean = 0;
    std::string fingerprint;
    std::uint64_t seed = 0;

    std::size_t total() const { return samples.size(); }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["fingerprint"] = fingerprint;
        j["seed"] = seed;
        j["samples"] = samples.size();
        j["overall_mean_dice"] = overall_mean;
        auto& pc = j["per_contrast"];
        pc = nlohmann::ordered_json::object();
        for (const auto& [c, s] : per_contrast) pc[c] = {{"count", s.count}, {"mean_dice", s.mean}, {"std_dice", s.std}};
        return j;
    }

    std::string to_csv() const {
        std::ostringstream out;
        out.precision(17);
        out << "id,contrast,dice\n";
        for (const auto& s : samples) out << s.id << ',' << s.contrast << ',' << s.dice << '\n';
        return out.str();
    }
};

// Probability map [1, H, W] for one sample.
using Predictor = std::function<Tensor<float>(const Sample&)>;

// Aggregates are computed over samples sorted by id, so any reordering of
// the input yields an identical report.
inline EvalReport evaluate(const Predictor& predict, const Dataset& ds, const Vocabulary& vocabulary,
                           double threshold = 0.5) {
    require_vocabulary(ds, vocabulary, "evaluate");
    if (ds.samples.empty()) throw UsageError("evaluate: dataset is empty");
    EvalReport r;
    for (const auto& s : ds.samples) {
        const Tensor<float> prob = predict(s);
        require_shape(prob.shape(), s.mask.shape(), "prediction");
        r.samples.push_back({s.id, s.contrast, dice_score(binarize(prob, threshold), s.mask)});
    }
    std::sort(r.samples.begin(), r.samples.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    std::map<std::string, std::vector<double>> by;
    double total = 0;
    for (const auto& s : r.samples) {
        by[s.contrast].push_back(s.dice);
        total += s.dice;
    }
    r.overall_mean = total / static_cast<double>(r.samples.size());
    for (const auto& [c, v] : by) {
        ContrastStats st;
        st.count = v.size();
        double sum = 0;
        for (double d : v) sum += d;
        st.mean = sum / static_cast<double>(v.size());
        if (v.size() > 1) {
            double ss = 0;
            for (double d : v) ss += (d - st.mean) * (d - st.mean);
            st.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
        }
        r.per_contrast[c] = st;
    }
    return r;
}

struct InterraterEstimate {
    double mean = 0;
    double std_error = 0;
    std::size_t masks = 0;
    std::size_t draws = 0;
};

// Mean pairwise Dice among `draws` simulated raters per mask, averaged over
// masks. The standard error is a delete-one-rater jackknife within each mask,
// combined across masks; it accounts for the correlation between pairs that
// share a rater.
inline InterraterEstimate estimate_interrater_dice(const std::vector<Plane>& masks, const RaterPerturbConfig& cfg,
                                                   std::size_t draws, std::uint64_t seed) {
    if (masks.empty()) throw UsageError("estimate_interrater_dice: no masks");
    if (draws < 2) throw UsageError("estimate_interrater_dice: need at least 2 draws per mask");
    cfg.validate();
    const std::size_t D = draws;
    double grand = 0, var = 0;
    std::vector<double> per_mask;
    std::vector<Plane> raters(D);
    std::vector<double> pair(D * D);
    for (std::size_t m = 0; m < masks.size(); ++m) {
        for (std::size_t d = 0; d < D; ++d) {
            CounterRng rng(seed, Stream::RaterDraw, (std::uint64_t{m} << 32) | d);
            raters[d] = perturb_ground_truth(masks[m], rng, cfg);
        }
        double sum = 0;
        for (std::size_t i = 0; i < D; ++i)
            for (std::size_t j = i + 1; j < D; ++j) sum += pair[i * D + j] = pair[j * D + i] = dice_score(raters[i], raters[j]);
        const double pairs = static_cast<double>(D * (D - 1) / 2);
        grand += sum / pairs;
        if (D > 2) {
            std::vector<double> loo(D);
            double loo_mean = 0;
            for (std::size_t i = 0; i < D; ++i) {
                double s = sum;
                for (std::size_t j = 0; j < D; ++j)
                    if (j != i) s -= pair[i * D + j];
                loo[i] = s / (pairs - static_cast<double>(D - 1));
                loo_mean += loo[i] / static_cast<double>(D);
            }
            double ss = 0;
            for (double v : loo) ss += (v - loo_mean) * (v - loo_mean);
            var += ss * static_cast<double>(D - 1) / static_cast<double>(D);
        }
        per_mask.push_back(sum / pairs);
    }
    const double M = static_cast<double>(masks.size());
    if (D == 2 && masks.size() > 1) {
        // One pair per mask leaves nothing to jackknife; the spread of the
        // per-mask values over-covers the rater noise instead.
        double ss = 0;
        for (double v : per_mask) ss += (v - grand / M) * (v - grand / M);
        return {grand / M, std::sqrt(ss / (M - 1) / M), masks.size(), D};
    }
    return {grand / M, std::sqrt(var) / M, masks.size(), D};
}

struct CalibrationResult {
    double strength = 0;
    InterraterEstimate estimate;
    std::size_t iterations = 0;
    bool converged = false;
};

// Bisection on the rater strength until the estimate is within `tol` of the
// target. Every evaluation reuses the same seed, so estimates at different
// strengths share their underlying random draws.
inline CalibrationResult calibrate_rater_strength(double target, const std::vector<Plane>& masks,
                                                  RaterPerturbConfig cfg, std::size_t draws, std::uint64_t seed,
                                                  double tol = 0.01, std::size_t max_iter = 20) {
    if (!(target > 0.0 && target <= 1.0)) throw UsageError("calibration target must lie in (0, 1]");
    const auto at = [&](double s) {
        cfg.strength = s;
        return estimate_interrater_dice(masks, cfg, draws, seed);
    };
    // Both endpoints are checked before anything is accepted, so an
    // unbracketed target fails even when s = 0 is already close to it.
    const auto lo_est = at(0.0);
    const auto hi_est = at(1.0);
    if (hi_est.mean >= target) {
        throw CalibrationError("target " + std::to_string(target) + " is not bracketed: full-strength raters still score " +
                               std::to_string(hi_est.mean) + "; increase the maximum morphological radius");
    }
    if (std::abs(lo_est.mean - target) <= tol) return {0.0, lo_est, 0, true};
    double lo = 0.0, hi = 1.0;
    CalibrationResult best{1.0, hi_est, 0, false};
    for (std::size_t it = 1; it <= max_iter; ++it) {
        const double mid = 0.5 * (lo + hi);
        const auto e = at(mid);
        if (std::abs(e.mean - target) < std::abs(best.estimate.mean - target)) best = {mid, e, it, false};
        best.iterations = it;
        if (std::abs(e.mean - target) <= tol) {
            best.converged = true;
            return best;
        }
        (e.mean > target ? lo : hi) = mid;
    }
    return best;
}

// Non-empty ground-truth masks of a dataset as planes.
inline std::vector<Plane> lesion_masks(const std::vector<Sample>& samples) {
    std::vector<Plane> out;
    for (const auto& s : samples) {
        if (count_nonzero(s.mask.values()) == 0) continue;
        out.push_back(s.mask.reshaped(Shape{s.mask.dim(1), s.mask.dim(2)}));
    }
    return out;
}

} // namespace filmseg
