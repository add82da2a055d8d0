#pragma once

// Loss, overlap score, Adam and the cosine learning-rate schedule.

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <string>

#include "filmseg/autodiff.hpp"
#include "filmseg/errors.hpp"
#include "filmseg/ops.hpp"
#include "filmseg/tensor.hpp"
#include "filmseg/unet.hpp"

namespace filmseg {

template <typename T>
bool is_binary(const Tensor<T>& t) {
    for (T v : t.values()) {
        if (v != T(0) && v != T(1)) return false;
    }
    return true;
}

// Hard Dice 2|A n B| / (|A| + |B|); two empty masks score 1.
template <typename T>
double dice_score(const Tensor<T>& pred_mask, const Tensor<T>& gt_mask) {
    detail::require_same(pred_mask.shape(), gt_mask.shape(), "dice_score");
    if (!is_binary(pred_mask) || !is_binary(gt_mask)) throw ValidationError("dice_score: masks must be binary");
    std::size_t a = 0, b = 0, both = 0;
    for (std::size_t i = 0; i < pred_mask.size(); ++i) {
        const bool p = pred_mask[i] != T(0), g = gt_mask[i] != T(0);
        a += p;
        b += g;
        both += p && g;
    }
    if (a + b == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

template <typename T>
Tensor<T> binarize(const Tensor<T>& prob, double threshold = 0.5) {
    Tensor<T> out(prob.shape());
    for (std::size_t i = 0; i < prob.size(); ++i) out[i] = prob[i] >= threshold ? T(1) : T(0);
    return out;
}

template <typename T>
T soft_dice_loss(const Tensor<T>& pred, const Tensor<T>& target, T eps = T(1e-5)) {
    Tape<T> tape;
    return tape.value(soft_dice_loss(tape, tape.constant(pred), tape.constant(target), eps)).item();
}

template <typename T>
struct AdamState {
    std::map<std::string, Tensor<T>> m;
    std::map<std::string, Tensor<T>> v;
    std::uint64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// One bias-corrected Adam update of every parameter named in `grads`.
template <typename T>
void adam_step(ModelParams<T>& params, const std::map<std::string, Tensor<T>>& grads, AdamState<T>& state,
               double lr) {
    for (const auto& [name, g] : grads) {
        if (!params.contains(name)) throw DimensionError("adam_step: gradient for unknown parameter '" + name + "'");
        detail::require_same(params.at(name).shape(), g.shape(), ("adam_step '" + name + "'").c_str());
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    for (const auto& [name, g] : grads) {
        auto& theta = params.at(name);
        auto [mit, m_new] = state.m.try_emplace(name, theta.shape());
        auto [vit, v_new] = state.v.try_emplace(name, theta.shape());
        auto& m = mit->second;
        auto& v = vit->second;
        detail::require_same(m.shape(), theta.shape(), "adam_step moment");
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double gi = g[i];
            const double mi = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            const double vi = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double mhat = mi / c1, vhat = vi / c2;
            theta[i] = static_cast<T>(theta[i] - lr * mhat / (std::sqrt(vhat) + state.eps));
        }
    }
}

inline double cosine_lr(std::size_t epoch, std::size_t total_epochs, double lr0, double lr_min) {
    if (total_epochs == 0 || epoch > total_epochs) {
        throw UsageError("cosine_lr: epoch " + std::to_string(epoch) + " outside [0, " +
                         std::to_string(total_epochs) + "]");
    }
    const double phase = std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(total_epochs);
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(phase));
}

} // namespace filmseg
