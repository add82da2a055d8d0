#pragma once

// Central finite-difference verification of backward rules (f64).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "filmseg/autodiff.hpp"
#include "filmseg/film.hpp"
#include "filmseg/ops.hpp"
#include "filmseg/rng.hpp"
#include "filmseg/unet.hpp"

namespace filmseg {

struct GradCheckResult {
    std::string name;
    double max_rel_error = 0;
    std::size_t checked = 0;
    std::size_t kink_crossings = 0; // coordinates whose +-h probes straddle a switch
    bool passed = false;
    double seconds = 0;
};

// |a - n| / max(1, |a| + |n|)
inline double grad_rel_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic) + std::abs(numeric));
}

// Builds a scalar loss from leaf variables on a fresh tape.
using LossBuilder = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

struct GradCheckOptions {
    double step = 1e-4;
    double tolerance = 1e-4;
    std::string fault_op; // corrupts this op's backward rule when non-empty
    double fault_scale = 1.1;
};

// Which side of every switch the pass is on: ReLU input signs and max-pool
// winners. Two passes with equal signatures lie in the same smooth piece.
template <typename T>
std::vector<std::uint32_t> kink_signature(const Tape<T>& tape) {
    std::vector<std::uint32_t> sig;
    for (std::size_t i = 0; i < tape.size(); ++i) {
        const Var v = tape.at(i);
        if (tape.op(v) == "relu") {
            for (T x : tape.value(tape.inputs(v)[0]).values()) sig.push_back(x > T(0));
        } else if (tape.op(v) == "maxpool2") {
            const auto& x = tape.value(tape.inputs(v)[0]);
            const auto& y = tape.value(v);
            const std::size_t H = x.dim(2), W = x.dim(3);
            for (std::size_t p = 0; p < x.dim(0) * x.dim(1); ++p) {
                for (std::size_t r = 0; r < H; r += 2) {
                    for (std::size_t c = 0; c < W; c += 2) {
                        const std::size_t o = p * H * W + r * W + c;
                        const T m = y[(p * (H / 2) + r / 2) * (W / 2) + c / 2];
                        const std::uint32_t k = x[o] == m ? 0 : x[o + 1] == m ? 1 : x[o + W] == m ? 2 : 3;
                        sig.push_back(k);
                    }
                }
            }
        }
    }
    return sig;
}

// Compares reverse-mode gradients of `build` against central differences
// for every element of every leaf.
inline GradCheckResult check_gradients(const std::string& name, std::vector<Tensor<double>> leaves,
                                       const LossBuilder& build, const GradCheckOptions& opt = {}) {
    const auto start = std::chrono::steady_clock::now();
    GradCheckResult res{name};

    std::vector<Tensor<double>> analytic;
    {
        Tape<double> tape;
        if (!opt.fault_op.empty()) tape.inject_fault(opt.fault_op, opt.fault_scale);
        std::vector<Var> vars;
        for (const auto& l : leaves) vars.push_back(tape.parameter(l));
        tape.backward(build(tape, vars));
        for (Var v : vars) analytic.push_back(tape.grad(v));
    }
    std::vector<std::uint32_t> base_sig;
    const auto eval = [&](bool* crossed) {
        Tape<double> tape;
        std::vector<Var> vars;
        for (const auto& l : leaves) vars.push_back(tape.constant(l));
        const double v = tape.value(build(tape, vars)).item();
        if (crossed) {
            *crossed = *crossed || kink_signature(tape) != base_sig;
        } else {
            base_sig = kink_signature(tape);
        }
        return v;
    };
    eval(nullptr);
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        for (std::size_t i = 0; i < leaves[li].size(); ++i) {
            const double orig = leaves[li][i];
            bool crossed = false;
            leaves[li][i] = orig + opt.step;
            const double up = eval(&crossed);
            leaves[li][i] = orig - opt.step;
            const double down = eval(&crossed);
            leaves[li][i] = orig;
            res.kink_crossings += crossed;
            const double numeric = (up - down) / (2 * opt.step);
            res.max_rel_error = std::max(res.max_rel_error, grad_rel_error(analytic[li][i], numeric));
            ++res.checked;
        }
    }
    res.passed = res.max_rel_error < opt.tolerance;
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return res;
}

inline Tensor<double> random_tensor(Shape shape, CounterRng& rng, double scale = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.values()) v = scale * rng.normal();
    return t;
}

inline Tensor<double> random_mask(Shape shape, CounterRng& rng, double p = 0.4) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.values()) v = rng.uniform() < p ? 1.0 : 0.0;
    return t;
}

namespace detail {

// Weighted sum so that every output element carries a distinct cotangent.
inline Var probe_loss(Tape<double>& tape, Var y, std::uint64_t seed) {
    CounterRng rng(seed, Stream::Test, 0xfeed);
    return sum(tape, mul(tape, y, tape.constant(random_tensor(tape.value(y).shape(), rng))));
}

inline Tensor<double> positive_tensor(Shape shape, CounterRng& rng) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.values()) v = rng.uniform(0.5, 2.0);
    return t;
}

inline Tensor<double> probability_tensor(Shape shape, CounterRng& rng) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.values()) v = rng.uniform(0.05, 0.95);
    return t;
}

} // namespace detail

// Gradient checks for every differentiable op plus the end-to-end U-Net,
// each op on `trials` random instances.
inline std::vector<GradCheckResult> run_gradcheck_suite(const GradCheckOptions& opt = {}, std::uint64_t seed = 7,
                                                        std::size_t trials = 5) {
    std::vector<GradCheckResult> results;
    const auto run_op = [&](const std::string& name, auto make_leaves, const LossBuilder& build) {
        GradCheckResult agg{name, 0, 0, 0, true, 0};
        for (std::size_t trial = 0; trial < trials; ++trial) {
            CounterRng rng(seed, Stream::Test, hash_string(name) + trial);
            const auto r = check_gradients(name, make_leaves(rng), build, opt);
            agg.max_rel_error = std::max(agg.max_rel_error, r.max_rel_error);
            agg.checked += r.checked;
            agg.kink_crossings += r.kink_crossings;
            agg.passed = agg.passed && r.passed;
            agg.seconds += r.seconds;
        }
        results.push_back(agg);
    };

    run_op(
        "conv2d",
        [](CounterRng& rng) {
            return std::vector{random_tensor({2, 2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng),
                               random_tensor({3}, rng)};
        },
        [](Tape<double>& t, const std::vector<Var>& v) {
            return detail::probe_loss(t, conv2d(t, v[0], v[1], v[2], Conv2dOptions{1, 1}), 1);
        });
    run_op(
        "conv2d_strided",
        [](CounterRng& rng) {
            return std::vector{random_tensor({1, 2, 7, 7}, rng), random_tensor({2, 2, 3, 3}, rng),
                               random_tensor({2}, rng)};
        },
        [](Tape<double>& t, const std::vector<Var>& v) {
            return detail::probe_loss(t, conv2d(t, v[0], v[1], v[2], Conv2dOptions{2, 0}), 2);
        });
    run_op(
        "maxpool2", [](CounterRng& rng) { return std::vector{random_tensor({2, 2, 4, 6}, rng)}; },
        [](Tape<double>& t, const std::vector<Var>& v) { return detail::probe_loss(t, maxpool2(t, v[0]), 3); });
    run_op(
        "upsample_nearest2", [](CounterRng& rng) { return std::vector{random_tensor({2, 2, 3, 2}, rng)}; },
        [](Tape<double>& t, const std::vector<Var>& v) {
            return detail::probe_loss(t, upsample_nearest2(t, v[0]), 4);
        });
    run_op(
        "channel_norm_train", [](CounterRng& rng) { return std::vector{random_tensor({2, 3, 3, 3}, rng)}; },
        [](Tape<double>& t, const std::vector<Var>& v) {
            return detail::probe_loss(t, channel_norm_train(t, v[0], 0.1, 1e-5), 5);
        });
    run_op(
        "channel_norm_infer", [](CounterRng& rng) { return std::vector{random_tensor({2, 3, 3, 3}, rng)}; },
        [](Tape<double>& t, const std::vector<Var>& v) {
            const Tensor<double> mean(Shape{3}, std::vector<double>{0.5, -1.0, 2.0});
            const Tensor<double> var(Shape{3}, std::vector<double>{1.5, 0.25, 4.0});
            return detail::probe_loss(t, channel_norm_infer(t, v[0], mean, var, 1e-5), 6);
        });
    run_op(
        "relu", [](CounterRng& rng) { return std::vector{random_tensor({2, 3, 4}, rng)}; },
        [](Tape<double>& t, const std::vector<Var>& v) { return detail::probe_loss(t, relu(t, v[0]), 7); });
    run_op(
        "sigmoid", [](CounterRng& rng) { return std::vector{random_tensor({2, 3, 4}, rng, 2.0)}; },
        [](Tape<double>& t, const std::vector<Var>& v) { return detail::probe_loss(t, sigmoid(t, v[0]), 8); });
    run_op(
        "add",
        [](CounterRng& rng) { return std::vector{random_tensor({2, 5}, rng), random_tensor({2, 5}, rng)}; },
        [](Tape<double>& t, const std::vector<Var>& v) { return detail::probe_loss(t, add(t, v[0], v[1]), 9); });
    run_op(
        "mul",
        [](CounterRng& rng) { return std::vector{random_tensor({2, 5}, rng), random_tensor({2, 5}, rng)}; },
        [](Tape<double>& t, const std::vector<Var>& v) { return detail::probe_loss(t, mul(t, v[0], v[1]), 10); });
    run_op(
        "scale_sum", [](CounterRng& rng) { return std::vector{random_tensor({3, 4}, rng)}; },
        [](Tape<double>& t, const std::vector<Var>& v) { return sum(t, scale(t, mul(t, v[0], v[0]), -0.75)); });
    run_op(
        "concat_channels",
        [](CounterRng& rng) {
            return std::vector{random_tensor({2, 2, 3, 3}, rng), random_tensor({2, 3, 3, 3}, rng)};
        },
        [](Tape<double>& t, const std::vector<Var>& v) {
            return detail::probe_loss(t, concat_channels(t, v[0], v[1]), 11);
        });
    run_op(
        "linear",
        [](CounterRng& rng) {
            return std::vector{random_tensor({3, 4}, rng), random_tensor({5, 4}, rng), random_tensor({5}, rng)};
        },
        [](Tape<double>& t, const std::vector<Var>& v) {
            return detail::probe_loss(t, linear(t, v[0], v[1], v[2]), 12);
        });
    run_op(
        "film_modulate",
        [](CounterRng& rng) {
            return std::vector{random_tensor({2, 3, 3, 3}, rng), random_tensor({2, 3}, rng),
                               random_tensor({2, 3}, rng)};
        },
        [](Tape<double>& t, const std::vector<Var>& v) {
            return detail::probe_loss(t, film_modulate(t, v[0], v[1], v[2]), 13);
        });
    run_op(
        "channel_affine",
        [](CounterRng& rng) {
            return std::vector{random_tensor({2, 3, 3, 3}, rng), random_tensor({3}, rng), random_tensor({3}, rng)};
        },
        [](Tape<double>& t, const std::vector<Var>& v) {
            return detail::probe_loss(t, channel_affine(t, v[0], v[1], v[2]), 14);
        });
    run_op(
        "film_generate",
        [](CounterRng& rng) {
            return std::vector{random_tensor({6, 2}, rng), random_tensor({6}, rng), random_tensor({4, 6}, rng),
                               random_tensor({4}, rng),    random_tensor({4, 6}, rng), random_tensor({4}, rng)};
        },
        [](Tape<double>& t, const std::vector<Var>& v) {
            const Tensor<double> z(Shape{3, 2}, std::vector<double>{1, 0, 0, 1, 1, 0});
            const auto [g, b] = film_generate(t, t.constant(z), FilmGeneratorVars{v[0], v[1], v[2], v[3], v[4], v[5]});
            return add(t, detail::probe_loss(t, g, 15), detail::probe_loss(t, b, 16));
        });
    run_op(
        "soft_dice_loss",
        [](CounterRng& rng) { return std::vector{detail::probability_tensor({1, 1, 8, 8}, rng)}; },
        [](Tape<double>& t, const std::vector<Var>& v) {
            CounterRng mrng(17, Stream::Test, 0);
            return soft_dice_loss(t, v[0], t.constant(random_mask({1, 1, 8, 8}, mrng)), 1e-5);
        });

    // End-to-end: soft Dice of the network output on an 8x8 input, f64,
    // every parameter perturbed (FiLM generator heads randomized so that the
    // generator weights carry non-trivial gradients). The evaluation point is
    // the first draw at which no central difference straddles a ReLU or
    // max-pool switch.
    const auto unet_check = [&](const std::string& name, std::size_t conditioning, std::size_t batch) {
        ModelConfig cfg;
        cfg.depth = 2;
        cfg.base_channels = 4;
        cfg.conditioning_size = conditioning;
        cfg.film_hidden = 4;
        const UNet<double> net(cfg);
        const std::size_t zw = std::max<std::size_t>(conditioning, 1);
        Tensor<double> z(Shape{batch, zw});
        for (std::size_t n = 0; n < batch; ++n) z[n * zw + (n % zw)] = 1.0;

        ModelParams<double> params;
        std::vector<std::string> names;
        std::vector<Tensor<double>> leaves;
        Tensor<double> image, target;
        const auto forward = [&](Tape<double>& t, const std::vector<Var>& v) {
            UNet<double>::VarMap vars;
            for (std::size_t i = 0; i < names.size(); ++i) vars.emplace(names[i], v[i]);
            for (const auto& [k, val] : params.tensors()) {
                if (is_buffer_name(k)) vars.emplace(k, t.constant(val));
            }
            std::optional<Var> zv;
            if (conditioning) zv = t.constant(z);
            return net.forward(t, vars, params, t.constant(image), zv, NormMode::Train);
        };
        const LossBuilder build = [&](Tape<double>& t, const std::vector<Var>& v) {
            return soft_dice_loss(t, forward(t, v), t.constant(target), 1e-5);
        };
        GradCheckResult res;
        for (std::uint64_t draw = 0; draw < 20; ++draw) {
            params = net.init_params(seed + draw);
            CounterRng rng(seed, Stream::Test, hash_string(name) + draw);
            names.clear();
            leaves.clear();
            for (auto& [k, v] : params.tensors()) {
                if (is_buffer_name(k)) continue;
                if (!k.ends_with(".kernel") && !k.ends_with(".h.weight")) {
                    for (auto& x : v.values()) x += 0.3 * rng.normal();
                }
                names.push_back(k);
                leaves.push_back(v);
            }
            image = random_tensor({batch, 1, 8, 8}, rng);
            target = random_mask({batch, 1, 8, 8}, rng);
            res = check_gradients(name, leaves, build, opt);
            if (res.kink_crossings == 0) break;
        }
        results.push_back(res);
    };
    unet_check("unet_film_end_to_end", 2, 1);
    unet_check("unet_film_batch2", 2, 2);
    unet_check("unet_baseline_end_to_end", 0, 1);
    return results;
}

} // namespace filmseg
