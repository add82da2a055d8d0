#pragma once

// 2D U-Net whose convolutional sub-blocks expose a per-channel affine slot.
//
// Each sub-block computes conv3x3 -> channel_norm -> affine -> ReLU, and a
// block is two sub-blocks. The affine slot holds learned (gamma, beta)
// vectors for the plain U-Net, or the output of a per-site FiLM generator
// when conditioning is enabled. Layout for depth d and base width b:
//
//     enc.0 .. enc.(d-1)   width b * 2^l, followed by 2x2 max pooling
//     mid                  width b * 2^d
//     dec.(d-1) .. dec.0   nearest x2 upsample, conv3x3 "up", concat skip, block
//     head                 conv1x1 -> sigmoid
//
// FiLM sites are numbered in execution order: enc blocks, mid, dec blocks,
// two sites per block.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "filmseg/autodiff.hpp"
#include "filmseg/errors.hpp"
#include "filmseg/film.hpp"
#include "filmseg/ops.hpp"
#include "filmseg/rng.hpp"
#include "filmseg/tensor.hpp"

namespace filmseg {

struct ModelConfig {
    std::size_t depth = 2;
    std::size_t base_channels = 16;
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
    std::size_t conditioning_size = 0; // 0 disables FiLM
    std::size_t film_hidden = 64;

    void validate() const {
        if (depth < 2 || depth > 4) throw ConfigError("model depth must be in {2, 3, 4}, got " + std::to_string(depth));
        if (base_channels < 4) throw ConfigError("base_channels must be >= 4, got " + std::to_string(base_channels));
        if (in_channels != 1 || out_channels != 1) throw ConfigError("in_channels and out_channels must be 1");
        if (conditioning_size == 1) throw ConfigError("conditioning_size must be 0 or >= 2");
        if (conditioning_size > 0 && film_hidden == 0) throw ConfigError("film_hidden must be positive");
    }

    bool conditioned() const noexcept { return conditioning_size > 0; }
    std::size_t channels_at(std::size_t level) const noexcept { return base_channels << level; }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Running normalization statistics are stored alongside the weights but
// are not trained.
inline bool is_buffer_name(const std::string& name) {
    return name.ends_with(".running_mean") || name.ends_with(".running_var");
}

template <typename T>
class ModelParams {
public:
    using Map = std::map<std::string, Tensor<T>>;

    ModelParams() = default;
    explicit ModelParams(Map tensors) : tensors_(std::move(tensors)) {}

    const Tensor<T>& at(const std::string& name) const {
        const auto it = tensors_.find(name);
        if (it == tensors_.end()) throw UsageError("unknown parameter '" + name + "'");
        return it->second;
    }
    Tensor<T>& at(const std::string& name) {
        const auto it = tensors_.find(name);
        if (it == tensors_.end()) throw UsageError("unknown parameter '" + name + "'");
        return it->second;
    }

    bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
    void set(const std::string& name, Tensor<T> t) { tensors_[name] = std::move(t); }

    const Map& tensors() const noexcept { return tensors_; }
    Map& tensors() noexcept { return tensors_; }
    std::size_t size() const noexcept { return tensors_.size(); }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (const auto& [k, v] : tensors_) out.push_back(k);
        return out;
    }

    std::vector<std::string> trainable_names() const {
        std::vector<std::string> out;
        for (const auto& [k, v] : tensors_) {
            if (!is_buffer_name(k)) out.push_back(k);
        }
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [k, v] : tensors_) {
            if (!is_buffer_name(k)) n += v.size();
        }
        return n;
    }

    template <typename U>
    ModelParams<U> cast() const {
        typename ModelParams<U>::Map out;
        for (const auto& [k, v] : tensors_) out.emplace(k, v.template cast<U>());
        return ModelParams<U>(std::move(out));
    }

    friend bool operator==(const ModelParams&, const ModelParams&) = default;

private:
    Map tensors_;
};

template <typename T>
class UNet {
public:
    using VarMap = std::map<std::string, Var>;

    explicit UNet(ModelConfig config) : config_(config) { config_.validate(); }

    const ModelConfig& config() const noexcept { return config_; }

    std::size_t film_sites() const noexcept { return 2 * (2 * config_.depth + 1); }

    // Full name -> shape table; a pure function of the configuration.
    std::map<std::string, Shape> parameter_shapes() const {
        std::map<std::string, Shape> shapes;
        std::size_t site = 0;
        const auto add_block = [&](const std::string& block, std::size_t cin, std::size_t cout) {
            for (int sub = 1; sub <= 2; ++sub) {
                const std::string s = std::to_string(sub);
                shapes[block + ".conv" + s + ".kernel"] = Shape{cout, sub == 1 ? cin : cout, 3, 3};
                shapes[block + ".conv" + s + ".bias"] = Shape{cout};
                shapes[block + ".norm" + s + ".running_mean"] = Shape{cout};
                shapes[block + ".norm" + s + ".running_var"] = Shape{cout};
                if (config_.conditioned()) {
                    const std::string g = film_prefix(site);
                    const std::size_t h = config_.film_hidden, z = config_.conditioning_size;
                    shapes[g + ".h.weight"] = Shape{h, z};
                    shapes[g + ".h.bias"] = Shape{h};
                    shapes[g + ".gamma.weight"] = Shape{cout, h};
                    shapes[g + ".gamma.bias"] = Shape{cout};
                    shapes[g + ".beta.weight"] = Shape{cout, h};
                    shapes[g + ".beta.bias"] = Shape{cout};
                } else {
                    shapes[block + ".affine" + s + ".gamma"] = Shape{cout};
                    shapes[block + ".affine" + s + ".beta"] = Shape{cout};
                }
                ++site;
            }
        };
        const std::size_t d = config_.depth;
        for (std::size_t l = 0; l < d; ++l) {
            add_block("enc." + std::to_string(l), l == 0 ? config_.in_channels : config_.channels_at(l - 1),
                      config_.channels_at(l));
        }
        add_block("mid", config_.channels_at(d - 1), config_.channels_at(d));
        for (std::size_t l = d; l-- > 0;) {
            const std::string blk = "dec." + std::to_string(l);
            shapes[blk + ".up.kernel"] = Shape{config_.channels_at(l), config_.channels_at(l + 1), 3, 3};
            shapes[blk + ".up.bias"] = Shape{config_.channels_at(l)};
            add_block(blk, 2 * config_.channels_at(l), config_.channels_at(l));
        }
        shapes["head.kernel"] = Shape{config_.out_channels, config_.channels_at(0), 1, 1};
        shapes["head.bias"] = Shape{config_.out_channels};
        return shapes;
    }

    std::set<std::string> parameter_names() const {
        std::set<std::string> names;
        for (const auto& [k, v] : parameter_shapes()) names.insert(k);
        return names;
    }

    // He-normal conv kernels, zero biases, identity affine slots, and FiLM
    // heads that emit exactly gamma = 1, beta = 0 for every input. Each
    // tensor draws from its own name-keyed stream.
    ModelParams<T> init_params(std::uint64_t seed) const {
        typename ModelParams<T>::Map out;
        for (const auto& [name, shape] : parameter_shapes()) {
            Tensor<T> t(shape);
            if (name.ends_with(".kernel") || name.ends_with(".h.weight")) {
                std::size_t fan_in = 1;
                for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
                const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
                CounterRng rng(seed, Stream::Init, name);
                for (auto& v : t.values()) v = static_cast<T>(std * rng.normal());
            } else if (name.ends_with(".running_var") || name.ends_with(".affine1.gamma") ||
                       name.ends_with(".affine2.gamma") || name.ends_with(".gamma.bias")) {
                t.fill(T{1});
            }
            out.emplace(name, std::move(t));
        }
        return ModelParams<T>(std::move(out));
    }

    // Verifies that `params` carries exactly this model's tensors.
    void check_params(const ModelParams<T>& params) const {
        const auto shapes = parameter_shapes();
        std::string missing, extra;
        for (const auto& [k, s] : shapes) {
            if (!params.contains(k)) {
                missing += (missing.empty() ? "" : ", ") + k;
            } else if (params.at(k).shape() != s) {
                throw DimensionError("parameter '" + k + "' has shape " + shape_str(params.at(k).shape()) +
                                     ", model expects " + shape_str(s));
            }
        }
        for (const auto& [k, v] : params.tensors()) {
            if (!shapes.count(k)) extra += (extra.empty() ? "" : ", ") + k;
        }
        if (!missing.empty() || !extra.empty()) {
            throw FormatError("parameter set does not match model configuration; missing: [" + missing +
                              "], extra: [" + extra + "]");
        }
    }

    // Puts every tensor on the tape; trainable ones as gradient leaves.
    VarMap bind(Tape<T>& tape, const ModelParams<T>& params, bool trainable) const {
        VarMap vars;
        for (const auto& [k, v] : params.tensors()) {
            vars.emplace(k, trainable && !is_buffer_name(k) ? tape.parameter(v) : tape.constant(v));
        }
        return vars;
    }

    // Forward pass to per-pixel probabilities [N, 1, H, W].
    //
    // `params` supplies the running statistics read in infer mode. In train
    // mode batch statistics are used and, when `stats_sink` is non-null, its
    // running buffers are updated.
    Var forward(Tape<T>& tape, const VarMap& vars, const ModelParams<T>& params, Var image, std::optional<Var> z,
                NormMode mode, ModelParams<T>* stats_sink = nullptr) const {
        const auto& x = tape.value(image);
        require_rank(x.shape(), 4, "unet input");
        if (x.dim(1) != config_.in_channels) {
            throw DimensionError("unet input has " + std::to_string(x.dim(1)) + " channels, expected " +
                                 std::to_string(config_.in_channels));
        }
        const std::size_t factor = std::size_t{1} << config_.depth;
        if (x.dim(2) % factor != 0 || x.dim(3) % factor != 0) {
            throw ConfigError("unet input " + shape_str(x.shape()) + " is not divisible by 2^depth = " +
                              std::to_string(factor));
        }
        if (config_.conditioned()) {
            if (!z) throw UsageError("FiLM model needs a conditioning batch");
            const auto& zs = tape.value(*z).shape();
            if (zs != Shape{x.dim(0), config_.conditioning_size}) {
                throw DimensionError("conditioning batch " + shape_str(zs) + " does not match image batch " +
                                     shape_str(x.shape()) + " and conditioning size " +
                                     std::to_string(config_.conditioning_size));
            }
        } else if (z) {
            throw UsageError("model was built without conditioning but a conditioning batch was supplied");
        }

        Pass pass{tape, vars, params, z, mode, stats_sink, 0};
        const std::size_t d = config_.depth;
        std::vector<Var> skips;
        Var h = image;
        for (std::size_t l = 0; l < d; ++l) {
            h = block(pass, "enc." + std::to_string(l), h);
            skips.push_back(h);
            h = maxpool2(tape, h);
        }
        h = block(pass, "mid", h);
        for (std::size_t l = d; l-- > 0;) {
            const std::string blk = "dec." + std::to_string(l);
            h = upsample_nearest2(tape, h);
            h = conv2d(tape, h, vars.at(blk + ".up.kernel"), vars.at(blk + ".up.bias"), Conv2dOptions{1, 1});
            h = concat_channels(tape, skips[l], h);
            h = block(pass, blk, h);
        }
        h = conv2d(tape, h, vars.at("head.kernel"), vars.at("head.bias"));
        return sigmoid(tape, h);
    }

    // Inference convenience: probabilities for an image batch.
    Tensor<T> predict(const ModelParams<T>& params, const Tensor<T>& image, const Tensor<T>* z = nullptr) const {
        Tape<T> tape;
        const auto vars = bind(tape, params, false);
        std::optional<Var> zv;
        if (z) zv = tape.constant(*z);
        return tape.value(forward(tape, vars, params, tape.constant(image), zv, NormMode::Infer));
    }

    static std::string film_prefix(std::size_t site) { return "film." + std::to_string(site) + ".gen"; }

    FilmGeneratorVars film_vars(const VarMap& vars, std::size_t site) const {
        const std::string g = film_prefix(site);
        return {vars.at(g + ".h.weight"),     vars.at(g + ".h.bias"),    vars.at(g + ".gamma.weight"),
                vars.at(g + ".gamma.bias"), vars.at(g + ".beta.weight"), vars.at(g + ".beta.bias")};
    }

    FilmGenerator<T> film_generator(const ModelParams<T>& params, std::size_t site) const {
        const std::string g = film_prefix(site);
        return {params.at(g + ".h.weight"),     params.at(g + ".h.bias"),    params.at(g + ".gamma.weight"),
                params.at(g + ".gamma.bias"), params.at(g + ".beta.weight"), params.at(g + ".beta.bias")};
    }

private:
    struct Pass {
        Tape<T>& tape;
        const VarMap& vars;
        const ModelParams<T>& params;
        std::optional<Var> z;
        NormMode mode;
        ModelParams<T>* sink;
        std::size_t site;
    };

    Var block(Pass& p, const std::string& name, Var h) const {
        for (int sub = 1; sub <= 2; ++sub) {
            const std::string s = std::to_string(sub);
            h = conv2d(p.tape, h, p.vars.at(name + ".conv" + s + ".kernel"), p.vars.at(name + ".conv" + s + ".bias"),
                       Conv2dOptions{1, 1});
            const std::string norm = name + ".norm" + s;
            if (p.mode == NormMode::Train) {
                Tensor<T>* rm = p.sink ? &p.sink->at(norm + ".running_mean") : nullptr;
                Tensor<T>* rv = p.sink ? &p.sink->at(norm + ".running_var") : nullptr;
                h = channel_norm_train(p.tape, h, T(0.1), T(1e-5), rm, rv);
            } else {
                h = channel_norm_infer(p.tape, h, p.params.at(norm + ".running_mean"),
                                       p.params.at(norm + ".running_var"), T(1e-5));
            }
            if (config_.conditioned()) {
                const auto [gamma, beta] = film_generate(p.tape, *p.z, film_vars(p.vars, p.site));
                h = film_modulate(p.tape, h, gamma, beta);
            } else {
                h = channel_affine(p.tape, h, p.vars.at(name + ".affine" + s + ".gamma"),
                                   p.vars.at(name + ".affine" + s + ".beta"));
            }
            h = relu(p.tape, h);
            ++p.site;
        }
        return h;
    }

    ModelConfig config_;
};

} // namespace filmseg
