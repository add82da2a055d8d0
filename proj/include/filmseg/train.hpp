#pragma once

// Mini-batch training of the baseline or FiLMed U-Net, and model evaluation.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "filmseg/autodiff.hpp"
#include "filmseg/checkpoint.hpp"
#include "filmseg/config.hpp"
#include "filmseg/dataset_io.hpp"
#include "filmseg/film.hpp"
#include "filmseg/metrics.hpp"
#include "filmseg/optim.hpp"
#include "filmseg/synth.hpp"
#include "filmseg/unet.hpp"

namespace filmseg {

// Zero mean, unit variance over one sample's pixels; constant images map to
// all zeros.
inline Tensor<float> standardize(const Tensor<float>& img) {
    double s = 0, ss = 0;
    for (float v : img.values()) s += v;
    const double mean = s / static_cast<double>(img.size());
    for (float v : img.values()) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(img.size()));
    Tensor<float> out(img.shape());
    for (std::size_t i = 0; i < img.size(); ++i) out[i] = sd > 0 ? static_cast<float>((img[i] - mean) / sd) : 0.0f;
    return out;
}

struct Partitions {
    std::vector<Sample> train, val, test;
};

inline Partitions partition(const Dataset& ds, std::uint64_t seed) {
    const auto sp = split_dataset(phantom_ids(ds.samples), seed);
    return {select_phantoms(ds.samples, sp.train), select_phantoms(ds.samples, sp.val),
            select_phantoms(ds.samples, sp.test)};
}

// Stacks samples into an image batch [N,1,H,W], a mask batch and, for
// conditioned models, a one-hot batch [N,V].
struct Batch {
    Tensor<float> images, masks;
    std::optional<Tensor<float>> z;
};

inline Batch make_batch(const std::vector<const Sample*>& samples, const RunConfig& cfg, const Vocabulary& vocab) {
    const Shape& s = samples.front()->image.shape();
    const std::size_t N = samples.size(), px = shape_size(s);
    Batch b{Tensor<float>(Shape{N, s[0], s[1], s[2]}), Tensor<float>(Shape{N, s[0], s[1], s[2]}), std::nullopt};
    std::vector<ConditioningVector> zs;
    for (std::size_t n = 0; n < N; ++n) {
        const Tensor<float> img = cfg.standardize_input ? standardize(samples[n]->image) : samples[n]->image;
        std::copy_n(img.data(), px, b.images.data() + n * px);
        std::copy_n(samples[n]->mask.data(), px, b.masks.data() + n * px);
        if (cfg.conditioning) zs.push_back(encode_contrast(samples[n]->contrast, vocab));
    }
    if (cfg.conditioning) b.z = conditioning_batch<float>(zs);
    return b;
}

// Infer-mode probabilities for one sample under the config's input handling.
inline Predictor make_predictor(const UNet<float>& model, const ModelParams<float>& params, const RunConfig& cfg) {
    const Vocabulary vocab = cfg.vocab();
    return [&model, &params, cfg, vocab](const Sample& s) {
        const Batch b = make_batch({&s}, cfg, vocab);
        const auto y = model.predict(params, b.images, b.z ? &*b.z : nullptr);
        return y.reshaped(s.mask.shape());
    };
}

inline EvalReport evaluate_model(const UNet<float>& model, const ModelParams<float>& params, const Dataset& ds,
                                 const RunConfig& cfg, double threshold = 0.5) {
    EvalReport r = evaluate(make_predictor(model, params, cfg), ds, cfg.vocab(), threshold);
    r.fingerprint = fingerprint(cfg);
    r.seed = cfg.seed;
    return r;
}

struct EpochLog {
    std::size_t epoch = 0;
    double train_loss = 0;
    double val_dice = 0;
    double lr = 0;
};

struct TrainResult {
    ModelParams<float> final_params;
    AdamState<float> final_state;
    ModelParams<float> best_params;
    AdamState<float> best_state;
    double best_val_dice = -1;
    std::size_t best_epoch = 0;
    std::vector<EpochLog> log;
    std::string fingerprint;
};

inline std::string log_csv(const std::vector<EpochLog>& log) {
    std::ostringstream out;
    out.precision(9);
    out << "epoch,train_loss,val_dice,lr\n";
    for (const auto& e : log) out << e.epoch << ',' << e.train_loss << ',' << e.val_dice << ',' << e.lr << '\n';
    return out.str();
}

using EpochCallback = std::function<void(const EpochLog&)>;

// Reads a strength artifact written by calibrate-raters ("strength <s>" on
// its first line).
inline double read_strength_file(const std::string& path) {
    std::istringstream in(io::read_file(path));
    std::string key;
    double s = -1;
    if (!(in >> key >> s) || key != "strength" || s < 0 || s > 1) {
        throw ConfigError("'" + path + "' is not a rater strength file");
    }
    return s;
}

// Copy of `cfg` with the strength file folded into rater.strength, so the
// fingerprint reflects the strength actually used.
inline RunConfig resolve_config(RunConfig cfg) {
    if (!cfg.rater_strength_file.empty()) {
        cfg.rater.strength = read_strength_file(cfg.rater_strength_file);
        cfg.rater_strength_file.clear();
    }
    cfg.validate();
    return cfg;
}

// Pre-flight checks that need the data: vocabulary, mode and split sizes.
inline void check_dataset(const RunConfig& cfg, const Dataset& ds) {
    require_vocabulary(ds, cfg.vocab(), "train");
    if (ds.mode != cfg.mode) {
        throw ConfigError("dataset mode '" + ds.mode + "' differs from config mode '" + cfg.mode + "'");
    }
    for (const auto& s : ds.samples) {
        if (s.image.rank() != 3 || s.image.dim(0) != 1) {
            throw DimensionError("sample '" + s.id + "' is not a single-channel image");
        }
        const std::size_t f = std::size_t{1} << cfg.depth;
        if (s.image.dim(1) % f || s.image.dim(2) % f) {
            throw ConfigError("sample extent " + shape_str(s.image.shape()) + " is not divisible by 2^depth");
        }
    }
}

inline TrainResult train_model(const RunConfig& raw_cfg, const Dataset& ds, const EpochCallback& on_epoch = {}) {
    const RunConfig cfg = resolve_config(raw_cfg);
    check_dataset(cfg, ds);
    const Vocabulary vocab = cfg.vocab();
    const UNet<float> model(cfg.model());
    Partitions parts = partition(ds, cfg.seed);
    if (cfg.train_limit > 0 && parts.train.size() > cfg.train_limit) parts.train.resize(cfg.train_limit);
    if (parts.train.empty() || parts.val.empty()) throw ConfigError("dataset too small for a train/val split");
    const Dataset val{vocab, ds.mode, parts.val};

    TrainResult res;
    res.fingerprint = fingerprint(cfg);
    ModelParams<float> params = model.init_params(cfg.seed);
    AdamState<float> state;
    const auto trainable = params.trainable_names();

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cosine_lr(epoch, cfg.epochs, cfg.lr0, cfg.lr_min);
        std::vector<std::size_t> order(parts.train.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        CounterRng perm(cfg.seed, Stream::EpochShuffle, epoch);
        shuffle(order, perm);
        const std::uint64_t epoch_seed = mix64(cfg.seed ^ mix64(epoch + 1));

        double loss_sum = 0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::vector<Sample> views;
            for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) {
                Sample s = parts.train[order[i]];
                if (cfg.perturb_ground_truth && cfg.rater.strength > 0) {
                    CounterRng rr(epoch_seed, Stream::RaterPerturb, s.id);
                    const Plane m = s.mask.reshaped(Shape{s.mask.dim(1), s.mask.dim(2)});
                    s.mask = perturb_ground_truth(m, rr, cfg.rater).reshaped(s.mask.shape());
                }
                if (cfg.augment) s = augment_sample(s, epoch_seed, cfg.augmentation);
                views.push_back(std::move(s));
            }
            std::vector<const Sample*> ptrs;
            for (const auto& s : views) ptrs.push_back(&s);
            const Batch b = make_batch(ptrs, cfg, vocab);

            Tape<float> tape;
            const auto vars = model.bind(tape, params, true);
            std::optional<Var> z;
            if (b.z) z = tape.constant(*b.z);
            const Var pred = model.forward(tape, vars, params, tape.constant(b.images), z, NormMode::Train, &params);
            const Var loss = soft_dice_loss(tape, pred, tape.constant(b.masks), 1e-5f);
            tape.backward(loss);
            std::map<std::string, Tensor<float>> grads;
            for (const auto& name : trainable) grads.emplace(name, tape.grad(vars.at(name)));
            adam_step(params, grads, state, lr);
            loss_sum += tape.value(loss).item();
            ++batches;
        }

        EpochLog e{epoch + 1, loss_sum / static_cast<double>(batches), 0.0, lr};
        e.val_dice = evaluate_model(model, params, val, cfg).overall_mean;
        res.log.push_back(e);
        if (e.val_dice > res.best_val_dice) {
            res.best_val_dice = e.val_dice;
            res.best_epoch = e.epoch;
            res.best_params = params;
            res.best_state = state;
        }
        if (on_epoch) on_epoch(e);
    }
    res.final_params = std::move(params);
    res.final_state = std::move(state);
    return res;
}

} // namespace filmseg
