#pragma once

// Feature-wise linear modulation.
//
// A FiLM generator is a two-layer perceptron that maps a one-hot metadata
// vector z to a per-channel scale and shift:
//
//     h     = relu(W_h z + b_h)
//     gamma = W_gamma h + b_gamma
//     beta  = W_beta  h + b_beta
//
// and the modulation applied to a feature map x is gamma * x + beta per
// channel. Every modulation site owns an independent generator.

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include "filmseg/autodiff.hpp"
#include "filmseg/errors.hpp"
#include "filmseg/ops.hpp"
#include "filmseg/tensor.hpp"

namespace filmseg {

// Ordered list of category names for one piece of categorical metadata.
class Vocabulary {
public:
    Vocabulary() : names_{"T2w", "T2star"} {}
    explicit Vocabulary(std::vector<std::string> names) : names_(std::move(names)) {
        if (names_.size() < 2) throw VocabularyError("vocabulary needs at least 2 categories");
        for (std::size_t i = 0; i < names_.size(); ++i) {
            if (std::find(names_.begin() + static_cast<std::ptrdiff_t>(i) + 1, names_.end(), names_[i]) !=
                names_.end()) {
                throw VocabularyError("duplicate category '" + names_[i] + "' in vocabulary");
            }
        }
    }

    std::size_t size() const noexcept { return names_.size(); }
    const std::vector<std::string>& names() const noexcept { return names_; }
    const std::string& operator[](std::size_t i) const { return names_.at(i); }

    bool contains(const std::string& label) const {
        return std::find(names_.begin(), names_.end(), label) != names_.end();
    }

    std::size_t index_of(const std::string& label) const {
        const auto it = std::find(names_.begin(), names_.end(), label);
        if (it == names_.end()) throw VocabularyError("unknown category '" + label + "'; known: " + joined());
        return static_cast<std::size_t>(it - names_.begin());
    }

    std::string joined() const {
        std::string s;
        for (const auto& n : names_) s += (s.empty() ? "" : ", ") + n;
        return s;
    }

    friend bool operator==(const Vocabulary&, const Vocabulary&) = default;

private:
    std::vector<std::string> names_;
};

// One-hot metadata vector z.
struct ConditioningVector {
    std::vector<double> values;
    Vocabulary vocabulary;

    void validate() const {
        if (values.size() != vocabulary.size()) {
            throw DimensionError("conditioning vector of length " + std::to_string(values.size()) +
                                 " does not match vocabulary of size " + std::to_string(vocabulary.size()));
        }
        std::size_t ones = 0;
        for (double v : values) {
            if (v == 1.0) {
                ++ones;
            } else if (v != 0.0) {
                throw ValidationError("conditioning vector is not one-hot");
            }
        }
        if (ones != 1) throw ValidationError("conditioning vector is not one-hot");
    }

    std::size_t index() const {
        validate();
        return static_cast<std::size_t>(std::find(values.begin(), values.end(), 1.0) - values.begin());
    }
};

inline ConditioningVector encode_contrast(const std::string& label, const Vocabulary& vocabulary) {
    ConditioningVector z{std::vector<double>(vocabulary.size(), 0.0), vocabulary};
    z.values[vocabulary.index_of(label)] = 1.0;
    return z;
}

// Stacks validated one-hot vectors into an [N, C] batch.
template <typename T>
Tensor<T> conditioning_batch(const std::vector<ConditioningVector>& zs) {
    if (zs.empty()) throw UsageError("conditioning_batch: empty batch");
    const std::size_t C = zs.front().values.size();
    Tensor<T> out(Shape{zs.size(), C});
    for (std::size_t n = 0; n < zs.size(); ++n) {
        zs[n].validate();
        if (zs[n].values.size() != C) throw DimensionError("conditioning_batch: ragged conditioning vectors");
        for (std::size_t c = 0; c < C; ++c) out[n * C + c] = static_cast<T>(zs[n].values[c]);
    }
    return out;
}

template <typename T>
struct FilmParams {
    Tensor<T> gamma; // [Cs]
    Tensor<T> beta;  // [Cs]
};

template <typename T>
struct FilmGenerator {
    Tensor<T> hidden_weight; // [hidden, C]
    Tensor<T> hidden_bias;   // [hidden]
    Tensor<T> gamma_weight;  // [Cs, hidden]
    Tensor<T> gamma_bias;    // [Cs]
    Tensor<T> beta_weight;   // [Cs, hidden]
    Tensor<T> beta_bias;     // [Cs]

    std::size_t input_width() const { return hidden_weight.dim(1); }
    std::size_t channels() const { return gamma_bias.dim(0); }
};

// Tape handles for one generator's parameters.
struct FilmGeneratorVars {
    Var hidden_weight, hidden_bias, gamma_weight, gamma_bias, beta_weight, beta_bias;
};

// Batched generator on the tape: z is [N, C]; returns ([N, Cs], [N, Cs]).
template <typename T>
std::pair<Var, Var> film_generate(Tape<T>& tape, Var z, const FilmGeneratorVars& gen) {
    const Var h = relu(tape, linear(tape, z, gen.hidden_weight, gen.hidden_bias));
    return {linear(tape, h, gen.gamma_weight, gen.gamma_bias), linear(tape, h, gen.beta_weight, gen.beta_bias)};
}

template <typename T>
FilmParams<T> film_generate(const ConditioningVector& z, const FilmGenerator<T>& gen) {
    z.validate();
    if (z.values.size() != gen.input_width()) {
        throw DimensionError("film_generate: generator expects conditioning width " +
                             std::to_string(gen.input_width()) + ", got " + std::to_string(z.values.size()));
    }
    Tape<T> tape;
    const Var zv = tape.constant(conditioning_batch<T>({z}));
    const FilmGeneratorVars vars{tape.constant(gen.hidden_weight), tape.constant(gen.hidden_bias),
                                 tape.constant(gen.gamma_weight),  tape.constant(gen.gamma_bias),
                                 tape.constant(gen.beta_weight),   tape.constant(gen.beta_bias)};
    const auto [g, b] = film_generate(tape, zv, vars);
    const std::size_t cs = gen.channels();
    return {tape.value(g).reshaped(Shape{cs}), tape.value(b).reshaped(Shape{cs})};
}

// gamma * x + beta per channel on the tape; see channel_affine.
template <typename T>
Var film_modulate(Tape<T>& tape, Var x, Var gamma, Var beta) {
    return channel_affine(tape, x, gamma, beta);
}

template <typename T>
Tensor<T> film_modulate(const Tensor<T>& x, const FilmParams<T>& p) {
    Tape<T> tape;
    const Var y = channel_affine(tape, tape.constant(x), tape.constant(p.gamma), tape.constant(p.beta));
    return tape.value(y);
}

} // namespace filmseg
