#pragma once

// Run configuration: JSON schema, validation and the training fingerprint.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>
#include <openssl/evp.h>

#include "filmseg/dataset_io.hpp"
#include "filmseg/errors.hpp"
#include "filmseg/film.hpp"
#include "filmseg/synth.hpp"
#include "filmseg/unet.hpp"

namespace filmseg {

struct RunConfig {
    std::string data_dir;
    std::string mode = "natural";
    std::vector<std::string> vocabulary{"T2w", "T2star"};
    std::size_t depth = 2;
    std::size_t base_channels = 16;
    std::size_t film_hidden = 64;
    bool conditioning = true;
    bool standardize_input = false; // per-sample zero mean, unit variance
    double lr0 = 1e-3;
    double lr_min = 1e-5;
    std::size_t epochs = 30;
    std::size_t batch_size = 8;
    std::size_t train_limit = 0; // 0 = use every training sample
    bool augment = true;
    AugmentConfig augmentation;
    bool perturb_ground_truth = false;
    RaterPerturbConfig rater;
    std::string rater_strength_file; // overrides rater.strength when set
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    std::string output_dir;

    Vocabulary vocab() const { return Vocabulary(vocabulary); }

    ModelConfig model() const {
        ModelConfig m;
        m.depth = depth;
        m.base_channels = base_channels;
        m.film_hidden = film_hidden;
        m.conditioning_size = conditioning ? vocabulary.size() : 0;
        return m;
    }

    void validate() const {
        parse_mode(mode);
        try {
            vocab();
        } catch (const VocabularyError& e) {
            throw ConfigError(e.what());
        }
        model().validate();
        if (film_hidden == 0) throw ConfigError("film_hidden must be positive");
        if (!(lr0 > 0) || lr_min < 0 || lr_min > lr0) throw ConfigError("need 0 <= lr_min <= lr0 and lr0 > 0");
        if (epochs == 0) throw ConfigError("epochs must be positive");
        if (batch_size == 0) throw ConfigError("batch_size must be positive");
        if (threads == 0) throw ConfigError("threads must be positive");
        augmentation.validate();
        rater.validate();
    }

    // Every field that can influence training, in a fixed order.
    nlohmann::ordered_json training_json() const {
        nlohmann::ordered_json j;
        j["mode"] = mode;
        j["vocabulary"] = vocabulary;
        j["model"] = {{"depth", depth}, {"base_channels", base_channels}, {"film_hidden", film_hidden},
                      {"conditioning", conditioning}, {"standardize_input", standardize_input}};
        j["optim"] = {{"lr0", lr0}, {"lr_min", lr_min}, {"epochs", epochs}, {"batch_size", batch_size},
                      {"train_limit", train_limit}};
        const auto& a = augmentation;
        j["augmentation"] = {{"enabled", augment},          {"rotation_deg", a.rotation_deg},
                             {"translation_px", a.translation_px}, {"scale_min", a.scale_min},
                             {"scale_max", a.scale_max},     {"elastic_alpha", a.elastic_alpha},
                             {"elastic_sigma", a.elastic_sigma}, {"p_affine", a.p_affine},
                             {"p_elastic", a.p_elastic}};
        j["rater"] = {{"enabled", perturb_ground_truth},
                      {"strength", rater.strength},
                      {"max_radius", rater.max_radius},
                      {"max_shift", rater.max_shift},
                      {"max_rotation_deg", rater.max_rotation_deg},
                      {"strength_file", rater_strength_file}};
        j["seed"] = seed;
        return j;
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["data_dir"] = data_dir;
        j["output_dir"] = output_dir;
        j["threads"] = threads;
        const auto t = training_json();
        for (const auto& [k, v] : t.items()) j[k] = v;
        return j;
    }

    static RunConfig from_json(const nlohmann::json& j) {
        RunConfig c;
        try {
            for (const auto& [k, v] : j.items()) {
                static const std::vector<std::string> known{"data_dir", "output_dir", "threads",    "mode",
                                                            "vocabulary", "model",    "optim",      "augmentation",
                                                            "rater",    "seed"};
                if (std::find(known.begin(), known.end(), k) == known.end()) {
                    throw ConfigError("unknown config key '" + k + "'");
                }
            }
            if (!j.contains("seed")) throw ConfigError("config must set 'seed' explicitly");
            c.seed = j.at("seed").get<std::uint64_t>();
            c.data_dir = j.value("data_dir", c.data_dir);
            c.output_dir = j.value("output_dir", c.output_dir);
            c.threads = j.value("threads", c.threads);
            c.mode = j.value("mode", c.mode);
            c.vocabulary = j.value("vocabulary", c.vocabulary);
            if (j.contains("model")) {
                const auto& m = j.at("model");
                c.depth = m.value("depth", c.depth);
                c.base_channels = m.value("base_channels", c.base_channels);
                c.film_hidden = m.value("film_hidden", c.film_hidden);
                c.conditioning = m.value("conditioning", c.conditioning);
                c.standardize_input = m.value("standardize_input", c.standardize_input);
            }
            if (j.contains("optim")) {
                const auto& o = j.at("optim");
                c.lr0 = o.value("lr0", c.lr0);
                c.lr_min = o.value("lr_min", c.lr_min);
                c.epochs = o.value("epochs", c.epochs);
                c.batch_size = o.value("batch_size", c.batch_size);
                c.train_limit = o.value("train_limit", c.train_limit);
            }
            if (j.contains("augmentation")) {
                const auto& a = j.at("augmentation");
                auto& g = c.augmentation;
                c.augment = a.value("enabled", c.augment);
                g.rotation_deg = a.value("rotation_deg", g.rotation_deg);
                g.translation_px = a.value("translation_px", g.translation_px);
                g.scale_min = a.value("scale_min", g.scale_min);
                g.scale_max = a.value("scale_max", g.scale_max);
                g.elastic_alpha = a.value("elastic_alpha", g.elastic_alpha);
                g.elastic_sigma = a.value("elastic_sigma", g.elastic_sigma);
                g.p_affine = a.value("p_affine", g.p_affine);
                g.p_elastic = a.value("p_elastic", g.p_elastic);
            }
            if (j.contains("rater")) {
                const auto& r = j.at("rater");
                c.perturb_ground_truth = r.value("enabled", c.perturb_ground_truth);
                c.rater.strength = r.value("strength", c.rater.strength);
                c.rater.max_radius = r.value("max_radius", c.rater.max_radius);
                c.rater.max_shift = r.value("max_shift", c.rater.max_shift);
                c.rater.max_rotation_deg = r.value("max_rotation_deg", c.rater.max_rotation_deg);
                c.rater_strength_file = r.value("strength_file", c.rater_strength_file);
            }
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("malformed config: ") + e.what());
        }
        c.validate();
        return c;
    }

    static RunConfig load(const std::filesystem::path& path) {
        std::string text;
        try {
            text = io::read_file(path);
        } catch (const FormatError&) {
            throw ConfigError("cannot read config '" + path.string() + "'");
        }
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(text);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(path.string() + ": " + e.what());
        }
        return from_json(j);
    }
};

inline std::string sha256_hex(const std::string& bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
        throw Error("SHA-256 digest failed");
    }
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 15]);
    }
    return out;
}

// SHA-256 of the canonical training fields; paths and thread count are
// excluded because they cannot change the result.
inline std::string fingerprint(const RunConfig& c) { return sha256_hex(c.training_json().dump()); }

inline std::string config_schema() {
    return R"(film-seg run config (JSON). Every key is optional except "seed".
{
  "seed": <u64, required>,
  "data_dir": <path>, "output_dir": <path>, "threads": <int, default 1>,
  "mode": "natural" | "contrast_flip",
  "vocabulary": ["T2w", "T2star"],
  "model": {"depth": 2..4, "base_channels": >=4, "film_hidden": 64,
            "conditioning": true, "standardize_input": false},
  "optim": {"lr0": 1e-3, "lr_min": 1e-5, "epochs": 30, "batch_size": 8,
            "train_limit": 0},
  "augmentation": {"enabled": true, "rotation_deg": 10, "translation_px": 3,
                   "scale_min": 0.9, "scale_max": 1.1, "elastic_alpha": 1.5,
                   "elastic_sigma": 3, "p_affine": 0.8, "p_elastic": 0.5},
  "rater": {"enabled": false, "strength": 0, "max_radius": 3, "max_shift": 2,
            "max_rotation_deg": 10, "strength_file": ""}
}
)";
}

} // namespace filmseg
