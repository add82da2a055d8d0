#pragma once

// Binary checkpoint:
//
//   "FSGCKPT1"  u32 count
//   count x { u16 name_len, name, u8 rank, rank x u32 dim, f32 payload }
//   32-byte SHA-256 of the run config's training fields
//
// Optimizer moments are stored as "<param>.m" / "<param>.v" and the step
// counter as the [1]-shaped tensor "optim.step". All integers and floats are
// little-endian.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>

#include "filmseg/dataset_io.hpp"
#include "filmseg/errors.hpp"
#include "filmseg/optim.hpp"
#include "filmseg/unet.hpp"

namespace filmseg {

inline constexpr std::string_view kCheckpointMagic = "FSGCKPT1";
inline constexpr const char* kStepTensor = "optim.step";

struct Checkpoint {
    std::map<std::string, Tensor<float>> tensors;
    std::string fingerprint; // 64 hex characters

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {

inline std::string hex_to_bytes(const std::string& hex) {
    if (hex.size() != 64) throw UsageError("fingerprint must be 64 hex characters");
    std::string out;
    for (std::size_t i = 0; i < 64; i += 2) out.push_back(static_cast<char>(std::stoi(hex.substr(i, 2), nullptr, 16)));
    return out;
}

inline std::string bytes_to_hex(const std::string& bytes) {
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned char c : bytes) {
        out.push_back(hex[c >> 4]);
        out.push_back(hex[c & 15]);
    }
    return out;
}

} // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
    std::string out(kCheckpointMagic);
    io::put_u32(out, static_cast<std::uint32_t>(ck.tensors.size()));
    for (const auto& [name, t] : ck.tensors) {
        if (name.size() > 0xffff) throw UsageError("tensor name too long: " + name.substr(0, 40));
        io::put_u16(out, static_cast<std::uint16_t>(name.size()));
        out += name;
        out.push_back(static_cast<char>(t.rank()));
        for (std::size_t d : t.shape()) io::put_u32(out, static_cast<std::uint32_t>(d));
        for (float v : t.values()) io::put_f32(out, v);
    }
    out += detail::hex_to_bytes(ck.fingerprint);
    return out;
}

inline Checkpoint decode_checkpoint(std::string bytes, const std::string& file) {
    io::Reader r(std::move(bytes), file);
    r.expect_magic(kCheckpointMagic);
    const std::uint32_t count = r.u32("tensor count");
    Checkpoint ck;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t len = r.u16("name length");
        std::string name = r.bytes(len, "tensor name");
        const std::size_t rank_at = r.pos();
        const std::uint8_t rank = r.u8("rank");
        if (rank == 0 || rank > 4) {
            throw FormatError(file + ": tensor '" + name + "' has rank " + std::to_string(rank) + " at byte offset " +
                              std::to_string(rank_at));
        }
        Shape shape;
        for (std::uint8_t d = 0; d < rank; ++d) shape.push_back(r.u32("dimension"));
        Tensor<float> t(shape);
        r.need(4 * t.size(), "tensor payload");
        for (auto& v : t.values()) v = r.f32("tensor payload");
        if (!ck.tensors.emplace(name, std::move(t)).second) {
            throw FormatError(file + ": duplicate tensor '" + name + "'");
        }
    }
    ck.fingerprint = detail::bytes_to_hex(r.bytes(32, "fingerprint"));
    r.expect_end();
    return ck;
}

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    io::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(io::read_file(path), path.string());
}

inline Checkpoint make_checkpoint(const ModelParams<float>& params, const AdamState<float>& state,
                                  const std::string& fingerprint) {
    Checkpoint ck;
    ck.fingerprint = fingerprint;
    for (const auto& [k, v] : params.tensors()) ck.tensors.emplace(k, v);
    for (const auto& [k, v] : state.m) ck.tensors.emplace(k + ".m", v);
    for (const auto& [k, v] : state.v) ck.tensors.emplace(k + ".v", v);
    // f32 holds integers exactly up to 2^24 steps.
    ck.tensors.emplace(kStepTensor, Tensor<float>::scalar(static_cast<float>(state.step)));
    return ck;
}

// Splits a checkpoint back into parameters and optimizer state. The name set
// must match the model exactly; a mismatch is a FormatError listing the
// missing and the extra names.
inline std::pair<ModelParams<float>, AdamState<float>> unpack_checkpoint(const Checkpoint& ck,
                                                                          const UNet<float>& model) {
    const auto shapes = model.parameter_shapes();
    const auto is_moment = [&](const std::string& name) {
        return (name.ends_with(".m") || name.ends_with(".v")) && shapes.count(name.substr(0, name.size() - 2));
    };
    std::string missing, extra;
    for (const auto& [name, shape] : shapes) {
        if (!ck.tensors.count(name)) missing += (missing.empty() ? "" : ", ") + name;
    }
    for (const auto& [name, t] : ck.tensors) {
        if (!shapes.count(name) && name != kStepTensor && !is_moment(name)) {
            extra += (extra.empty() ? "" : ", ") + name;
        }
    }
    if (!missing.empty() || !extra.empty()) {
        throw FormatError("checkpoint does not match the model; missing: [" + missing + "], extra: [" + extra + "]");
    }

    typename ModelParams<float>::Map params;
    AdamState<float> state;
    for (const auto& [name, t] : ck.tensors) {
        if (shapes.count(name)) {
            params.emplace(name, t);
        } else if (name == kStepTensor) {
            state.step = static_cast<std::uint64_t>(t.item());
        } else {
            const std::string base = name.substr(0, name.size() - 2);
            require_shape(t.shape(), shapes.at(base), ("moment " + name).c_str());
            (name.back() == 'm' ? state.m : state.v).emplace(base, t);
        }
    }
    ModelParams<float> p(std::move(params));
    model.check_params(p);
    return {std::move(p), std::move(state)};
}

} // namespace filmseg
