#pragma once

// On-disk dataset: manifest.json plus one .img and one .msk file per sample.
// All binary fields are little-endian regardless of host byte order.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <json.hpp>

#include "filmseg/errors.hpp"
#include "filmseg/film.hpp"
#include "filmseg/synth.hpp"

namespace filmseg {

namespace fs = std::filesystem;

struct Dataset {
    Vocabulary vocabulary;
    std::string mode = "natural";
    std::vector<Sample> samples;
};

namespace io {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xffu));
    out.push_back(static_cast<char>(v >> 8));
}

inline void put_f32(std::string& out, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
}

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path.string() + "'");
    return std::string(std::istreambuf_iterator<char>(in), {});
}

// Writes via a temporary and renames, so readers never see partial files.
inline void write_file(const fs::path& path, const std::string& bytes) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write '" + tmp.string() + "'");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error("short write to '" + tmp.string() + "'");
    }
    fs::rename(tmp, path);
}

// Bounds-checked little-endian reader that reports file and offset.
class Reader {
public:
    Reader(std::string bytes, std::string file) : bytes_(std::move(bytes)), file_(std::move(file)) {}

    void need(std::size_t n, const char* what) const {
        if (pos_ + n > bytes_.size()) {
            throw FormatError(file_ + ": truncated at byte offset " + std::to_string(pos_) + " while reading " + what +
                              " (" + std::to_string(n) + " bytes needed, " + std::to_string(bytes_.size() - pos_) +
                              " available)");
        }
    }
    std::string bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<std::uint8_t>(bytes_[pos_++]);
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        std::uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(static_cast<std::uint8_t>(bytes_[pos_ + i]) << (8 * i));
        pos_ += 2;
        return v;
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t{static_cast<std::uint8_t>(bytes_[pos_ + i])} << (8 * i);
        pos_ += 4;
        return v;
    }
    float f32(const char* what) {
        const std::uint32_t bits = u32(what);
        float f;
        std::memcpy(&f, &bits, 4);
        return f;
    }
    void expect_magic(std::string_view magic) {
        const std::size_t at = pos_;
        const std::string got = bytes(magic.size(), "magic");
        if (got != magic) {
            throw FormatError(file_ + ": bad magic at byte offset " + std::to_string(at) + " (expected '" +
                              std::string(magic) + "')");
        }
    }
    void expect_end() const {
        if (pos_ != bytes_.size()) {
            throw FormatError(file_ + ": " + std::to_string(bytes_.size() - pos_) + " trailing bytes at offset " +
                              std::to_string(pos_));
        }
    }
    std::size_t pos() const noexcept { return pos_; }
    std::size_t remaining() const noexcept { return bytes_.size() - pos_; }
    const std::string& file() const noexcept { return file_; }

private:
    std::string bytes_;
    std::string file_;
    std::size_t pos_ = 0;
};

inline std::string encode_plane_header(const char* magic, const Tensor<float>& t) {
    require_rank(t.shape(), 3, "dataset tensor");
    std::string out(magic, 4);
    put_u32(out, static_cast<std::uint32_t>(t.dim(1)));
    put_u32(out, static_cast<std::uint32_t>(t.dim(2)));
    put_u32(out, static_cast<std::uint32_t>(t.dim(0)));
    return out;
}

inline std::string encode_image(const Tensor<float>& img) {
    std::string out = encode_plane_header("FSG1", img);
    out.reserve(out.size() + 4 * img.size());
    for (float v : img.values()) put_f32(out, v);
    return out;
}

inline std::string encode_mask(const Tensor<float>& msk) {
    std::string out = encode_plane_header("FSM1", msk);
    for (float v : msk.values()) {
        if (v != 0.0f && v != 1.0f) throw ValidationError("mask values must be 0 or 1");
        out.push_back(static_cast<char>(v != 0.0f));
    }
    return out;
}

inline Shape decode_header(Reader& r, std::string_view magic) {
    r.expect_magic(magic);
    const std::uint32_t h = r.u32("height"), w = r.u32("width"), c = r.u32("channels");
    if (h == 0 || w == 0 || c == 0) throw FormatError(r.file() + ": zero extent in header");
    return Shape{c, h, w};
}

inline Tensor<float> decode_image(std::string bytes, const std::string& file) {
    Reader r(std::move(bytes), file);
    const Shape s = decode_header(r, "FSG1");
    Tensor<float> t(s);
    r.need(4 * t.size(), "image payload");
    for (auto& v : t.values()) v = r.f32("image payload");
    r.expect_end();
    return t;
}

inline Tensor<float> decode_mask(std::string bytes, const std::string& file) {
    Reader r(std::move(bytes), file);
    const Shape s = decode_header(r, "FSM1");
    Tensor<float> t(s);
    r.need(t.size(), "mask payload");
    for (auto& v : t.values()) {
        const std::size_t at = r.pos();
        const std::uint8_t b = r.u8("mask payload");
        if (b > 1) throw FormatError(file + ": mask value " + std::to_string(b) + " at byte offset " + std::to_string(at));
        v = static_cast<float>(b);
    }
    r.expect_end();
    return t;
}

} // namespace io

inline void write_dataset(const fs::path& dir, const Dataset& ds) {
    fs::create_directories(dir);
    nlohmann::ordered_json m;
    m["version"] = 1;
    m["mode"] = ds.mode;
    m["vocabulary"] = ds.vocabulary.names();
    m["samples"] = nlohmann::ordered_json::array();
    for (const auto& s : ds.samples) {
        ds.vocabulary.index_of(s.contrast);
        io::write_file(dir / (s.id + ".img"), io::encode_image(s.image));
        io::write_file(dir / (s.id + ".msk"), io::encode_mask(s.mask));
        m["samples"].push_back({{"id", s.id},
                                {"phantom_id", s.phantom_id},
                                {"contrast", s.contrast},
                                {"image", s.id + ".img"},
                                {"mask", s.id + ".msk"}});
    }
    io::write_file(dir / "manifest.json", m.dump(2) + "\n");
}

inline Dataset read_dataset(const fs::path& dir) {
    const fs::path mpath = dir / "manifest.json";
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(io::read_file(mpath));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(mpath.string() + ": " + e.what());
    }
    try {
        if (m.at("version").get<int>() != 1) {
            throw FormatError(mpath.string() + ": unsupported manifest version " + m.at("version").dump());
        }
        Dataset ds{Vocabulary(m.at("vocabulary").get<std::vector<std::string>>()), m.value("mode", "natural"), {}};
        for (const auto& e : m.at("samples")) {
            Sample s;
            s.id = e.at("id").get<std::string>();
            s.phantom_id = e.at("phantom_id").get<std::string>();
            s.contrast = e.at("contrast").get<std::string>();
            ds.vocabulary.index_of(s.contrast);
            const fs::path ip = dir / e.at("image").get<std::string>(), mp = dir / e.at("mask").get<std::string>();
            s.image = io::decode_image(io::read_file(ip), ip.string());
            s.mask = io::decode_mask(io::read_file(mp), mp.string());
            if (s.image.shape() != s.mask.shape()) {
                throw FormatError(ip.string() + ": image shape " + shape_str(s.image.shape()) +
                                  " differs from mask shape " + shape_str(s.mask.shape()));
            }
            ds.samples.push_back(std::move(s));
        }
        return ds;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(mpath.string() + ": " + e.what());
    }
}

// VocabularyError unless the dataset was labelled with `expected`.
inline void require_vocabulary(const Dataset& ds, const Vocabulary& expected, const std::string& where) {
    if (!(ds.vocabulary == expected)) {
        throw VocabularyError(where + ": dataset vocabulary [" + ds.vocabulary.joined() +
                              "] does not match configured vocabulary [" + expected.joined() + "]");
    }
}

} // namespace filmseg
