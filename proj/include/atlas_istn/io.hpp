// ATN1 tensor blobs and 8-bit PGM images.
//
// ATN1 layout: "ATN1", u8 rank, rank x u32 dims (little-endian), then the
// f32 payload (little-endian), row-major.

#pragma once

#include <algorithm>
#include <cctype>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "atlas_istn/tensor.hpp"

namespace atlas_istn {

class io_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
    return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
           (std::uint32_t(p[3]) << 24);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_atn1(const Tensor<float>& t) {
    if (t.rank() > 255) throw io_error("ATN1: rank too large");
    std::vector<std::uint8_t> out{'A', 'T', 'N', '1', std::uint8_t(t.rank())};
    for (std::size_t d : t.shape()) {
        if (d > 0xffffffffu) throw io_error("ATN1: dimension too large");
        detail::put_u32(out, std::uint32_t(d));
    }
    out.reserve(out.size() + 4 * t.numel());
    for (float v : t.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
    return out;
}

inline Tensor<float> decode_atn1(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 5 || std::memcmp(bytes.data(), "ATN1", 4) != 0) throw io_error("ATN1: bad magic");
    const std::size_t rank = bytes[4];
    if (bytes.size() < 5 + 4 * rank) throw io_error("ATN1: truncated header");
    Shape shape(rank);
    for (std::size_t i = 0; i < rank; ++i) shape[i] = detail::get_u32(bytes.data() + 5 + 4 * i);
    const std::size_t n = numel_of(shape);
    const std::size_t off = 5 + 4 * rank;
    if (bytes.size() != off + 4 * n)
        throw io_error("ATN1: payload size " + std::to_string(bytes.size() - off) + " does not match shape " +
                       shape_str(shape));
    std::vector<float> values(n);
    for (std::size_t i = 0; i < n; ++i) values[i] = std::bit_cast<float>(detail::get_u32(bytes.data() + off + 4 * i));
    return Tensor<float>(std::move(shape), std::move(values));
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw io_error("write failed: " + path.string());
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    write_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

inline std::string read_text(const std::filesystem::path& path) {
    auto b = read_bytes(path);
    return std::string(b.begin(), b.end());
}

inline void save_atn1(const std::filesystem::path& path, const Tensor<float>& t) { write_bytes(path, encode_atn1(t)); }
inline Tensor<float> load_atn1(const std::filesystem::path& path) { return decode_atn1(read_bytes(path)); }

// Binary PGM (P5), maxval 255.
struct GrayImage {
    std::size_t height = 0, width = 0;
    std::vector<std::uint8_t> pixels;
};

inline std::vector<std::uint8_t> encode_pgm(const GrayImage& img) {
    const std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), img.pixels.begin(), img.pixels.end());
    return out;
}

inline GrayImage decode_pgm(const std::vector<std::uint8_t>& bytes) {
    std::size_t pos = 0;
    auto token = [&]() {
        while (pos < bytes.size() && (std::isspace(bytes[pos]) || bytes[pos] == '#')) {
            if (bytes[pos] == '#')
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            else
                ++pos;
        }
        std::string s;
        while (pos < bytes.size() && !std::isspace(bytes[pos])) s.push_back(char(bytes[pos++]));
        return s;
    };
    if (token() != "P5") throw io_error("PGM: not a P5 file");
    GrayImage img;
    img.width = std::stoul(token());
    img.height = std::stoul(token());
    if (token() != "255") throw io_error("PGM: only maxval 255 supported");
    ++pos;
    if (bytes.size() - pos != img.width * img.height) throw io_error("PGM: payload size mismatch");
    img.pixels.assign(bytes.begin() + std::ptrdiff_t(pos), bytes.end());
    return img;
}

// Maps [lo, hi] linearly onto 0..255 (clamped).
inline GrayImage to_gray(std::span<const float> values, std::size_t h, std::size_t w, float lo = 0.f, float hi = 1.f) {
    GrayImage img{h, w, std::vector<std::uint8_t>(h * w)};
    for (std::size_t i = 0; i < h * w; ++i) {
        const float t = std::clamp((values[i] - lo) / (hi - lo), 0.f, 1.f);
        img.pixels[i] = std::uint8_t(std::lround(t * 255.f));
    }
    return img;
}

inline void save_pgm(const std::filesystem::path& path, const GrayImage& img) { write_bytes(path, encode_pgm(img)); }

}  // namespace atlas_istn
