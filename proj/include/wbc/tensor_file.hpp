#ifndef WBC_TENSOR_FILE_HPP_
#define WBC_TENSOR_FILE_HPP_

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include <boost/crc.hpp>

#include "wbc/errors.hpp"
#include "wbc/head_decoder.hpp"

// Layout (all integers little-endian):
//   0  char[4]  "WBCT"
//   4  u16      version = 1
//   6  u8       endianness marker, 0 = little
//   7  u8       scale_count
//   8  per scale: u32 grid_h, u32 grid_w, u32 depth
//      then per scale: grid_h*grid_w*depth IEEE-754 binary32 values, [y][x][anchor][attr]
//   .. u32      CRC-32 (IEEE 802.3) of every preceding byte
namespace wbc {

inline constexpr std::uint16_t kTensorFileVersion = 1;
inline constexpr std::size_t kTensorHeaderSize = 8;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[at + static_cast<std::size_t>(i)]) << (8 * i);
    return v;
}

inline std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
    boost::crc_32_type crc;
    crc.process_bytes(bytes.data(), bytes.size());
    return crc.checksum();
}

}  // namespace detail

/// Serialises tensors in scale order. Scale indices must be 0..n-1.
inline std::vector<std::uint8_t> write_tensor_file(std::span<const GridTensor> tensors) {
    if (tensors.size() > 255) throw ShapeError("tensor file holds at most 255 scales");
    std::size_t total_values = 0;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        if (tensors[i].scale_index() != static_cast<int>(i))
            throw ShapeError("tensor " + std::to_string(i) + " has scale index " +
                             std::to_string(tensors[i].scale_index()));
        total_values += tensors[i].values().size();
    }
    std::vector<std::uint8_t> out;
    out.reserve(kTensorHeaderSize + 12 * tensors.size() + 4 * total_values + 4);
    for (char c : {'W', 'B', 'C', 'T'}) out.push_back(static_cast<std::uint8_t>(c));
    out.push_back(static_cast<std::uint8_t>(kTensorFileVersion & 0xFF));
    out.push_back(static_cast<std::uint8_t>(kTensorFileVersion >> 8));
    out.push_back(0);
    out.push_back(static_cast<std::uint8_t>(tensors.size()));
    for (const auto& t : tensors) {
        detail::put_u32(out, static_cast<std::uint32_t>(t.grid_h()));
        detail::put_u32(out, static_cast<std::uint32_t>(t.grid_w()));
        detail::put_u32(out, static_cast<std::uint32_t>(t.depth()));
    }
    for (const auto& t : tensors)
        for (float v : t.values()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
    detail::put_u32(out, detail::crc32(out));
    return out;
}

/// Parses a tensor file. Never returns a partially-read tensor: every header,
/// length and checksum test passes before any value is materialised.
inline std::vector<GridTensor> read_tensor_file(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), "WBCT", 4) != 0) throw BadMagicError("tensor file: bad magic");
    if (bytes.size() < kTensorHeaderSize) throw LengthError("tensor file: truncated header");
    const auto version = static_cast<std::uint16_t>(bytes[4] | (bytes[5] << 8));
    if (version != kTensorFileVersion)
        throw UnsupportedVersionError("tensor file: unsupported version " + std::to_string(version));
    if (bytes[6] != 0) throw EndiannessError("tensor file: endianness marker " + std::to_string(bytes[6]) + " unsupported");
    const std::size_t scales = bytes[7];

    const std::size_t dims_end = kTensorHeaderSize + 12 * scales;
    if (bytes.size() < dims_end + 4) throw LengthError("tensor file: truncated scale table");
    std::vector<std::uint32_t> dims(3 * scales);
    std::uint64_t expected = dims_end + 4;
    for (std::size_t s = 0; s < scales; ++s) {
        for (std::size_t k = 0; k < 3; ++k) dims[3 * s + k] = detail::get_u32(bytes, kTensorHeaderSize + 12 * s + 4 * k);
        const std::uint64_t n = static_cast<std::uint64_t>(dims[3 * s]) * dims[3 * s + 1] * dims[3 * s + 2];
        if (n == 0) throw LengthError("tensor file: scale " + std::to_string(s) + " has a zero dimension");
        expected += 4 * n;
        if (expected > bytes.size()) break;
    }
    if (expected != bytes.size())
        throw LengthError("tensor file: declared dims need " + std::to_string(expected) + " bytes, file has " +
                          std::to_string(bytes.size()));
    const std::uint32_t stored = detail::get_u32(bytes, bytes.size() - 4);
    if (detail::crc32(bytes.first(bytes.size() - 4)) != stored) throw CrcError("tensor file: CRC mismatch");

    std::vector<GridTensor> out;
    out.reserve(scales);
    std::size_t at = dims_end;
    for (std::size_t s = 0; s < scales; ++s) {
        const auto h = dims[3 * s], w = dims[3 * s + 1], d = dims[3 * s + 2];
        std::vector<float> values(static_cast<std::size_t>(h) * w * d);
        for (auto& v : values) {
            v = std::bit_cast<float>(detail::get_u32(bytes, at));
            at += 4;
        }
        out.emplace_back(static_cast<int>(s), static_cast<int>(h), static_cast<int>(w), static_cast<int>(d),
                         std::move(values));
    }
    return out;
}

/// Reads and checks the tensors against a head configuration.
inline std::vector<GridTensor> read_tensor_file(std::span<const std::uint8_t> bytes, const HeadSpec& spec) {
    auto tensors = read_tensor_file(bytes);
    if (tensors.size() != static_cast<std::size_t>(spec.num_scales()))
        throw ShapeError("tensor file has " + std::to_string(tensors.size()) + " scales, head expects " +
                         std::to_string(spec.num_scales()));
    for (const auto& t : tensors) validate_grid(t, spec);
    return tensors;
}

}  // namespace wbc

#endif  // WBC_TENSOR_FILE_HPP_
