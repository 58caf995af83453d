#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace heed {

// One corpus sample worth of quantized density scalars (visual positions only).
struct CacheEntry {
    uint64_t sample_id = 0;
    std::vector<uint8_t> codes;  // one 4-bit code in [0,15] per visual position

    uint32_t n_positions() const { return static_cast<uint32_t>(codes.size()); }
};

struct CodecError : std::runtime_error {
    enum class Kind { BadMagic, BadVersion, Truncated, MisalignedOffset, BadIndex, DuplicateSample, BadInput };
    Kind kind;
    CodecError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

namespace cachefmt {
constexpr char kMagic[8] = {'H', 'E', 'E', 'D', 'C', 'A', 'C', 'H'};
constexpr uint32_t kVersion = 1;
constexpr size_t kAlign = 64;
constexpr size_t kIndexEntrySize = 8 + 8 + 4;  // sample_id, file offset, n_positions

inline size_t align_up(size_t n) { return (n + kAlign - 1) / kAlign * kAlign; }
}  // namespace cachefmt

// 4-bit quantization of a density scalar in [0,1]: round(x*15), halves away
// from zero. Dequantized value is code/15.
inline uint8_t quantize4(double rho_tilde) {
    if (!(rho_tilde >= 0.0 && rho_tilde <= 1.0))
        throw CodecError(CodecError::Kind::BadInput, "quantize4: input outside [0,1]");
    const double scaled = rho_tilde * 15.0;
    const auto code = static_cast<uint8_t>(std::floor(scaled + 0.5));
    return code;
}

inline double dequantize4(uint8_t code) {
    if (code > 15) throw CodecError(CodecError::Kind::BadInput, "dequantize4: code outside [0,15]");
    return static_cast<double>(code) / 15.0;
}

// File size the encoder will produce, computed without materializing anything.
// Header and index are padded to the 64-byte payload alignment, and each
// sample's nibble block is padded to a 64-byte boundary.
inline uint64_t cache_file_size(const std::vector<uint64_t>& positions_per_sample) {
    uint64_t size = cachefmt::align_up(8 + 4 + 4 + cachefmt::kIndexEntrySize * positions_per_sample.size());
    for (uint64_t n : positions_per_sample) size += cachefmt::align_up((n + 1) / 2);
    return size;
}

namespace detail {
template <typename T>
void put_le(std::vector<uint8_t>& out, T v) {
    for (size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const std::vector<uint8_t>& in, size_t& pos) {
    if (pos + sizeof(T) > in.size()) throw CodecError(CodecError::Kind::Truncated, "cache: truncated header/index");
    T v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(in[pos + i]) << (8 * i);
    pos += sizeof(T);
    return v;
}
}  // namespace detail

// Layout: magic(8) version(4) n_samples(4), index entries, zero pad to 64,
// then per-sample nibble blocks each starting on a 64-byte boundary. Within a
// byte the low nibble holds the earlier position; an odd count pads the final
// high nibble with zero. Integers are little-endian.
inline std::vector<uint8_t> encode_cache(const std::vector<CacheEntry>& entries) {
    std::set<uint64_t> seen;
    for (const auto& e : entries) {
        if (!seen.insert(e.sample_id).second)
            throw CodecError(CodecError::Kind::DuplicateSample,
                             "encode_cache: duplicate sample_id " + std::to_string(e.sample_id));
        if (e.codes.empty())
            throw CodecError(CodecError::Kind::BadInput,
                             "encode_cache: sample " + std::to_string(e.sample_id) +
                                 " has no positions (empty blocks would tie payload offsets)");
        for (uint8_t c : e.codes)
            if (c > 15) throw CodecError(CodecError::Kind::BadInput, "encode_cache: code outside [0,15]");
    }

    const size_t header_size = 8 + 4 + 4 + cachefmt::kIndexEntrySize * entries.size();
    const size_t payload_start = cachefmt::align_up(header_size);

    std::vector<uint8_t> out;
    out.insert(out.end(), cachefmt::kMagic, cachefmt::kMagic + 8);
    detail::put_le<uint32_t>(out, cachefmt::kVersion);
    detail::put_le<uint32_t>(out, static_cast<uint32_t>(entries.size()));

    size_t offset = payload_start;
    for (const auto& e : entries) {
        detail::put_le<uint64_t>(out, e.sample_id);
        detail::put_le<uint64_t>(out, offset);
        detail::put_le<uint32_t>(out, e.n_positions());
        offset += cachefmt::align_up((e.codes.size() + 1) / 2);
    }
    out.resize(payload_start, 0);

    for (const auto& e : entries) {
        const size_t block_start = out.size();
        for (size_t i = 0; i < e.codes.size(); i += 2) {
            uint8_t byte = e.codes[i] & 0x0f;
            if (i + 1 < e.codes.size()) byte |= static_cast<uint8_t>(e.codes[i + 1] & 0x0f) << 4;
            out.push_back(byte);
        }
        out.resize(block_start + cachefmt::align_up((e.codes.size() + 1) / 2), 0);
    }
    return out;
}

inline std::vector<CacheEntry> decode_cache(const std::vector<uint8_t>& bytes) {
    size_t pos = 0;
    if (bytes.size() < 16) throw CodecError(CodecError::Kind::Truncated, "cache: shorter than header");
    if (std::memcmp(bytes.data(), cachefmt::kMagic, 8) != 0)
        throw CodecError(CodecError::Kind::BadMagic, "cache: bad magic");
    pos = 8;
    const auto version = detail::get_le<uint32_t>(bytes, pos);
    if (version != cachefmt::kVersion)
        throw CodecError(CodecError::Kind::BadVersion, "cache: unsupported version " + std::to_string(version));
    const auto n_samples = detail::get_le<uint32_t>(bytes, pos);

    std::vector<CacheEntry> entries(n_samples);
    uint64_t prev_offset = 0;
    std::vector<uint64_t> offsets(n_samples);
    std::set<uint64_t> seen;
    for (uint32_t s = 0; s < n_samples; ++s) {
        entries[s].sample_id = detail::get_le<uint64_t>(bytes, pos);
        offsets[s] = detail::get_le<uint64_t>(bytes, pos);
        const auto n = detail::get_le<uint32_t>(bytes, pos);
        entries[s].codes.resize(n);
        if (!seen.insert(entries[s].sample_id).second)
            throw CodecError(CodecError::Kind::DuplicateSample, "cache: duplicate sample_id in index");
        if (offsets[s] % cachefmt::kAlign != 0)
            throw CodecError(CodecError::Kind::MisalignedOffset, "cache: payload offset not 64-byte aligned");
        if (s > 0 && offsets[s] <= prev_offset)
            throw CodecError(CodecError::Kind::BadIndex, "cache: offsets not strictly increasing");
        prev_offset = offsets[s];
    }

    for (uint32_t s = 0; s < n_samples; ++s) {
        auto& e = entries[s];
        const size_t n_bytes = (e.codes.size() + 1) / 2;
        if (offsets[s] + n_bytes > bytes.size())
            throw CodecError(CodecError::Kind::Truncated, "cache: truncated payload");
        for (size_t i = 0; i < e.codes.size(); ++i) {
            const uint8_t byte = bytes[offsets[s] + i / 2];
            e.codes[i] = (i % 2 == 0) ? (byte & 0x0f) : (byte >> 4);
        }
    }
    return entries;
}

// Dequantized density values for one decoded entry. Downstream weight
// computation treats these as the per-image density signal (text-side values
// are derived at load time by sequence_weights).
inline std::vector<double> entry_rho(const CacheEntry& e) {
    std::vector<double> rho(e.codes.size());
    for (size_t i = 0; i < rho.size(); ++i) rho[i] = dequantize4(e.codes[i]);
    return rho;
}

}  // namespace heed
