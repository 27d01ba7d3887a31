#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "cape/common.hpp"

namespace cape {

// CAPEBLOB: the binary sidecar for dense 64-bit float payloads.
// Layout (all integers and floats little-endian):
//   8 bytes  magic "CAPEBLOB"
//   u32      version (currently 1)
//   u32      number of dimensions
//   u64[n]   extents
//   f64[...] payload, row-major
inline constexpr char kBlobMagic[8] = {'C', 'A', 'P', 'E', 'B', 'L', 'O', 'B'};
inline constexpr std::uint32_t kBlobVersion = 1;

namespace detail {

template <class T>
void write_le(std::ostream& os, T value) {
    static_assert(std::is_integral_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i)
        os.put(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff));
}

template <class T>
T read_le(std::istream& is) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        const int c = is.get();
        if (c < 0) throw ParseError("blob: truncated while reading integer");
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
    }
    return static_cast<T>(v);
}

inline void write_f64_le(std::ostream& os, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, sizeof(bits));
    write_le<std::uint64_t>(os, bits);
}

inline double read_f64_le(std::istream& is) {
    const std::uint64_t bits = read_le<std::uint64_t>(is);
    double d;
    std::memcpy(&d, &bits, sizeof(d));
    return d;
}

}  // namespace detail

inline void write_blob(const std::string& path, const std::vector<std::uint64_t>& extents,
                       const std::vector<double>& payload) {
    std::uint64_t expect = 1;
    for (auto e : extents) expect *= e;
    if (expect != payload.size())
        throw Error("write_blob: extents do not match payload size");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("write_blob: cannot open " + path);
    os.write(kBlobMagic, sizeof(kBlobMagic));
    detail::write_le<std::uint32_t>(os, kBlobVersion);
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(extents.size()));
    for (auto e : extents) detail::write_le<std::uint64_t>(os, e);
    for (double d : payload) detail::write_f64_le(os, d);
    if (!os) throw Error("write_blob: write failed for " + path);
}

struct Blob {
    std::vector<std::uint64_t> extents;
    std::vector<double> payload;
};

inline Blob read_blob(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("read_blob: cannot open " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (is.gcount() != sizeof(magic) || std::memcmp(magic, kBlobMagic, sizeof(magic)) != 0)
        throw ParseError("read_blob: bad magic in " + path);
    const auto version = detail::read_le<std::uint32_t>(is);
    if (version != kBlobVersion)
        throw ParseError("read_blob: unsupported version " + std::to_string(version) + " in " + path);
    const auto ndims = detail::read_le<std::uint32_t>(is);
    if (ndims > 16) throw ParseError("read_blob: implausible dimension count in " + path);
    Blob b;
    std::uint64_t count = 1;
    for (std::uint32_t i = 0; i < ndims; ++i) {
        b.extents.push_back(detail::read_le<std::uint64_t>(is));
        count *= b.extents.back();
    }
    if (count > (1ull << 32)) throw ParseError("read_blob: implausible payload size in " + path);
    b.payload.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) b.payload.push_back(detail::read_f64_le(is));
    return b;
}

}  // namespace cape
