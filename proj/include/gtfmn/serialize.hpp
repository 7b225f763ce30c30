#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gtfmn/tensor.hpp"

// Little-endian tensor container used by checkpoints:
//   magic "TNSR", u32 version, u32 entry count, then per entry
//   u32 name length, name bytes (UTF-8), u8 dtype (0=f32, 1=f64),
//   u8 rank, u64 extents[rank], raw row-major payload.

namespace gtfmn {

constexpr char kTensorMagic[4] = {'T', 'N', 'S', 'R'};
constexpr std::uint32_t kTensorFormatVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename Scalar>
constexpr DType dtype_of() {
    if constexpr (std::is_same_v<Scalar, float>) {
        return DType::f32;
    } else {
        static_assert(std::is_same_v<Scalar, double>);
        return DType::f64;
    }
}

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    os.write(b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 8);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("tensor container: truncated stream");
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
           (std::uint32_t(b[3]) << 24);
}

inline std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw std::runtime_error("tensor container: truncated stream");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
    return v;
}

template <typename Scalar>
void put_payload(std::ostream& os, const Scalar* p, std::size_t n) {
    // IEEE-754 bit patterns written byte-for-byte little endian.
    using Bits = std::conditional_t<sizeof(Scalar) == 4, std::uint32_t, std::uint64_t>;
    for (std::size_t i = 0; i < n; ++i) {
        Bits bits;
        std::memcpy(&bits, &p[i], sizeof(Scalar));
        char b[sizeof(Scalar)];
        for (std::size_t k = 0; k < sizeof(Scalar); ++k)
            b[k] = static_cast<char>((bits >> (8 * k)) & 0xff);
        os.write(b, sizeof(Scalar));
    }
}

template <typename Scalar>
void get_payload(std::istream& is, Scalar* p, std::size_t n) {
    using Bits = std::conditional_t<sizeof(Scalar) == 4, std::uint32_t, std::uint64_t>;
    std::vector<unsigned char> buf(n * sizeof(Scalar));
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!is) throw std::runtime_error("tensor container: truncated payload");
    for (std::size_t i = 0; i < n; ++i) {
        Bits bits = 0;
        for (std::size_t k = 0; k < sizeof(Scalar); ++k)
            bits |= Bits(buf[i * sizeof(Scalar) + k]) << (8 * k);
        std::memcpy(&p[i], &bits, sizeof(Scalar));
    }
}

} // namespace detail

template <typename Scalar>
struct NamedTensor {
    std::string name;
    Tensor<Scalar> tensor;
};

template <typename Scalar>
void write_tensor_container(std::ostream& os, const std::vector<NamedTensor<Scalar>>& entries) {
    os.write(kTensorMagic, 4);
    detail::put_u32(os, kTensorFormatVersion);
    detail::put_u32(os, static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
        detail::put_u32(os, static_cast<std::uint32_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        os.put(static_cast<char>(dtype_of<Scalar>()));
        os.put(static_cast<char>(e.tensor.rank()));
        for (std::size_t d = 0; d < e.tensor.rank(); ++d) {
            detail::put_u64(os, e.tensor.extent(d));
        }
        detail::put_payload(os, e.tensor.data(), e.tensor.numel());
    }
    if (!os) throw std::runtime_error("tensor container: write failed");
}

template <typename Scalar>
std::vector<NamedTensor<Scalar>> read_tensor_container(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kTensorMagic, 4) != 0) {
        throw std::runtime_error("tensor container: bad magic bytes");
    }
    const std::uint32_t version = detail::get_u32(is);
    if (version != kTensorFormatVersion) {
        throw std::runtime_error("tensor container: unsupported format version " +
                                 std::to_string(version));
    }
    const std::uint32_t count = detail::get_u32(is);
    std::vector<NamedTensor<Scalar>> entries;
    entries.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = detail::get_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const int dtype = is.get();
        const int rank = is.get();
        if (!is || rank < 0) throw std::runtime_error("tensor container: truncated entry header");
        if (dtype != static_cast<int>(dtype_of<Scalar>())) {
            throw std::runtime_error("tensor container: entry '" + name +
                                     "' has dtype code " + std::to_string(dtype) +
                                     ", expected " +
                                     std::to_string(static_cast<int>(dtype_of<Scalar>())));
        }
        Shape shape(static_cast<std::size_t>(rank));
        for (auto& d : shape) d = static_cast<std::size_t>(detail::get_u64(is));
        Tensor<Scalar> t = Tensor<Scalar>::zeros(shape);
        detail::get_payload(is, t.data(), t.numel());
        entries.push_back({std::move(name), std::move(t)});
    }
    return entries;
}

template <typename Scalar>
void save_tensors(const std::string& path, const std::vector<NamedTensor<Scalar>>& entries) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    write_tensor_container(os, entries);
}

template <typename Scalar>
std::vector<NamedTensor<Scalar>> load_tensors(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open for reading: " + path);
    return read_tensor_container<Scalar>(is);
}

} // namespace gtfmn
