#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace kvcore::io {

// Little-endian encoding helpers shared by every on-disk format.

template <typename T>
void put_le(std::vector<unsigned char>& out, T value) {
    static_assert(std::is_integral_v<T>);
    using U = std::make_unsigned_t<T>;
    auto u = static_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<unsigned char>((u >> (8 * i)) & 0xFFu));
}

inline void put_f32(std::vector<unsigned char>& out, float value) { put_le(out, std::bit_cast<std::uint32_t>(value)); }
inline void put_f64(std::vector<unsigned char>& out, double value) { put_le(out, std::bit_cast<std::uint64_t>(value)); }
inline void put_bytes(std::vector<unsigned char>& out, std::string_view bytes) {
    out.insert(out.end(), bytes.begin(), bytes.end());
}

template <typename T>
T get_le(const unsigned char* p) {
    static_assert(std::is_integral_v<T>);
    using U = std::make_unsigned_t<T>;
    U u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<U>(static_cast<U>(p[i]) << (8 * i));
    return static_cast<T>(u);
}

inline float get_f32(const unsigned char* p) { return std::bit_cast<float>(get_le<std::uint32_t>(p)); }
inline double get_f64(const unsigned char* p) { return std::bit_cast<double>(get_le<std::uint64_t>(p)); }

/// Sequential decoder over an in-memory buffer. Every read is bounds-checked
/// and reports the byte offset on failure.
class ByteReader {
public:
    ByteReader(std::span<const unsigned char> bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

    template <typename T>
    T read() {
        require(sizeof(T));
        T v = get_le<T>(bytes_.data() + pos_);
        pos_ += sizeof(T);
        return v;
    }
    float read_f32() { return std::bit_cast<float>(read<std::uint32_t>()); }
    double read_f64() { return std::bit_cast<double>(read<std::uint64_t>()); }
    std::string read_string(std::size_t n);
    void expect_magic(std::string_view magic);

    std::size_t offset() const noexcept { return pos_; }
    std::size_t remaining() const noexcept { return bytes_.size() - pos_; }
    const std::string& source() const noexcept { return source_; }
    void require(std::size_t n) const;

private:
    std::span<const unsigned char> bytes_;
    std::size_t pos_ = 0;
    std::string source_;
};

std::vector<unsigned char> read_file(const std::filesystem::path& path);

/// Writes through a sibling temp file and renames it over `path`, so readers
/// never observe a half-written file.
void write_file_atomic(const std::filesystem::path& path, std::span<const unsigned char> bytes);
void write_file_atomic(const std::filesystem::path& path, std::string_view text);

/// Streaming variant: `fill` writes into the temp file stream.
void write_file_atomic(const std::filesystem::path& path, const std::function<void(std::ofstream&)>& fill);

} // namespace kvcore::io
