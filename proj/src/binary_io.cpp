#include "kvcore/binary_io.hpp"

#include "kvcore/error.hpp"

#include <atomic>
#include <system_error>

namespace kvcore::io {

void ByteReader::require(std::size_t n) const {
    if (remaining() < n) {
        throw FormatError(source_ + ": truncated at byte offset " + std::to_string(pos_) + ": need " +
                          std::to_string(n) + " bytes, have " + std::to_string(remaining()));
    }
}

std::string ByteReader::read_string(std::size_t n) {
    require(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
}

void ByteReader::expect_magic(std::string_view magic) {
    const auto at = pos_;
    const auto got = read_string(magic.size());
    if (got != magic) {
        throw FormatError(source_ + ": bad magic at byte offset " + std::to_string(at) + ", expected \"" +
                          std::string(magic) + "\"");
    }
}

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw IoError("cannot open " + path.string());
    const auto size = static_cast<std::size_t>(in.tellg());
    std::vector<unsigned char> bytes(size);
    in.seekg(0);
    if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
        throw IoError("failed reading " + path.string());
    }
    return bytes;
}

void write_file_atomic(const std::filesystem::path& path, const std::function<void(std::ofstream&)>& fill) {
    static std::atomic<unsigned> counter{0};
    auto tmp = path;
    tmp += ".tmp" + std::to_string(counter.fetch_add(1));
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        fill(out);
        out.flush();
        if (!out) {
            std::error_code ec;
            std::filesystem::remove(tmp, ec);
            throw IoError("write failed for " + tmp.string());
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw IoError("cannot rename temp file onto " + path.string() + ": " + ec.message());
    }
}

void write_file_atomic(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
    write_file_atomic(path, [&](std::ofstream& out) {
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    });
}

void write_file_atomic(const std::filesystem::path& path, std::string_view text) {
    write_file_atomic(path, [&](std::ofstream& out) { out.write(text.data(), static_cast<std::streamsize>(text.size())); });
}

} // namespace kvcore::io
