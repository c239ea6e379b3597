#pragma once

#include "kvcore/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace kvcore {

enum class Kind : std::uint8_t { Key = 0, Value = 1 };
enum class DType : std::uint8_t { F32 = 0 };

std::string_view kind_name(Kind kind);
/// Accepts "key" or "value".
Kind parse_kind(std::string_view name);

/// Fixed 32-byte header of a KVCR activation stream.
///
///   0 magic "KVCR" | 4 version u32 | 8 layer u32 | 12 feature_dim u32
///   16 kind u8 | 17 dtype u8 | 18 reserved u16 | 20 token_count u64
///   28 reserved u32 | 32 payload: token_count × feature_dim f32, row-major
///
/// All integers little-endian.
struct StreamHeader {
    static constexpr std::string_view kMagic = "KVCR";
    static constexpr std::uint32_t kVersion = 1;
    static constexpr std::size_t kBytes = 32;

    std::uint32_t version = kVersion;
    std::uint32_t layer_index = 0;
    std::uint32_t feature_dim = 0;
    Kind kind = Kind::Key;
    DType dtype = DType::F32;
    std::uint64_t token_count = 0;

    std::uint64_t payload_bytes() const noexcept { return token_count * feature_dim * sizeof(float); }
    bool operator==(const StreamHeader&) const = default;
};

std::vector<unsigned char> encode_header(const StreamHeader& header);
/// Parses and validates magic, version, dtype and feature_dim.
StreamHeader decode_header(std::span<const unsigned char> bytes, const std::string& source);

/// `layer{L}_{key|value}.kvcr`
std::string stream_filename(std::uint32_t layer, Kind kind);

/// A contiguous run of rows cut from a stream.
struct BatchChunk {
    DenseMatrix matrix;
    std::uint64_t token_offset = 0;
};

/// Incremental writer. Rows are validated and appended; finish() checks the
/// row count against the header and renames the temp file into place.
class StreamWriter {
public:
    StreamWriter(std::filesystem::path path, const StreamHeader& header);
    ~StreamWriter();
    StreamWriter(const StreamWriter&) = delete;
    StreamWriter& operator=(const StreamWriter&) = delete;

    void append(std::span<const double> row);
    void append(const DenseMatrix& rows);
    void finish();

    std::uint64_t rows_written() const noexcept { return written_; }

private:
    std::filesystem::path path_;
    std::filesystem::path tmp_;
    StreamHeader header_;
    std::ofstream out_;
    std::uint64_t written_ = 0;
    std::vector<unsigned char> scratch_;
    bool finished_ = false;
};

void write_stream(const std::filesystem::path& path, const StreamHeader& header, const DenseMatrix& rows);
void write_stream(const std::filesystem::path& path, const StreamHeader& header,
                  std::span<const std::vector<double>> rows);

/// Lazy reader over one KVCR file. Holds at most one batch of payload in
/// memory; file size is checked against the header on open.
class ActivationStream {
public:
    static ActivationStream open(const std::filesystem::path& path);

    const StreamHeader& header() const noexcept { return header_; }
    const std::filesystem::path& path() const noexcept { return path_; }
    std::uint64_t tokens_read() const noexcept { return next_token_; }
    bool exhausted() const noexcept { return next_token_ >= header_.token_count; }

    /// Reads one row into `out` (size feature_dim). Returns false at the end.
    bool next_row(std::span<double> out);
    /// Reads up to `max_rows` rows; std::nullopt at the end.
    std::optional<BatchChunk> next_batch(std::size_t max_rows);

private:
    ActivationStream() = default;
    void read_rows(std::size_t count, std::span<double> out);

    std::filesystem::path path_;
    StreamHeader header_;
    std::ifstream in_;
    std::uint64_t next_token_ = 0;
    std::vector<unsigned char> buffer_;
};

/// Partitions a stream into consecutive chunks of `batch_size` rows (the last
/// one may be shorter).
class BatchIterator {
public:
    BatchIterator(ActivationStream& stream, std::size_t batch_size);
    std::optional<BatchChunk> next() { return stream_->next_batch(batch_size_); }

private:
    ActivationStream* stream_;
    std::size_t batch_size_;
};

BatchIterator batch_iter(ActivationStream& stream, std::size_t batch_size);

/// Reads the whole stream into memory. Test and small-instance helper.
DenseMatrix read_all(const std::filesystem::path& path);

} // namespace kvcore
