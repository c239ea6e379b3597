#include "kvcore/stream.hpp"

#include "kvcore/binary_io.hpp"
#include "kvcore/error.hpp"

#include <cmath>

namespace kvcore {

std::string_view kind_name(Kind kind) { return kind == Kind::Key ? "key" : "value"; }

Kind parse_kind(std::string_view name) {
    if (name == "key") return Kind::Key;
    if (name == "value") return Kind::Value;
    throw ArgumentError("unknown kind \"" + std::string(name) + "\" (expected key or value)");
}

std::vector<unsigned char> encode_header(const StreamHeader& h) {
    std::vector<unsigned char> out;
    out.reserve(StreamHeader::kBytes);
    io::put_bytes(out, StreamHeader::kMagic);
    io::put_le<std::uint32_t>(out, h.version);
    io::put_le<std::uint32_t>(out, h.layer_index);
    io::put_le<std::uint32_t>(out, h.feature_dim);
    io::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(h.kind));
    io::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(h.dtype));
    io::put_le<std::uint16_t>(out, 0);
    io::put_le<std::uint64_t>(out, h.token_count);
    io::put_le<std::uint32_t>(out, 0);
    return out;
}

StreamHeader decode_header(std::span<const unsigned char> bytes, const std::string& source) {
    io::ByteReader r(bytes, source);
    r.expect_magic(StreamHeader::kMagic);
    StreamHeader h;
    h.version = r.read<std::uint32_t>();
    if (h.version != StreamHeader::kVersion) {
        throw FormatError(source + ": unsupported version " + std::to_string(h.version) + " at byte offset 4");
    }
    h.layer_index = r.read<std::uint32_t>();
    h.feature_dim = r.read<std::uint32_t>();
    if (h.feature_dim == 0) throw FormatError(source + ": feature_dim is 0 at byte offset 12");
    const auto kind = r.read<std::uint8_t>();
    if (kind > 1) throw FormatError(source + ": invalid kind " + std::to_string(kind) + " at byte offset 16");
    h.kind = static_cast<Kind>(kind);
    const auto dtype = r.read<std::uint8_t>();
    if (dtype != 0) throw FormatError(source + ": unsupported dtype " + std::to_string(dtype) + " at byte offset 17");
    h.dtype = DType::F32;
    (void)r.read<std::uint16_t>();
    h.token_count = r.read<std::uint64_t>();
    (void)r.read<std::uint32_t>();
    return h;
}

std::string stream_filename(std::uint32_t layer, Kind kind) {
    return "layer" + std::to_string(layer) + "_" + std::string(kind_name(kind)) + ".kvcr";
}

StreamWriter::StreamWriter(std::filesystem::path path, const StreamHeader& header)
    : path_(std::move(path)), header_(header) {
    if (header_.feature_dim == 0) throw ArgumentError("write_stream: feature_dim must be >= 1");
    if (header_.version != StreamHeader::kVersion) throw ArgumentError("write_stream: version must be 1");
    tmp_ = path_;
    tmp_ += ".partial";
    out_.open(tmp_, std::ios::binary | std::ios::trunc);
    if (!out_) throw IoError("cannot open " + tmp_.string() + " for writing");
    const auto bytes = encode_header(header_);
    out_.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

StreamWriter::~StreamWriter() {
    if (!finished_) {
        out_.close();
        std::error_code ec;
        std::filesystem::remove(tmp_, ec);
    }
}

void StreamWriter::append(std::span<const double> row) {
    if (finished_) throw ArgumentError("write_stream: append after finish");
    if (row.size() != header_.feature_dim) {
        throw ShapeError("write_stream: row " + std::to_string(written_) + " has " + std::to_string(row.size()) +
                         " entries, header feature_dim is " + std::to_string(header_.feature_dim));
    }
    if (written_ >= header_.token_count) {
        throw ShapeError("write_stream: more rows than header token_count " + std::to_string(header_.token_count));
    }
    scratch_.clear();
    for (double x : row) {
        const auto f = static_cast<float>(x);
        if (!std::isfinite(f)) {
            throw NumericalError("write_stream: non-finite value at token " + std::to_string(written_));
        }
        io::put_f32(scratch_, f);
    }
    out_.write(reinterpret_cast<const char*>(scratch_.data()), static_cast<std::streamsize>(scratch_.size()));
    ++written_;
}

void StreamWriter::append(const DenseMatrix& rows) {
    for (std::size_t r = 0; r < rows.rows(); ++r) append(rows.row(r));
}

void StreamWriter::finish() {
    if (finished_) return;
    if (written_ != header_.token_count) {
        throw ShapeError("write_stream: wrote " + std::to_string(written_) + " rows, header token_count is " +
                         std::to_string(header_.token_count));
    }
    out_.flush();
    if (!out_) throw IoError("write failed for " + tmp_.string());
    out_.close();
    std::error_code ec;
    std::filesystem::rename(tmp_, path_, ec);
    if (ec) throw IoError("cannot rename " + tmp_.string() + " onto " + path_.string() + ": " + ec.message());
    finished_ = true;
}

void write_stream(const std::filesystem::path& path, const StreamHeader& header, const DenseMatrix& rows) {
    StreamWriter w(path, header);
    w.append(rows);
    w.finish();
}

void write_stream(const std::filesystem::path& path, const StreamHeader& header,
                  std::span<const std::vector<double>> rows) {
    StreamWriter w(path, header);
    for (const auto& row : rows) w.append(row);
    w.finish();
}

ActivationStream ActivationStream::open(const std::filesystem::path& path) {
    ActivationStream s;
    s.path_ = path;
    s.in_.open(path, std::ios::binary);
    if (!s.in_) throw IoError("cannot open " + path.string());

    std::vector<unsigned char> head(StreamHeader::kBytes);
    s.in_.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
    head.resize(static_cast<std::size_t>(s.in_.gcount()));
    s.header_ = decode_header(head, path.string());

    const auto file_size = std::filesystem::file_size(path);
    const auto expected = s.header_.payload_bytes();
    const auto actual = file_size - StreamHeader::kBytes;
    if (actual != expected) {
        throw FormatError(path.string() + ": payload size mismatch, expected " + std::to_string(expected) +
                          " bytes (" + std::to_string(s.header_.token_count) + " tokens x " +
                          std::to_string(s.header_.feature_dim) + " x 4), found " + std::to_string(actual) +
                          (actual < expected ? " (truncated)" : " (trailing bytes)"));
    }
    return s;
}

void ActivationStream::read_rows(std::size_t count, std::span<double> out) {
    const std::size_t dim = header_.feature_dim;
    const std::size_t nbytes = count * dim * sizeof(float);
    buffer_.resize(nbytes);
    in_.read(reinterpret_cast<char*>(buffer_.data()), static_cast<std::streamsize>(nbytes));
    if (static_cast<std::size_t>(in_.gcount()) != nbytes) {
        const auto offset = StreamHeader::kBytes + next_token_ * dim * sizeof(float);
        throw FormatError(path_.string() + ": truncated payload at byte offset " + std::to_string(offset) +
                          ", expected " + std::to_string(nbytes) + " bytes, got " + std::to_string(in_.gcount()));
    }
    for (std::size_t r = 0; r < count; ++r) {
        for (std::size_t c = 0; c < dim; ++c) {
            const std::size_t i = r * dim + c;
            const float f = io::get_f32(buffer_.data() + i * sizeof(float));
            if (!std::isfinite(f)) {
                const auto token = next_token_ + r;
                const auto offset = StreamHeader::kBytes + (token * dim + c) * sizeof(float);
                throw FormatError(path_.string() + ": non-finite value at token " + std::to_string(token) +
                                  " (byte offset " + std::to_string(offset) + ")");
            }
            out[i] = static_cast<double>(f);
        }
    }
    next_token_ += count;
}

bool ActivationStream::next_row(std::span<double> out) {
    if (exhausted()) return false;
    if (out.size() != header_.feature_dim) {
        throw ShapeError("next_row: output span has " + std::to_string(out.size()) + " entries, feature_dim is " +
                         std::to_string(header_.feature_dim));
    }
    read_rows(1, out);
    return true;
}

std::optional<BatchChunk> ActivationStream::next_batch(std::size_t max_rows) {
    if (max_rows == 0) throw ArgumentError("batch size must be >= 1");
    if (exhausted()) return std::nullopt;
    const auto count = static_cast<std::size_t>(std::min<std::uint64_t>(max_rows, header_.token_count - next_token_));
    BatchChunk chunk{DenseMatrix(count, header_.feature_dim), next_token_};
    read_rows(count, chunk.matrix.data());
    return chunk;
}

BatchIterator::BatchIterator(ActivationStream& stream, std::size_t batch_size)
    : stream_(&stream), batch_size_(batch_size) {
    if (batch_size == 0) throw ArgumentError("batch_iter: batch_size must be >= 1");
}

BatchIterator batch_iter(ActivationStream& stream, std::size_t batch_size) { return {stream, batch_size}; }

DenseMatrix read_all(const std::filesystem::path& path) {
    auto s = ActivationStream::open(path);
    DenseMatrix out(static_cast<std::size_t>(s.header().token_count), s.header().feature_dim);
    if (out.rows() > 0) {
        auto chunk = s.next_batch(out.rows());
        out = std::move(chunk->matrix);
    }
    return out;
}

} // namespace kvcore
