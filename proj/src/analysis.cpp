#include "kvcore/analysis.hpp"

#include "kvcore/binary_io.hpp"
#include "kvcore/error.hpp"
#include "kvcore/linalg.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace kvcore {

namespace {

constexpr std::string_view kCheckpointMagic = "KVCK";
constexpr std::string_view kSpectrumMagic = "KVCS";
constexpr std::uint32_t kVersion = 1;

void check_version(io::ByteReader& r) {
    const auto at = r.offset();
    const auto v = r.read<std::uint32_t>();
    if (v != kVersion) {
        throw FormatError(r.source() + ": unsupported version " + std::to_string(v) + " at byte offset " +
                          std::to_string(at));
    }
}

void check_trailing(const io::ByteReader& r) {
    if (r.remaining() != 0) {
        throw FormatError(r.source() + ": " + std::to_string(r.remaining()) + " trailing bytes at byte offset " +
                          std::to_string(r.offset()));
    }
}

} // namespace

CovarianceAccumulator::CovarianceAccumulator(std::size_t dim) {
    if (dim == 0) throw ArgumentError("CovarianceAccumulator: dim must be >= 1");
    gram_ = DenseMatrix(dim, dim);
    high_ = DenseMatrix(dim, dim);
    low_ = DenseMatrix(dim, dim);
}

namespace {

// Error-free transformation: a + b == s + err exactly.
inline void two_sum(double a, double b, double& s, double& err) {
    s = a + b;
    const double bv = s - a;
    err = (a - (s - bv)) + (b - bv);
}

} // namespace

void CovarianceAccumulator::add_upper(std::span<const double> row) {
    const std::size_t d = dim();
    for (std::size_t i = 0; i < d; ++i) {
        const double xi = row[i];
        if (xi == 0.0) continue;
        auto hi = high_.row(i);
        auto lo = low_.row(i);
        for (std::size_t j = i; j < d; ++j) {
            const double p = xi * row[j];
            const double p_err = std::fma(xi, row[j], -p);
            double s, s_err;
            two_sum(hi[j], p, s, s_err);
            hi[j] = s;
            lo[j] += s_err + p_err;
        }
    }
}

void CovarianceAccumulator::publish() {
    const std::size_t d = dim();
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i; j < d; ++j) gram_(i, j) = gram_(j, i) = high_(i, j) + low_(i, j);
}

void CovarianceAccumulator::ingest(const DenseMatrix& rows) {
    if (rows.cols() != dim()) {
        throw ShapeError("ingest_batch: chunk has " + std::to_string(rows.cols()) + " columns, accumulator dim is " +
                         std::to_string(dim()));
    }
    for (std::size_t r = 0; r < rows.rows(); ++r) add_upper(rows.row(r));
    publish();
    tokens_seen_ += rows.rows();
}

void CovarianceAccumulator::ingest_row(std::span<const double> row) {
    if (row.size() != dim()) {
        throw ShapeError("ingest_row: row has " + std::to_string(row.size()) + " entries, accumulator dim is " +
                         std::to_string(dim()));
    }
    add_upper(row);
    publish();
    ++tokens_seen_;
}

CovarianceAccumulator merge(const CovarianceAccumulator& a, const CovarianceAccumulator& b) {
    if (a.dim() != b.dim()) {
        throw ShapeError("merge: accumulator dims differ (" + std::to_string(a.dim()) + " vs " +
                         std::to_string(b.dim()) + ")");
    }
    CovarianceAccumulator out = a;
    const std::size_t d = a.dim();
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = i; j < d; ++j) {
            double s, err;
            two_sum(a.high_(i, j), b.high_(i, j), s, err);
            out.high_(i, j) = s;
            out.low_(i, j) = a.low_(i, j) + b.low_(i, j) + err;
        }
    }
    out.publish();
    out.tokens_seen_ = a.tokens_seen_ + b.tokens_seen_;
    return out;
}

std::vector<unsigned char> CovarianceAccumulator::encode() const {
    std::vector<unsigned char> out;
    out.reserve(20 + gram_.size() * 8);
    io::put_bytes(out, kCheckpointMagic);
    io::put_le<std::uint32_t>(out, kVersion);
    io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(dim()));
    io::put_le<std::uint64_t>(out, tokens_seen_);
    for (double x : gram_.data()) io::put_f64(out, x);
    return out;
}

CovarianceAccumulator CovarianceAccumulator::decode(std::span<const unsigned char> bytes, const std::string& source) {
    io::ByteReader r(bytes, source);
    r.expect_magic(kCheckpointMagic);
    check_version(r);
    const auto dim = r.read<std::uint32_t>();
    if (dim == 0) throw FormatError(source + ": dim is 0 at byte offset 8");
    CovarianceAccumulator acc(dim);
    acc.tokens_seen_ = r.read<std::uint64_t>();
    r.require(static_cast<std::size_t>(dim) * dim * 8);
    for (double& x : acc.gram_.data()) {
        x = r.read_f64();
        if (!std::isfinite(x)) {
            throw FormatError(source + ": non-finite gram entry before byte offset " + std::to_string(r.offset()));
        }
    }
    for (std::size_t i = 0; i < dim; ++i)
        for (std::size_t j = i; j < dim; ++j) acc.high_(i, j) = acc.gram_(i, j);
    check_trailing(r);
    return acc;
}

void CovarianceAccumulator::save(const std::filesystem::path& path) const {
    const auto bytes = encode();
    io::write_file_atomic(path, std::span<const unsigned char>(bytes));
}

CovarianceAccumulator CovarianceAccumulator::load(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path);
    return decode(bytes, path.string());
}

std::size_t numerical_rank(std::span<const double> sigma, double rank_tol) {
    if (sigma.empty() || sigma[0] <= 0.0) return 0;
    std::size_t r = 0;
    for (double s : sigma)
        if (s > rank_tol * sigma[0]) ++r;
    return r;
}

SpectralResult finalize(const CovarianceAccumulator& acc, std::uint32_t layer, Kind kind, double rank_tol) {
    if (!(rank_tol > 0.0 && rank_tol < 1.0)) {
        throw ArgumentError("finalize: rank_tol must lie in (0, 1), got " + std::to_string(rank_tol));
    }
    auto eig = sym_eigh(acc.gram());
    const std::size_t d = acc.dim();
    const double top = eig.eigenvalues.front();
    const double floor = 16.0 * static_cast<double>(d) * std::numeric_limits<double>::epsilon() * top;

    SpectralResult out;
    out.layer_index = layer;
    out.kind = kind;
    out.tokens_seen = acc.tokens_seen();
    out.rank_tol = rank_tol;
    out.sigma.resize(d);
    for (std::size_t i = 0; i < d; ++i) {
        double lambda = eig.eigenvalues[i];
        if (std::abs(lambda) <= floor) lambda = 0.0;
        if (lambda < 0.0) {
            std::ostringstream os;
            os << "finalize: Gram matrix has eigenvalue " << lambda << " below the rounding floor " << -floor
               << "; input is not positive semidefinite";
            throw NumericalError(os.str());
        }
        out.sigma[i] = std::sqrt(lambda);
    }
    out.v = std::move(eig.eigenvectors);
    out.numerical_rank = numerical_rank(out.sigma, rank_tol);
    return out;
}

SpectralResult analyze_stream(const std::filesystem::path& path, std::size_t batch_size, double rank_tol) {
    auto stream = ActivationStream::open(path);
    CovarianceAccumulator acc(stream.header().feature_dim);
    auto batches = batch_iter(stream, batch_size);
    while (auto chunk = batches.next()) acc.ingest(*chunk);
    return finalize(acc, stream.header().layer_index, stream.header().kind, rank_tol);
}

std::string spectrum_filename(std::uint32_t layer, Kind kind) {
    return "layer" + std::to_string(layer) + "_" + std::string(kind_name(kind)) + ".kvcs";
}

void save_spectrum(const std::filesystem::path& path, const SpectralResult& s) {
    const std::size_t d = s.dim();
    if (s.v.rows() != d || s.v.cols() != d) throw ShapeError("save_spectrum: v must be dim x dim");
    std::vector<unsigned char> out;
    io::put_bytes(out, kSpectrumMagic);
    io::put_le<std::uint32_t>(out, kVersion);
    io::put_le<std::uint32_t>(out, s.layer_index);
    io::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(s.kind));
    for (int i = 0; i < 3; ++i) io::put_le<std::uint8_t>(out, 0);
    io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.numerical_rank));
    io::put_le<std::uint64_t>(out, s.tokens_seen);
    io::put_f64(out, s.rank_tol);
    for (double x : s.sigma) io::put_f64(out, x);
    for (double x : s.v.data()) io::put_f64(out, x);
    io::write_file_atomic(path, std::span<const unsigned char>(out));
}

SpectralResult load_spectrum(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path);
    io::ByteReader r(bytes, path.string());
    r.expect_magic(kSpectrumMagic);
    check_version(r);
    SpectralResult s;
    s.layer_index = r.read<std::uint32_t>();
    const auto kind = r.read<std::uint8_t>();
    if (kind > 1) throw FormatError(path.string() + ": invalid kind at byte offset 12");
    s.kind = static_cast<Kind>(kind);
    for (int i = 0; i < 3; ++i) (void)r.read<std::uint8_t>();
    const auto d = r.read<std::uint32_t>();
    if (d == 0) throw FormatError(path.string() + ": dim is 0 at byte offset 16");
    s.numerical_rank = r.read<std::uint32_t>();
    s.tokens_seen = r.read<std::uint64_t>();
    s.rank_tol = r.read_f64();
    r.require((static_cast<std::size_t>(d) + static_cast<std::size_t>(d) * d) * 8);
    s.sigma.resize(d);
    for (double& x : s.sigma) x = r.read_f64();
    s.v = DenseMatrix(d, d);
    for (double& x : s.v.data()) x = r.read_f64();
    check_trailing(r);
    if (s.numerical_rank > d) throw FormatError(path.string() + ": numerical_rank exceeds dim");
    return s;
}

} // namespace kvcore
