#include "kvcore/compression.hpp"

#include "kvcore/binary_io.hpp"
#include "kvcore/error.hpp"
#include "kvcore/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace kvcore {

namespace {

constexpr std::string_view kFactorMagic = "KVCF";
constexpr std::uint32_t kFactorVersion = 1;

// Random d×k matrix with orthonormal columns (modified Gram–Schmidt, twice).
DenseMatrix random_frame(std::size_t d, std::size_t k, std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    DenseMatrix q(d, k);
    for (std::size_t c = 0; c < k; ++c) {
        double norm = 0.0;
        do {
            for (std::size_t r = 0; r < d; ++r) q(r, c) = gauss(rng);
            for (int pass = 0; pass < 2; ++pass) {
                for (std::size_t o = 0; o < c; ++o) {
                    double dot = 0.0;
                    for (std::size_t r = 0; r < d; ++r) dot += q(r, o) * q(r, c);
                    for (std::size_t r = 0; r < d; ++r) q(r, c) -= dot * q(r, o);
                }
            }
            norm = 0.0;
            for (std::size_t r = 0; r < d; ++r) norm += q(r, c) * q(r, c);
            norm = std::sqrt(norm);
        } while (norm < 1e-6);
        for (std::size_t r = 0; r < d; ++r) q(r, c) /= norm;
    }
    return q;
}

} // namespace

std::size_t RankSpec::resolve(std::size_t dim) const {
    if (is_ratio()) {
        if (!(ratio_ > 0.0 && ratio_ <= 1.0)) {
            throw ArgumentError("retain ratio must lie in (0, 1], got " + std::to_string(ratio_));
        }
        // Guard against ratio·dim landing a hair above an integer.
        const double scaled = ratio_ * static_cast<double>(dim);
        auto k = static_cast<std::size_t>(std::ceil(scaled - 1e-9 * scaled));
        return std::clamp<std::size_t>(k, 1, dim);
    }
    if (rank_ < 1 || rank_ > dim) {
        throw ArgumentError("retain rank " + std::to_string(rank_) + " outside [1, " + std::to_string(dim) + "]");
    }
    return rank_;
}

CompressionFactors build_factors(const DenseMatrix& w, const SpectralResult& spectrum, RankSpec retain) {
    const std::size_t d = spectrum.dim();
    if (w.cols() != d) {
        throw ShapeError("build_factors: weight " + w.shape_string() + " does not match spectrum dim " +
                         std::to_string(d));
    }
    const std::size_t k = retain.resolve(d);
    const auto vk = spectrum.v.leading_columns(k);
    CompressionFactors f;
    f.layer_index = spectrum.layer_index;
    f.kind = spectrum.kind;
    f.rank = k;
    f.down = matmul(w, vk);
    f.up = vk.transpose();
    f.retain_ratio = static_cast<double>(k) / static_cast<double>(d);
    return f;
}

double predicted_error(const SpectralResult& spectrum, std::size_t k, ErrorNorm norm) {
    const std::size_t d = spectrum.dim();
    if (k < 1 || k > d) throw ArgumentError("predicted_error: k=" + std::to_string(k) + " outside [1, " + std::to_string(d) + "]");
    if (norm == ErrorNorm::Spectral) return k >= spectrum.numerical_rank ? 0.0 : spectrum.sigma[k];
    double tail = 0.0;
    for (std::size_t j = d; j-- > k;) tail += spectrum.sigma[j] * spectrum.sigma[j];
    return std::sqrt(tail);
}

ErrorMeter::ErrorMeter(const DenseMatrix& w, const CompressionFactors& factors)
    : w_(w), down_(factors.down), up_(factors.up), rank_(factors.rank), residual_(std::max<std::size_t>(1, w.cols())) {
    if (factors.down.rows() != w.rows() || factors.up.cols() != w.cols() || factors.down.cols() != factors.up.rows()) {
        throw ShapeError("measured_error: factors down " + factors.down.shape_string() + " / up " +
                         factors.up.shape_string() + " do not fit weight " + w.shape_string());
    }
}

void ErrorMeter::add(const DenseMatrix& x_rows) {
    if (x_rows.cols() != w_.rows()) {
        throw ShapeError("measured_error: input rows " + x_rows.shape_string() + " do not fit weight " +
                         w_.shape_string());
    }
    const auto full = matmul(x_rows, w_);
    auto residual = full - matmul(matmul(x_rows, down_), up_);
    for (double v : full.data()) reference_sq_ += v * v;
    for (double v : residual.data()) residual_sq_ += v * v;
    residual_.ingest(residual);
}

CompressionReport ErrorMeter::report(const SpectralResult* spectrum) const {
    if (residual_.tokens_seen() == 0) throw NumericalError("measured_error: empty input, relative error undefined");
    if (reference_sq_ == 0.0) throw NumericalError("measured_error: ‖XW‖_F is zero, relative error undefined");
    CompressionReport r;
    r.rows = residual_.tokens_seen();
    r.frobenius_error = std::sqrt(residual_sq_);
    r.reference_norm = std::sqrt(reference_sq_);
    r.relative_error = r.frobenius_error / r.reference_norm;
    r.spectral_error = std::sqrt(std::max(0.0, sym_eigh(residual_.gram()).eigenvalues.front()));
    if (spectrum != nullptr) {
        double kept = 0.0;
        double total = 0.0;
        for (std::size_t j = 0; j < spectrum->dim(); ++j) {
            const double e = spectrum->sigma[j] * spectrum->sigma[j];
            total += e;
            if (j < rank_) kept += e;
        }
        r.retained_energy = total > 0.0 ? kept / total : 1.0;
    } else {
        r.retained_energy = 1.0 - residual_sq_ / reference_sq_;
    }
    r.retained_energy = std::clamp(r.retained_energy, 0.0, 1.0);
    return r;
}

CompressionReport measured_error(const DenseMatrix& x, const DenseMatrix& w, const CompressionFactors& factors,
                                 const SpectralResult* spectrum) {
    ErrorMeter meter(w, factors);
    meter.add(x);
    return meter.report(spectrum);
}

CompressionReport measured_error(ActivationStream& x, const DenseMatrix& w, const CompressionFactors& factors,
                                 const SpectralResult* spectrum, std::size_t batch_size) {
    ErrorMeter meter(w, factors);
    auto batches = batch_iter(x, batch_size);
    while (auto chunk = batches.next()) meter.add(chunk->matrix);
    return meter.report(spectrum);
}

double projection_error(const DenseMatrix& x, const DenseMatrix& w, const DenseMatrix& basis) {
    const auto xw = matmul(x, w);
    return frobenius_norm(xw - matmul_nt(matmul(xw, basis), basis));
}

OptimalityReport verify_optimality(const DenseMatrix& x, const DenseMatrix& w, const CompressionFactors& factors,
                                   std::size_t trials, std::uint64_t seed) {
    if (x.rows() > 1024) throw ArgumentError("verify_optimality: instance too large (rows > 1024)");
    const auto xw = matmul(x, w);
    const double slack = 1e-9 * std::max(1.0, frobenius_norm(xw));
    const std::size_t k = factors.rank;
    const std::size_t d = w.cols();

    OptimalityReport rep;
    rep.trials = trials;
    rep.factor_error = frobenius_norm(xw - matmul(matmul(x, factors.down), factors.up));

    std::vector<std::uint64_t> violations;
    for (std::size_t t = 0; t < trials; ++t) {
        const std::uint64_t trial_seed = seed + t;
        std::mt19937_64 rng(trial_seed);
        const auto q = random_frame(d, k, rng);
        const double margin = projection_error(x, w, q) - rep.factor_error;
        rep.margins.push_back(margin);
        if (margin < -slack) violations.push_back(trial_seed);
    }

    // Data-independent baseline: truncated SVD of W, ignoring X.
    const auto svd = svd_direct(w);
    const std::size_t kb = std::min(k, svd.sigma.size());
    DenseMatrix wk(w.rows(), w.cols());
    for (std::size_t j = 0; j < kb; ++j)
        for (std::size_t r = 0; r < w.rows(); ++r)
            for (std::size_t c = 0; c < w.cols(); ++c) wk(r, c) += svd.u(r, j) * svd.sigma[j] * svd.v(c, j);
    rep.baseline_error = frobenius_norm(xw - matmul(x, wk));
    rep.baseline_margin = rep.baseline_error - rep.factor_error;

    if (!rep.margins.empty()) {
        rep.min_margin = *std::min_element(rep.margins.begin(), rep.margins.end());
        rep.max_margin = *std::max_element(rep.margins.begin(), rep.margins.end());
        double sum = 0.0;
        for (double m : rep.margins) sum += m;
        rep.mean_margin = sum / static_cast<double>(rep.margins.size());
    }

    if (!violations.empty() || rep.baseline_margin < -slack) {
        std::ostringstream os;
        os << "verify_optimality: rank-" << k << " factors beaten by";
        if (rep.baseline_margin < -slack) os << " truncated-SVD baseline (margin " << rep.baseline_margin << ")";
        if (!violations.empty()) {
            os << " random alternatives with seeds";
            for (auto s : violations) os << ' ' << s;
        }
        throw NumericalError(os.str());
    }
    return rep;
}

std::string factor_filename(std::uint32_t layer, Kind kind, std::size_t rank) {
    return "layer" + std::to_string(layer) + "_" + std::string(kind_name(kind)) + "_k" + std::to_string(rank) + ".kvcf";
}

void save_factors(const std::filesystem::path& path, const CompressionFactors& f) {
    std::vector<unsigned char> out;
    io::put_bytes(out, kFactorMagic);
    io::put_le<std::uint32_t>(out, kFactorVersion);
    io::put_le<std::uint32_t>(out, f.layer_index);
    io::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(f.kind));
    for (int i = 0; i < 3; ++i) io::put_le<std::uint8_t>(out, 0);
    io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(f.down.rows()));
    io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(f.up.cols()));
    io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(f.rank));
    for (double x : f.down.data()) io::put_f32(out, static_cast<float>(x));
    for (double x : f.up.data()) io::put_f32(out, static_cast<float>(x));
    io::write_file_atomic(path, std::span<const unsigned char>(out));
}

CompressionFactors load_factors(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path);
    io::ByteReader r(bytes, path.string());
    r.expect_magic(kFactorMagic);
    if (const auto v = r.read<std::uint32_t>(); v != kFactorVersion) {
        throw FormatError(path.string() + ": unsupported version " + std::to_string(v) + " at byte offset 4");
    }
    CompressionFactors f;
    f.layer_index = r.read<std::uint32_t>();
    const auto kind = r.read<std::uint8_t>();
    if (kind > 1) throw FormatError(path.string() + ": invalid kind at byte offset 12");
    f.kind = static_cast<Kind>(kind);
    for (int i = 0; i < 3; ++i) (void)r.read<std::uint8_t>();
    const auto de = r.read<std::uint32_t>();
    const auto d = r.read<std::uint32_t>();
    const auto k = r.read<std::uint32_t>();
    if (k == 0 || k > d) throw FormatError(path.string() + ": rank " + std::to_string(k) + " invalid for width " + std::to_string(d));
    r.require((static_cast<std::size_t>(de) * k + static_cast<std::size_t>(k) * d) * 4);
    f.rank = k;
    f.down = DenseMatrix(de, k);
    for (double& x : f.down.data()) x = r.read_f32();
    f.up = DenseMatrix(k, d);
    for (double& x : f.up.data()) x = r.read_f32();
    if (r.remaining() != 0) throw FormatError(path.string() + ": trailing bytes at byte offset " + std::to_string(r.offset()));
    if (!f.down.all_finite() || !f.up.all_finite()) throw FormatError(path.string() + ": non-finite factor entries");
    f.retain_ratio = static_cast<double>(k) / static_cast<double>(d);
    return f;
}

} // namespace kvcore
