#pragma once

#include "kvcore/stream.hpp"
#include "kvcore/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace kvcore {

/// Mergeable d×d uncentered second-moment state: gram = Σ_t k_tᵀ k_t.
///
/// Forms a commutative monoid under merge() with a freshly constructed
/// accumulator as identity. Sums are compensated, so the split of rows into
/// shards changes the result by at most a few ulps. Memory is O(d²)
/// regardless of how many rows pass through it.
class CovarianceAccumulator {
public:
    explicit CovarianceAccumulator(std::size_t dim);

    std::size_t dim() const noexcept { return gram_.rows(); }
    const DenseMatrix& gram() const noexcept { return gram_; }
    std::uint64_t tokens_seen() const noexcept { return tokens_seen_; }

    /// gram += rowsᵀ·rows, summed one row at a time so batch boundaries do not
    /// change the result.
    void ingest(const DenseMatrix& rows);
    void ingest(const BatchChunk& chunk) { ingest(chunk.matrix); }
    void ingest_row(std::span<const double> row);

    /// Serialized checkpoint: "KVCK", version u32, dim u32, tokens_seen u64,
    /// then dim² f64 little-endian, row-major.
    std::vector<unsigned char> encode() const;
    static CovarianceAccumulator decode(std::span<const unsigned char> bytes, const std::string& source);
    void save(const std::filesystem::path& path) const;
    static CovarianceAccumulator load(const std::filesystem::path& path);

    friend CovarianceAccumulator merge(const CovarianceAccumulator& a, const CovarianceAccumulator& b);

private:
    void add_upper(std::span<const double> row);
    void publish();

    // Compensated running sum (upper triangle): the exact total is
    // high_ + low_ up to the rounding of the low parts.
    DenseMatrix high_;
    DenseMatrix low_;
    DenseMatrix gram_;
    std::uint64_t tokens_seen_ = 0;
};

CovarianceAccumulator merge(const CovarianceAccumulator& a, const CovarianceAccumulator& b);

inline constexpr double kDefaultRankTol = 1e-10;

/// Singular spectrum and right singular vectors of the streamed matrix.
struct SpectralResult {
    std::uint32_t layer_index = 0;
    Kind kind = Kind::Key;
    std::vector<double> sigma;  // descending, non-negative
    DenseMatrix v;              // dim × dim, orthonormal columns
    std::uint64_t tokens_seen = 0;
    std::size_t numerical_rank = 0;
    double rank_tol = kDefaultRankTol;

    std::size_t dim() const noexcept { return sigma.size(); }
};

/// |{i : sigma[i] > rank_tol · sigma[0]}|, or 0 for an all-zero spectrum.
std::size_t numerical_rank(std::span<const double> sigma, double rank_tol);

/// Eigendecomposes the Gram matrix: σ_i = sqrt(λ_i), V = eigenvectors.
///
/// Eigenvalues inside the Gram rounding floor (dim · 16ε · λ_max) are
/// treated as zero: below it the sign and size of λ carry no information.
SpectralResult finalize(const CovarianceAccumulator& acc, std::uint32_t layer, Kind kind,
                        double rank_tol = kDefaultRankTol);

/// Streams a KVCR file through an accumulator in batches and finalizes it.
SpectralResult analyze_stream(const std::filesystem::path& path, std::size_t batch_size = 4096,
                              double rank_tol = kDefaultRankTol);

/// `layer{L}_{key|value}.kvcs`
std::string spectrum_filename(std::uint32_t layer, Kind kind);

/// Spectrum file: "KVCS", version u32, layer u32, kind u8, pad u8×3, dim u32,
/// numerical_rank u32, tokens_seen u64, rank_tol f64, sigma f64×dim,
/// v f64×dim² row-major. All little-endian.
void save_spectrum(const std::filesystem::path& path, const SpectralResult& spectrum);
SpectralResult load_spectrum(const std::filesystem::path& path);

} // namespace kvcore
