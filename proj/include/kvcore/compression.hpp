#pragma once

#include "kvcore/analysis.hpp"
#include "kvcore/stream.hpp"
#include "kvcore/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

namespace kvcore {

/// Either an absolute rank k or a retain ratio in (0, 1] (k = ceil(ratio·dim)).
class RankSpec {
public:
    static RankSpec absolute(std::size_t k) { return RankSpec(k, 0.0); }
    static RankSpec ratio(double r) { return RankSpec(0, r); }

    /// Resolves against a width; throws ArgumentError when out of range.
    std::size_t resolve(std::size_t dim) const;
    bool is_ratio() const noexcept { return rank_ == 0; }

private:
    RankSpec(std::size_t k, double r) : rank_(k), ratio_(r) {}
    std::size_t rank_;
    double ratio_;
};

/// The rank-k data-dependent replacement of a projection W: W ≈ down · up with
/// down = W·V_k (d_e × k) and up = V_kᵀ (k × d). Caching x·down stores k
/// numbers per token instead of d.
struct CompressionFactors {
    std::uint32_t layer_index = 0;
    Kind kind = Kind::Key;
    std::size_t rank = 0;
    DenseMatrix down;
    DenseMatrix up;
    double retain_ratio = 1.0;

    std::size_t input_dim() const noexcept { return down.rows(); }
    std::size_t output_dim() const noexcept { return up.cols(); }
    /// W̃ = down · up
    DenseMatrix effective_weight() const { return matmul(down, up); }
};

CompressionFactors build_factors(const DenseMatrix& w, const SpectralResult& spectrum, RankSpec retain);

enum class ErrorNorm { Frobenius, Spectral };

/// Minimal rank-k error from the spectrum alone: σ_{k+1} (spectral) or
/// sqrt(Σ_{j>k} σ_j²) (Frobenius).
double predicted_error(const SpectralResult& spectrum, std::size_t k, ErrorNorm norm);

struct CompressionReport {
    double frobenius_error = 0.0;
    double spectral_error = 0.0;
    double relative_error = 0.0;   // frobenius_error / ‖XW‖_F
    double retained_energy = 0.0;  // in [0, 1]
    double reference_norm = 0.0;   // ‖XW‖_F
    std::uint64_t rows = 0;
};

/// Accumulates ‖x_t W − x_t·down·up‖ over batches of input rows without
/// keeping them. The residual Gram is kept (d × d) for the spectral norm.
class ErrorMeter {
public:
    ErrorMeter(const DenseMatrix& w, const CompressionFactors& factors);

    void add(const DenseMatrix& x_rows);
    /// retained_energy comes from `spectrum` when given, else from the
    /// measured residual. Throws NumericalError if nothing (or only zero
    /// rows) was added.
    CompressionReport report(const SpectralResult* spectrum = nullptr) const;

private:
    DenseMatrix w_;
    DenseMatrix down_;
    DenseMatrix up_;
    std::size_t rank_;
    CovarianceAccumulator residual_;
    double residual_sq_ = 0.0;
    double reference_sq_ = 0.0;
};

CompressionReport measured_error(const DenseMatrix& x, const DenseMatrix& w, const CompressionFactors& factors,
                                 const SpectralResult* spectrum = nullptr);
/// `x` is a stream of layer inputs (rows of width d_e).
CompressionReport measured_error(ActivationStream& x, const DenseMatrix& w, const CompressionFactors& factors,
                                 const SpectralResult* spectrum = nullptr, std::size_t batch_size = 4096);

/// ‖XW − X·W·Q·Qᵀ‖_F for a basis Q with orthonormal columns.
double projection_error(const DenseMatrix& x, const DenseMatrix& w, const DenseMatrix& basis);

struct OptimalityReport {
    std::size_t trials = 0;
    double factor_error = 0.0;
    std::vector<double> margins;  // alternative error − factor error, per random trial
    double min_margin = 0.0;
    double max_margin = 0.0;
    double mean_margin = 0.0;
    double baseline_error = 0.0;  // data-independent truncated SVD of W
    double baseline_margin = 0.0;
};

/// Randomized audit of the Eckart–Young optimality of `factors`. Trial t
/// compares against W·Q·Qᵀ for a random orthonormal k-frame drawn from
/// seed + t, plus the truncated SVD of W itself. Throws NumericalError naming
/// every violating seed when an alternative beats the factors by more than
/// 1e-9·max(1, ‖XW‖_F).
OptimalityReport verify_optimality(const DenseMatrix& x, const DenseMatrix& w, const CompressionFactors& factors,
                                   std::size_t trials, std::uint64_t seed);

/// `layer{L}_{key|value}_k{K}.kvcf`
std::string factor_filename(std::uint32_t layer, Kind kind, std::size_t rank);

/// "KVCF", version u32, layer u32, kind u8, pad u8×3, d_e u32, d u32, k u32,
/// down f32 (d_e×k), up f32 (k×d); little-endian, row-major.
void save_factors(const std::filesystem::path& path, const CompressionFactors& factors);
CompressionFactors load_factors(const std::filesystem::path& path);

} // namespace kvcore
