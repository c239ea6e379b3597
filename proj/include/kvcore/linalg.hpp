#pragma once

#include "kvcore/tensor.hpp"

#include <vector>

namespace kvcore {

/// Eigenpairs of a symmetric matrix. Eigenvalues descend; column i of
/// `eigenvectors` belongs to eigenvalues[i].
struct EigenResult {
    std::vector<double> eigenvalues;
    DenseMatrix eigenvectors;
};

/// Thin SVD a = u · diag(sigma) · vᵀ with r = min(rows, cols) columns.
struct SvdResult {
    DenseMatrix u;
    std::vector<double> sigma;
    DenseMatrix v;
};

struct EighOptions {
    int max_sweeps = 100;
    /// Converged once max |off-diagonal| < tolerance · max |A|.
    double tolerance = 1e-12;
    /// Allowed ‖A − Aᵀ‖_max relative to ‖A‖_max.
    double symmetry_tolerance = 1e-8;
};

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// The input is symmetrized as (A + Aᵀ)/2 first. Eigenvalues that are
/// negative by less than 1e-10·λ_max are clamped to zero, so PSD inputs yield
/// PSD spectra. Eigenvectors are sign-canonical (see canonicalize_signs).
///
/// Throws ShapeError for non-square input, ArgumentError when the symmetry
/// defect exceeds the tolerance and NumericalError if the sweep cap is hit.
EigenResult sym_eigh(const DenseMatrix& a, const EighOptions& options = {});

/// Direct thin SVD by one-sided (Hestenes) Jacobi on the matrix itself.
/// Used as the ground-truth oracle for the streaming route; it never forms
/// AᵀA. Left singular vectors for σ below 1e-12·σ_max are filled by
/// orthogonal completion.
SvdResult svd_direct(const DenseMatrix& a);

/// Flips column signs so the largest-magnitude entry of each column is
/// non-negative (ties go to the lowest row index). Returns the applied signs.
std::vector<double> canonicalize_signs(DenseMatrix& columns);

} // namespace kvcore
