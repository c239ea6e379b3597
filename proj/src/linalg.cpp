#include "kvcore/linalg.hpp"

#include "kvcore/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace kvcore {

namespace {

double max_off_diagonal(const DenseMatrix& a) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = i + 1; j < a.cols(); ++j) m = std::max(m, std::abs(a(i, j)));
    return m;
}

// Indices that sort `values` in descending order, stable for ties.
std::vector<std::size_t> descending_order(const std::vector<double>& values) {
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t l, std::size_t r) { return values[l] > values[r]; });
    return order;
}

DenseMatrix permute_columns(const DenseMatrix& m, const std::vector<std::size_t>& order) {
    DenseMatrix out(m.rows(), order.size());
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < order.size(); ++c) out(r, c) = m(r, order[c]);
    return out;
}

double column_dot(const DenseMatrix& m, std::size_t p, std::size_t q) {
    double s = 0.0;
    for (std::size_t r = 0; r < m.rows(); ++r) s += m(r, p) * m(r, q);
    return s;
}

void rotate_columns(DenseMatrix& m, std::size_t p, std::size_t q, double c, double s) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const double mp = m(r, p);
        const double mq = m(r, q);
        m(r, p) = c * mp - s * mq;
        m(r, q) = s * mp + c * mq;
    }
}

// Replaces the columns flagged in `missing` with unit vectors orthogonal to
// every other column. Candidates are the standard basis vectors in order.
void complete_orthonormal(DenseMatrix& u, const std::vector<bool>& missing) {
    const std::size_t m = u.rows();
    std::vector<bool> filled(u.cols());
    for (std::size_t c = 0; c < u.cols(); ++c) filled[c] = !missing[c];
    std::size_t candidate = 0;
    for (std::size_t c = 0; c < u.cols(); ++c) {
        if (filled[c]) continue;
        while (candidate < m) {
            std::vector<double> e(m, 0.0);
            e[candidate++] = 1.0;
            for (int pass = 0; pass < 2; ++pass) {
                for (std::size_t o = 0; o < u.cols(); ++o) {
                    if (!filled[o]) continue;
                    double d = 0.0;
                    for (std::size_t r = 0; r < m; ++r) d += u(r, o) * e[r];
                    for (std::size_t r = 0; r < m; ++r) e[r] -= d * u(r, o);
                }
            }
            double norm = 0.0;
            for (double x : e) norm += x * x;
            norm = std::sqrt(norm);
            if (norm > 0.5) {
                for (std::size_t r = 0; r < m; ++r) u(r, c) = e[r] / norm;
                filled[c] = true;
                break;
            }
        }
        if (!filled[c]) throw NumericalError("svd_direct: orthogonal completion ran out of basis candidates");
    }
}

// One-sided Jacobi for rows >= cols.
SvdResult svd_tall(const DenseMatrix& a) {
    const std::size_t n = a.cols();
    DenseMatrix work = a;
    DenseMatrix v = DenseMatrix::identity(n);
    constexpr int kMaxSweeps = 100;
    constexpr double kEps = 1e-15;

    bool converged = n < 2;
    double worst = 0.0;
    for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
        bool rotated = false;
        worst = 0.0;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double alpha = column_dot(work, p, p);
                const double beta = column_dot(work, q, q);
                const double gamma = column_dot(work, p, q);
                if (alpha == 0.0 || beta == 0.0) continue;
                const double coupling = std::abs(gamma) / std::sqrt(alpha * beta);
                worst = std::max(worst, coupling);
                if (coupling <= kEps) continue;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                rotate_columns(work, p, q, c, s);
                rotate_columns(v, p, q, c, s);
                rotated = true;
            }
        }
        converged = !rotated;
    }
    if (!converged) {
        std::ostringstream os;
        os << "svd_direct: no convergence after " << kMaxSweeps << " sweeps, max column coupling " << worst;
        throw NumericalError(os.str());
    }

    std::vector<double> sigma(n);
    for (std::size_t j = 0; j < n; ++j) sigma[j] = std::sqrt(column_dot(work, j, j));
    const auto order = descending_order(sigma);
    DenseMatrix w = permute_columns(work, order);
    v = permute_columns(v, order);
    std::vector<double> sorted(n);
    for (std::size_t j = 0; j < n; ++j) sorted[j] = sigma[order[j]];

    const double cutoff = n == 0 ? 0.0 : 1e-12 * sorted.front();
    std::vector<bool> missing(n, false);
    for (std::size_t j = 0; j < n; ++j) {
        if (sorted[j] > cutoff && sorted[j] > 0.0) {
            for (std::size_t r = 0; r < w.rows(); ++r) w(r, j) /= sorted[j];
        } else {
            missing[j] = true;
        }
    }
    complete_orthonormal(w, missing);

    const auto signs = canonicalize_signs(v);
    for (std::size_t j = 0; j < n; ++j)
        if (signs[j] < 0)
            for (std::size_t r = 0; r < w.rows(); ++r) w(r, j) = -w(r, j);
    return {std::move(w), std::move(sorted), std::move(v)};
}

} // namespace

std::vector<double> canonicalize_signs(DenseMatrix& columns) {
    std::vector<double> signs(columns.cols(), 1.0);
    for (std::size_t c = 0; c < columns.cols(); ++c) {
        std::size_t best = 0;
        double best_abs = -1.0;
        for (std::size_t r = 0; r < columns.rows(); ++r) {
            const double x = std::abs(columns(r, c));
            if (x > best_abs) {
                best_abs = x;
                best = r;
            }
        }
        if (columns.rows() > 0 && columns(best, c) < 0.0) {
            signs[c] = -1.0;
            for (std::size_t r = 0; r < columns.rows(); ++r) columns(r, c) = -columns(r, c);
        }
    }
    return signs;
}

EigenResult sym_eigh(const DenseMatrix& input, const EighOptions& options) {
    if (input.rows() != input.cols()) throw ShapeError("sym_eigh: matrix is not square: " + input.shape_string());
    if (!input.all_finite()) throw NumericalError("sym_eigh: input has non-finite entries");
    const std::size_t n = input.rows();

    const double scale = max_abs(input);
    double defect = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) defect = std::max(defect, std::abs(input(i, j) - input(j, i)));
    if (defect > options.symmetry_tolerance * scale) {
        std::ostringstream os;
        os << "sym_eigh: symmetry defect " << defect << " exceeds " << options.symmetry_tolerance << " * " << scale;
        throw ArgumentError(os.str());
    }

    DenseMatrix a(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) a(i, j) = 0.5 * (input(i, j) + input(j, i));
    DenseMatrix q = DenseMatrix::identity(n);

    const double threshold = options.tolerance * scale;
    double off = max_off_diagonal(a);
    int sweep = 0;
    while (off > threshold || (off > 0.0 && sweep == 0)) {
        if (sweep == options.max_sweeps) {
            std::ostringstream os;
            os << "sym_eigh: no convergence after " << options.max_sweeps << " sweeps, off-diagonal residual " << off
               << " (threshold " << threshold << ")";
            throw NumericalError(os.str());
        }
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t r = p + 1; r < n; ++r) {
                const double apr = a(p, r);
                if (apr == 0.0) continue;
                const double app = a(p, p);
                const double arr = a(r, r);
                // Negligible against both diagonal entries: drop it.
                if (sweep > 3 && std::abs(app) + 100.0 * std::abs(apr) == std::abs(app) &&
                    std::abs(arr) + 100.0 * std::abs(apr) == std::abs(arr)) {
                    a(p, r) = a(r, p) = 0.0;
                    continue;
                }
                const double theta = (arr - app) / (2.0 * apr);
                const double t = std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p);
                    const double akr = a(k, r);
                    a(k, p) = c * akp - s * akr;
                    a(k, r) = s * akp + c * akr;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k);
                    const double ark = a(r, k);
                    a(p, k) = c * apk - s * ark;
                    a(r, k) = s * apk + c * ark;
                }
                a(p, r) = a(r, p) = 0.0;
                a(p, p) = app - t * apr;
                a(r, r) = arr + t * apr;
                rotate_columns(q, p, r, c, s);
            }
        }
        ++sweep;
        off = max_off_diagonal(a);
    }

    std::vector<double> lambda(n);
    for (std::size_t i = 0; i < n; ++i) lambda[i] = a(i, i);
    const auto order = descending_order(lambda);
    EigenResult out;
    out.eigenvalues.resize(n);
    for (std::size_t i = 0; i < n; ++i) out.eigenvalues[i] = lambda[order[i]];
    out.eigenvectors = permute_columns(q, order);

    const double top = n == 0 ? 0.0 : out.eigenvalues.front();
    if (top > 0.0) {
        for (double& l : out.eigenvalues)
            if (l < 0.0 && l > -1e-10 * top) l = 0.0;
    }
    canonicalize_signs(out.eigenvectors);
    return out;
}

SvdResult svd_direct(const DenseMatrix& a) {
    if (a.rows() == 0 || a.cols() == 0) throw ShapeError("svd_direct: empty matrix " + a.shape_string());
    if (!a.all_finite()) throw NumericalError("svd_direct: input has non-finite entries");
    if (a.rows() >= a.cols()) return svd_tall(a);

    // Wide case: factor the transpose and swap roles, then re-canonicalize on v.
    SvdResult t = svd_tall(a.transpose());
    SvdResult out{std::move(t.v), std::move(t.sigma), std::move(t.u)};
    const auto signs = canonicalize_signs(out.v);
    for (std::size_t j = 0; j < signs.size(); ++j)
        if (signs[j] < 0)
            for (std::size_t r = 0; r < out.u.rows(); ++r) out.u(r, j) = -out.u(r, j);
    return out;
}

} // namespace kvcore
