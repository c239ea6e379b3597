#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace kvcore {

/// Row-major dense matrix of doubles. The only numeric container in the toolkit:
/// activations, weights, Gram matrices and factors all live here.
class DenseMatrix {
public:
    DenseMatrix() = default;
    DenseMatrix(std::size_t rows, std::size_t cols);
    /// Takes ownership of `data`; throws ShapeError if its length is not rows*cols.
    DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static DenseMatrix zeros(std::size_t rows, std::size_t cols) { return {rows, cols}; }
    static DenseMatrix identity(std::size_t n);
    static DenseMatrix diagonal(std::span<const double> values);
    /// Builds from nested rows; every row must have the same length and all
    /// entries must be finite.
    static DenseMatrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
    static DenseMatrix from_rows(const std::vector<std::vector<double>>& rows);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    std::vector<double> column(std::size_t c) const;
    /// First `n` columns.
    DenseMatrix leading_columns(std::size_t n) const;
    /// Rows [begin, begin+count).
    DenseMatrix row_block(std::size_t begin, std::size_t count) const;

    DenseMatrix transpose() const;
    bool all_finite() const noexcept;
    std::string shape_string() const;

    bool operator==(const DenseMatrix& other) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);
/// aᵀ·b without forming the transpose.
DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b);
/// a·bᵀ without forming the transpose.
DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b);

DenseMatrix operator+(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix operator-(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix operator*(double s, const DenseMatrix& a);

double frobenius_norm(const DenseMatrix& a);
double max_abs(const DenseMatrix& a);
/// max |a_ij - b_ij|; shapes must agree.
double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b);

} // namespace kvcore
