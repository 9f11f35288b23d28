#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace confmoe {

using Vector = std::vector<double>;

// Row-major dense matrix of doubles.
class DenseMatrix {
   public:
    DenseMatrix() = default;
    DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    DenseMatrix(std::size_t rows, std::size_t cols, Vector data);
    DenseMatrix(std::initializer_list<std::initializer_list<double>> rows);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> flat() { return data_; }
    std::span<const double> flat() const { return data_; }
    const Vector& data() const { return data_; }

    void fill(double value);
    bool all_finite() const;

    // Rows [begin, begin + count) as a new matrix.
    DenseMatrix slice_rows(std::size_t begin, std::size_t count) const;

    friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

   private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    Vector data_;
};

DenseMatrix identity(std::size_t n);
DenseMatrix transpose(const DenseMatrix& a);

// C = A * B
DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);
// C = A * B^T
DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b);
// C = A^T * B
DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b);
// C += A^T * B
void matmul_tn_accumulate(const DenseMatrix& a, const DenseMatrix& b, DenseMatrix& c);

// y = x * W (x has W.rows() entries)
Vector vecmat(std::span<const double> x, const DenseMatrix& w);
// y = W * x (x has W.cols() entries)
Vector matvec(const DenseMatrix& w, std::span<const double> x);

void add_inplace(DenseMatrix& a, const DenseMatrix& b);
// Adds bias to every row.
void add_row_inplace(DenseMatrix& a, std::span<const double> bias);
DenseMatrix vstack(std::span<const DenseMatrix> blocks);

double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b);

}  // namespace confmoe
