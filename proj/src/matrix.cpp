#include "confmoe/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "confmoe/error.hpp"
#include "confmoe/kernels.hpp"

namespace confmoe {

namespace {

std::string shape(const DenseMatrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, Vector data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
        throw DimensionError("DenseMatrix: data length " + std::to_string(data_.size()) +
                             " does not match " + std::to_string(rows) + "x" + std::to_string(cols));
    }
}

DenseMatrix::DenseMatrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        if (r.size() != cols_) throw DimensionError("DenseMatrix: ragged initializer");
        data_.insert(data_.end(), r.begin(), r.end());
    }
}

void DenseMatrix::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool DenseMatrix::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

DenseMatrix DenseMatrix::slice_rows(std::size_t begin, std::size_t count) const {
    if (begin + count > rows_) throw DimensionError("slice_rows: range exceeds " + shape(*this));
    auto first = data_.begin() + static_cast<std::ptrdiff_t>(begin * cols_);
    return DenseMatrix(count, cols_, Vector(first, first + static_cast<std::ptrdiff_t>(count * cols_)));
}

DenseMatrix identity(std::size_t n) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

DenseMatrix transpose(const DenseMatrix& a) {
    DenseMatrix t(a.cols(), a.rows());
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) t(c, r) = a(r, c);
    return t;
}

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols() != b.rows()) throw DimensionError("matmul: " + shape(a) + " * " + shape(b));
    DenseMatrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto out = c.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik != 0.0) kernels::axpy(aik, b.row(k), out);
        }
    }
    return c;
}

DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols() != b.cols()) throw DimensionError("matmul_nt: " + shape(a) + " * " + shape(b) + "^T");
    DenseMatrix c(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.rows(); ++j) c(i, j) = kernels::dot(a.row(i), b.row(j));
    return c;
}

DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b) {
    DenseMatrix c(a.cols(), b.cols());
    matmul_tn_accumulate(a, b, c);
    return c;
}

void matmul_tn_accumulate(const DenseMatrix& a, const DenseMatrix& b, DenseMatrix& c) {
    if (a.rows() != b.rows() || c.rows() != a.cols() || c.cols() != b.cols()) {
        throw DimensionError("matmul_tn: " + shape(a) + "^T * " + shape(b) + " into " + shape(c));
    }
    for (std::size_t k = 0; k < a.rows(); ++k) {
        auto brow = b.row(k);
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = a(k, i);
            if (aki != 0.0) kernels::axpy(aki, brow, c.row(i));
        }
    }
}

Vector vecmat(std::span<const double> x, const DenseMatrix& w) {
    if (x.size() != w.rows()) throw DimensionError("vecmat: length " + std::to_string(x.size()) + " vs " + shape(w));
    Vector y(w.cols(), 0.0);
    for (std::size_t k = 0; k < x.size(); ++k) {
        if (x[k] != 0.0) kernels::axpy(x[k], w.row(k), y);
    }
    return y;
}

Vector matvec(const DenseMatrix& w, std::span<const double> x) {
    if (x.size() != w.cols()) throw DimensionError("matvec: " + shape(w) + " vs length " + std::to_string(x.size()));
    Vector y(w.rows());
    for (std::size_t r = 0; r < w.rows(); ++r) y[r] = kernels::dot(w.row(r), x);
    return y;
}

void add_inplace(DenseMatrix& a, const DenseMatrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("add: " + shape(a) + " + " + shape(b));
    kernels::axpy(1.0, b.flat(), a.flat());
}

void add_row_inplace(DenseMatrix& a, std::span<const double> bias) {
    if (bias.size() != a.cols()) throw DimensionError("add_row: bias length mismatch for " + shape(a));
    for (std::size_t r = 0; r < a.rows(); ++r) kernels::axpy(1.0, bias, a.row(r));
}

DenseMatrix vstack(std::span<const DenseMatrix> blocks) {
    if (blocks.empty()) return {};
    const std::size_t cols = blocks.front().cols();
    std::size_t rows = 0;
    for (const auto& b : blocks) {
        if (b.cols() != cols) throw DimensionError("vstack: column mismatch");
        rows += b.rows();
    }
    Vector data;
    data.reserve(rows * cols);
    for (const auto& b : blocks) data.insert(data.end(), b.data().begin(), b.data().end());
    return DenseMatrix(rows, cols, std::move(data));
}

double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("max_abs_diff: " + shape(a) + " vs " + shape(b));
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.flat()[i] - b.flat()[i]));
    return m;
}

}  // namespace confmoe
