#pragma once
// Elementwise nonlinearities, their analytic derivatives, and the
// finite-difference oracle the rest of the library is checked against.

#include <functional>
#include <span>

#include "confmoe/matrix.hpp"

namespace confmoe {

// A probability vector: entries in [0, 1] summing to 1 within 1e-12.
class SimplexVector {
   public:
    // Validates; throws DomainError off the simplex.
    explicit SimplexVector(Vector values);

    std::size_t size() const { return values_.size(); }
    double operator[](std::size_t i) const { return values_[i]; }
    const Vector& values() const { return values_; }
    std::span<const double> span() const { return values_; }

   private:
    struct Unchecked {};
    SimplexVector(Vector values, Unchecked) : values_(std::move(values)) {}
    friend SimplexVector softmax(std::span<const double> logits);

    Vector values_;
};

inline constexpr double kSimplexTolerance = 1e-12;
inline constexpr double kLogFloor = 1e-300;

// Max-subtracted softmax. Throws DimensionError on empty input.
SimplexVector softmax(std::span<const double> logits);

// Vector-Jacobian product through softmax: returns J^T dg = g * (dg - <g, dg>).
Vector softmax_backward(const SimplexVector& g, std::span<const double> dg);

// diag(g) - g g^T.
DenseMatrix softmax_jacobian(const SimplexVector& g);

// Shannon entropy in nats with 0 log 0 = 0.
double entropy(const SimplexVector& g);
double entropy(std::span<const double> p);

// dH/dg = -(log g + 1), with g clamped below at kLogFloor.
Vector entropy_grad(const SimplexVector& g);

double sigmoid(double x);
// Softplus-style stable log(sigmoid(x)).
double log_sigmoid(double x);

struct LayerNormGrad {
    Vector dx;
    Vector dgain;
    Vector dbias;
};

// (x - mean) / sqrt(var + eps) * gain + bias, population variance.
Vector layer_norm(std::span<const double> x, std::span<const double> gain, std::span<const double> bias, double eps);
LayerNormGrad layer_norm_backward(std::span<const double> dy, std::span<const double> x, std::span<const double> gain,
                                  double eps);

using ScalarFn = std::function<double(std::span<const double>)>;
using VectorFn = std::function<Vector(std::span<const double>)>;

// Central differences per coordinate. Throws OracleError on non-finite f.
Vector finite_diff_grad(const ScalarFn& f, std::span<const double> x, double h);
// Central-difference Jacobian, rows = outputs, cols = inputs.
DenseMatrix finite_diff_jacobian(const VectorFn& f, std::span<const double> x, double h);

// Eigenvalues of a symmetric matrix via cyclic Jacobi rotations, ascending.
Vector symmetric_eigenvalues(const DenseMatrix& a, double tol = 1e-15, int max_sweeps = 100);

}  // namespace confmoe
