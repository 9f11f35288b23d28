#pragma once
// Data-parallel inner loops used by the dense linear algebra layer.
//
// Every kernel has a scalar reference implementation plus SIMD variants
// (AVX2+FMA on x86-64, NEON on AArch64). The active table is chosen once at
// first use from the CPU feature set; CONFMOE_SIMD=scalar forces the
// reference path.

#include <cstddef>
#include <span>
#include <string_view>

namespace confmoe::kernels {

struct KernelTable {
    std::string_view name;

    // sum_i x[i] * y[i]
    double (*dot)(const double* x, const double* y, std::size_t n);
    // y[i] += alpha * x[i]
    void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
    // y[i] *= alpha
    void (*scale)(double alpha, double* y, std::size_t n);
    // y[i] = max(x[i], 0)
    void (*relu)(const double* x, double* y, std::size_t n);
};

const KernelTable& scalar_table();

// nullptr when the variant was not compiled in or the CPU lacks the feature.
const KernelTable* avx2_table();
const KernelTable* neon_table();

// Table in effect for this process.
const KernelTable& active();

inline double dot(std::span<const double> x, std::span<const double> y) {
    return active().dot(x.data(), y.data(), x.size());
}
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    active().axpy(alpha, x.data(), y.data(), x.size());
}
inline void scale(double alpha, std::span<double> y) {
    active().scale(alpha, y.data(), y.size());
}
inline void relu(std::span<const double> x, std::span<double> y) {
    active().relu(x.data(), y.data(), x.size());
}

}  // namespace confmoe::kernels
