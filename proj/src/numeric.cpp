#include "confmoe/numeric.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "confmoe/error.hpp"
#include "confmoe/kernels.hpp"

namespace confmoe {

SimplexVector::SimplexVector(Vector values) : values_(std::move(values)) {
    if (values_.empty()) throw DimensionError("SimplexVector: empty");
    double sum = 0.0;
    for (double v : values_) {
        if (!(v >= 0.0 && v <= 1.0)) throw DomainError("SimplexVector: entry outside [0, 1]");
        sum += v;
    }
    if (std::abs(sum - 1.0) > kSimplexTolerance) {
        throw DomainError("SimplexVector: entries sum to " + std::to_string(sum));
    }
}

SimplexVector softmax(std::span<const double> logits) {
    if (logits.empty()) throw DimensionError("softmax: empty input");
    const double max = *std::max_element(logits.begin(), logits.end());
    Vector g(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        g[i] = std::exp(logits[i] - max);
        sum += g[i];
    }
    for (double& v : g) v /= sum;
    return SimplexVector(std::move(g), SimplexVector::Unchecked{});
}

Vector softmax_backward(const SimplexVector& g, std::span<const double> dg) {
    if (dg.size() != g.size()) throw DimensionError("softmax_backward: length mismatch");
    const double inner = kernels::dot(g.span(), dg);
    Vector du(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) du[i] = g[i] * (dg[i] - inner);
    return du;
}

DenseMatrix softmax_jacobian(const SimplexVector& g) {
    const std::size_t n = g.size();
    DenseMatrix j(n, n);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c) j(r, c) = g[r] * ((r == c ? 1.0 : 0.0) - g[c]);
    return j;
}

double entropy(std::span<const double> p) {
    double h = 0.0;
    for (double v : p) {
        if (v > 0.0) h -= v * std::log(std::max(v, kLogFloor));
    }
    return h;
}

double entropy(const SimplexVector& g) { return entropy(g.span()); }

Vector entropy_grad(const SimplexVector& g) {
    Vector d(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) d[i] = -(std::log(std::max(g[i], kLogFloor)) + 1.0);
    return d;
}

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double log_sigmoid(double x) { return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }

namespace {

void check_same_length(std::size_t a, std::size_t b, std::size_t c, const char* what) {
    if (a != b || a != c) throw DimensionError(std::string(what) + ": length mismatch");
}

struct Moments {
    double mean;
    double inv_std;
};

Moments moments(std::span<const double> x, double eps) {
    const double n = static_cast<double>(x.size());
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= n;
    return {mean, 1.0 / std::sqrt(var + eps)};
}

}  // namespace

Vector layer_norm(std::span<const double> x, std::span<const double> gain, std::span<const double> bias, double eps) {
    check_same_length(x.size(), gain.size(), bias.size(), "layer_norm");
    if (x.empty()) throw DimensionError("layer_norm: empty input");
    if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
    const auto [mean, inv_std] = moments(x, eps);
    Vector y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mean) * inv_std * gain[i] + bias[i];
    return y;
}

LayerNormGrad layer_norm_backward(std::span<const double> dy, std::span<const double> x, std::span<const double> gain,
                                  double eps) {
    check_same_length(x.size(), gain.size(), dy.size(), "layer_norm_backward");
    const auto [mean, inv_std] = moments(x, eps);
    const std::size_t n = x.size();
    LayerNormGrad grad{Vector(n), Vector(n), Vector(dy.begin(), dy.end())};
    Vector xhat(n);
    Vector dxhat(n);
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        xhat[i] = (x[i] - mean) * inv_std;
        dxhat[i] = dy[i] * gain[i];
        grad.dgain[i] = dy[i] * xhat[i];
        mean_dxhat += dxhat[i];
        mean_dxhat_xhat += dxhat[i] * xhat[i];
    }
    mean_dxhat /= static_cast<double>(n);
    mean_dxhat_xhat /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) grad.dx[i] = inv_std * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
    return grad;
}

Vector finite_diff_grad(const ScalarFn& f, std::span<const double> x, double h) {
    if (!(h > 0.0)) throw ConfigError("finite_diff_grad: step must be positive");
    Vector probe(x.begin(), x.end());
    Vector grad(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + h;
        const double up = f(probe);
        probe[i] = orig - h;
        const double down = f(probe);
        probe[i] = orig;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw OracleError("finite_diff_grad: non-finite evaluation at coordinate " + std::to_string(i));
        }
        grad[i] = (up - down) / (2.0 * h);
    }
    return grad;
}

DenseMatrix finite_diff_jacobian(const VectorFn& f, std::span<const double> x, double h) {
    if (!(h > 0.0)) throw ConfigError("finite_diff_jacobian: step must be positive");
    Vector probe(x.begin(), x.end());
    DenseMatrix jac;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + h;
        const Vector up = f(probe);
        probe[i] = orig - h;
        const Vector down = f(probe);
        probe[i] = orig;
        if (jac.empty()) jac = DenseMatrix(up.size(), x.size());
        if (up.size() != jac.rows() || down.size() != jac.rows()) {
            throw OracleError("finite_diff_jacobian: output length changed");
        }
        for (std::size_t r = 0; r < up.size(); ++r) {
            if (!std::isfinite(up[r]) || !std::isfinite(down[r])) {
                throw OracleError("finite_diff_jacobian: non-finite evaluation");
            }
            jac(r, i) = (up[r] - down[r]) / (2.0 * h);
        }
    }
    return jac;
}

Vector symmetric_eigenvalues(const DenseMatrix& input, double tol, int max_sweeps) {
    if (input.rows() != input.cols()) throw DimensionError("symmetric_eigenvalues: matrix not square");
    DenseMatrix a = input;
    const std::size_t n = a.rows();
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        double total = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = 0; q < n; ++q) {
                total += a(p, q) * a(p, q);
                if (p != q) off += a(p, q) * a(p, q);
            }
        if (off <= tol * tol * std::max(total, 1e-300)) break;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p);
                    const double akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k);
                    const double aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
            }
        }
    }
    Vector eig(n);
    for (std::size_t i = 0; i < n; ++i) eig[i] = a(i, i);
    std::sort(eig.begin(), eig.end());
    return eig;
}

}  // namespace confmoe
