#include "confmoe/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "confmoe/error.hpp"
#include "confmoe/gating.hpp"
#include "confmoe/kernels.hpp"

namespace confmoe {

Vector load_balance_grad(const SimplexVector& g) {
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (!(g[i] > 0.0)) throw DomainError("load_balance_grad: g must lie strictly inside the simplex");
    }
    const double h = entropy(g);
    if (!(h > 0.0)) throw DomainError("load_balance_grad: zero entropy");
    // row vector (log g + 1)^T times the symmetric softmax Jacobian
    Vector a(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) a[i] = (std::log(g[i]) + 1.0) / (h * h);
    return softmax_backward(g, a);
}

ConflictReport conflict_probe(const SimplexVector& g, std::uint64_t step) {
    ConflictReport report;
    report.step = step;
    const auto top = std::max_element(g.values().begin(), g.values().end());
    const std::size_t j = static_cast<std::size_t>(top - g.values().begin());
    report.g_max = *top;
    report.h_entropy = entropy(g);

    // d g_j / d u = row j of diag(g) - g g^T
    Vector raise(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) raise[i] = g[j] * ((i == j ? 1.0 : 0.0) - g[i]);

    Vector descent = load_balance_grad(g);
    for (double& v : descent) v = -v;

    const double na = std::sqrt(kernels::dot(raise, raise));
    const double nb = std::sqrt(kernels::dot(descent, descent));
    if (na < 1e-12 || nb < 1e-12) return report;
    report.conflict_score = std::clamp(kernels::dot(raise, descent) / (na * nb), -1.0, 1.0);
    return report;
}

SimplexVector sample_dirichlet(std::size_t n, std::mt19937_64& rng) {
    std::exponential_distribution<double> expo(1.0);
    Vector v(n);
    double sum = 0.0;
    for (double& x : v) {
        do {
            x = expo(rng);
        } while (x <= 0.0);
        sum += x;
    }
    for (double& x : v) x /= sum;
    return softmax([&] {
        // Route through softmax(log v) so the result is normalized to the last ulp.
        Vector logits(n);
        for (std::size_t i = 0; i < n; ++i) logits[i] = std::log(v[i]);
        return logits;
    }());
}

SimplexVector sample_sharp(std::size_t n, double g_min_max, std::mt19937_64& rng) {
    if (n < 2) throw DimensionError("sample_sharp: need at least 2 experts");
    std::uniform_real_distribution<double> top(g_min_max, 0.999);
    std::uniform_int_distribution<std::size_t> where(0, n - 1);
    const double m = top(rng);
    const std::size_t j = where(rng);
    const SimplexVector rest = sample_dirichlet(n - 1, rng);
    Vector logits(n);
    for (std::size_t i = 0, r = 0; i < n; ++i) {
        logits[i] = i == j ? std::log(m) : std::log((1.0 - m) * rest[r++]);
    }
    return softmax(logits);
}

DenseMatrix moe_jacobian_analytic(std::span<const double> h, const ExpertPool& pool, const DenseMatrix& router,
                                  std::size_t k) {
    const std::size_t d = h.size();
    const DenseMatrix hm(1, d, Vector(h.begin(), h.end()));
    const GateOutput gate = gate_softmax(hm, router, k);
    const SimplexVector g(Vector(gate.scores.row(0).begin(), gate.scores.row(0).end()));
    const DenseMatrix js = softmax_jacobian(g);
    // d g / d h: N x d, entry (i, a) = sum_j J(i, j) router(a, j)
    const DenseMatrix dg_dh = matmul_nt(js, router);

    DenseMatrix jac = identity(d);
    for (std::size_t r = 0; r < k; ++r) {
        const std::size_t i = gate.topk.at(0, r);
        const Expert& e = pool.experts[i];
        const Vector out = expert_apply(e, h);
        Vector pre = vecmat(h, e.weight);
        kernels::axpy(1.0, e.bias, pre);
        for (std::size_t c = 0; c < d; ++c) {
            for (std::size_t a = 0; a < d; ++a) {
                // representation term: g_i * dE_i/dh
                const double rep = pre[c] > 0.0 ? g[i] * e.weight(a, c) : 0.0;
                // routing term: E_i(h)_c * d g_i / d h_a
                jac(c, a) += rep + out[c] * dg_dh(i, a);
            }
        }
    }
    return jac;
}

double moe_jacobian_check(std::span<const double> h, const ExpertPool& pool, const DenseMatrix& router,
                          std::size_t k) {
    const std::size_t d = h.size();
    const DenseMatrix analytic = moe_jacobian_analytic(h, pool, router, k);
    const auto forward = [&](std::span<const double> x) {
        const DenseMatrix xm(1, d, Vector(x.begin(), x.end()));
        return moe_forward(xm, gate_softmax(xm, router, k), pool).data();
    };
    const auto signature = [&](std::span<const double> x) {
        const DenseMatrix xm(1, d, Vector(x.begin(), x.end()));
        const GateOutput gate = gate_softmax(xm, router, k);
        std::vector<int> sig(gate.topk.row(0).begin(), gate.topk.row(0).end());
        for (std::size_t r = 0; r < k; ++r) {
            const Expert& e = pool.experts[gate.topk.at(0, r)];
            Vector pre = vecmat(x, e.weight);
            kernels::axpy(1.0, e.bias, pre);
            for (double p : pre) sig.push_back(p > 0.0 ? 1 : 0);
        }
        return sig;
    };

    const auto base_sig = signature(h);
    double step = 1e-6;
    for (int attempt = 0; attempt <= 5; ++attempt) {
        bool smooth = true;
        Vector probe(h.begin(), h.end());
        for (std::size_t a = 0; a < d && smooth; ++a) {
            for (double sgn : {1.0, -1.0}) {
                probe[a] = h[a] + sgn * step;
                if (signature(probe) != base_sig) smooth = false;
            }
            probe[a] = h[a];
        }
        if (smooth) {
            const DenseMatrix fd = finite_diff_jacobian(forward, h, step);
            double worst = 0.0;
            for (std::size_t i = 0; i < fd.size(); ++i) {
                const double f = fd.flat()[i];
                worst = std::max(worst, std::abs(analytic.flat()[i] - f) / std::max(1.0, std::abs(f)));
            }
            return worst;
        }
        step *= 0.1 * (1.0 + 0.37 * attempt);
    }
    throw OracleError("moe_jacobian_check: non-differentiable point after 5 retries");
}

PsdAudit psd_audit(std::size_t samples, std::size_t n_min, std::size_t n_max, std::mt19937_64& rng) {
    if (samples == 0) throw ConfigError("psd_audit: need at least one sample");
    if (n_min < 1 || n_min > n_max) throw ConfigError("psd_audit: invalid expert-count range");
    std::uniform_int_distribution<std::size_t> pick_n(n_min, n_max);
    PsdAudit audit{std::numeric_limits<double>::infinity(), samples};
    for (std::size_t s = 0; s < samples; ++s) {
        const SimplexVector g = sample_dirichlet(pick_n(rng), rng);
        const Vector eig = symmetric_eigenvalues(softmax_jacobian(g));
        audit.min_eigenvalue = std::min(audit.min_eigenvalue, eig.front());
    }
    return audit;
}

}  // namespace confmoe
