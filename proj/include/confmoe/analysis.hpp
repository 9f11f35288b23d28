#pragma once
// Numerical probes of the routing-gradient theory: the load-balance gradient
// of 1/H(softmax(u)), its conflict with the dominant expert's score, the full
// MoE-layer Jacobian and a PSD audit of the softmax Jacobian.

#include <cstdint>
#include <optional>
#include <random>

#include "confmoe/matrix.hpp"
#include "confmoe/moe.hpp"
#include "confmoe/numeric.hpp"

namespace confmoe {

// Gradient of u -> 1/H(softmax(u)) at the logits producing g:
// (log g + 1)^T (diag(g) - g g^T) / H(g)^2. Throws DomainError unless every
// g_i > 0.
Vector load_balance_grad(const SimplexVector& g);

struct ConflictReport {
    std::uint64_t step = 0;
    double g_max = 0.0;
    std::optional<double> conflict_score;  // cosine in [-1, 1]; empty on degenerate norms
    double h_entropy = 0.0;
};

// Cosine between the logit direction raising the dominant expert's score
// (row argmax of the softmax Jacobian) and the load-loss descent direction.
ConflictReport conflict_probe(const SimplexVector& g, std::uint64_t step = 0);

// Symmetric Dirichlet(1) sample, i.e. uniform on the simplex.
SimplexVector sample_dirichlet(std::size_t n, std::mt19937_64& rng);

// Random distribution with max entry >= g_min_max, N = n.
SimplexVector sample_sharp(std::size_t n, double g_min_max, std::mt19937_64& rng);

// d x d Jacobian of h -> moe_forward(h) under a softmax gate, assembled from
// the identity, the selected experts' Jacobians and the routing-score term.
DenseMatrix moe_jacobian_analytic(std::span<const double> h, const ExpertPool& pool, const DenseMatrix& router,
                                  std::size_t k);

// Max relative discrepancy (|a - f| / max(1, |f|)) between the analytic
// Jacobian and central finite differences. Retries with a smaller step when
// a ReLU kink or a Top-K switch lies within the step; throws OracleError
// after 5 retries.
double moe_jacobian_check(std::span<const double> h, const ExpertPool& pool, const DenseMatrix& router,
                          std::size_t k);

struct PsdAudit {
    double min_eigenvalue = 0.0;
    std::size_t samples = 0;
};

// Min eigenvalue of diag(g) - g g^T over Dirichlet(1) samples with N drawn
// uniformly from [n_min, n_max].
PsdAudit psd_audit(std::size_t samples, std::size_t n_min, std::size_t n_max, std::mt19937_64& rng);

}  // namespace confmoe
