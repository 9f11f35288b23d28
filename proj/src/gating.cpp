#include "confmoe/gating.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "confmoe/error.hpp"
#include "confmoe/kernels.hpp"

namespace confmoe {

std::string_view to_string(GateKind kind) {
    switch (kind) {
        case GateKind::Softmax: return "softmax";
        case GateKind::SoftmaxLoadBalanced: return "softmax_lb";
        case GateKind::Mean: return "mean";
        case GateKind::Gaussian: return "gaussian";
        case GateKind::Laplacian: return "laplacian";
        case GateKind::ConfNet: return "confnet";
    }
    return "unknown";
}

GateKind parse_gate_kind(std::string_view text) {
    for (GateKind k : kAllGateKinds) {
        if (to_string(k) == text) return k;
    }
    throw ConfigError("unknown gate kind '" + std::string(text) + "'");
}

std::vector<std::size_t> select_topk(std::span<const double> values, std::size_t k) {
    if (k == 0 || k > values.size()) {
        throw ConfigError("top-k: K=" + std::to_string(k) + " outside [1, " + std::to_string(values.size()) + "]");
    }
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) { return values[a] > values[b] || (values[a] == values[b] && a < b); });
    order.resize(k);
    return order;
}

namespace {

void check_k(std::size_t k, std::size_t n) {
    if (k == 0 || k > n) {
        throw ConfigError("gate: K=" + std::to_string(k) + " must lie in [1, N=" + std::to_string(n) + "]");
    }
}

// Selects top-k per row of `scores` and fills combining weights from the
// selected scores.
GateOutput finish(DenseMatrix scores, std::size_t k) {
    GateOutput out;
    const std::size_t tokens = scores.rows();
    out.topk = TopK(tokens, k);
    out.weights = DenseMatrix(tokens, k);
    for (std::size_t t = 0; t < tokens; ++t) {
        const auto sel = select_topk(scores.row(t), k);
        for (std::size_t r = 0; r < k; ++r) {
            out.topk.at(t, r) = sel[r];
            out.weights(t, r) = scores(t, sel[r]);
        }
    }
    out.scores = std::move(scores);
    return out;
}

DenseMatrix softmax_rows(DenseMatrix logits) {
    for (std::size_t t = 0; t < logits.rows(); ++t) {
        const auto g = softmax(logits.row(t));
        std::copy(g.values().begin(), g.values().end(), logits.row(t).begin());
    }
    return logits;
}

DenseMatrix distance_logits(const DenseMatrix& h, const ExpertEmbeddingTable& table, DistanceMetric metric,
                            double temperature) {
    const DenseMatrix& e = table.embeddings;
    if (e.cols() != h.cols()) throw DimensionError("gate_distance: embedding dim differs from token dim");
    DenseMatrix logits(h.rows(), e.rows());
    for (std::size_t t = 0; t < h.rows(); ++t) {
        for (std::size_t i = 0; i < e.rows(); ++i) {
            double dist = 0.0;
            for (std::size_t c = 0; c < h.cols(); ++c) {
                const double diff = h(t, c) - e(i, c);
                dist += metric == DistanceMetric::L1 ? std::abs(diff) : 0.5 * diff * diff;
            }
            logits(t, i) = -dist / temperature;
        }
    }
    return logits;
}

}  // namespace

GateOutput gate_softmax(const DenseMatrix& h, const DenseMatrix& router, std::size_t k) {
    check_k(k, router.cols());
    return finish(softmax_rows(matmul(h, router)), k);
}

double load_balance_loss(const DenseMatrix& scores) {
    if (scores.rows() == 0) return 0.0;
    double total = 0.0;
    for (std::size_t t = 0; t < scores.rows(); ++t) total += 1.0 / entropy(scores.row(t));
    return total / static_cast<double>(scores.rows());
}

GateOutput gate_softmax_load_balanced(const DenseMatrix& h, const DenseMatrix& router, std::size_t k) {
    GateOutput out = gate_softmax(h, router, k);
    out.aux_loss = load_balance_loss(out.scores);
    return out;
}

GateOutput gate_mean(const DenseMatrix& h, const DenseMatrix& router, std::size_t k) {
    GateOutput out = gate_softmax(h, router, k);
    out.weights.fill(1.0 / static_cast<double>(k));
    return out;
}

GateOutput gate_distance(const DenseMatrix& h, const ExpertEmbeddingTable& table, std::size_t k,
                         DistanceMetric metric, double temperature) {
    if (!(temperature > 0.0)) throw ConfigError("gate_distance: temperature must be positive");
    check_k(k, table.embeddings.rows());
    return finish(softmax_rows(distance_logits(h, table, metric, temperature)), k);
}

GateOutput gate_confnet(const DenseMatrix& h, const ConfNetPool& pool, std::size_t k, std::size_t num_experts) {
    if (pool.size() != num_experts || pool.bias.size() != num_experts) {
        throw ConfigError("gate_confnet: pool has " + std::to_string(pool.size()) + " heads for " +
                          std::to_string(num_experts) + " experts");
    }
    return gate_confnet(h, pool, k);
}

GateOutput gate_confnet(const DenseMatrix& h, const ConfNetPool& pool, std::size_t k) {
    if (pool.bias.size() != pool.size()) throw ConfigError("gate_confnet: bias length differs from head count");
    check_k(k, pool.size());
    DenseMatrix conf = matmul_nt(h, pool.weights);
    for (std::size_t t = 0; t < conf.rows(); ++t)
        for (std::size_t i = 0; i < conf.cols(); ++i) conf(t, i) = sigmoid(conf(t, i) + pool.bias[i]);
    return finish(std::move(conf), k);
}

double confidence_loss(const DenseMatrix& confidences, std::span<const double> target, std::size_t k) {
    if (confidences.cols() != k) throw DimensionError("confidence_loss: expected K confidences per token");
    if (target.size() != confidences.rows()) throw DimensionError("confidence_loss: one target per token required");
    if (confidences.rows() == 0) return 0.0;
    double total = 0.0;
    for (std::size_t t = 0; t < confidences.rows(); ++t)
        for (std::size_t r = 0; r < k; ++r) {
            const double diff = confidences(t, r) - target[t];
            total += diff * diff;
        }
    return total / static_cast<double>(confidences.rows() * k);
}

DenseMatrix confidence_loss_grad(const DenseMatrix& confidences, std::span<const double> target) {
    DenseMatrix grad(confidences.rows(), confidences.cols());
    if (confidences.empty()) return grad;
    const double scale = 2.0 / static_cast<double>(confidences.size());
    for (std::size_t t = 0; t < confidences.rows(); ++t)
        for (std::size_t r = 0; r < confidences.cols(); ++r) grad(t, r) = scale * (confidences(t, r) - target[t]);
    return grad;
}

std::size_t GateParams::num_experts() const {
    switch (kind) {
        case GateKind::Gaussian:
        case GateKind::Laplacian: return table.embeddings.rows();
        case GateKind::ConfNet: return confnet.size();
        default: return router.cols();
    }
}

GateOutput evaluate_gate(const GateParams& params, const DenseMatrix& h, std::size_t k) {
    switch (params.kind) {
        case GateKind::Softmax: return gate_softmax(h, params.router, k);
        case GateKind::SoftmaxLoadBalanced: return gate_softmax_load_balanced(h, params.router, k);
        case GateKind::Mean: return gate_mean(h, params.router, k);
        case GateKind::Gaussian:
            return gate_distance(h, params.table, k, DistanceMetric::L2Squared, params.temperature);
        case GateKind::Laplacian: return gate_distance(h, params.table, k, DistanceMetric::L1, params.temperature);
        case GateKind::ConfNet: return gate_confnet(h, params.confnet, k);
    }
    throw ConfigError("evaluate_gate: unhandled gate kind");
}

GateParams zeros_like(const GateParams& p) {
    GateParams z;
    z.kind = p.kind;
    z.temperature = p.temperature;
    z.router = DenseMatrix(p.router.rows(), p.router.cols());
    z.table.embeddings = DenseMatrix(p.table.embeddings.rows(), p.table.embeddings.cols());
    z.confnet.weights = DenseMatrix(p.confnet.weights.rows(), p.confnet.weights.cols());
    z.confnet.bias = Vector(p.confnet.bias.size(), 0.0);
    return z;
}

GateGrad gate_backward(const GateParams& params, const DenseMatrix& h, const GateOutput& out,
                       const DenseMatrix& dweights, double aux_scale, const DenseMatrix* dconfidence) {
    GateGrad grad{DenseMatrix(h.rows(), h.cols()), zeros_like(params)};
    const std::size_t tokens = h.rows();
    const std::size_t n = out.scores.cols();
    const std::size_t k = out.topk.k();

    // d loss / d scores, tokens x N.
    DenseMatrix dscores(tokens, n);
    if (params.kind != GateKind::Mean) {
        for (std::size_t t = 0; t < tokens; ++t)
            for (std::size_t r = 0; r < k; ++r) dscores(t, out.topk.at(t, r)) += dweights(t, r);
    }

    switch (params.kind) {
        case GateKind::Mean: break;
        case GateKind::Softmax:
        case GateKind::SoftmaxLoadBalanced:
        case GateKind::Gaussian:
        case GateKind::Laplacian: {
            const bool lb = params.kind == GateKind::SoftmaxLoadBalanced && aux_scale != 0.0 && tokens > 0;
            DenseMatrix dlogits(tokens, n);
            for (std::size_t t = 0; t < tokens; ++t) {
                SimplexVector g(Vector(out.scores.row(t).begin(), out.scores.row(t).end()));
                Vector dg(dscores.row(t).begin(), dscores.row(t).end());
                if (lb) {
                    // d(1/H)/dg = -(1/H^2) dH/dg = (log g + 1) / H^2
                    const double hval = entropy(g);
                    const Vector dh = entropy_grad(g);
                    const double coef = -aux_scale / (hval * hval * static_cast<double>(tokens));
                    for (std::size_t i = 0; i < n; ++i) dg[i] += coef * dh[i];
                }
                const Vector du = softmax_backward(g, dg);
                std::copy(du.begin(), du.end(), dlogits.row(t).begin());
            }
            if (params.kind == GateKind::Softmax || params.kind == GateKind::SoftmaxLoadBalanced) {
                grad.dh = matmul_nt(dlogits, params.router);
                grad.dparams.router = matmul_tn(h, dlogits);
            } else {
                const DenseMatrix& e = params.table.embeddings;
                const bool l1 = params.kind == GateKind::Laplacian;
                DenseMatrix& de = grad.dparams.table.embeddings;
                for (std::size_t t = 0; t < tokens; ++t)
                    for (std::size_t i = 0; i < n; ++i) {
                        // logit = -dist / tau
                        const double coef = -dlogits(t, i) / params.temperature;
                        if (coef == 0.0) continue;
                        for (std::size_t c = 0; c < h.cols(); ++c) {
                            const double diff = h(t, c) - e(i, c);
                            const double ddist = l1 ? (diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0)) : diff;
                            grad.dh(t, c) += coef * ddist;
                            de(i, c) -= coef * ddist;
                        }
                    }
            }
            break;
        }
        case GateKind::ConfNet: {
            DenseMatrix dv(tokens, n);
            for (std::size_t t = 0; t < tokens; ++t)
                for (std::size_t i = 0; i < n; ++i) {
                    double dc = dscores(t, i);
                    if (dconfidence != nullptr) dc += (*dconfidence)(t, i);
                    const double c = out.scores(t, i);
                    dv(t, i) = dc * c * (1.0 - c);
                }
            grad.dh = matmul(dv, params.confnet.weights);
            grad.dparams.confnet.weights = matmul_tn(dv, h);
            for (std::size_t t = 0; t < tokens; ++t)
                for (std::size_t i = 0; i < n; ++i) grad.dparams.confnet.bias[i] += dv(t, i);
            break;
        }
    }
    return grad;
}

}  // namespace confmoe
