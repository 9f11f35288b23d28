#include "confmoe/moe.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <string>

#include "confmoe/error.hpp"
#include "confmoe/kernels.hpp"
#include "confmoe/numeric.hpp"

namespace confmoe {

ExpertPool ExpertPool::random(std::size_t num_experts, std::size_t dim, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
    std::uniform_real_distribution<double> dist(-bound, bound);
    ExpertPool pool;
    pool.experts.reserve(num_experts);
    for (std::size_t i = 0; i < num_experts; ++i) {
        Expert e{DenseMatrix(dim, dim), Vector(dim, 0.0)};
        for (double& w : e.weight.flat()) w = dist(rng);
        pool.experts.push_back(std::move(e));
    }
    return pool;
}

ExpertPool ExpertPool::zeros(std::size_t num_experts, std::size_t dim) {
    ExpertPool pool;
    pool.experts.assign(num_experts, Expert{DenseMatrix(dim, dim), Vector(dim, 0.0)});
    return pool;
}

Vector expert_apply(const Expert& e, std::span<const double> h) {
    Vector pre = vecmat(h, e.weight);
    kernels::axpy(1.0, e.bias, pre);
    kernels::relu(pre, pre);
    return pre;
}

namespace {

void check_shapes(const DenseMatrix& h, const TopK& topk, const DenseMatrix& weights, const ExpertPool& pool) {
    if (pool.size() == 0) throw DimensionError("moe: empty expert pool");
    if (h.cols() != pool.dim()) {
        throw DimensionError("moe: token dim " + std::to_string(h.cols()) + " vs expert dim " +
                             std::to_string(pool.dim()));
    }
    if (topk.tokens() != h.rows() || weights.rows() != h.rows() || weights.cols() != topk.k()) {
        throw DimensionError("moe: gate output computed for a different batch");
    }
    if (topk.k() > pool.size()) throw ConfigError("moe: K exceeds pool size");
    for (std::size_t t = 0; t < topk.tokens(); ++t)
        for (std::size_t r = 0; r < topk.k(); ++r)
            if (topk.at(t, r) >= pool.size()) throw DimensionError("moe: expert index out of range");
}

}  // namespace

MoeActivations moe_forward_cached(const DenseMatrix& h, const TopK& topk, const DenseMatrix& weights,
                                  const ExpertPool& pool) {
    check_shapes(h, topk, weights, pool);
    const std::size_t k = topk.k();
    MoeActivations act{h, std::vector<DenseMatrix>(k, DenseMatrix(h.rows(), h.cols())),
                       std::vector<DenseMatrix>(k, DenseMatrix(h.rows(), h.cols()))};
    for (std::size_t t = 0; t < h.rows(); ++t) {
        for (std::size_t r = 0; r < k; ++r) {
            const Expert& e = pool.experts[topk.at(t, r)];
            auto pre = act.pre[r].row(t);
            auto out = act.expert_out[r].row(t);
            const Vector z = vecmat(h.row(t), e.weight);
            std::copy(z.begin(), z.end(), pre.begin());
            kernels::axpy(1.0, e.bias, pre);
            kernels::relu(pre, out);
            kernels::axpy(weights(t, r), out, act.out.row(t));
        }
    }
    return act;
}

DenseMatrix moe_forward(const DenseMatrix& h, const GateOutput& gate, const ExpertPool& pool) {
    return moe_forward_cached(h, gate.topk, gate.weights, pool).out;
}

std::vector<DenseMatrix> moe_expert_outputs(const DenseMatrix& h, const GateOutput& gate, const ExpertPool& pool) {
    return moe_forward_cached(h, gate.topk, gate.weights, pool).expert_out;
}

MoeGrad moe_backward(const DenseMatrix& h, const TopK& topk, const DenseMatrix& weights, const ExpertPool& pool,
                     const MoeActivations& act, const DenseMatrix& dout,
                     const std::vector<DenseMatrix>& dexpert_out) {
    const std::size_t k = topk.k();
    const std::size_t d = h.cols();
    MoeGrad grad{dout, DenseMatrix(h.rows(), k), ExpertPool::zeros(pool.size(), d)};
    Vector dpre(d);
    for (std::size_t t = 0; t < h.rows(); ++t) {
        for (std::size_t r = 0; r < k; ++r) {
            const std::size_t idx = topk.at(t, r);
            const Expert& e = pool.experts[idx];
            Expert& de = grad.dpool.experts[idx];
            auto out = act.expert_out[r].row(t);
            auto pre = act.pre[r].row(t);
            grad.dweights(t, r) = kernels::dot(dout.row(t), out);
            bool any = false;
            for (std::size_t c = 0; c < d; ++c) {
                double g = weights(t, r) * dout(t, c);
                if (!dexpert_out.empty()) g += dexpert_out[r](t, c);
                dpre[c] = pre[c] > 0.0 ? g : 0.0;
                any = any || dpre[c] != 0.0;
            }
            if (!any) continue;
            kernels::axpy(1.0, dpre, de.bias);
            for (std::size_t a = 0; a < d; ++a) {
                if (h(t, a) != 0.0) kernels::axpy(h(t, a), dpre, de.weight.row(a));
                grad.dh(t, a) += kernels::dot(e.weight.row(a), dpre);
            }
        }
    }
    return grad;
}

std::vector<std::uint64_t> SelectionTrace::counts_for(std::uint64_t epoch) const {
    for (std::size_t i = 0; i < epochs_.size(); ++i)
        if (epochs_[i] == epoch) return counts_[i];
    return {};
}

std::uint64_t SelectionTrace::total(std::uint64_t epoch) const {
    std::uint64_t sum = 0;
    for (auto c : counts_for(epoch)) sum += c;
    return sum;
}

void SelectionTrace::touch(std::uint64_t epoch) {
    if (!epochs_.empty() && epoch < epochs_.back()) {
        throw DomainError("SelectionTrace: epoch " + std::to_string(epoch) + " precedes " +
                          std::to_string(epochs_.back()));
    }
    if (epochs_.empty() || epochs_.back() != epoch) {
        epochs_.push_back(epoch);
        counts_.emplace_back(num_experts_, 0);
    }
}

void SelectionTrace::record(const TopK& topk, std::uint64_t epoch) {
    if (topk.tokens() == 0) return;
    touch(epoch);
    auto& c = counts_.back();
    for (std::size_t t = 0; t < topk.tokens(); ++t)
        for (std::size_t r = 0; r < topk.k(); ++r) {
            const std::size_t idx = topk.at(t, r);
            if (idx >= num_experts_) throw DimensionError("SelectionTrace: expert index out of range");
            ++c[idx];
        }
}

void SelectionTrace::write_csv(std::ostream& os) const {
    os << "epoch,expert_id,count\n";
    for (std::size_t e = 0; e < epochs_.size(); ++e)
        for (std::size_t i = 0; i < num_experts_; ++i) os << epochs_[e] << ',' << i << ',' << counts_[e][i] << '\n';
}

void record_selection(SelectionTrace& trace, const GateOutput& gate, std::uint64_t epoch) {
    trace.record(gate.topk, epoch);
}

namespace {

Vector usage_distribution(const std::vector<std::uint64_t>& counts) {
    double total = 0.0;
    for (auto c : counts) total += static_cast<double>(c);
    if (total == 0.0) throw MetricError("usage distribution undefined for an epoch with zero assignments");
    Vector p(counts.size());
    for (std::size_t i = 0; i < counts.size(); ++i) p[i] = static_cast<double>(counts[i]) / total;
    return p;
}

}  // namespace

double usage_entropy(const SelectionTrace& trace, std::uint64_t epoch) {
    const auto counts = trace.counts_for(epoch);
    if (counts.empty()) throw MetricError("usage_entropy: epoch " + std::to_string(epoch) + " not recorded");
    return entropy(usage_distribution(counts));
}

double selection_oscillation(const SelectionTrace& trace) {
    if (trace.num_epochs() < 2) throw MetricError("selection_oscillation: need at least 2 epochs");
    double sum = 0.0;
    Vector prev = usage_distribution(trace.counts(0));
    for (std::size_t e = 1; e < trace.num_epochs(); ++e) {
        Vector cur = usage_distribution(trace.counts(e));
        double tv = 0.0;
        for (std::size_t i = 0; i < cur.size(); ++i) tv += std::abs(cur[i] - prev[i]);
        sum += 0.5 * tv;
        prev = std::move(cur);
    }
    return sum / static_cast<double>(trace.num_epochs() - 1);
}

}  // namespace confmoe
