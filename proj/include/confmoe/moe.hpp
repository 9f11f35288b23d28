#pragma once
// Sparse mixture-of-experts layer with a residual connection, plus the
// expert-selection telemetry used to diagnose collapse.

#include <cstdint>
#include <iosfwd>
#include <random>
#include <vector>

#include "confmoe/gating.hpp"
#include "confmoe/matrix.hpp"

namespace confmoe {

// Expert i computes ReLU(h W_i + b_i) for a row token h.
struct Expert {
    DenseMatrix weight;  // d x d, input-major
    Vector bias;         // d
};

struct ExpertPool {
    std::vector<Expert> experts;

    std::size_t size() const { return experts.size(); }
    std::size_t dim() const { return experts.empty() ? 0 : experts.front().weight.rows(); }

    // Weights uniform in [-1/sqrt(d), 1/sqrt(d)], zero bias.
    static ExpertPool random(std::size_t num_experts, std::size_t dim, std::mt19937_64& rng);
    static ExpertPool zeros(std::size_t num_experts, std::size_t dim);
};

Vector expert_apply(const Expert& e, std::span<const double> h);

// out_t = h_t + sum_r weight_{t,r} * E_{topk(t,r)}(h_t)
DenseMatrix moe_forward(const DenseMatrix& h, const GateOutput& gate, const ExpertPool& pool);

// K matrices (tokens x d); matrix r holds the un-combined output of each
// token's rank-r expert.
std::vector<DenseMatrix> moe_expert_outputs(const DenseMatrix& h, const GateOutput& gate, const ExpertPool& pool);

// Forward pass that keeps what the backward pass needs.
struct MoeActivations {
    DenseMatrix out;
    std::vector<DenseMatrix> expert_out;  // K x (tokens x d)
    std::vector<DenseMatrix> pre;         // K x (tokens x d), before ReLU
};

MoeActivations moe_forward_cached(const DenseMatrix& h, const TopK& topk, const DenseMatrix& weights,
                                  const ExpertPool& pool);

struct MoeGrad {
    DenseMatrix dh;
    DenseMatrix dweights;  // tokens x K
    ExpertPool dpool;
};

// `dexpert_out` optionally carries extra gradient flowing into the raw expert
// outputs (K x (tokens x d)); pass an empty vector when none.
MoeGrad moe_backward(const DenseMatrix& h, const TopK& topk, const DenseMatrix& weights, const ExpertPool& pool,
                     const MoeActivations& act, const DenseMatrix& dout,
                     const std::vector<DenseMatrix>& dexpert_out);

// Per-epoch, per-expert assignment counts.
class SelectionTrace {
   public:
    explicit SelectionTrace(std::size_t num_experts) : num_experts_(num_experts) {}

    std::size_t num_experts() const { return num_experts_; }
    std::size_t num_epochs() const { return epochs_.size(); }
    const std::vector<std::uint64_t>& epoch_list() const { return epochs_; }
    const std::vector<std::uint64_t>& counts(std::size_t epoch_index) const { return counts_.at(epoch_index); }
    // Counts recorded for a given epoch number; empty when absent.
    std::vector<std::uint64_t> counts_for(std::uint64_t epoch) const;
    std::uint64_t total(std::uint64_t epoch) const;

    void record(const TopK& topk, std::uint64_t epoch);
    // Registers an epoch with zero counts if not yet present.
    void touch(std::uint64_t epoch);

    void write_csv(std::ostream& os) const;

   private:
    std::size_t num_experts_;
    std::vector<std::uint64_t> epochs_;
    std::vector<std::vector<std::uint64_t>> counts_;
};

void record_selection(SelectionTrace& trace, const GateOutput& gate, std::uint64_t epoch);

// Shannon entropy (nats) of the normalized usage distribution in one epoch.
double usage_entropy(const SelectionTrace& trace, std::uint64_t epoch);

// Mean total-variation distance between consecutive epochs' usage.
double selection_oscillation(const SelectionTrace& trace);

}  // namespace confmoe
