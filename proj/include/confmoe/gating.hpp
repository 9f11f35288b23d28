#pragma once
// Token-to-expert gates. Every gate scores each token against each expert,
// picks the Top-K experts and reports the combining weight used for each
// selected expert.

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "confmoe/matrix.hpp"
#include "confmoe/numeric.hpp"

namespace confmoe {

enum class GateKind { Softmax, SoftmaxLoadBalanced, Mean, Gaussian, Laplacian, ConfNet };

inline constexpr GateKind kAllGateKinds[] = {GateKind::Mean,     GateKind::Softmax,   GateKind::SoftmaxLoadBalanced,
                                             GateKind::Gaussian, GateKind::Laplacian, GateKind::ConfNet};

// "softmax", "softmax_lb", "mean", "gaussian", "laplacian", "confnet".
std::string_view to_string(GateKind kind);
GateKind parse_gate_kind(std::string_view text);

// Top-K expert indices per token, best first.
class TopK {
   public:
    TopK() = default;
    TopK(std::size_t tokens, std::size_t k) : tokens_(tokens), k_(k), idx_(tokens * k) {}

    std::size_t tokens() const { return tokens_; }
    std::size_t k() const { return k_; }
    std::size_t& at(std::size_t token, std::size_t rank) { return idx_[token * k_ + rank]; }
    std::size_t at(std::size_t token, std::size_t rank) const { return idx_[token * k_ + rank]; }
    std::span<const std::size_t> row(std::size_t token) const { return {idx_.data() + token * k_, k_}; }

    friend bool operator==(const TopK&, const TopK&) = default;

   private:
    std::size_t tokens_ = 0;
    std::size_t k_ = 0;
    std::vector<std::size_t> idx_;
};

struct GateOutput {
    DenseMatrix scores;   // tokens x N
    TopK topk;            // tokens x K
    DenseMatrix weights;  // tokens x K combining weights, aligned with topk
    std::optional<double> aux_loss;
};

// Indices of the k largest values, descending; ties go to the lower index.
std::vector<std::size_t> select_topk(std::span<const double> values, std::size_t k);

struct ExpertEmbeddingTable {
    DenseMatrix embeddings;  // N x d
};

// One linear confidence head per expert: c_i = sigmoid(w_i . h + b_i).
struct ConfNetPool {
    DenseMatrix weights;  // N x d
    Vector bias;          // N
    std::size_t size() const { return weights.rows(); }
};

enum class DistanceMetric { L1, L2Squared };

GateOutput gate_softmax(const DenseMatrix& h, const DenseMatrix& router, std::size_t k);
GateOutput gate_softmax_load_balanced(const DenseMatrix& h, const DenseMatrix& router, std::size_t k);
GateOutput gate_mean(const DenseMatrix& h, const DenseMatrix& router, std::size_t k);
GateOutput gate_distance(const DenseMatrix& h, const ExpertEmbeddingTable& table, std::size_t k,
                         DistanceMetric metric, double temperature);
// `num_experts` is the expert pool size the pool must match.
GateOutput gate_confnet(const DenseMatrix& h, const ConfNetPool& pool, std::size_t k, std::size_t num_experts);
GateOutput gate_confnet(const DenseMatrix& h, const ConfNetPool& pool, std::size_t k);

// Mean over all (token, selected expert) pairs of (c - p_t)^2.
// `confidences` is tokens x K, `target` has one p_t per token.
double confidence_loss(const DenseMatrix& confidences, std::span<const double> target, std::size_t k);
// d loss / d confidences; the target is a constant.
DenseMatrix confidence_loss_grad(const DenseMatrix& confidences, std::span<const double> target);

// Mean over tokens of 1/H(g) for simplex score rows.
double load_balance_loss(const DenseMatrix& scores);

// Full parameter set for any gate kind; only the members the kind uses are
// populated.
struct GateParams {
    GateKind kind = GateKind::Softmax;
    DenseMatrix router;               // d x N (softmax family, mean)
    ExpertEmbeddingTable table;       // gaussian, laplacian
    ConfNetPool confnet;              // confnet
    double temperature = 1.0;

    std::size_t num_experts() const;
};

GateOutput evaluate_gate(const GateParams& params, const DenseMatrix& h, std::size_t k);

struct GateGrad {
    DenseMatrix dh;
    GateParams dparams;  // same layout as the params, zero where unused
};

// Backpropagates d loss / d weights (tokens x K) plus `aux_scale` times the
// gradient of the auxiliary load loss (softmax_lb only), and `dconfidence`
// (tokens x N, confnet only) into h and the gate parameters.
GateGrad gate_backward(const GateParams& params, const DenseMatrix& h, const GateOutput& out,
                       const DenseMatrix& dweights, double aux_scale, const DenseMatrix* dconfidence = nullptr);

GateParams zeros_like(const GateParams& p);

}  // namespace confmoe
