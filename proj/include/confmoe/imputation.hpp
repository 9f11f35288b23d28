#pragma once
// Two-stage missing-modality imputation: a stochastic pool mean for the
// missing modality, refined by Top-T sparse cross-attention over the expert
// outputs of the modalities that are present.

#include <cstddef>
#include <iosfwd>
#include <random>
#include <vector>

#include "confmoe/matrix.hpp"

namespace confmoe {

// Observed training embeddings (s x d) of one modality.
struct ModalityPool {
    std::vector<DenseMatrix> members;
};

// Mean of n members sampled uniformly without replacement (with replacement
// when the pool holds fewer than n). Throws ImputationError on an empty pool.
DenseMatrix pre_impute(const ModalityPool& pool, std::size_t n, std::mt19937_64& rng);

// floor(s (|M| - 1) / B) clamped to [1, key_length].
std::size_t top_t_count(std::size_t seq_len, std::size_t num_modalities, std::size_t sparsity_b,
                        std::size_t key_length = static_cast<std::size_t>(-1));

struct SparseAttentionParams {
    DenseMatrix wq;  // d x d
    DenseMatrix wk;
    DenseMatrix wv;
    Vector ln_gain;
    Vector ln_bias;
    std::size_t sparsity_b = 4;
    double ln_eps = 1e-5;

    std::size_t dim() const { return wq.rows(); }

    // Projections uniform in [-1/sqrt(d), 1/sqrt(d)], unit gain, zero bias.
    static SparseAttentionParams random(std::size_t dim, std::size_t sparsity_b, std::mt19937_64& rng);
};

// A* = Mask_T(softmax(Q K^T / sqrt(d))) with Q = query W_q, K = keys W_k.
// Each row keeps its T largest entries (ties to the lower key index) and the
// rest are zeroed without renormalizing.
DenseMatrix sparse_attention_map(const DenseMatrix& query, const DenseMatrix& keys, const SparseAttentionParams& p,
                                 std::size_t top_t);

// A* (keys W_v).
DenseMatrix sparse_cross_attention(const DenseMatrix& query, const DenseMatrix& keys,
                                   const SparseAttentionParams& p, std::size_t top_t);

// Row-wise LayerNorm(query + sum_a SCA(query, available_a)).
DenseMatrix post_impute(const DenseMatrix& query, const std::vector<DenseMatrix>& available,
                        const SparseAttentionParams& p, std::size_t top_t);

struct SparseAttentionGrad {
    DenseMatrix dquery;
    DenseMatrix dkeys;
    DenseMatrix dwq;
    DenseMatrix dwk;
    DenseMatrix dwv;
};

SparseAttentionGrad sparse_cross_attention_backward(const DenseMatrix& query, const DenseMatrix& keys,
                                                    const SparseAttentionParams& p, std::size_t top_t,
                                                    const DenseMatrix& dout);

struct PostImputeGrad {
    DenseMatrix dquery;
    std::vector<DenseMatrix> davailable;
    SparseAttentionParams dparams;
};

PostImputeGrad post_impute_backward(const DenseMatrix& query, const std::vector<DenseMatrix>& available,
                                    const SparseAttentionParams& p, std::size_t top_t, const DenseMatrix& dout);

// Rows `query_idx,key_idx,weight` for the nonzero entries of an attention map.
void write_attention_csv(const DenseMatrix& attention, std::ostream& os);

}  // namespace confmoe
