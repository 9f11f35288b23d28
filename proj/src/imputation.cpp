#include "confmoe/imputation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <string>

#include "confmoe/error.hpp"
#include "confmoe/format.hpp"
#include "confmoe/gating.hpp"
#include "confmoe/kernels.hpp"
#include "confmoe/numeric.hpp"

namespace confmoe {

DenseMatrix pre_impute(const ModalityPool& pool, std::size_t n, std::mt19937_64& rng) {
    if (pool.members.empty()) throw ImputationError("pre_impute: empty modality pool");
    if (n == 0) throw ConfigError("pre_impute: sample count must be at least 1");
    const DenseMatrix& first = pool.members.front();
    DenseMatrix mean(first.rows(), first.cols());
    const std::size_t size = pool.members.size();

    std::vector<std::size_t> picks;
    picks.reserve(n);
    if (size >= n) {
        std::vector<std::size_t> order(size);
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, size - 1);
            std::swap(order[i], order[pick(rng)]);
            picks.push_back(order[i]);
        }
    } else {
        std::uniform_int_distribution<std::size_t> pick(0, size - 1);
        for (std::size_t i = 0; i < n; ++i) picks.push_back(pick(rng));
    }

    for (std::size_t idx : picks) {
        const DenseMatrix& m = pool.members[idx];
        if (m.rows() != first.rows() || m.cols() != first.cols()) {
            throw DimensionError("pre_impute: pool members differ in shape");
        }
        add_inplace(mean, m);
    }
    kernels::scale(1.0 / static_cast<double>(n), mean.flat());
    return mean;
}

std::size_t top_t_count(std::size_t seq_len, std::size_t num_modalities, std::size_t sparsity_b,
                        std::size_t key_length) {
    if (num_modalities < 2) throw ConfigError("top_t_count: need at least 2 modalities for cross-modal context");
    if (seq_len == 0 || sparsity_b == 0) throw ConfigError("top_t_count: s and B must be positive");
    std::size_t t = seq_len * (num_modalities - 1) / sparsity_b;
    t = std::max<std::size_t>(t, 1);
    return std::min(t, key_length);
}

SparseAttentionParams SparseAttentionParams::random(std::size_t dim, std::size_t sparsity_b, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
    std::uniform_real_distribution<double> dist(-bound, bound);
    SparseAttentionParams p;
    for (DenseMatrix* m : {&p.wq, &p.wk, &p.wv}) {
        *m = DenseMatrix(dim, dim);
        for (double& w : m->flat()) w = dist(rng);
    }
    p.ln_gain = Vector(dim, 1.0);
    p.ln_bias = Vector(dim, 0.0);
    p.sparsity_b = sparsity_b;
    return p;
}

namespace {

struct AttentionState {
    DenseMatrix q;
    DenseMatrix k;
    DenseMatrix v;
    DenseMatrix probs;   // full softmax
    DenseMatrix sparse;  // masked
};

AttentionState attend(const DenseMatrix& query, const DenseMatrix& keys, const SparseAttentionParams& p,
                      std::size_t top_t, bool need_values) {
    const std::size_t d = p.dim();
    if (query.cols() != d || keys.cols() != d) throw DimensionError("sparse attention: embedding dim mismatch");
    if (keys.rows() == 0) throw DimensionError("sparse attention: no keys");
    if (top_t == 0 || top_t > keys.rows()) {
        throw DimensionError("sparse attention: T=" + std::to_string(top_t) + " outside [1, " +
                             std::to_string(keys.rows()) + "]");
    }
    AttentionState st;
    st.q = matmul(query, p.wq);
    st.k = matmul(keys, p.wk);
    if (need_values) st.v = matmul(keys, p.wv);
    DenseMatrix scores = matmul_nt(st.q, st.k);
    kernels::scale(1.0 / std::sqrt(static_cast<double>(d)), scores.flat());
    st.probs = DenseMatrix(scores.rows(), scores.cols());
    st.sparse = DenseMatrix(scores.rows(), scores.cols());
    for (std::size_t r = 0; r < scores.rows(); ++r) {
        const auto g = softmax(scores.row(r));
        std::copy(g.values().begin(), g.values().end(), st.probs.row(r).begin());
        for (std::size_t j : select_topk(g.values(), top_t)) st.sparse(r, j) = g[j];
    }
    return st;
}

}  // namespace

DenseMatrix sparse_attention_map(const DenseMatrix& query, const DenseMatrix& keys, const SparseAttentionParams& p,
                                 std::size_t top_t) {
    return attend(query, keys, p, top_t, false).sparse;
}

DenseMatrix sparse_cross_attention(const DenseMatrix& query, const DenseMatrix& keys,
                                   const SparseAttentionParams& p, std::size_t top_t) {
    const AttentionState st = attend(query, keys, p, top_t, true);
    return matmul(st.sparse, st.v);
}

namespace {

DenseMatrix residual_sum(const DenseMatrix& query, const std::vector<DenseMatrix>& available,
                         const SparseAttentionParams& p, std::size_t top_t) {
    DenseMatrix z = query;
    for (const auto& a : available) add_inplace(z, sparse_cross_attention(query, a, p, top_t));
    return z;
}

}  // namespace

DenseMatrix post_impute(const DenseMatrix& query, const std::vector<DenseMatrix>& available,
                        const SparseAttentionParams& p, std::size_t top_t) {
    const DenseMatrix z = residual_sum(query, available, p, top_t);
    DenseMatrix out(z.rows(), z.cols());
    for (std::size_t r = 0; r < z.rows(); ++r) {
        const Vector y = layer_norm(z.row(r), p.ln_gain, p.ln_bias, p.ln_eps);
        std::copy(y.begin(), y.end(), out.row(r).begin());
    }
    return out;
}

SparseAttentionGrad sparse_cross_attention_backward(const DenseMatrix& query, const DenseMatrix& keys,
                                                    const SparseAttentionParams& p, std::size_t top_t,
                                                    const DenseMatrix& dout) {
    const AttentionState st = attend(query, keys, p, top_t, true);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(p.dim()));

    const DenseMatrix dsparse = matmul_nt(dout, st.v);  // s x n
    const DenseMatrix dv = matmul_tn(st.sparse, dout);  // n x d
    DenseMatrix dscores(dsparse.rows(), dsparse.cols());
    for (std::size_t r = 0; r < dsparse.rows(); ++r) {
        Vector dp(dsparse.cols(), 0.0);
        for (std::size_t j = 0; j < dp.size(); ++j)
            if (st.sparse(r, j) != 0.0) dp[j] = dsparse(r, j);
        const SimplexVector g(Vector(st.probs.row(r).begin(), st.probs.row(r).end()));
        const Vector du = softmax_backward(g, dp);
        for (std::size_t j = 0; j < du.size(); ++j) dscores(r, j) = du[j] * inv_sqrt_d;
    }
    const DenseMatrix dq = matmul(dscores, st.k);     // s x d
    const DenseMatrix dk = matmul_tn(dscores, st.q);  // n x d

    SparseAttentionGrad grad;
    grad.dquery = matmul_nt(dq, p.wq);
    grad.dkeys = matmul_nt(dk, p.wk);
    add_inplace(grad.dkeys, matmul_nt(dv, p.wv));
    grad.dwq = matmul_tn(query, dq);
    grad.dwk = matmul_tn(keys, dk);
    grad.dwv = matmul_tn(keys, dv);
    return grad;
}

PostImputeGrad post_impute_backward(const DenseMatrix& query, const std::vector<DenseMatrix>& available,
                                    const SparseAttentionParams& p, std::size_t top_t, const DenseMatrix& dout) {
    const std::size_t d = p.dim();
    const DenseMatrix z = residual_sum(query, available, p, top_t);

    PostImputeGrad grad;
    grad.dparams.wq = DenseMatrix(d, d);
    grad.dparams.wk = DenseMatrix(d, d);
    grad.dparams.wv = DenseMatrix(d, d);
    grad.dparams.ln_gain = Vector(d, 0.0);
    grad.dparams.ln_bias = Vector(d, 0.0);
    grad.dparams.sparsity_b = p.sparsity_b;
    grad.dparams.ln_eps = p.ln_eps;

    DenseMatrix dz(z.rows(), z.cols());
    for (std::size_t r = 0; r < z.rows(); ++r) {
        const LayerNormGrad g = layer_norm_backward(dout.row(r), z.row(r), p.ln_gain, p.ln_eps);
        std::copy(g.dx.begin(), g.dx.end(), dz.row(r).begin());
        kernels::axpy(1.0, g.dgain, grad.dparams.ln_gain);
        kernels::axpy(1.0, g.dbias, grad.dparams.ln_bias);
    }

    grad.dquery = dz;
    for (const auto& a : available) {
        SparseAttentionGrad g = sparse_cross_attention_backward(query, a, p, top_t, dz);
        add_inplace(grad.dquery, g.dquery);
        add_inplace(grad.dparams.wq, g.dwq);
        add_inplace(grad.dparams.wk, g.dwk);
        add_inplace(grad.dparams.wv, g.dwv);
        grad.davailable.push_back(std::move(g.dkeys));
    }
    return grad;
}

void write_attention_csv(const DenseMatrix& attention, std::ostream& os) {
    os << "query_idx,key_idx,weight\n";
    for (std::size_t r = 0; r < attention.rows(); ++r)
        for (std::size_t c = 0; c < attention.cols(); ++c)
            if (attention(r, c) != 0.0) os << r << ',' << c << ',' << format_real(attention(r, c)) << '\n';
}

}  // namespace confmoe
