#include "confmoe/training.hpp"

#include <array>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "confmoe/error.hpp"
#include "confmoe/format.hpp"
#include "confmoe/kernels.hpp"
#include "confmoe/numeric.hpp"
#include "confmoe/rng.hpp"

namespace confmoe {

std::string_view to_string(Variant v) { return v == Variant::TokenLevel ? "token" : "expert"; }

std::string_view to_string(ImputeMode m) {
    switch (m) {
        case ImputeMode::Off: return "off";
        case ImputeMode::PreOnly: return "pre";
        case ImputeMode::Full: return "full";
    }
    return "unknown";
}

Variant parse_variant(std::string_view text) {
    if (text == "token") return Variant::TokenLevel;
    if (text == "expert") return Variant::ExpertLevel;
    throw ConfigError("unknown variant '" + std::string(text) + "'");
}

ImputeMode parse_impute_mode(std::string_view text) {
    if (text == "off") return ImputeMode::Off;
    if (text == "pre") return ImputeMode::PreOnly;
    if (text == "full") return ImputeMode::Full;
    throw ConfigError("unknown impute mode '" + std::string(text) + "'");
}

void ModelConfig::validate() const {
    if (num_experts == 0) throw ConfigError("model: num_experts must be positive");
    if (top_k == 0 || top_k > num_experts) throw ConfigError("model: top_k must lie in [1, num_experts]");
    if (hidden_dim == 0) throw ConfigError("model: hidden_dim must be positive");
    if (sparsity_b == 0) throw ConfigError("model: sparsity_b must be at least 1");
    if (pre_impute_samples == 0) throw ConfigError("model: pre_impute_samples must be at least 1");
    if (!(learning_rate > 0.0)) throw ConfigError("model: learning_rate must be positive");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("model: dropout_rate must lie in [0, 1)");
    if (batch_size == 0) throw ConfigError("model: batch_size must be positive");
    if (!(gate_temperature > 0.0)) throw ConfigError("model: gate_temperature must be positive");
    if (!(conf_loss_weight >= 0.0) || !(lb_loss_weight >= 0.0)) throw ConfigError("model: loss weights must be >= 0");
}

void ModelParams::visit(const std::function<void(std::span<double>)>& f) {
    for (auto& w : proj_w) f(w.flat());
    for (auto& b : proj_b) f(b);
    f(gate.router.flat());
    f(gate.table.embeddings.flat());
    f(gate.confnet.weights.flat());
    f(gate.confnet.bias);
    for (auto& e : experts.experts) {
        f(e.weight.flat());
        f(e.bias);
    }
    f(attention.wq.flat());
    f(attention.wk.flat());
    f(attention.wv.flat());
    f(attention.ln_gain);
    f(attention.ln_bias);
    f(head_w.flat());
    f(head_b);
}

void ModelParams::visit(const std::function<void(std::span<const double>)>& f) const {
    const_cast<ModelParams*>(this)->visit([&](std::span<double> s) { f(s); });
}

std::size_t ModelParams::num_parameters() const {
    std::size_t n = 0;
    visit([&](std::span<const double> s) { n += s.size(); });
    return n;
}

ModelParams ModelParams::zeros_like() const {
    ModelParams z = *this;
    z.visit([](std::span<double> s) { std::fill(s.begin(), s.end(), 0.0); });
    return z;
}

namespace {

DenseMatrix uniform_matrix(std::size_t rows, std::size_t cols, double bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-bound, bound);
    DenseMatrix m(rows, cols);
    for (double& v : m.flat()) v = u(rng);
    return m;
}

}  // namespace

Model Model::create(const ModelConfig& config, const ModelShape& shape) {
    config.validate();
    if (shape.num_modalities < 2) throw ConfigError("model: need at least 2 modalities");
    Model model{config, shape, {}};
    auto rng = make_rng(config.seed, {0x494e4954ULL});
    const std::size_t d = config.hidden_dim;
    const std::size_t n = config.num_experts;
    ModelParams& p = model.params;

    const double in_bound = 1.0 / std::sqrt(static_cast<double>(shape.input_dim));
    for (std::size_t m = 0; m < shape.num_modalities; ++m) {
        p.proj_w.push_back(uniform_matrix(shape.input_dim, d, in_bound, rng));
        p.proj_b.emplace_back(d, 0.0);
    }
    const double d_bound = 1.0 / std::sqrt(static_cast<double>(d));
    p.gate.kind = config.gate;
    p.gate.temperature = config.gate_temperature;
    switch (config.gate) {
        case GateKind::Softmax:
        case GateKind::SoftmaxLoadBalanced:
        case GateKind::Mean: p.gate.router = uniform_matrix(d, n, d_bound, rng); break;
        case GateKind::Gaussian:
        case GateKind::Laplacian: {
            std::normal_distribution<double> g(0.0, 1.0);
            p.gate.table.embeddings = DenseMatrix(n, d);
            for (double& v : p.gate.table.embeddings.flat()) v = g(rng);
            break;
        }
        case GateKind::ConfNet:
            p.gate.confnet.weights = uniform_matrix(n, d, d_bound, rng);
            p.gate.confnet.bias = Vector(n, 0.0);
            break;
    }
    p.experts = ExpertPool::random(n, d, rng);
    p.attention = SparseAttentionParams::random(d, config.sparsity_b, rng);
    const std::size_t fused = shape.num_modalities * d;
    p.head_w = uniform_matrix(fused, shape.num_classes, 1.0 / std::sqrt(static_cast<double>(fused)), rng);
    p.head_b = Vector(shape.num_classes, 0.0);
    return model;
}

std::vector<ModalityPool> build_pools(const Dataset& train) {
    std::vector<ModalityPool> pools;
    if (train.instances.empty()) return pools;
    pools.resize(train.instances.front().modalities.size());
    for (const auto& inst : train.instances)
        for (std::size_t m = 0; m < pools.size(); ++m)
            if (inst.observed[m]) pools[m].members.push_back(inst.modalities[m]);
    return pools;
}

InstanceInputs draw_inputs(const ModalityBatch& inst, const std::vector<ModalityPool>& pools, const Model& model,
                           bool training, std::mt19937_64& rng) {
    const ModelConfig& cfg = model.config;
    InstanceInputs in;
    in.observed = inst.observed;
    for (std::size_t m = 0; m < inst.modalities.size(); ++m) {
        if (inst.observed[m]) {
            in.tokens.push_back(inst.modalities[m]);
        } else if (cfg.impute == ImputeMode::Off) {
            in.tokens.emplace_back(inst.modalities[m].rows(), inst.modalities[m].cols());
        } else {
            if (m >= pools.size()) throw ImputationError("no modality pool for modality " + std::to_string(m));
            in.tokens.push_back(pre_impute(pools[m], cfg.pre_impute_samples, rng));
        }
    }
    if (training && cfg.dropout_rate > 0.0) {
        std::bernoulli_distribution keep(1.0 - cfg.dropout_rate);
        const double scale = 1.0 / (1.0 - cfg.dropout_rate);
        for (std::size_t m = 0; m < inst.modalities.size(); ++m) {
            DenseMatrix mask(inst.modalities[m].rows(), cfg.hidden_dim);
            for (double& v : mask.flat()) v = keep(rng) ? scale : 0.0;
            in.dropout.push_back(std::move(mask));
        }
    }
    return in;
}

ExpertLevelWeights expert_level_confidence(const DenseMatrix& h, const TopK& topk, const ConfNetPool& pool) {
    const std::size_t n = pool.size();
    ExpertLevelWeights out{Vector(n, 0.0), std::vector<std::uint8_t>(n, 0), DenseMatrix(n, h.cols()),
                           std::vector<std::size_t>(n, 0)};
    for (std::size_t t = 0; t < topk.tokens(); ++t)
        for (std::size_t r = 0; r < topk.k(); ++r) {
            const std::size_t e = topk.at(t, r);
            kernels::axpy(1.0, h.row(t), out.pooled.row(e));
            ++out.assigned[e];
        }
    for (std::size_t e = 0; e < n; ++e) {
        if (out.assigned[e] == 0) continue;
        kernels::scale(1.0 / static_cast<double>(out.assigned[e]), out.pooled.row(e));
        out.active[e] = 1;
        out.weight[e] = sigmoid(kernels::dot(pool.weights.row(e), out.pooled.row(e)) + pool.bias[e]);
    }
    return out;
}

namespace {

// Everything one instance's forward pass produces that backward needs.
struct Tape {
    std::vector<std::uint8_t> embedded;
    DenseMatrix h;
    GateOutput gate;
    ExpertLevelWeights expert_level;
    bool use_expert_level = false;
    MoeActivations act;
    std::vector<std::size_t> refined;            // missing modalities that were post-imputed
    std::vector<std::size_t> available;          // observed modalities
    std::vector<DenseMatrix> queries;            // per refined modality, s x d
    std::vector<std::vector<DenseMatrix>> keys;  // per refined modality, per available, (sK) x d
    std::size_t top_t = 0;
    DenseMatrix y;
    Vector fused;
    Vector probs;
    DenseMatrix selected_conf;  // tokens x K, confnet only
    double p_true = 0.0;
    double task = 0.0;
    double conf = 0.0;
    double lb = 0.0;
};

// Keys for post-imputation: the K expert outputs of modality a stacked rank-major.
DenseMatrix stacked_expert_outputs(const MoeActivations& act, std::size_t a, std::size_t s) {
    std::vector<DenseMatrix> blocks;
    for (const auto& eo : act.expert_out) blocks.push_back(eo.slice_rows(a * s, s));
    return vstack(blocks);
}

Tape run_forward(const Model& model, const InstanceInputs& in, std::size_t label) {
    const ModelConfig& cfg = model.config;
    const ModelShape& shape = model.shape;
    const ModelParams& p = model.params;
    const std::size_t nm = shape.num_modalities;
    const std::size_t s = shape.seq_len;
    const std::size_t d = cfg.hidden_dim;
    if (in.tokens.size() != nm || in.observed.size() != nm) throw DimensionError("forward: modality count mismatch");
    if (label >= shape.num_classes) throw DimensionError("forward: label out of range");

    Tape tp;
    tp.embedded.assign(nm, 0);
    tp.h = DenseMatrix(nm * s, d);
    for (std::size_t m = 0; m < nm; ++m) {
        if (in.tokens[m].rows() != s || in.tokens[m].cols() != shape.input_dim) {
            throw DimensionError("forward: token block shape mismatch for modality " + std::to_string(m));
        }
        if (!in.observed[m] && cfg.impute == ImputeMode::Off) continue;
        tp.embedded[m] = 1;
        DenseMatrix hm = matmul(in.tokens[m], p.proj_w[m]);
        add_row_inplace(hm, p.proj_b[m]);
        if (!in.dropout.empty()) {
            for (std::size_t i = 0; i < hm.size(); ++i) hm.flat()[i] *= in.dropout[m].flat()[i];
        }
        std::copy(hm.flat().begin(), hm.flat().end(), tp.h.row(m * s).begin());
    }

    tp.gate = evaluate_gate(p.gate, tp.h, cfg.top_k);
    tp.use_expert_level = cfg.gate == GateKind::ConfNet && cfg.variant == Variant::ExpertLevel;
    if (tp.use_expert_level) {
        tp.expert_level = expert_level_confidence(tp.h, tp.gate.topk, p.gate.confnet);
        for (std::size_t t = 0; t < tp.h.rows(); ++t)
            for (std::size_t r = 0; r < cfg.top_k; ++r) tp.gate.weights(t, r) = tp.expert_level.weight[tp.gate.topk.at(t, r)];
    }
    tp.act = moe_forward_cached(tp.h, tp.gate.topk, tp.gate.weights, p.experts);
    tp.y = tp.act.out;

    for (std::size_t m = 0; m < nm; ++m)
        if (in.observed[m]) tp.available.push_back(m);
    if (cfg.impute == ImputeMode::Full && tp.available.size() < nm) {
        tp.top_t = top_t_count(s, nm, cfg.sparsity_b, s * cfg.top_k);
        std::vector<DenseMatrix> keys;
        for (std::size_t a : tp.available) keys.push_back(stacked_expert_outputs(tp.act, a, s));
        for (std::size_t m = 0; m < nm; ++m) {
            if (in.observed[m]) continue;
            DenseMatrix q = tp.act.out.slice_rows(m * s, s);
            const DenseMatrix refined = post_impute(q, keys, p.attention, tp.top_t);
            std::copy(refined.flat().begin(), refined.flat().end(), tp.y.row(m * s).begin());
            tp.refined.push_back(m);
            tp.queries.push_back(std::move(q));
            tp.keys.push_back(keys);
        }
    }

    tp.fused = Vector(nm * d, 0.0);
    for (std::size_t m = 0; m < nm; ++m) {
        std::span<double> dst(tp.fused.data() + m * d, d);
        for (std::size_t t = 0; t < s; ++t) kernels::axpy(1.0 / static_cast<double>(s), tp.y.row(m * s + t), dst);
    }
    Vector logits = vecmat(tp.fused, p.head_w);
    kernels::axpy(1.0, p.head_b, logits);
    tp.probs = softmax(logits).values();
    tp.p_true = tp.probs[label];
    tp.task = -std::log(std::max(tp.p_true, kLogFloor));

    if (cfg.gate == GateKind::ConfNet) {
        tp.selected_conf = DenseMatrix(tp.h.rows(), cfg.top_k);
        for (std::size_t t = 0; t < tp.h.rows(); ++t)
            for (std::size_t r = 0; r < cfg.top_k; ++r) tp.selected_conf(t, r) = tp.gate.scores(t, tp.gate.topk.at(t, r));
        tp.conf = confidence_loss(tp.selected_conf, Vector(tp.h.rows(), tp.p_true), cfg.top_k);
    }
    if (cfg.gate == GateKind::SoftmaxLoadBalanced) tp.lb = tp.gate.aux_loss.value_or(0.0);
    return tp;
}

void backward(const Model& model, const InstanceInputs& in, std::size_t label, const Tape& tp, double scale,
              ModelParams& grad) {
    const ModelConfig& cfg = model.config;
    const ModelShape& shape = model.shape;
    const ModelParams& p = model.params;
    const std::size_t nm = shape.num_modalities;
    const std::size_t s = shape.seq_len;
    const std::size_t d = cfg.hidden_dim;
    const std::size_t k = cfg.top_k;
    const std::size_t tokens = nm * s;

    // classifier head
    Vector dlogits = tp.probs;
    dlogits[label] -= 1.0;
    kernels::scale(scale, dlogits);
    for (std::size_t i = 0; i < tp.fused.size(); ++i) kernels::axpy(tp.fused[i], dlogits, grad.head_w.row(i));
    kernels::axpy(1.0, dlogits, grad.head_b);
    const Vector dfused = matvec(p.head_w, dlogits);

    // mean pooling
    DenseMatrix dy(tokens, d);
    for (std::size_t m = 0; m < nm; ++m) {
        std::span<const double> src(dfused.data() + m * d, d);
        for (std::size_t t = 0; t < s; ++t) kernels::axpy(1.0 / static_cast<double>(s), src, dy.row(m * s + t));
    }

    // post-imputation
    DenseMatrix dmoe = dy;
    std::vector<DenseMatrix> dexpert_out;
    if (!tp.refined.empty()) {
        dexpert_out.assign(k, DenseMatrix(tokens, d));
        for (std::size_t i = 0; i < tp.refined.size(); ++i) {
            const std::size_t m = tp.refined[i];
            const DenseMatrix dref = dy.slice_rows(m * s, s);
            const PostImputeGrad g = post_impute_backward(tp.queries[i], tp.keys[i], p.attention, tp.top_t, dref);
            std::copy(g.dquery.flat().begin(), g.dquery.flat().end(), dmoe.row(m * s).begin());
            add_inplace(grad.attention.wq, g.dparams.wq);
            add_inplace(grad.attention.wk, g.dparams.wk);
            add_inplace(grad.attention.wv, g.dparams.wv);
            kernels::axpy(1.0, g.dparams.ln_gain, grad.attention.ln_gain);
            kernels::axpy(1.0, g.dparams.ln_bias, grad.attention.ln_bias);
            for (std::size_t ai = 0; ai < tp.available.size(); ++ai) {
                const std::size_t a = tp.available[ai];
                const DenseMatrix& dk = g.davailable[ai];
                for (std::size_t r = 0; r < k; ++r)
                    for (std::size_t t = 0; t < s; ++t) kernels::axpy(1.0, dk.row(r * s + t), dexpert_out[r].row(a * s + t));
            }
        }
    }

    // MoE layer
    MoeGrad mg = moe_backward(tp.h, tp.gate.topk, tp.gate.weights, p.experts, tp.act, dmoe, dexpert_out);
    for (std::size_t e = 0; e < p.experts.size(); ++e) {
        add_inplace(grad.experts.experts[e].weight, mg.dpool.experts[e].weight);
        kernels::axpy(1.0, mg.dpool.experts[e].bias, grad.experts.experts[e].bias);
    }
    DenseMatrix dh = std::move(mg.dh);
    DenseMatrix dweights = std::move(mg.dweights);

    if (tp.use_expert_level) {
        const ExpertLevelWeights& el = tp.expert_level;
        Vector dw(p.experts.size(), 0.0);
        for (std::size_t t = 0; t < tokens; ++t)
            for (std::size_t r = 0; r < k; ++r) dw[tp.gate.topk.at(t, r)] += dweights(t, r);
        for (std::size_t e = 0; e < dw.size(); ++e) {
            if (!el.active[e] || dw[e] == 0.0) continue;
            const double dv = dw[e] * el.weight[e] * (1.0 - el.weight[e]);
            kernels::axpy(dv, el.pooled.row(e), grad.gate.confnet.weights.row(e));
            grad.gate.confnet.bias[e] += dv;
            const double share = dv / static_cast<double>(el.assigned[e]);
            for (std::size_t t = 0; t < tokens; ++t)
                for (std::size_t r = 0; r < k; ++r)
                    if (tp.gate.topk.at(t, r) == e) kernels::axpy(share, p.gate.confnet.weights.row(e), dh.row(t));
        }
        dweights.fill(0.0);
    }

    // gate, including the confidence regression onto the detached p_t
    DenseMatrix dconf;
    if (cfg.gate == GateKind::ConfNet && cfg.conf_loss_weight != 0.0) {
        const DenseMatrix g = confidence_loss_grad(tp.selected_conf, Vector(tokens, tp.p_true));
        dconf = DenseMatrix(tokens, p.experts.size());
        for (std::size_t t = 0; t < tokens; ++t)
            for (std::size_t r = 0; r < k; ++r) dconf(t, tp.gate.topk.at(t, r)) += scale * cfg.conf_loss_weight * g(t, r);
    }
    const double aux_scale = cfg.gate == GateKind::SoftmaxLoadBalanced ? scale * cfg.lb_loss_weight : 0.0;
    GateGrad gg = gate_backward(p.gate, tp.h, tp.gate, dweights, aux_scale, dconf.empty() ? nullptr : &dconf);
    add_inplace(dh, gg.dh);
    add_inplace(grad.gate.router, gg.dparams.router);
    add_inplace(grad.gate.table.embeddings, gg.dparams.table.embeddings);
    add_inplace(grad.gate.confnet.weights, gg.dparams.confnet.weights);
    kernels::axpy(1.0, gg.dparams.confnet.bias, grad.gate.confnet.bias);

    // input projections
    for (std::size_t m = 0; m < nm; ++m) {
        if (!tp.embedded[m]) continue;
        DenseMatrix dpre = dh.slice_rows(m * s, s);
        if (!in.dropout.empty()) {
            for (std::size_t i = 0; i < dpre.size(); ++i) dpre.flat()[i] *= in.dropout[m].flat()[i];
        }
        matmul_tn_accumulate(in.tokens[m], dpre, grad.proj_w[m]);
        for (std::size_t t = 0; t < s; ++t) kernels::axpy(1.0, dpre.row(t), grad.proj_b[m]);
    }
}

}  // namespace

ForwardResult forward_instance(const Model& model, const InstanceInputs& in, std::size_t label) {
    Tape tp = run_forward(model, in, label);
    return {std::move(tp.probs), std::move(tp.gate), std::move(tp.act.expert_out), std::move(tp.y), tp.conf, tp.lb};
}

BatchLoss loss_and_grad(const Model& model, std::span<const InstanceInputs> batch, std::span<const std::size_t> labels,
                        ModelParams* grad) {
    if (batch.empty()) throw DimensionError("loss_and_grad: empty batch");
    if (labels.size() != batch.size()) throw DimensionError("loss_and_grad: one label per instance required");
    const double scale = 1.0 / static_cast<double>(batch.size());
    const ModelConfig& cfg = model.config;
    BatchLoss out;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const Tape tp = run_forward(model, batch[i], labels[i]);
        out.task += scale * tp.task;
        out.conf += scale * tp.conf;
        out.lb += scale * tp.lb;
        out.probs.push_back(tp.probs);
        out.selections.push_back(tp.gate.topk);
        if (grad != nullptr) backward(model, batch[i], labels[i], tp, scale, *grad);
    }
    out.total = out.task;
    if (cfg.gate == GateKind::ConfNet) out.total += cfg.conf_loss_weight * out.conf;
    if (cfg.gate == GateKind::SoftmaxLoadBalanced) out.total += cfg.lb_loss_weight * out.lb;
    return out;
}

void adam_update(ModelParams& params, const ModelParams& grad, AdamState& state, double lr) {
    std::vector<std::span<const double>> gs;
    grad.visit([&](std::span<const double> g) { gs.push_back(g); });
    if (state.m.empty()) {
        for (auto g : gs) {
            state.m.emplace_back(g.size(), 0.0);
            state.v.emplace_back(g.size(), 0.0);
        }
    }
    ++state.t;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    std::size_t slot = 0;
    params.visit([&](std::span<double> w) {
        const auto g = gs[slot];
        Vector& m = state.m[slot];
        Vector& v = state.v[slot];
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + state.eps);
        }
        ++slot;
    });
}

BatchLoss train_step(Model& model, AdamState& opt, std::span<const InstanceInputs> batch,
                     std::span<const std::size_t> labels) {
    ModelParams grad = model.params.zeros_like();
    BatchLoss loss = loss_and_grad(model, batch, labels, &grad);
    if (!std::isfinite(loss.total)) {
        throw NumericalError("non-finite loss (task=" + format_real(loss.task) + ", conf=" + format_real(loss.conf) +
                             ", lb=" + format_real(loss.lb) + ")");
    }
    adam_update(model.params, grad, opt, model.config.learning_rate);
    return loss;
}

double f1_macro(std::span<const std::size_t> y_true, std::span<const std::size_t> y_pred, std::size_t num_classes) {
    if (y_true.empty()) throw MetricError("f1_macro: empty input");
    if (y_true.size() != y_pred.size()) throw DimensionError("f1_macro: length mismatch");
    std::vector<double> tp(num_classes, 0.0), fp(num_classes, 0.0), fn(num_classes, 0.0);
    for (std::size_t i = 0; i < y_true.size(); ++i) {
        if (y_true[i] >= num_classes || y_pred[i] >= num_classes) throw DomainError("f1_macro: label out of range");
        if (y_true[i] == y_pred[i]) {
            tp[y_true[i]] += 1.0;
        } else {
            fp[y_pred[i]] += 1.0;
            fn[y_true[i]] += 1.0;
        }
    }
    double sum = 0.0;
    for (std::size_t c = 0; c < num_classes; ++c) {
        const double denom = 2.0 * tp[c] + fp[c] + fn[c];
        sum += denom > 0.0 ? 2.0 * tp[c] / denom : 0.0;
    }
    return sum / static_cast<double>(num_classes);
}

double auc_ovr(std::span<const std::size_t> y_true, const DenseMatrix& scores, std::size_t num_classes) {
    const std::size_t n = y_true.size();
    if (scores.rows() != n || scores.cols() != num_classes) throw DimensionError("auc_ovr: score shape mismatch");
    std::vector<std::size_t> order(n);
    double sum = 0.0;
    std::size_t used = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
        std::size_t pos = 0;
        for (auto y : y_true) pos += y == c ? 1 : 0;
        const std::size_t neg = n - pos;
        if (pos == 0 || neg == 0) continue;
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores(a, c) < scores(b, c); });
        double rank_sum = 0.0;
        for (std::size_t i = 0; i < n;) {
            std::size_t j = i;
            while (j < n && scores(order[j], c) == scores(order[i], c)) ++j;
            const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks i+1 .. j
            for (std::size_t q = i; q < j; ++q)
                if (y_true[order[q]] == c) rank_sum += avg_rank;
            i = j;
        }
        const double p = static_cast<double>(pos);
        const double u = rank_sum - p * (p + 1.0) / 2.0;
        sum += u / (p * static_cast<double>(neg));
        ++used;
    }
    if (used == 0) throw MetricError("auc_ovr: no class has both positives and negatives");
    return sum / static_cast<double>(used);
}

void write_metrics_csv(const std::vector<MetricsRow>& rows, std::ostream& os) {
    os << "epoch,split,loss_task,loss_conf,loss_lb,f1_macro,auc\n";
    for (const auto& r : rows) {
        os << r.epoch << ',' << r.split << ',' << format_real(r.loss_task) << ',' << format_real(r.loss_conf) << ','
           << format_real(r.loss_lb) << ',' << format_real(r.f1_macro) << ',' << format_real(r.auc) << '\n';
    }
}

namespace {

std::size_t argmax(const Vector& v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

MetricsRow summarize(std::uint64_t epoch, Split split, double task, double conf, double lb,
                     const std::vector<Vector>& probs, const std::vector<std::size_t>& labels,
                     std::size_t num_classes) {
    MetricsRow row{epoch, std::string(to_string(split)), task, conf, lb, 0.0, 0.0};
    std::vector<std::size_t> pred;
    DenseMatrix scores(probs.size(), num_classes);
    for (std::size_t i = 0; i < probs.size(); ++i) {
        pred.push_back(argmax(probs[i]));
        std::copy(probs[i].begin(), probs[i].end(), scores.row(i).begin());
    }
    row.f1_macro = f1_macro(labels, pred, num_classes);
    row.auc = auc_ovr(labels, scores, num_classes);
    return row;
}

MetricsRow evaluate(const Model& model, const Dataset& data, const std::vector<ModalityPool>& pools,
                    std::uint64_t epoch, Split split) {
    double task = 0.0, conf = 0.0, lb = 0.0;
    std::vector<Vector> probs;
    const std::uint64_t tag = split == Split::Train ? 0x45565452ULL : 0x45565445ULL;
    for (std::size_t i = 0; i < data.size(); ++i) {
        // same pre-imputation draw at every evaluation
        auto rng = make_rng(model.config.seed, {tag, i});
        const InstanceInputs in = draw_inputs(data.instances[i], pools, model, false, rng);
        const std::array<InstanceInputs, 1> one{in};
        const std::array<std::size_t, 1> label{data.labels[i]};
        const BatchLoss l = loss_and_grad(model, one, label, nullptr);
        task += l.task;
        conf += l.conf;
        lb += l.lb;
        probs.push_back(l.probs.front());
    }
    const double n = static_cast<double>(data.size());
    return summarize(epoch, split, task / n, conf / n, lb / n, probs, data.labels, model.shape.num_classes);
}

}  // namespace

RunResult train_model(const ModelConfig& config, const Dataset& train, const Dataset& test) {
    if (train.instances.empty()) throw ConfigError("train_model: empty training set");
    const ModalityBatch& first = train.instances.front();
    std::size_t num_classes = 0;
    for (auto l : train.labels) num_classes = std::max(num_classes, l + 1);
    for (auto l : test.labels) num_classes = std::max(num_classes, l + 1);
    const ModelShape shape{first.modalities.size(), first.modalities.front().rows(),
                           first.modalities.front().cols(), std::max<std::size_t>(num_classes, 2)};

    RunResult result{{}, SelectionTrace(config.num_experts), Model::create(config, shape)};
    Model& model = result.model;
    const auto pools = build_pools(train);
    AdamState opt;

    result.metrics.push_back(evaluate(model, train, pools, 0, Split::Train));
    if (!test.instances.empty()) result.metrics.push_back(evaluate(model, test, pools, 0, Split::Test));

    std::vector<std::size_t> order(train.size());
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        auto shuffle_rng = make_rng(config.seed, {0x53485546ULL, epoch});
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        double task = 0.0, conf = 0.0, lb = 0.0;
        std::vector<Vector> probs;
        std::vector<std::size_t> labels;
        result.trace.touch(epoch);
        for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
            const std::size_t end = std::min(order.size(), begin + config.batch_size);
            std::vector<InstanceInputs> batch;
            std::vector<std::size_t> batch_labels;
            for (std::size_t b = begin; b < end; ++b) {
                const std::size_t idx = order[b];
                auto rng = make_rng(config.seed, {0x44524157ULL, epoch, idx});
                batch.push_back(draw_inputs(train.instances[idx], pools, model, true, rng));
                batch_labels.push_back(train.labels[idx]);
            }
            const BatchLoss l = train_step(model, opt, batch, batch_labels);
            const double w = static_cast<double>(batch.size());
            task += w * l.task;
            conf += w * l.conf;
            lb += w * l.lb;
            for (std::size_t i = 0; i < batch.size(); ++i) {
                probs.push_back(l.probs[i]);
                labels.push_back(batch_labels[i]);
                result.trace.record(l.selections[i], epoch);
            }
        }
        const double n = static_cast<double>(order.size());
        result.metrics.push_back(summarize(epoch, Split::Train, task / n, conf / n, lb / n, probs, labels, shape.num_classes));
        if (!test.instances.empty()) result.metrics.push_back(evaluate(model, test, pools, epoch, Split::Test));
    }
    return result;
}

}  // namespace confmoe
