#pragma once
// End-to-end model: per-modality input projections, optional pre-imputation,
// one shared SMoE layer over all modalities' tokens, optional post-imputation
// of missing modalities, mean pooling and a linear classifier. Gradients are
// hand-composed from each component's backward pass.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "confmoe/gating.hpp"
#include "confmoe/imputation.hpp"
#include "confmoe/moe.hpp"
#include "confmoe/synthdata.hpp"

namespace confmoe {

enum class Variant { TokenLevel, ExpertLevel };
enum class ImputeMode { Off, PreOnly, Full };

std::string_view to_string(Variant v);    // "token", "expert"
std::string_view to_string(ImputeMode m);  // "off", "pre", "full"
Variant parse_variant(std::string_view text);
ImputeMode parse_impute_mode(std::string_view text);

struct ModelConfig {
    GateKind gate = GateKind::ConfNet;
    Variant variant = Variant::TokenLevel;
    std::size_t num_experts = 8;
    std::size_t top_k = 2;
    std::size_t hidden_dim = 32;
    std::size_t sparsity_b = 4;
    std::size_t pre_impute_samples = 10;
    ImputeMode impute = ImputeMode::Full;
    double conf_loss_weight = 1.0;
    double lb_loss_weight = 0.01;
    double learning_rate = 3e-4;
    std::size_t epochs = 50;
    double dropout_rate = 0.1;
    std::size_t batch_size = 64;
    double gate_temperature = 1.0;
    std::uint64_t seed = 2023;

    void validate() const;
};

struct ModelParams {
    std::vector<DenseMatrix> proj_w;  // per modality, input_dim x d
    std::vector<Vector> proj_b;       // per modality, d
    GateParams gate;
    ExpertPool experts;
    SparseAttentionParams attention;
    DenseMatrix head_w;  // (|M| d) x C
    Vector head_b;       // C

    // Every trainable tensor in a fixed order.
    void visit(const std::function<void(std::span<double>)>& f);
    void visit(const std::function<void(std::span<const double>)>& f) const;
    std::size_t num_parameters() const;
    ModelParams zeros_like() const;
};

struct ModelShape {
    std::size_t num_modalities = 3;
    std::size_t seq_len = 8;
    std::size_t input_dim = 32;
    std::size_t num_classes = 3;
};

struct Model {
    ModelConfig config;
    ModelShape shape;
    ModelParams params;

    static Model create(const ModelConfig& config, const ModelShape& shape);
};

// Everything stochastic about one forward pass, drawn up front so that the
// pass itself is a deterministic function of the parameters.
struct InstanceInputs {
    std::vector<DenseMatrix> tokens;      // per modality, s x input_dim (pre-imputed when missing)
    std::vector<std::uint8_t> observed;   // 1 = present
    std::vector<DenseMatrix> dropout;     // per modality s x d keep-masks scaled by 1/(1-p); empty = eval
};

// Training-set embeddings per modality, used for pre-imputation.
std::vector<ModalityPool> build_pools(const Dataset& train);

// Samples pre-imputation and dropout for one instance.
InstanceInputs draw_inputs(const ModalityBatch& inst, const std::vector<ModalityPool>& pools, const Model& model,
                           bool training, std::mt19937_64& rng);

struct ForwardResult {
    Vector probs;                     // C, sums to 1
    GateOutput gate;                  // over all |M| s tokens, modality-major
    std::vector<DenseMatrix> expert_outputs;  // K x (|M| s x d)
    DenseMatrix moe_out;              // |M| s x d after post-imputation
    double loss_conf = 0.0;           // only for confnet
    double loss_lb = 0.0;             // only for softmax_lb
};

ForwardResult forward_instance(const Model& model, const InstanceInputs& in, std::size_t label);

struct ExpertLevelWeights {
    Vector weight;                     // N, sigmoid(U_e(mean of assigned tokens))
    std::vector<std::uint8_t> active;  // N, 1 when the expert received tokens
    DenseMatrix pooled;                // N x d mean assigned token representation
    std::vector<std::size_t> assigned; // N, token counts
};

// Averages the tokens routed to each expert and scores them with that
// expert's confidence head; experts without tokens are inactive.
ExpertLevelWeights expert_level_confidence(const DenseMatrix& h, const TopK& topk, const ConfNetPool& pool);

struct BatchLoss {
    double total = 0.0;
    double task = 0.0;
    double conf = 0.0;
    double lb = 0.0;
    std::vector<Vector> probs;
    std::vector<TopK> selections;
};

// Mean loss over the batch; when `grad` is non-null it receives the gradient
// of `total` with respect to every parameter.
BatchLoss loss_and_grad(const Model& model, std::span<const InstanceInputs> batch, std::span<const std::size_t> labels,
                        ModelParams* grad);

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t t = 0;
    std::vector<Vector> m;
    std::vector<Vector> v;
};

void adam_update(ModelParams& params, const ModelParams& grad, AdamState& state, double lr);

// One optimization step on a batch. Throws NumericalError on a non-finite loss.
BatchLoss train_step(Model& model, AdamState& opt, std::span<const InstanceInputs> batch,
                     std::span<const std::size_t> labels);

double f1_macro(std::span<const std::size_t> y_true, std::span<const std::size_t> y_pred, std::size_t num_classes);
// One-vs-rest ROC-AUC via the Mann-Whitney statistic with average ranks for
// ties, macro-averaged over classes that have both positives and negatives.
double auc_ovr(std::span<const std::size_t> y_true, const DenseMatrix& scores, std::size_t num_classes);

struct MetricsRow {
    std::uint64_t epoch = 0;
    std::string split;
    double loss_task = 0.0;
    double loss_conf = 0.0;
    double loss_lb = 0.0;
    double f1_macro = 0.0;
    double auc = 0.0;
};

void write_metrics_csv(const std::vector<MetricsRow>& rows, std::ostream& os);

struct RunResult {
    std::vector<MetricsRow> metrics;
    SelectionTrace trace{0};
    Model model;
};

// Full training run: evaluation before training (epoch 0, both splits), then
// per epoch a running-average train row and a test evaluation row.
RunResult train_model(const ModelConfig& config, const Dataset& train, const Dataset& test);

}  // namespace confmoe
