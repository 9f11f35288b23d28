#include <cmath>
#include <random>
#include <sstream>

#include "confmoe/error.hpp"
#include "confmoe/numeric.hpp"
#include "confmoe/rng.hpp"
#include "confmoe/training.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace confmoe;

namespace {

ModelConfig tiny_config(GateKind gate, Variant variant = Variant::TokenLevel, ImputeMode impute = ImputeMode::Full) {
    ModelConfig c;
    c.gate = gate;
    c.variant = variant;
    c.impute = impute;
    c.num_experts = 4;
    c.top_k = 2;
    c.hidden_dim = 4;
    c.sparsity_b = 2;
    c.pre_impute_samples = 3;
    c.dropout_rate = 0.1;
    c.batch_size = 4;
    c.seed = 17;
    return c;
}

constexpr ModelShape kTinyShape{3, 3, 3, 3};

Dataset tiny_dataset(std::size_t n, std::uint64_t seed) {
    SynthSpec s;
    s.num_train = n;
    s.num_test = 1;
    s.seq_len = kTinyShape.seq_len;
    s.dim = kTinyShape.input_dim;
    s.latent_dim = 2;
    s.seed = seed;
    return apply_protocol(generate(s).train, RandomDropout{0.5}, Split::Train, seed);
}

// Flat views over every parameter, in visit order.
std::vector<double*> flat_params(ModelParams& p) {
    std::vector<double*> out;
    p.visit([&](std::span<double> s) {
        for (double& v : s) out.push_back(&v);
    });
    return out;
}

std::vector<InstanceInputs> training_inputs(const Model& model, const Dataset& data) {
    const auto pools = build_pools(data);
    std::vector<InstanceInputs> batch;
    for (std::size_t i = 0; i < data.size(); ++i) {
        auto rng = make_rng(99, {i});
        batch.push_back(draw_inputs(data.instances[i], pools, model, true, rng));
    }
    return batch;
}

}  // namespace

TEST_CASE("variant and impute strings") {
    CHECK(parse_variant("token") == Variant::TokenLevel);
    CHECK(parse_variant("expert") == Variant::ExpertLevel);
    CHECK(parse_impute_mode("off") == ImputeMode::Off);
    CHECK(parse_impute_mode("pre") == ImputeMode::PreOnly);
    CHECK(parse_impute_mode("full") == ImputeMode::Full);
    CHECK_THROWS_AS(parse_variant("tokens"), ConfigError);
    CHECK_THROWS_AS(parse_impute_mode("none"), ConfigError);
}

TEST_CASE("config defaults and validation") {
    const ModelConfig c;
    CHECK(c.num_experts == 8);
    CHECK(c.top_k == 2);
    CHECK(c.learning_rate == 3e-4);
    CHECK(c.epochs == 50);
    CHECK(c.conf_loss_weight == 1.0);
    CHECK(c.dropout_rate == 0.1);
    CHECK(c.pre_impute_samples == 10);
    CHECK(c.sparsity_b == 4);
    ModelConfig bad = c;
    bad.top_k = 9;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.dropout_rate = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("forward: probabilities, determinism and zeroed missing modalities") {
    const auto data = tiny_dataset(20, 3);
    for (GateKind gate : kAllGateKinds) {
        CAPTURE(to_string(gate));
        const Model model = Model::create(tiny_config(gate), kTinyShape);
        const auto pools = build_pools(data);
        for (std::size_t i = 0; i < data.size(); ++i) {
            auto r1 = make_rng(5, {i});
            auto r2 = make_rng(5, {i});
            const auto a = forward_instance(model, draw_inputs(data.instances[i], pools, model, false, r1), data.labels[i]);
            const auto b = forward_instance(model, draw_inputs(data.instances[i], pools, model, false, r2), data.labels[i]);
            CHECK(a.probs == b.probs);
            double sum = 0.0;
            for (double p : a.probs) sum += p;
            CHECK(std::abs(sum - 1.0) <= 1e-12);
            if (gate != GateKind::ConfNet) CHECK(a.loss_conf == 0.0);
            if (gate != GateKind::SoftmaxLoadBalanced) CHECK(a.loss_lb == 0.0);
        }
    }

    // impute = Off: a missing modality contributes zero tokens (its embedding is not computed).
    const Model off = Model::create(tiny_config(GateKind::Softmax, Variant::TokenLevel, ImputeMode::Off), kTinyShape);
    ModalityBatch inst = data.instances[0];
    inst.observed = {1, 0, 1};
    auto rng = make_rng(1);
    const auto in = draw_inputs(inst, build_pools(data), off, false, rng);
    CHECK(in.tokens[1] == DenseMatrix(kTinyShape.seq_len, kTinyShape.input_dim));
    // Changing the raw content of the missing modality changes nothing.
    auto in2 = in;
    in2.tokens[1].fill(123.0);
    CHECK(forward_instance(off, in, 0).probs == forward_instance(off, in2, 0).probs);
}

TEST_CASE("expert_level_confidence examples") {
    ConfNetPool pool{DenseMatrix{{0.5, -1.0}, {2.0, 0.25}, {1.0, 1.0}}, Vector{0.1, -0.2, 0.0}};
    // All tokens identical: expert-level weight equals the token-level confidence.
    const DenseMatrix same{{0.3, 0.7}, {0.3, 0.7}, {0.3, 0.7}};
    const auto token_level = gate_confnet(same, pool, 2);
    const auto el = expert_level_confidence(same, token_level.topk, pool);
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t r = 0; r < 2; ++r)
            CHECK(el.weight[token_level.topk.at(t, r)] == doctest::Approx(token_level.weights(t, r)).epsilon(1e-15));

    // Two tokens assigned to expert 0, none to expert 2.
    TopK topk(2, 1);
    topk.at(0, 0) = 0;
    topk.at(1, 0) = 0;
    const DenseMatrix h{{1.0, 2.0}, {3.0, -2.0}};
    const auto two = expert_level_confidence(h, topk, pool);
    // mean = [2, 0]; U_0(mean) = 0.5*2 - 1*0 + 0.1 = 1.1
    CHECK(two.weight[0] == doctest::Approx(1.0 / (1.0 + std::exp(-1.1))).epsilon(1e-15));
    CHECK(two.assigned[0] == 2);
    CHECK(two.active[2] == 0);
    CHECK(two.weight[2] == 0.0);
    CHECK(two.active[1] == 0);
}

TEST_CASE("gradient of the total loss matches finite differences on a 20-parameter subset") {
    const auto data = tiny_dataset(6, 4);
    std::mt19937_64 pick_rng(2024);
    for (GateKind gate : kAllGateKinds) {
        for (Variant variant : {Variant::TokenLevel, Variant::ExpertLevel}) {
            if (variant == Variant::ExpertLevel && gate != GateKind::ConfNet) continue;
            for (ImputeMode impute : {ImputeMode::Off, ImputeMode::PreOnly, ImputeMode::Full}) {
                CAPTURE(to_string(gate));
                CAPTURE(to_string(variant));
                CAPTURE(to_string(impute));
                auto cfg = tiny_config(gate, variant, impute);
                cfg.conf_loss_weight = 0.0;  // p_t is detached inside L_conf; checked separately below
                cfg.lb_loss_weight = 0.5;
                Model model = Model::create(cfg, kTinyShape);
                // Move off the initialisation: zero expert biases put zero tokens exactly on the ReLU kink.
                std::normal_distribution<double> jitter(0.0, 0.05);
                for (double* v : flat_params(model.params)) *v += jitter(pick_rng);
                const auto batch = training_inputs(model, data);
                ModelParams grad = model.params.zeros_like();
                loss_and_grad(model, batch, data.labels, &grad);

                auto params = flat_params(model.params);
                auto grads = flat_params(grad);
                std::uniform_int_distribution<std::size_t> pick(0, params.size() - 1);
                for (int s = 0; s < 20; ++s) {
                    const std::size_t idx = pick(pick_rng);
                    const double saved = *params[idx];
                    const double h = 1e-6;
                    *params[idx] = saved + h;
                    const double up = loss_and_grad(model, batch, data.labels, nullptr).total;
                    *params[idx] = saved - h;
                    const double down = loss_and_grad(model, batch, data.labels, nullptr).total;
                    *params[idx] = saved;
                    const double fd = (up - down) / (2.0 * h);
                    const double an = *grads[idx];
                    CAPTURE(idx);
                    CAPTURE(an);
                    CAPTURE(fd);
                    CHECK(std::abs(an - fd) <= 1e-4 * std::max({std::abs(an), std::abs(fd), 1e-5}));
                }
            }
        }
    }
}

TEST_CASE("L_conf contributes nothing to the classifier head gradient (p_t detached)") {
    const auto data = tiny_dataset(6, 5);
    for (Variant variant : {Variant::TokenLevel, Variant::ExpertLevel}) {
        auto with_conf = tiny_config(GateKind::ConfNet, variant);
        auto without = with_conf;
        without.conf_loss_weight = 0.0;
        const Model a = Model::create(with_conf, kTinyShape);
        Model b = a;
        b.config = without;
        const auto batch = training_inputs(a, data);
        ModelParams ga = a.params.zeros_like(), gb = b.params.zeros_like();
        const auto la = loss_and_grad(a, batch, data.labels, &ga);
        const auto lb = loss_and_grad(b, batch, data.labels, &gb);
        CHECK(la.task == lb.task);
        CHECK(la.conf > 0.0);
        CHECK(ga.head_w == gb.head_w);
        CHECK(ga.head_b == gb.head_b);
        for (std::size_t e = 0; e < 4; ++e) CHECK(ga.experts.experts[e].weight == gb.experts.experts[e].weight);
        CHECK(ga.attention.wv == gb.attention.wv);
        // ...but it does reach the confidence heads.
        CHECK_FALSE(ga.gate.confnet.weights == gb.gate.confnet.weights);
    }
}

TEST_CASE("L_conf gradient into the confidence heads matches finite differences with p_t frozen") {
    // With conf weight w, grad(w) - grad(0) is the gradient of w * L_conf holding p_t constant.
    // Recompute L_conf by hand from frozen p_t and the projected tokens.
    const auto data = tiny_dataset(1, 6);
    auto cfg = tiny_config(GateKind::ConfNet, Variant::TokenLevel, ImputeMode::Off);
    cfg.dropout_rate = 0.0;
    const Model model = Model::create(cfg, kTinyShape);
    Model no_conf = model;
    no_conf.config.conf_loss_weight = 0.0;
    auto rng = make_rng(3);
    const auto in = draw_inputs(data.instances[0], build_pools(data), model, false, rng);
    const std::array<InstanceInputs, 1> batch{in};
    const std::array<std::size_t, 1> label{data.labels[0]};
    ModelParams g1 = model.params.zeros_like(), g0 = model.params.zeros_like();
    loss_and_grad(model, batch, label, &g1);
    loss_and_grad(no_conf, batch, label, &g0);
    const double p_t = forward_instance(model, in, label[0]).probs[label[0]];

    // Projected tokens h (no dropout, zero rows for missing modalities under Off).
    const std::size_t s = kTinyShape.seq_len, d = cfg.hidden_dim;
    DenseMatrix h(kTinyShape.num_modalities * s, d);
    for (std::size_t m = 0; m < kTinyShape.num_modalities; ++m) {
        if (!in.observed[m]) continue;
        DenseMatrix hm = matmul(in.tokens[m], model.params.proj_w[m]);
        add_row_inplace(hm, model.params.proj_b[m]);
        std::copy(hm.flat().begin(), hm.flat().end(), h.row(m * s).begin());
    }
    const auto frozen_conf_loss = [&](std::span<const double> w) {
        ConfNetPool pool{DenseMatrix(4, d, Vector(w.begin(), w.end())), model.params.gate.confnet.bias};
        const auto out = gate_confnet(h, pool, cfg.top_k);
        return confidence_loss(out.weights, Vector(h.rows(), p_t), cfg.top_k);
    };
    const auto fd = finite_diff_grad(frozen_conf_loss, model.params.gate.confnet.weights.flat(), 1e-6);
    for (std::size_t i = 0; i < fd.size(); ++i) {
        const double diff = g1.gate.confnet.weights.flat()[i] - g0.gate.confnet.weights.flat()[i];
        CHECK(std::abs(diff - fd[i]) <= 1e-8);
    }
}

TEST_CASE("f1_macro examples") {
    const std::vector<std::size_t> y{0, 1, 2, 1, 0};
    CHECK(f1_macro(y, y, 3) == 1.0);
    // All predictions one class, balanced 2-class truth: (2/3 + 0) / 2.
    CHECK(f1_macro(std::vector<std::size_t>{0, 0, 1, 1}, std::vector<std::size_t>{0, 0, 0, 0}, 2) ==
          doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    // Hand confusion matrix: truth [0,0,1,1,2,2], pred [0,1,1,1,0,2]
    // class0 tp1 fp1 fn1 -> 0.5; class1 tp2 fp1 fn0 -> 0.8; class2 tp1 fp0 fn1 -> 2/3.
    CHECK(f1_macro(std::vector<std::size_t>{0, 0, 1, 1, 2, 2}, std::vector<std::size_t>{0, 1, 1, 1, 0, 2}, 3) ==
          doctest::Approx((0.5 + 0.8 + 2.0 / 3.0) / 3.0).epsilon(1e-15));
    // A class absent from truth and prediction scores 0.
    CHECK(f1_macro(std::vector<std::size_t>{0, 1}, std::vector<std::size_t>{0, 1}, 3) == doctest::Approx(2.0 / 3.0));
    CHECK_THROWS_AS(f1_macro(std::vector<std::size_t>{}, std::vector<std::size_t>{}, 2), MetricError);
}

TEST_CASE("f1_macro under random predictions matches its exact expectation") {
    const std::vector<std::size_t> truth{0, 1, 2, 0, 1, 2};
    const std::size_t n = truth.size(), c = 3;
    double exact = 0.0;
    std::size_t total = 1;
    for (std::size_t i = 0; i < n; ++i) total *= c;
    std::vector<std::size_t> pred(n);
    for (std::size_t code = 0; code < total; ++code) {
        std::size_t x = code;
        for (std::size_t i = 0; i < n; ++i) {
            pred[i] = x % c;
            x /= c;
        }
        exact += f1_macro(truth, pred, c) / static_cast<double>(total);
    }
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<std::size_t> u(0, c - 1);
    double mc = 0.0;
    const int samples = 40000;
    for (int sidx = 0; sidx < samples; ++sidx) {
        for (auto& p : pred) p = u(rng);
        mc += f1_macro(truth, pred, c) / samples;
    }
    CHECK(std::abs(mc - exact) <= 0.005);
}

TEST_CASE("auc_ovr examples") {
    const std::vector<std::size_t> y{0, 1, 0, 1};
    const DenseMatrix ordered{{0.9, 0.1}, {0.2, 0.8}, {0.7, 0.3}, {0.4, 0.6}};
    CHECK(auc_ovr(y, ordered, 2) == 1.0);
    CHECK(auc_ovr(y, DenseMatrix(4, 2, 0.5), 2) == 0.5);
    // Six instances, binary. Class-1 scores: pos {0.8, 0.4, 0.35}, neg {0.5, 0.3, 0.1}.
    // Pairs pos>neg: 0.8 beats 3; 0.4 beats 2; 0.35 beats 2 -> 7/9.
    const std::vector<std::size_t> y6{1, 1, 1, 0, 0, 0};
    const DenseMatrix s6{{0.2, 0.8}, {0.6, 0.4}, {0.65, 0.35}, {0.5, 0.5}, {0.7, 0.3}, {0.9, 0.1}};
    CHECK(auc_ovr(y6, s6, 2) == doctest::Approx(7.0 / 9.0).epsilon(1e-15));
    // A tie counts one half: pos {0.5}, neg {0.5, 0.2} -> (0.5 + 1) / 2.
    CHECK(auc_ovr(std::vector<std::size_t>{1, 0, 0}, DenseMatrix{{0.5, 0.5}, {0.5, 0.5}, {0.8, 0.2}}, 2) ==
          doctest::Approx(0.75).epsilon(1e-15));
    // Class 2 absent from truth is skipped.
    CHECK(auc_ovr(y, DenseMatrix{{0.8, 0.1, 0.1}, {0.1, 0.8, 0.1}, {0.7, 0.2, 0.1}, {0.3, 0.6, 0.1}}, 3) == 1.0);
    CHECK_THROWS_AS(auc_ovr(std::vector<std::size_t>{0, 0}, DenseMatrix{{1, 0}, {1, 0}}, 2), MetricError);
}

TEST_CASE("metrics CSV format") {
    std::ostringstream os;
    write_metrics_csv({{0, "train", 1.5, 0.0, 0.0, 0.25, 0.5}}, os);
    CHECK(os.str() == "epoch,split,loss_task,loss_conf,loss_lb,f1_macro,auc\n0,train,1.5,0,0,0.25,0.5\n");
}

TEST_CASE("train_model: determinism, epoch-0 rows and distinct gate traces") {
    SynthSpec s;
    s.num_train = 96;
    s.num_test = 30;
    s.seq_len = 4;
    s.dim = 6;
    const auto raw = generate(s);
    const auto train = apply_protocol(raw.train, RandomDropout{0.5}, Split::Train, 1);
    const auto test = apply_protocol(raw.test, RandomDropout{0.5}, Split::Test, 1);
    ModelConfig cfg;
    cfg.hidden_dim = 8;
    cfg.epochs = 2;
    cfg.batch_size = 32;

    const auto a = train_model(cfg, train, test);
    const auto b = train_model(cfg, train, test);
    std::ostringstream ma, mb, sa, sb;
    write_metrics_csv(a.metrics, ma);
    write_metrics_csv(b.metrics, mb);
    a.trace.write_csv(sa);
    b.trace.write_csv(sb);
    CHECK(ma.str() == mb.str());
    CHECK(sa.str() == sb.str());
    CHECK(a.metrics.size() == 6);
    for (std::uint64_t ep = 1; ep <= 2; ++ep) CHECK(a.trace.total(ep) == 96 * 3 * 4 * 2);

    cfg.gate = GateKind::Softmax;
    const auto soft = train_model(cfg, train, test);
    std::ostringstream ss;
    soft.trace.write_csv(ss);
    CHECK(ss.str() != sa.str());

    cfg.epochs = 0;
    const auto none = train_model(cfg, train, test);
    REQUIRE(none.metrics.size() == 2);
    CHECK(none.metrics[0].epoch == 0);
    CHECK(none.metrics[0].split == "train");
    CHECK(none.metrics[1].split == "test");
    CHECK(none.trace.num_epochs() == 0);
}

TEST_CASE("non-finite loss aborts training") {
    const auto data = tiny_dataset(4, 8);
    Model model = Model::create(tiny_config(GateKind::Softmax), kTinyShape);
    model.params.head_w.fill(std::nan(""));
    AdamState opt;
    const auto batch = training_inputs(model, data);
    CHECK_THROWS_AS(train_step(model, opt, batch, data.labels), NumericalError);
}

TEST_CASE("final train loss is below the initial train loss for every gate and seed") {
    SynthSpec spec;  // default synthetic task
    for (std::uint64_t seed : {2023, 2024, 2025}) {
        spec.seed = seed;
        const auto raw = generate(spec);
        const auto train = apply_protocol(raw.train, RandomDropout{0.5}, Split::Train, seed);
        for (GateKind gate : kAllGateKinds) {
            CAPTURE(seed);
            CAPTURE(to_string(gate));
            ModelConfig cfg;
            cfg.gate = gate;
            cfg.seed = seed;
            cfg.epochs = 2;
            const auto run = train_model(cfg, train, Dataset{});
            CHECK(run.metrics.back().loss_task < run.metrics.front().loss_task);
        }
    }
}
