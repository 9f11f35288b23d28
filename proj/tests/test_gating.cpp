#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "confmoe/error.hpp"
#include "confmoe/gating.hpp"
#include "confmoe/numeric.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace confmoe;

namespace {

GateParams random_params(GateKind kind, std::size_t d, std::size_t n, std::mt19937_64& rng) {
    GateParams p;
    p.kind = kind;
    p.router = test_util::random_matrix(d, n, rng);
    p.table.embeddings = test_util::random_matrix(n, d, rng);
    p.confnet.weights = test_util::random_matrix(n, d, rng);
    p.confnet.bias = test_util::random_vector(n, rng);
    return p;
}

// Scalar objective sum(w * weights) + aux_scale * aux_loss with the Top-K
// selection frozen to `ref` (the objective is only differentiable while the
// selection is unchanged).
double gate_objective(const GateParams& p, const DenseMatrix& h, std::size_t k, const DenseMatrix& w, double aux_scale,
                      const TopK& ref) {
    const GateOutput out = evaluate_gate(p, h, k);
    double s = 0.0;
    for (std::size_t t = 0; t < h.rows(); ++t)
        for (std::size_t r = 0; r < k; ++r) s += w(t, r) * out.scores(t, ref.at(t, r));
    if (out.aux_loss) s += aux_scale * *out.aux_loss;
    return s;
}

}  // namespace

TEST_CASE("gate kind strings round-trip") {
    for (GateKind kind : kAllGateKinds) CHECK(parse_gate_kind(to_string(kind)) == kind);
    CHECK(to_string(GateKind::SoftmaxLoadBalanced) == "softmax_lb");
    CHECK(to_string(GateKind::ConfNet) == "confnet");
    CHECK_THROWS_AS(parse_gate_kind("Softmax"), ConfigError);
}

TEST_CASE("select_topk: descending order with lower-index tie-break") {
    CHECK(select_topk(Vector{0.1, 2.0, 0.5}, 2) == std::vector<std::size_t>{1, 2});
    CHECK(select_topk(Vector{1, 1, 1, 1}, 2) == std::vector<std::size_t>{0, 1});
    CHECK(select_topk(Vector{0, 3, 3, 1}, 3) == std::vector<std::size_t>{1, 2, 3});
    CHECK_THROWS_AS(select_topk(Vector{1, 2}, 3), ConfigError);
    CHECK_THROWS_AS(select_topk(Vector{1, 2}, 0), ConfigError);
}

TEST_CASE("gate_softmax examples") {
    std::mt19937_64 rng(1);
    const auto h = test_util::random_matrix(5, 3, rng);
    const auto out = gate_softmax(h, DenseMatrix(3, 4), 2);
    for (std::size_t t = 0; t < 5; ++t) {
        for (std::size_t i = 0; i < 4; ++i) CHECK(out.scores(t, i) == 0.25);
        CHECK(out.topk.at(t, 0) == 0);
        CHECK(out.topk.at(t, 1) == 1);
    }
    CHECK_FALSE(out.aux_loss.has_value());

    // One token whose logits are exactly [0.1, 2.0, 0.5]: h = [1], router row = logits.
    const auto one = gate_softmax(DenseMatrix{{1.0}}, DenseMatrix{{0.1, 2.0, 0.5}}, 2);
    CHECK(one.topk.at(0, 0) == 1);
    CHECK(one.topk.at(0, 1) == 2);
    CHECK(one.weights(0, 0) == one.scores(0, 1));

    CHECK_THROWS_AS(gate_softmax(h, DenseMatrix(3, 4), 5), ConfigError);
}

TEST_CASE("gate_softmax_load_balanced shares scores with gate_softmax and adds 1/H") {
    std::mt19937_64 rng(2);
    const auto h = test_util::random_matrix(6, 4, rng);
    const auto router = test_util::random_matrix(4, 5, rng);
    const auto a = gate_softmax(h, router, 2);
    const auto b = gate_softmax_load_balanced(h, router, 2);
    CHECK(a.scores == b.scores);
    CHECK(a.topk == b.topk);
    REQUIRE(b.aux_loss.has_value());
    double ref = 0.0;
    for (std::size_t t = 0; t < 6; ++t) ref += 1.0 / entropy(b.scores.row(t)) / 6.0;
    CHECK(*b.aux_loss == doctest::Approx(ref).epsilon(1e-14));

    const auto uniform = gate_softmax_load_balanced(h, DenseMatrix(4, 4), 1);
    CHECK(*uniform.aux_loss == doctest::Approx(1.0 / std::log(4.0)).epsilon(1e-14));
    CHECK(*uniform.aux_loss == doctest::Approx(0.72135).epsilon(1e-5));

    // max g >= 0.999 with N = 8.
    DenseMatrix sharp_router(1, 8, 0.0);
    sharp_router(0, 0) = std::log(0.999 * 7.0 / 0.001);
    const auto sharp = gate_softmax_load_balanced(DenseMatrix{{1.0}}, sharp_router, 2);
    CHECK(sharp.scores(0, 0) >= 0.999 - 1e-12);
    CHECK(*sharp.aux_loss > 10.0);
}

TEST_CASE("gate_mean weights are 1/K with softmax selection") {
    std::mt19937_64 rng(3);
    const auto h = test_util::random_matrix(4, 3, rng);
    const auto router = test_util::random_matrix(3, 5, rng);
    for (std::size_t k : {1, 2, 5}) {
        const auto out = gate_mean(h, router, k);
        const auto ref = gate_softmax(h, router, k);
        CHECK(out.topk == ref.topk);
        for (double w : out.weights.flat()) CHECK(w == 1.0 / static_cast<double>(k));
    }
}

TEST_CASE("gate_distance examples") {
    ExpertEmbeddingTable table{DenseMatrix{{5, 5}, {1, 2}, {-3, 0}}};
    for (auto metric : {DistanceMetric::L1, DistanceMetric::L2Squared}) {
        const auto out = gate_distance(DenseMatrix{{1, 2}}, table, 1, metric, 1.0);
        CHECK(out.topk.at(0, 0) == 1);
    }
    // Equidistant embeddings.
    ExpertEmbeddingTable sym{DenseMatrix{{1, 0}, {-1, 0}, {0, 1}, {0, -1}}};
    for (auto metric : {DistanceMetric::L1, DistanceMetric::L2Squared}) {
        const auto out = gate_distance(DenseMatrix{{0, 0}}, sym, 2, metric, 1.0);
        for (std::size_t i = 0; i < 4; ++i) CHECK(out.scores(0, i) == doctest::Approx(0.25).epsilon(1e-15));
    }
    // Direct evaluation, d = 2, three experts, tau = 1.
    const DenseMatrix h{{0.5, -1.0}};
    const auto lap = gate_distance(h, table, 2, DistanceMetric::L1, 1.0);
    const auto gau = gate_distance(h, table, 2, DistanceMetric::L2Squared, 1.0);
    Vector l1(3), l2(3);
    for (std::size_t i = 0; i < 3; ++i) {
        const double dx = h(0, 0) - table.embeddings(i, 0), dy = h(0, 1) - table.embeddings(i, 1);
        l1[i] = -(std::abs(dx) + std::abs(dy));
        l2[i] = -0.5 * (dx * dx + dy * dy);
    }
    const auto pl1 = softmax(l1), pl2 = softmax(l2);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(lap.scores(0, i) == doctest::Approx(pl1[i]).epsilon(1e-14));
        CHECK(gau.scores(0, i) == doctest::Approx(pl2[i]).epsilon(1e-14));
    }
    CHECK_THROWS_AS(gate_distance(h, table, 1, DistanceMetric::L1, 0.0), ConfigError);
}

TEST_CASE("distance gates are translation invariant") {
    std::mt19937_64 rng(4);
    auto h = test_util::random_matrix(3, 4, rng);
    ExpertEmbeddingTable t{test_util::random_matrix(5, 4, rng)};
    const auto shift = test_util::random_vector(4, rng);
    for (auto metric : {DistanceMetric::L1, DistanceMetric::L2Squared}) {
        const auto a = gate_distance(h, t, 2, metric, 0.7);
        auto h2 = h;
        auto t2 = t;
        add_row_inplace(h2, shift);
        add_row_inplace(t2.embeddings, shift);
        const auto b = gate_distance(h2, t2, 2, metric, 0.7);
        CHECK(max_abs_diff(a.scores, b.scores) <= 1e-12);
        CHECK(a.topk == b.topk);
    }
}

TEST_CASE("gate_confnet examples and properties") {
    std::mt19937_64 rng(5);
    const auto h = test_util::random_matrix(3, 4, rng);
    ConfNetPool zero{DenseMatrix(4, 4), Vector(4, 0.0)};
    const auto z = gate_confnet(h, zero, 2);
    for (double c : z.scores.flat()) CHECK(c == 0.5);
    for (std::size_t t = 0; t < 3; ++t) {
        CHECK(z.topk.at(t, 0) == 0);
        CHECK(z.topk.at(t, 1) == 1);
    }

    ConfNetPool pool{test_util::random_matrix(4, 4, rng), test_util::random_vector(4, rng)};
    const auto out = gate_confnet(h, pool, 2);
    for (std::size_t t = 0; t < 3; ++t) {
        double row_sum = 0.0;
        for (std::size_t i = 0; i < 4; ++i) {
            double v = pool.bias[i];
            for (std::size_t c = 0; c < 4; ++c) v += pool.weights(i, c) * h(t, c);
            const double ref = 1.0 / (1.0 + std::exp(-v));
            CHECK(out.scores(t, i) == doctest::Approx(ref).epsilon(1e-14));
            CHECK(out.scores(t, i) > 0.0);
            CHECK(out.scores(t, i) < 1.0);
            row_sum += out.scores(t, i);
        }
        for (std::size_t r = 0; r < 2; ++r) CHECK(out.weights(t, r) == out.scores(t, out.topk.at(t, r)));
        (void)row_sum;  // rows are not normalized
    }

    // Monotonicity: a head with a large positive projection wins.
    ConfNetPool boosted = pool;
    for (std::size_t c = 0; c < 4; ++c) boosted.weights(3, c) = 100.0 * h(0, c);
    CHECK(gate_confnet(h.slice_rows(0, 1), boosted, 2).topk.at(0, 0) == 3);

    // Positive scaling of the weights (no bias) keeps the selected set.
    ConfNetPool nobias{pool.weights, Vector(4, 0.0)};
    ConfNetPool scaled = nobias;
    for (double& w : scaled.weights.flat()) w *= 3.5;
    CHECK(gate_confnet(h, nobias, 2).topk == gate_confnet(h, scaled, 2).topk);

    CHECK_THROWS_AS(gate_confnet(h, pool, 2, 5), ConfigError);
}

TEST_CASE("Top-K is permutation covariant") {
    std::mt19937_64 rng(6);
    const auto h = test_util::random_matrix(8, 3, rng);
    const auto router = test_util::random_matrix(3, 6, rng);
    std::vector<std::size_t> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    DenseMatrix permuted(3, 6);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t i = 0; i < 6; ++i) permuted(r, perm[i]) = router(r, i);
    const auto a = gate_softmax(h, router, 3);
    const auto b = gate_softmax(h, permuted, 3);
    for (std::size_t t = 0; t < 8; ++t)
        for (std::size_t r = 0; r < 3; ++r) CHECK(b.topk.at(t, r) == perm[a.topk.at(t, r)]);
}

TEST_CASE("simplex gates: rows sum to one") {
    std::mt19937_64 rng(7);
    const auto h = test_util::random_matrix(10, 4, rng);
    for (GateKind kind : {GateKind::Softmax, GateKind::SoftmaxLoadBalanced, GateKind::Mean, GateKind::Gaussian,
                          GateKind::Laplacian}) {
        const auto out = evaluate_gate(random_params(kind, 4, 6, rng), h, 2);
        for (std::size_t t = 0; t < 10; ++t) {
            double s = 0.0;
            for (double v : out.scores.row(t)) s += v;
            CHECK(std::abs(s - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("confidence_loss examples and convexity") {
    const DenseMatrix c{{0.3, 0.8}};
    CHECK(confidence_loss(c, Vector{0.0}, 2) == doctest::Approx((0.09 + 0.64) / 2.0));
    CHECK(confidence_loss(DenseMatrix{{1, 1}}, Vector{0.0}, 2) == 1.0);
    CHECK(confidence_loss(DenseMatrix{{0.4, 0.4}, {0.9, 0.9}}, Vector{0.4, 0.9}, 2) == 0.0);
    CHECK_THROWS_AS(confidence_loss(c, Vector{0.0}, 3), DimensionError);

    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 1000; ++trial) {
        DenseMatrix a(3, 2), b(3, 2), mid(3, 2);
        Vector p(3);
        for (double& v : p) v = u(rng);
        for (std::size_t i = 0; i < 6; ++i) {
            a.flat()[i] = u(rng);
            b.flat()[i] = u(rng);
            mid.flat()[i] = 0.5 * (a.flat()[i] + b.flat()[i]);
        }
        CHECK(confidence_loss(mid, p, 2) <= 0.5 * (confidence_loss(a, p, 2) + confidence_loss(b, p, 2)) + 1e-15);
    }

    const DenseMatrix conf{{0.2, 0.7}, {0.5, 0.1}};
    const Vector target{0.6, 0.3};
    const auto grad = confidence_loss_grad(conf, target);
    const auto fd = finite_diff_grad(
        [&](std::span<const double> x) { return confidence_loss(DenseMatrix(2, 2, Vector(x.begin(), x.end())), target, 2); },
        conf.flat(), 1e-6);
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(grad.flat()[i] - fd[i]) <= 1e-9);
}

TEST_CASE("load-balance gradient through gate_backward matches the closed form and finite differences") {
    // Closed form on logits: aux = 1/H(softmax(u)); d aux / du = (log g + 1)^T (diag g - g g^T) / H^2.
    std::mt19937_64 rng(9);
    const auto h = DenseMatrix{{1.0}};
    for (int trial = 0; trial < 20; ++trial) {
        const DenseMatrix router = test_util::random_matrix(1, 6, rng);
        GateParams p;
        p.kind = GateKind::SoftmaxLoadBalanced;
        p.router = router;
        const auto out = evaluate_gate(p, h, 2);
        const auto grad = gate_backward(p, h, out, DenseMatrix(1, 2), 1.0);
        const SimplexVector g(Vector(out.scores.row(0).begin(), out.scores.row(0).end()));
        const double hv = entropy(g);
        Vector lg(6);
        for (std::size_t i = 0; i < 6; ++i) lg[i] = (std::log(g[i]) + 1.0) / (hv * hv);
        const auto closed = softmax_backward(g, lg);
        const auto fd = finite_diff_grad(
            [](std::span<const double> u) { return 1.0 / entropy(softmax(u)); }, router.row(0), 1e-6);
        for (std::size_t i = 0; i < 6; ++i) {
            CHECK(grad.dparams.router(0, i) == doctest::Approx(closed[i]).epsilon(1e-12));
            CHECK(std::abs(closed[i] - fd[i]) <= 1e-6);
        }
    }
}

TEST_CASE("gate_backward matches finite differences for every gate kind") {
    std::mt19937_64 rng(10);
    const std::size_t tokens = 4, d = 3, n = 5, k = 2;
    for (GateKind kind : kAllGateKinds) {
        CAPTURE(to_string(kind));
        auto p = random_params(kind, d, n, rng);
        const auto h = test_util::random_matrix(tokens, d, rng);
        const auto w = test_util::random_matrix(tokens, k, rng);
        const double aux_scale = 0.3;
        const auto out = evaluate_gate(p, h, k);
        const auto grad = gate_backward(p, h, out, w, aux_scale);
        const TopK ref = out.topk;

        const auto fd_h = finite_diff_grad(
            [&](std::span<const double> x) {
                return gate_objective(p, DenseMatrix(tokens, d, Vector(x.begin(), x.end())), k, w, aux_scale, ref);
            },
            h.flat(), 1e-6);
        if (kind == GateKind::Mean) {
            for (double v : grad.dh.flat()) CHECK(v == 0.0);
            continue;  // weights are constant 1/K
        }
        for (std::size_t i = 0; i < fd_h.size(); ++i) CHECK(test_util::rel_err(grad.dh.flat()[i], fd_h[i]) <= 1e-6);

        DenseMatrix* param = nullptr;
        const DenseMatrix* dparam = nullptr;
        if (kind == GateKind::Gaussian || kind == GateKind::Laplacian) {
            param = &p.table.embeddings;
            dparam = &grad.dparams.table.embeddings;
        } else if (kind == GateKind::ConfNet) {
            param = &p.confnet.weights;
            dparam = &grad.dparams.confnet.weights;
        } else {
            param = &p.router;
            dparam = &grad.dparams.router;
        }
        const DenseMatrix saved = *param;
        const auto fd_p = finite_diff_grad(
            [&](std::span<const double> x) {
                std::copy(x.begin(), x.end(), param->flat().begin());
                const double v = gate_objective(p, h, k, w, aux_scale, ref);
                *param = saved;
                return v;
            },
            saved.flat(), 1e-6);
        for (std::size_t i = 0; i < fd_p.size(); ++i) CHECK(test_util::rel_err(dparam->flat()[i], fd_p[i]) <= 1e-6);

        if (kind == GateKind::ConfNet) {
            const Vector saved_b = p.confnet.bias;
            const auto fd_b = finite_diff_grad(
                [&](std::span<const double> x) {
                    p.confnet.bias.assign(x.begin(), x.end());
                    const double v = gate_objective(p, h, k, w, aux_scale, ref);
                    p.confnet.bias = saved_b;
                    return v;
                },
                saved_b, 1e-6);
            for (std::size_t i = 0; i < n; ++i) CHECK(test_util::rel_err(grad.dparams.confnet.bias[i], fd_b[i]) <= 1e-6);
        }
    }
}

TEST_CASE("ConfNet dconfidence flows into heads exactly like a combining-weight gradient") {
    std::mt19937_64 rng(11);
    auto p = random_params(GateKind::ConfNet, 3, 4, rng);
    const auto h = test_util::random_matrix(2, 3, rng);
    const auto out = evaluate_gate(p, h, 2);
    // Gradient of L_conf w.r.t. selected confidences, scattered to a tokens x N matrix.
    const Vector target{0.9, 0.2};
    const auto dsel = confidence_loss_grad(out.weights, target);
    DenseMatrix dconf(2, 4);
    for (std::size_t t = 0; t < 2; ++t)
        for (std::size_t r = 0; r < 2; ++r) dconf(t, out.topk.at(t, r)) = dsel(t, r);
    const auto via_conf = gate_backward(p, h, out, DenseMatrix(2, 2), 0.0, &dconf);
    const auto via_weights = gate_backward(p, h, out, dsel, 0.0);
    CHECK(max_abs_diff(via_conf.dh, via_weights.dh) <= 1e-15);
    CHECK(max_abs_diff(via_conf.dparams.confnet.weights, via_weights.dparams.confnet.weights) <= 1e-15);
}
