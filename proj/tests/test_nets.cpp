#include <catch2/catch_amalgamated.hpp>

#include "capslab/grad_check.hpp"
#include "capslab/nets.hpp"

using namespace capslab;

namespace {

// Small enough that finite differences over every parameter stay cheap.
CapsNetSpec tiny_spec(RouteGrad grad = RouteGrad::full_unroll) {
    CapsNetSpec s;
    s.input_edge = 6;
    s.conv = {2, 3, 1};     // -> [2,4,4]
    s.primary = {4, 3, 2};  // -> [4,1,1], two 2D capsules
    s.primary_dim = 2;
    s.cap1_count = 2;
    s.cap1_dim = 3;
    s.class_count = 3;
    s.class_dim = 2;
    s.r1 = RoutingConfig{2, 1.0, grad};
    s.r2 = RoutingConfig{2, 0.6, grad};
    s.r3 = RoutingConfig{1, 1.0, grad};
    return s;
}

Tensor random_image(Rng& rng, std::size_t edge) {
    return random_uniform<Real>(rng, {1, edge, edge}, 0.0, 1.0);
}

Tensor caps_scores(const CapsNetSpec& s, const ParamSet& p, const Tensor& img,
                   ForwardOut* keep = nullptr) {
    Tape tape;
    BoundParams bp = bind_params(tape, p);
    ForwardOut out = capsnet_forward(s, tape, bp, p, img);
    Tensor scores = out.scores.value();
    if (keep) *keep = std::move(out);
    return scores;
}

Tensor cnn_scores(const CapsNetSpec& s, const ParamSet& p, const Tensor& img) {
    Tape tape;
    BoundParams bp = bind_params(tape, p);
    return cnn_forward(s, tape, bp, p, img).scores.value();
}

}  // namespace

TEST_CASE("zero image propagates to zero capsule scores at init") {
    const auto s = tiny_spec();
    const auto p = init_capsnet_params(s, 1);
    const Tensor scores = caps_scores(s, p, Tensor({1, 6, 6}));
    for (std::size_t k = 0; k < scores.numel(); ++k) REQUIRE(scores[k] == 0.0);
}

TEST_CASE("zero image gives 0.5 sigmoid scores for the cnn at init") {
    const auto s = tiny_spec();
    const auto p = init_cnn_params(s, 1);
    const Tensor scores = cnn_scores(s, p, Tensor({1, 6, 6}));
    for (std::size_t k = 0; k < scores.numel(); ++k)
        REQUIRE_THAT(scores[k], Catch::Matchers::WithinAbs(0.5, 1e-15));
}

TEST_CASE("score ranges follow the activation bounds") {
    Rng rng(88);
    const auto s = tiny_spec(RouteGrad::coefficients_constant);
    const auto pc = init_capsnet_params(s, 2);
    const auto pn = init_cnn_params(s, 2);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor img = random_image(rng, 6);
        const Tensor cs = caps_scores(s, pc, img);
        for (std::size_t k = 0; k < cs.numel(); ++k) {
            REQUIRE(cs[k] >= 0.0);
            REQUIRE(cs[k] < 1.0);
        }
        const Tensor ns = cnn_scores(s, pn, img);
        for (std::size_t k = 0; k < ns.numel(); ++k) {
            REQUIRE(ns[k] > 0.0);
            REQUIRE(ns[k] < 1.0);
        }
    }
}

TEST_CASE("forward passes are deterministic") {
    Rng rng(89);
    const auto s = tiny_spec(RouteGrad::coefficients_constant);
    const auto pc = init_capsnet_params(s, 3);
    const auto pn = init_cnn_params(s, 3);
    Tensor img = random_image(rng, 6);
    const Tensor a = caps_scores(s, pc, img), b = caps_scores(s, pc, img);
    const Tensor c = cnn_scores(s, pn, img), d = cnn_scores(s, pn, img);
    for (std::size_t k = 0; k < a.numel(); ++k) {
        REQUIRE(a[k] == b[k]);
        REQUIRE(c[k] == d[k]);
    }
}

TEST_CASE("parameter init is seed-deterministic and fan-in bounded") {
    const auto s = tiny_spec();
    const auto p1 = init_capsnet_params(s, 7);
    const auto p2 = init_capsnet_params(s, 7);
    const auto p3 = init_capsnet_params(s, 8);
    REQUIRE(p1.names == p2.names);
    bool identical = true, differs = false;
    for (std::size_t i = 0; i < p1.values.size(); ++i)
        for (std::size_t k = 0; k < p1.values[i].numel(); ++k) {
            identical = identical && p1.values[i][k] == p2.values[i][k];
            differs = differs || p1.values[i][k] != p3.values[i][k];
        }
    REQUIRE(identical);
    REQUIRE(differs);

    // conv1 fan_in = 9 -> |w| <= 1/3; biases exactly zero
    for (std::size_t k = 0; k < p1.at("conv1.w").numel(); ++k)
        REQUIRE(std::abs(p1.at("conv1.w")[k]) <= 1.0 / 3.0);
    for (std::size_t k = 0; k < p1.at("conv1.b").numel(); ++k)
        REQUIRE(p1.at("conv1.b")[k] == 0.0);
}

TEST_CASE("caps1 tap is the post-routing capsule concatenation") {
    Rng rng(90);
    const auto s = tiny_spec(RouteGrad::coefficients_constant);
    const auto p = init_capsnet_params(s, 4);
    Tensor img = random_image(rng, 6);
    Tape fwd_tape;
    BoundParams fwd_bp = bind_params(fwd_tape, p);
    ForwardOut out = capsnet_forward(s, fwd_tape, fwd_bp, p, img);
    REQUIRE(out.tap.value().numel() == s.cap1_count * s.cap1_dim);

    // independent recomputation from the primitives
    Tape tape;
    BoundParams bp = bind_params(tape, p);
    Var x = tape.constant(img);
    Var h = relu(bias_channels(conv2d(x, bp.at(p, "conv1.w"), 1), bp.at(p, "conv1.b")));
    Var pm = bias_channels(conv2d(h, bp.at(p, "primary.w"), 2), bp.at(p, "primary.b"));
    Var u = squash(primary_capsules(pm, s.primary_dim));
    Var uhat = capsule_predict(u, bp.at(p, "cap1.w"));
    auto [v1, trace] = route_values(uhat.value(), s.r1);
    for (std::size_t j = 0; j < s.cap1_count; ++j)
        for (std::size_t d = 0; d < s.cap1_dim; ++d)
            REQUIRE_THAT(out.tap.value()[j * s.cap1_dim + d],
                         Catch::Matchers::WithinAbs(v1(j, d), 1e-12));
    REQUIRE(out.traces.size() == 2);
    for (std::size_t k = 0; k < trace.c.numel(); ++k)
        REQUIRE_THAT(out.traces[0].c[k], Catch::Matchers::WithinAbs(trace.c[k], 1e-12));
}

TEST_CASE("structural parity between cnn and capsnet layers") {
    CapsNetSpec desk;  // default: cap1 16x12, class 10x16
    REQUIRE(parity_neuron_counts(desk) == std::vector<std::size_t>{192, 160});
    desk.has_extra = true;
    REQUIRE(parity_neuron_counts(desk) == std::vector<std::size_t>{192, 192, 160});

    const auto s = tiny_spec();
    auto cnn = init_cnn_params(s, 5);
    REQUIRE_NOTHROW(assert_structural_parity(s, cnn));
    REQUIRE(cnn.at("fc1.w").extent(1) == s.cap1_count * s.cap1_dim);
    REQUIRE(cnn.at("fc2.w").extent(1) == s.class_count * s.class_dim);

    cnn.at("fc1.w") = Tensor({4, 100});
    REQUIRE_THROWS_AS(assert_structural_parity(s, cnn), std::logic_error);
}

TEST_CASE("transfer variant wires the extra capsule block") {
    auto s = tiny_spec();
    s.has_extra = true;
    s.extra_count = 2;
    s.extra_dim = 3;
    const auto p = init_capsnet_params(s, 6);
    REQUIRE(p.index_of("cap_extra.w") > p.index_of("cap1.w"));
    REQUIRE(p.at("cap_extra.w").shape() == Shape{2, 2, 3, 3});
    REQUIRE(p.at("class.w").shape() == Shape{2, 3, 3, 2});

    Rng rng(91);
    ForwardOut out;
    caps_scores(s, p, random_image(rng, 6), &out);
    REQUIRE(out.traces.size() == 3);

    const auto cnn = init_cnn_params(s, 6);
    REQUIRE_NOTHROW(assert_structural_parity(s, cnn));
    REQUIRE(cnn.at("fc_extra.w").extent(1) == 6);
}

TEST_CASE("margin loss hand values") {
    Tape tape;
    SECTION("perfect scores give zero loss") {
        Tensor s({10});
        s[3] = 1.0;
        s[7] = 1.0;
        Var loss = margin_loss(tape.leaf(s), DuplexLabel(3, 7));
        REQUIRE_THAT(loss.value()[0], Catch::Matchers::WithinAbs(0.0, 1e-15));
    }
    SECTION("worst case equals 4.86 with the defaults") {
        Tensor s = Tensor::full({10}, 1.0);
        s[2] = 0.0;
        s[9] = 0.0;
        Var loss = margin_loss(tape.leaf(s), DuplexLabel(2, 9));
        REQUIRE_THAT(loss.value()[0], Catch::Matchers::WithinAbs(4.86, 1e-12));
    }
    SECTION("non-negative and bounded on random score vectors") {
        Rng rng(92);
        for (int trial = 0; trial < 50; ++trial) {
            Tensor s = random_uniform<Real>(rng, {10}, 0.0, 1.0);
            Var loss = margin_loss(tape.leaf(s), DuplexLabel(int(trial) % 10, (int(trial) + 1) % 10));
            REQUIRE(loss.value()[0] >= 0.0);
            REQUIRE(loss.value()[0] <= 4.86 + 1e-12);
        }
    }
    SECTION("labels outside the class range are rejected") {
        Tensor s({5});
        REQUIRE_THROWS_AS(margin_loss(tape.leaf(s), DuplexLabel(2, 7)), std::invalid_argument);
    }
    SECTION("custom margins change the hand value") {
        Tensor s({4});  // all zeros, labels {0,1}: loss = 2*(m+)^2
        Var loss = margin_loss(tape.leaf(s), DuplexLabel(0, 1), MarginLossParams{0.8, 0.2, 0.3});
        REQUIRE_THAT(loss.value()[0], Catch::Matchers::WithinAbs(2 * 0.64, 1e-12));
    }
}

TEST_CASE("duplex prediction picks the top two with index tie-break") {
    Tensor s({10});
    s[3] = 0.9;
    s[7] = 0.8;
    REQUIRE(duplex_predict(s).pair == DuplexLabel(3, 7));

    Tensor tie({10});
    tie[1] = 0.7;
    tie[2] = 0.7;
    tie[5] = 0.7;
    REQUIRE(duplex_predict(tie).pair == DuplexLabel(1, 2));

    Tensor flat = Tensor::full({10}, 0.25);
    REQUIRE(duplex_predict(flat).pair == DuplexLabel(0, 1));

    const auto pred = duplex_predict(s);
    REQUIRE(pred.pair.lo != pred.pair.hi);
}

TEST_CASE("two_hot targets mark exactly the label pair") {
    const Tensor t = two_hot(DuplexLabel(0, 9), 10);
    for (std::size_t k = 0; k < 10; ++k)
        REQUIRE(t[k] == ((k == 0 || k == 9) ? 1.0 : 0.0));
}

TEST_CASE("end-to-end capsnet gradients match finite differences") {
    // Fixture chosen so every gradient entry is large enough for central
    // differences at h=1e-5 to resolve: with f ~ O(1) the FD noise floor is
    // about 1e-11, and some seeds produce true entries at that magnitude.
    Rng rng(71);
    const auto s = tiny_spec(RouteGrad::full_unroll);
    ParamSet p = init_capsnet_params(s, 10);
    Tensor img = random_image(rng, 6);
    const DuplexLabel label(0, 2);

    Tape tape;
    BoundParams bp = bind_params(tape, p);
    ForwardOut out = capsnet_forward(s, tape, bp, p, img);
    tape.backward(margin_loss(out.scores, label));

    auto f = [&](const std::vector<Tensor>& xs) {
        ParamSet probe = p;
        probe.values = xs;
        Tape t2;
        BoundParams b2 = bind_params(t2, probe);
        ForwardOut o2 = capsnet_forward(s, t2, b2, probe, img);
        return margin_loss(o2.scores, label).value()[0];
    };
    const auto fd = finite_difference_gradient<Real>(f, p.values);
    for (std::size_t i = 0; i < p.values.size(); ++i) {
        INFO("param " << p.names[i]);
        REQUIRE(max_relative_error(tape.grad(bp.vars[i].id), fd[i]) < 1e-4);
    }
}

TEST_CASE("end-to-end cnn gradients match finite differences") {
    Rng rng(94);
    const auto s = tiny_spec();
    ParamSet p = init_cnn_params(s, 12);
    Tensor img = random_image(rng, 6);
    const Tensor targets = two_hot(DuplexLabel(1, 2), s.class_count);

    Tape tape;
    BoundParams bp = bind_params(tape, p);
    ForwardOut out = cnn_forward(s, tape, bp, p, img);
    tape.backward(bce_with_logits(out.logits, targets));

    auto f = [&](const std::vector<Tensor>& xs) {
        ParamSet probe = p;
        probe.values = xs;
        Tape t2;
        BoundParams b2 = bind_params(t2, probe);
        return bce_with_logits(cnn_forward(s, t2, b2, probe, img).logits, targets).value()[0];
    };
    const auto fd = finite_difference_gradient<Real>(f, p.values);
    for (std::size_t i = 0; i < p.values.size(); ++i) {
        INFO("param " << p.names[i]);
        REQUIRE(max_relative_error(tape.grad(bp.vars[i].id), fd[i]) < 1e-4);
    }
}

TEST_CASE("frozen block name resolution") {
    auto s = tiny_spec();
    s.has_extra = true;

    REQUIRE(frozen_param_names(s, false, 0).empty());

    const auto one = frozen_param_names(s, false, 1);
    REQUIRE(one == std::vector<std::string>{"conv1.w", "conv1.b", "primary.w", "primary.b", "cap1.w"});

    const auto two = frozen_param_names(s, false, 2);
    REQUIRE(std::find(two.begin(), two.end(), "cap_extra.w") != two.end());
    REQUIRE(std::find(two.begin(), two.end(), "class.w") == two.end());

    const auto cnn_two = frozen_param_names(s, true, 2);
    REQUIRE(std::find(cnn_two.begin(), cnn_two.end(), "fc_extra.w") != cnn_two.end());
    REQUIRE(std::find(cnn_two.begin(), cnn_two.end(), "head.w") == cnn_two.end());

    // freezing every block would leave nothing to train
    REQUIRE_THROWS_AS(frozen_param_names(s, false, 3), std::invalid_argument);
    auto base = tiny_spec();  // no extra block: only frozen_layers <= 1 leaves the top free
    REQUIRE_THROWS_AS(frozen_param_names(base, false, 2), std::invalid_argument);
}

TEST_CASE("spec validation rejects malformed architectures") {
    CapsNetSpec bad = tiny_spec();
    bad.primary_dim = 3;  // 4 channels not divisible by 3
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);

    CapsNetSpec big_kernel = tiny_spec();
    big_kernel.conv.kernel = 7;
    REQUIRE_THROWS_AS(big_kernel.validate(), std::invalid_argument);

    CapsNetSpec not_task = tiny_spec();
    REQUIRE_THROWS_AS(not_task.validate_for_task(), std::invalid_argument);
    CapsNetSpec desk;
    REQUIRE_NOTHROW(desk.validate_for_task());
}
