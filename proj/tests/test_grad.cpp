#include <catch2/catch_amalgamated.hpp>

#include "capslab/grad_check.hpp"
#include "capslab/ops.hpp"
#include "capslab/rng.hpp"

using namespace capslab;

namespace {

// Builds the same graph on a fresh tape for both the analytic backward pass and
// the finite-difference probe, then compares gradients entrywise.
template <typename Builder>
void check_gradients(const Builder& build, std::vector<Tensor> inputs, Real tol = 1e-4) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (const auto& in : inputs) vars.push_back(tape.leaf(in));
    Var loss = build(tape, vars);
    REQUIRE(loss.value().numel() == 1);
    tape.backward(loss);

    auto f = [&](const std::vector<Tensor>& xs) -> Real {
        Tape probe;
        std::vector<Var> vs;
        vs.reserve(xs.size());
        for (const auto& x : xs) vs.push_back(probe.leaf(x));
        return build(probe, vs).value()[0];
    };
    const auto fd = finite_difference_gradient<Real>(f, inputs);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        INFO("input " << i);
        REQUIRE(max_relative_error(tape.grad(vars[i].id), fd[i]) < tol);
    }
}

// Dot against a fixed weighting so vector-valued outputs reduce to a scalar
// with a nondegenerate adjoint.
Var weighted(Tape& t, Var x, const Tensor& w) { return sum(mul(x, t.constant(w))); }

Tensor rand_t(Rng& rng, Shape shape, Real lo = -1.0, Real hi = 1.0) {
    return random_uniform<Real>(rng, std::move(shape), lo, hi);
}

// Keeps entries away from the relu kink so central differences stay valid.
Tensor rand_away_from_zero(Rng& rng, Shape shape) {
    Tensor t = rand_t(rng, std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i)
        if (std::abs(t[i]) < 0.05) t[i] += t[i] >= 0 ? 0.1 : -0.1;
    return t;
}

}  // namespace

TEST_CASE("gradient of sum(x*x) is 2x") {
    Rng rng(101);
    Tensor x = rand_t(rng, {3, 4});
    Tape tape;
    Var vx = tape.leaf(x);
    tape.backward(sum(mul(vx, vx)));
    const auto& g = tape.grad(vx.id);
    for (std::size_t i = 0; i < x.numel(); ++i)
        REQUIRE_THAT(g[i], Catch::Matchers::WithinAbs(2.0 * x[i], 1e-12));
}

TEST_CASE("elementwise op gradients match finite differences") {
    Rng rng(7);
    for (int trial = 0; trial < 4; ++trial) {
        const std::size_t n = 2 + static_cast<std::size_t>(trial), m = 3;
        Tensor w = rand_t(rng, {n, m});

        check_gradients(
            [&](Tape& t, const std::vector<Var>& v) { return weighted(t, add(v[0], v[1]), w); },
            {rand_t(rng, {n, m}), rand_t(rng, {n, m})});
        check_gradients(
            [&](Tape& t, const std::vector<Var>& v) {
                return weighted(t, axpby(1.7, v[0], -0.6, v[1]), w);
            },
            {rand_t(rng, {n, m}), rand_t(rng, {n, m})});
        check_gradients(
            [&](Tape& t, const std::vector<Var>& v) { return weighted(t, mul(v[0], v[1]), w); },
            {rand_t(rng, {n, m}), rand_t(rng, {n, m})});
        check_gradients(
            [&](Tape& t, const std::vector<Var>& v) { return weighted(t, affine(v[0], 2.5, -1.0), w); },
            {rand_t(rng, {n, m})});
        check_gradients(
            [&](Tape& t, const std::vector<Var>& v) { return weighted(t, relu(v[0]), w); },
            {rand_away_from_zero(rng, {n, m})});
        check_gradients(
            [&](Tape& t, const std::vector<Var>& v) { return weighted(t, sigmoid(v[0]), w); },
            {rand_t(rng, {n, m}, -3.0, 3.0)});
        Tensor wr = rand_t(rng, {m, n});
        check_gradients(
            [&](Tape& t, const std::vector<Var>& v) {
                return weighted(t, reshape(v[0], {m, n}), wr);
            },
            {rand_t(rng, {n, m})});
    }
}

TEST_CASE("reduction gradients match finite differences") {
    Rng rng(11);
    for (int trial = 0; trial < 3; ++trial) {
        const std::size_t n = 2 + static_cast<std::size_t>(trial);
        check_gradients([](Tape&, const std::vector<Var>& v) { return sum(sigmoid(v[0])); },
                        {rand_t(rng, {n, 4})});
        // rows bounded away from the origin where the norm is differentiable
        Tensor rows = rand_t(rng, {n, 5}, 0.3, 1.0);
        Tensor wn = rand_t(rng, {n});
        check_gradients(
            [&](Tape& t, const std::vector<Var>& v) { return weighted(t, row_norms(v[0]), wn); },
            {rows});
    }
}

TEST_CASE("linear algebra gradients match finite differences") {
    Rng rng(13);
    for (int trial = 0; trial < 3; ++trial) {
        const std::size_t m = 2 + static_cast<std::size_t>(trial), k = 4, n = 3;
        Tensor w = rand_t(rng, {m, n});
        check_gradients(
            [&](Tape& t, const std::vector<Var>& v) { return weighted(t, matmul(v[0], v[1]), w); },
            {rand_t(rng, {m, k}), rand_t(rng, {k, n})});
    }
}

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(17);
    struct Cfg {
        std::size_t ci, h, w, co, kh, kw, stride;
    };
    for (const auto& c : {Cfg{2, 5, 5, 3, 3, 3, 1}, Cfg{1, 7, 6, 2, 3, 3, 2}, Cfg{3, 4, 4, 2, 2, 2, 2},
                          Cfg{1, 6, 6, 1, 5, 5, 1}}) {
        const std::size_t ho = (c.h - c.kh) / c.stride + 1, wo = (c.w - c.kw) / c.stride + 1;
        Tensor w = rand_t(rng, {c.co, ho, wo});
        check_gradients(
            [&](Tape& t, const std::vector<Var>& v) {
                return weighted(t, conv2d(v[0], v[1], c.stride), w);
            },
            {rand_t(rng, {c.ci, c.h, c.w}), rand_t(rng, {c.co, c.ci, c.kh, c.kw})});
        check_gradients(
            [&](Tape& t, const std::vector<Var>& v) {
                return weighted(t, bias_channels(conv2d(v[0], v[1], c.stride), v[2]), w);
            },
            {rand_t(rng, {c.ci, c.h, c.w}), rand_t(rng, {c.co, c.ci, c.kh, c.kw}),
             rand_t(rng, {c.co})});
    }
}

TEST_CASE("softmax gradients match finite differences on both axes") {
    Rng rng(19);
    for (int trial = 0; trial < 3; ++trial) {
        const std::size_t n = 3 + static_cast<std::size_t>(trial), m = 4;
        for (std::size_t axis : {std::size_t{0}, std::size_t{1}}) {
            Tensor w = rand_t(rng, {n, m});
            check_gradients(
                [&](Tape& t, const std::vector<Var>& v) { return weighted(t, softmax(v[0], axis), w); },
                {rand_t(rng, {n, m}, -2.0, 2.0)});
        }
    }
}

TEST_CASE("squash gradients match finite differences") {
    Rng rng(23);
    for (int trial = 0; trial < 3; ++trial) {
        const std::size_t n = 2 + static_cast<std::size_t>(trial), d = 3 + static_cast<std::size_t>(trial);
        Tensor w2 = rand_t(rng, {n, d});
        // keep norms comfortably clear of zero where eps matters for FD accuracy
        check_gradients(
            [&](Tape& t, const std::vector<Var>& v) { return weighted(t, squash(v[0]), w2); },
            {rand_t(rng, {n, d}, 0.2, 1.5)});
        Tensor w1 = rand_t(rng, {d});
        check_gradients(
            [&](Tape& t, const std::vector<Var>& v) { return weighted(t, squash(v[0]), w1); },
            {rand_t(rng, {d}, -1.5, -0.2)});
    }
}

TEST_CASE("squash maps zero to zero with zero gradient") {
    Tape tape;
    Var x = tape.leaf(Tensor::zeros({2, 4}));
    Var y = squash(x);
    for (std::size_t i = 0; i < 8; ++i) REQUIRE(y.value()[i] == 0.0);
    tape.backward(sum(y));
    const auto& g = tape.grad(x.id);
    REQUIRE(g.all_finite());
    for (std::size_t i = 0; i < 8; ++i) REQUIRE(g[i] == 0.0);
}

TEST_CASE("squash output norm stays below one") {
    Rng rng(29);
    Tensor big = rand_t(rng, {4, 6}, -50.0, 50.0);
    Tape tape;
    Var y = squash(tape.leaf(big));
    for (std::size_t i = 0; i < 4; ++i) {
        Real n2 = 0;
        for (std::size_t q = 0; q < 6; ++q) n2 += y.value()(i, q) * y.value()(i, q);
        REQUIRE(n2 < 1.0);
    }
}

TEST_CASE("capsule primitive gradients match finite differences") {
    Rng rng(31);
    for (int trial = 0; trial < 3; ++trial) {
        const std::size_t ni = 3 + static_cast<std::size_t>(trial), nj = 3, di = 4, dj = 2;
        Tensor wu = rand_t(rng, {ni, nj, dj});
        check_gradients(
            [&](Tape& t, const std::vector<Var>& v) {
                return weighted(t, capsule_predict(v[0], v[1]), wu);
            },
            {rand_t(rng, {ni, di}), rand_t(rng, {ni, nj, di, dj})});

        Tensor ws = rand_t(rng, {nj, dj});
        check_gradients(
            [&](Tape& t, const std::vector<Var>& v) {
                return weighted(t, combine_predictions(v[0], v[1]), ws);
            },
            {rand_t(rng, {ni, nj, dj}), rand_t(rng, {ni, nj})});

        Tensor wa = rand_t(rng, {ni, nj});
        check_gradients(
            [&](Tape& t, const std::vector<Var>& v) { return weighted(t, alignment(v[0], v[1]), wa); },
            {rand_t(rng, {ni, nj, dj}), rand_t(rng, {nj, dj})});
    }
}

TEST_CASE("primary_capsules regroups channels into capsules") {
    // two groups of dim 2 over a 2x2 map; capsule n = (group*H + h)*W + w
    Tensor x({4, 2, 2});
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] = static_cast<Real>(i);
    Tape tape;
    Var caps = primary_capsules(tape.leaf(x), 2);
    REQUIRE(caps.value().extent(0) == 8);
    REQUIRE(caps.value().extent(1) == 2);
    // capsule 0 = group 0 at (0,0): channels 0 and 1 at that pixel
    REQUIRE(caps.value()(0, 0) == x(0, 0, 0));
    REQUIRE(caps.value()(0, 1) == x(1, 0, 0));
    // capsule 5 = group 1 at (h=0, w=1): channels 2 and 3
    REQUIRE(caps.value()(5, 0) == x(2, 0, 1));
    REQUIRE(caps.value()(5, 1) == x(3, 0, 1));

    Rng rng(37);
    Tensor w = rand_t(rng, {8, 2});
    check_gradients(
        [&](Tape& t, const std::vector<Var>& v) { return weighted(t, primary_capsules(v[0], 2), w); },
        {rand_t(rng, {4, 2, 2})});
}

TEST_CASE("bce_with_logits gradient and stability") {
    Rng rng(41);
    Tensor targets({5});
    for (std::size_t i = 0; i < 5; ++i) targets[i] = (i % 2 == 0) ? 1.0 : 0.0;
    check_gradients(
        [&](Tape&, const std::vector<Var>& v) { return bce_with_logits(v[0], targets); },
        {rand_t(rng, {5}, -4.0, 4.0)});

    // extreme logits stay finite
    Tensor z({2}, std::vector<Real>{500.0, -500.0});
    Tensor tt({2}, std::vector<Real>{0.0, 1.0});
    Tape tape;
    Var zv = tape.leaf(z);
    Var loss = bce_with_logits(zv, tt);
    REQUIRE(std::isfinite(loss.value()[0]));
    tape.backward(loss);
    REQUIRE(tape.grad(zv.id).all_finite());
}

TEST_CASE("randomized composed graphs match finite differences") {
    Rng rng(43);
    // capsule-style chain: predict -> softmax coupling -> combine -> squash -> alignment
    for (int trial = 0; trial < 12; ++trial) {
        std::uniform_int_distribution<std::size_t> dim(2, 4);
        const std::size_t ni = dim(rng) + 1, nj = dim(rng), di = dim(rng), dj = dim(rng);
        Tensor wa = rand_t(rng, {ni, nj});
        check_gradients(
            [&](Tape& t, const std::vector<Var>& v) {
                Var uhat = capsule_predict(v[0], v[1]);
                Var c = softmax(v[2], 1);
                Var vout = squash(combine_predictions(uhat, c));
                return weighted(t, alignment(uhat, vout), wa);
            },
            {rand_t(rng, {ni, di}), rand_t(rng, {ni, nj, di, dj}), rand_t(rng, {ni, nj})});
    }
    // conv-style chain: conv -> bias -> relu -> capsules -> squash -> norms
    for (int trial = 0; trial < 8; ++trial) {
        std::uniform_int_distribution<std::size_t> chan(1, 2);
        const std::size_t ci = chan(rng), co = 2 * chan(rng), h = 5, w = 5, kh = 3, kw = 3;
        const std::size_t caps = (co / 2) * (h - kh + 1) * (w - kw + 1);
        Tensor wn = rand_t(rng, {caps}, 0.5, 1.0);
        check_gradients(
            [&](Tape& t, const std::vector<Var>& v) {
                Var fm = relu(bias_channels(conv2d(v[0], v[1], 1), v[2]));
                Var u = squash(primary_capsules(fm, 2));
                return weighted(t, row_norms(u), wn);
            },
            {rand_away_from_zero(rng, {ci, h, w}), rand_t(rng, {co, ci, kh, kw}),
             rand_t(rng, {co}, 0.1, 0.4)});
    }
}

TEST_CASE("tape error handling") {
    Tape tape;
    REQUIRE_THROWS_AS(tape.backward(Var{&tape, 0}), AutodiffError);

    Var x = tape.leaf(Tensor::full({2}, 1.0));
    REQUIRE_THROWS_AS(tape.backward(x), AutodiffError);  // non-scalar terminal

    Tape other;
    Var y = other.leaf(Tensor::full({2}, 1.0));
    REQUIRE_THROWS_AS(add(x, y), AutodiffError);

    // shape mismatches carry the offending dimensions
    Var z = tape.leaf(Tensor::full({3}, 1.0));
    REQUIRE_THROWS_WITH(add(x, z), Catch::Matchers::ContainsSubstring("[2]") &&
                                       Catch::Matchers::ContainsSubstring("[3]"));
    REQUIRE_THROWS_AS(matmul(x, z), ShapeError);
}
