#include <catch2/catch_amalgamated.hpp>

#include "capslab/rng.hpp"
#include "capslab/tensor.hpp"

using namespace capslab;

TEST_CASE("tensor construction and indexing") {
    Tensor t({2, 3, 4});
    REQUIRE(t.numel() == 24);
    REQUIRE(t.rank() == 3);
    for (std::size_t i = 0; i < t.numel(); ++i) REQUIRE(t[i] == 0.0);

    t(1, 2, 3) = 7.5;
    REQUIRE(t[t.numel() - 1] == 7.5);
    t(0, 0, 0) = -1.0;
    REQUIRE(t[0] == -1.0);

    // row-major layout: last index varies fastest
    Tensor u({2, 3});
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 3; ++j) u(i, j) = static_cast<Real>(i * 3 + j);
    for (std::size_t k = 0; k < 6; ++k) REQUIRE(u[k] == static_cast<Real>(k));
}

TEST_CASE("tensor shape validation") {
    REQUIRE_THROWS_AS(Tensor(Shape{2, 0, 3}), ShapeError);
    REQUIRE_THROWS_AS(Tensor(Shape{}), ShapeError);
    REQUIRE_THROWS_AS(Tensor(Shape{2, 2}, std::vector<Real>{1.0, 2.0, 3.0}), ShapeError);
}

TEST_CASE("tensor reshape preserves data and checks element count") {
    Tensor t({2, 6});
    for (std::size_t i = 0; i < 12; ++i) t[i] = static_cast<Real>(i);
    Tensor r = t.reshaped({3, 4});
    REQUIRE(r.extent(0) == 3);
    REQUIRE(r.extent(1) == 4);
    for (std::size_t i = 0; i < 12; ++i) REQUIRE(r[i] == static_cast<Real>(i));
    REQUIRE_THROWS_AS(t.reshaped({5, 3}), ShapeError);
}

TEST_CASE("tensor arithmetic and finiteness") {
    Tensor a = Tensor::full({4}, 2.0);
    Tensor b = Tensor::full({4}, 3.0);
    a += b;
    for (std::size_t i = 0; i < 4; ++i) REQUIRE(a[i] == 5.0);
    a *= 0.5;
    for (std::size_t i = 0; i < 4; ++i) REQUIRE(a[i] == 2.5);
    a -= b;
    for (std::size_t i = 0; i < 4; ++i) REQUIRE(a[i] == -0.5);

    REQUIRE(a.all_finite());
    a[2] = std::numeric_limits<Real>::quiet_NaN();
    REQUIRE_FALSE(a.all_finite());
    a[2] = std::numeric_limits<Real>::infinity();
    REQUIRE_FALSE(a.all_finite());
}

TEST_CASE("seed derivation decorrelates streams") {
    const auto s1 = derive_seed(42, 0, 0);
    const auto s2 = derive_seed(42, 0, 1);
    const auto s3 = derive_seed(42, 1, 0);
    const auto s4 = derive_seed(43, 0, 0);
    REQUIRE(s1 != s2);
    REQUIRE(s1 != s3);
    REQUIRE(s2 != s3);
    REQUIRE(s1 != s4);
    // deterministic
    REQUIRE(derive_seed(42, 0, 0) == s1);
}
