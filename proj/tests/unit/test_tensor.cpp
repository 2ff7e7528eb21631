#include <cmath>
#include <cstring>

#include "doctest.h"
#include "oracles.hpp"
#include "vxda/ops.hpp"
#include "vxda/rng.hpp"

using namespace vxda;
namespace oracle = vxda::testing::oracle;

namespace {

std::vector<double> random_values(Rng& rng, std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-1, 1);
    return v;
}

std::vector<double> values(const Tensor64& t) { return {t.data().begin(), t.data().end()}; }

void check_close(const std::vector<double>& a, const std::vector<double>& b, double tol) {
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(tol));
}

}  // namespace

TEST_CASE("tensor invariants") {
    auto t = Tensor::zeros({2, 3});
    CHECK(t.numel() == 6);
    CHECK(t.shape() == Shape{2, 3});
    CHECK_FALSE(t.requires_grad());
    CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
    CHECK_THROWS_AS(Tensor::zeros({2, 0}), ShapeError);
}

TEST_CASE("elementwise examples") {
    auto x = Tensor::from({3}, {-1, 0, 2});
    auto r = relu(x);
    CHECK(std::vector<float>(r.data().begin(), r.data().end()) == std::vector<float>{0, 0, 2});
    CHECK(std::isnan(relu(Tensor::from({1}, {std::nanf("")})).item()));
    CHECK(sigmoid(Tensor::from({1}, {0})).item() == 0.5f);
    CHECK(elu(Tensor::from({1}, {1.0f})).item() == 1.0f);
    CHECK(elementwise(Elementwise::neg, x).data()[0] == 1.0f);

    SUBCASE("shape mismatch names both shapes") {
        try {
            add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2}));
            FAIL("expected ShapeError");
        } catch (const ShapeError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("[2, 3]") != std::string::npos);
            CHECK(msg.find("[3, 2]") != std::string::npos);
        }
    }
    SUBCASE("scalar operand broadcasts") {
        auto y = mul(Tensor::from({2}, {1, 2}), Tensor::scalar(3));
        CHECK(y.data()[1] == 6.0f);
    }
}

TEST_CASE("matmul examples") {
    auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    auto m = Tensor::from({2, 2}, {1, 2, 3, 4});
    auto p = matmul(eye, m);
    CHECK(std::vector<float>(p.data().begin(), p.data().end()) == std::vector<float>{1, 2, 3, 4});
    CHECK(matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4})).item() == 11.0f);
    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);

    Rng rng(7);
    auto a = random_values(rng, 12), b = random_values(rng, 8);
    auto got = matmul(Tensor64::from({3, 4}, a), Tensor64::from({4, 2}, b));
    check_close(values(got), oracle::matmul(a, b, 3, 4, 2), 1e-12);
}

TEST_CASE("conv2d examples") {
    auto x = Tensor::from({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    auto id = conv2d(x, Tensor::from({1, 1, 1, 1}, {1}), 1, 0);
    CHECK(std::vector<float>(id.data().begin(), id.data().end()) ==
          std::vector<float>(x.data().begin(), x.data().end()));

    auto ones = conv2d(Tensor::full({1, 1, 3, 3}, 1), Tensor::full({1, 1, 2, 2}, 1), 1, 0);
    CHECK(ones.shape() == Shape{1, 1, 2, 2});
    for (float v : ones.data()) CHECK(v == 4.0f);

    Rng rng(11);
    auto xv = random_values(rng, 2 * 3 * 8 * 8), wv = random_values(rng, 4 * 3 * 3 * 3);
    for (auto [stride, pad] : {std::pair{1, 0}, std::pair{1, 1}, std::pair{2, 1}}) {
        auto got = conv2d(Tensor64::from({2, 3, 8, 8}, xv), Tensor64::from({4, 3, 3, 3}, wv), stride, pad);
        check_close(values(got), oracle::conv2d(xv, wv, 2, 3, 8, 8, 4, 3, 3, stride, pad), 1e-12);
    }
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), 1, 0), ShapeError);
}

TEST_CASE("conv3d matches the naive oracle") {
    Rng rng(12);
    auto xv = random_values(rng, 2 * 2 * 6 * 6 * 6), wv = random_values(rng, 3 * 2 * 4 * 4 * 4);
    int o = 0;
    auto expected = oracle::conv3d(xv, wv, 2, 2, 6, 3, 4, 2, 1, o);
    auto got = conv3d(Tensor64::from({2, 2, 6, 6, 6}, xv), Tensor64::from({3, 2, 4, 4, 4}, wv), 2, 1);
    CHECK(got.shape() == Shape{2, 3, o, o, o});
    check_close(values(got), expected, 1e-12);
}

TEST_CASE("conv_transpose3d examples") {
    auto single = conv_transpose3d(Tensor::from({1, 1, 1, 1, 1}, {2.5f}), Tensor::full({1, 1, 2, 2, 2}, 1), 1, 0);
    CHECK(single.shape() == Shape{1, 1, 2, 2, 2});
    for (float v : single.data()) CHECK(v == 2.5f);

    auto blocks = conv_transpose3d(Tensor::full({1, 1, 2, 2, 2}, 1), Tensor::full({1, 1, 2, 2, 2}, 1), 2, 0);
    CHECK(blocks.shape() == Shape{1, 1, 4, 4, 4});
    for (float v : blocks.data()) CHECK(v == 1.0f);

    CHECK_THROWS_AS(conv_transpose3d(Tensor::zeros({1, 1, 1, 1, 1}), Tensor::zeros({1, 1, 1, 1, 1}), 1, 1), ShapeError);
}

TEST_CASE("adjointness of linear ops") {
    Rng rng(99);
    auto rel = [](double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-30}); };
    for (int trial = 0; trial < 5; ++trial) {
        // conv_transpose3d is the adjoint of conv3d: <conv3d(y), x> = <y, conv_transpose3d(x)>
        const int n = 2, c = 3, f = 2, d = 3, k = 4, stride = 2, pad = 1;
        const int big = (d - 1) * stride - 2 * pad + k;
        auto x = random_values(rng, n * c * d * d * d);
        auto y = random_values(rng, n * f * big * big * big);
        auto w = random_values(rng, c * f * k * k * k);
        auto up = conv_transpose3d(Tensor64::from({n, c, d, d, d}, x), Tensor64::from({c, f, k, k, k}, w), stride, pad);
        int o = 0;
        auto down = oracle::conv3d(y, w, n, f, big, c, k, stride, pad, o);  // w read as [C_out=c, C_in=f]
        REQUIRE(o == d);
        CHECK(rel(oracle::dot(values(up), y), oracle::dot(x, down)) < 1e-5);

        // conv2d against its own backward pass (the adjoint applied to y).
        auto xi = Tensor64::from({1, 2, 5, 5}, random_values(rng, 50));
        xi.set_requires_grad(true);
        auto wk = Tensor64::from({3, 2, 3, 3}, random_values(rng, 54));
        auto out = conv2d(xi, wk, 2, 1);
        auto yv = random_values(rng, static_cast<std::size_t>(out.numel()));
        auto loss = sum(mul(out, Tensor64::from(out.shape(), yv)));
        loss.backward();
        CHECK(rel(oracle::dot(values(out), yv), oracle::dot(values(xi), {xi.grad().begin(), xi.grad().end()})) < 1e-5);

        // matmul and transpose.
        auto a = random_values(rng, 12), v = random_values(rng, 4), u = random_values(rng, 3);
        auto av = oracle::matmul(a, v, 3, 4, 1);
        auto atu = values(matmul(transpose(Tensor64::from({3, 4}, a)), Tensor64::from({3, 1}, u)));
        CHECK(rel(oracle::dot(av, u), oracle::dot(v, atu)) < 1e-5);
    }
}

TEST_CASE("batchnorm examples") {
    BatchNormStats<double> stats{Tensor64::zeros({1}), Tensor64::full({1}, 1)};
    auto y = batchnorm(Tensor64::from({2, 1}, {1, 3}), Tensor64::full({1}, 1), Tensor64::zeros({1}), Mode::train, stats);
    CHECK(y.data()[0] == doctest::Approx(-1).epsilon(1e-4));
    CHECK(y.data()[1] == doctest::Approx(1).epsilon(1e-4));
    CHECK(stats.running_mean.data()[0] == doctest::Approx(0.2));            // 0.9*0 + 0.1*2
    CHECK(stats.running_var.data()[0] == doctest::Approx(0.9 + 0.1 * 2.0)); // unbiased var 2

    auto z = batchnorm(Tensor64::from({2, 1}, {1, 3}), Tensor64::zeros({1}), Tensor64::full({1}, 0.25), Mode::train, stats);
    for (double v : z.data()) CHECK(v == 0.25);

    Rng rng(5);
    auto x = Tensor64::from({16, 3, 4, 4}, random_values(rng, 16 * 3 * 16));
    BatchNormStats<double> stats3{Tensor64::zeros({3}), Tensor64::full({3}, 1)};
    auto out = batchnorm(x, Tensor64::full({3}, 1), Tensor64::zeros({3}), Mode::train, stats3);
    for (int ch = 0; ch < 3; ++ch) {
        double m = 0, v = 0;
        const int count = 16 * 16;
        for (int i = 0; i < 16; ++i)
            for (int j = 0; j < 16; ++j) m += out.data()[(i * 3 + ch) * 16 + j];
        m /= count;
        for (int i = 0; i < 16; ++i)
            for (int j = 0; j < 16; ++j) {
                const double dv = out.data()[(i * 3 + ch) * 16 + j] - m;
                v += dv * dv;
            }
        v /= count;
        CHECK(std::abs(m) < 1e-6);
        CHECK(std::abs(v - 1) < 1e-4);
    }

    BatchNormStats<double> one{Tensor64::zeros({1}), Tensor64::full({1}, 1)};
    CHECK_THROWS(batchnorm(Tensor64::zeros({1, 1}), Tensor64::full({1}, 1), Tensor64::zeros({1}), Mode::train, one));
    CHECK_NOTHROW(batchnorm(Tensor64::zeros({1, 1}), Tensor64::full({1}, 1), Tensor64::zeros({1}), Mode::eval, one));
}

TEST_CASE("backward examples") {
    auto x = Tensor64::from({2, 3}, {1, 2, 3, 4, 5, 6});
    x.set_requires_grad(true);
    sum(x).backward();
    for (double g : x.grad()) CHECK(g == 1.0);

    auto y = Tensor64::from({2}, {1, 2});
    y.set_requires_grad(true);
    sum(mul(y, y)).backward();
    CHECK(y.grad()[0] == 2.0);
    CHECK(y.grad()[1] == 4.0);

    CHECK_THROWS_AS(mul(y, y).backward(), ShapeError);
}

TEST_CASE("a tensor consumed twice accumulates both branches") {
    auto x = Tensor64::from({3}, {0.5, -1, 2});
    x.set_requires_grad(true);
    sum(add(x, x)).backward();
    for (double g : x.grad()) CHECK(g == 2.0);
}

TEST_CASE("graph records parents before children") {
    auto x = Tensor::from({2}, {1, 2});
    x.set_requires_grad(true);
    auto y = relu(mul(x, x));
    auto z = sum(add(y, x));
    std::vector<Node<float>*> stack{z.node()};
    while (!stack.empty()) {
        auto* n = stack.back();
        stack.pop_back();
        for (const auto& p : n->parents) {
            CHECK(p->seq < n->seq);
            stack.push_back(p.get());
        }
    }
}

TEST_CASE("no-grad mode records nothing") {
    auto x = Tensor::from({2}, {1, 2});
    x.set_requires_grad(true);
    NoGradGuard guard;
    auto y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.is_leaf());
}

TEST_CASE("determinism: identical inputs give bitwise identical outputs and grads") {
    auto run = [] {
        Rng rng(3);
        std::vector<float> xv(2 * 3 * 8 * 8), wv(4 * 3 * 3 * 3);
        for (auto& v : xv) v = static_cast<float>(rng.uniform(-1, 1));
        for (auto& v : wv) v = static_cast<float>(rng.uniform(-1, 1));
        auto w = Tensor::from({4, 3, 3, 3}, wv);
        w.set_requires_grad(true);
        auto out = conv2d(Tensor::from({2, 3, 8, 8}, xv), w, 2, 1);
        sum(mul(out, out)).backward();
        std::vector<float> all(out.data().begin(), out.data().end());
        all.insert(all.end(), w.grad().begin(), w.grad().end());
        return all;
    };
    const auto a = run(), b = run();
    REQUIRE(a.size() == b.size());
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}
