#include <doctest.h>

#include <cmath>
#include <string>

#include "support.hpp"
#include "unicon/autodiff.hpp"
#include "unicon/errors.hpp"
#include "unicon/gradcheck.hpp"

using namespace unicon;
using unicon::test::random_tensor;

namespace {

Tensor oracle_matmul(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor c({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t t = 0; t < k; ++t) s += a.at(i, t) * b.at(t, j);
            c.at(i, j) = s;
        }
    return c;
}

Tensor eval(const Tensor& x, Var (*f)(Var)) {
    Tape tape;
    return f(tape.constant(x)).value();
}

}  // namespace

TEST_CASE("matmul examples") {
    Tape tape;
    auto id = tape.constant(Tensor::matrix({{1, 0}, {0, 1}}));
    auto b = tape.constant(Tensor::matrix({{5, 6}, {7, 8}}));
    CHECK(ops::matmul(id, b).value() == Tensor::matrix({{5, 6}, {7, 8}}));
    CHECK(ops::matmul(tape.constant(Tensor::matrix({{2}})), tape.constant(Tensor::matrix({{3}}))).value().item() == 6.0);
}

TEST_CASE("matmul equals the scalar triple loop exactly") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        Tape tape;
        const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
        CHECK(ops::matmul(tape.constant(a), tape.constant(b)).value() == oracle_matmul(a, b));
    }
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tape tape;
    auto a = tape.constant(Tensor({2, 3}));
    auto b = tape.constant(Tensor({2, 3}));
    try {
        ops::matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find(shape_str({2, 3})) != std::string::npos);
    }
}

TEST_CASE("matmul associativity at fp64 tolerance") {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        Tape tape;
        auto a = tape.constant(random_tensor({4, 4}, rng));
        auto b = tape.constant(random_tensor({4, 4}, rng));
        auto c = tape.constant(random_tensor({4, 4}, rng));
        CHECK(max_abs_diff(ops::matmul(ops::matmul(a, b), c).value(), ops::matmul(a, ops::matmul(b, c)).value()) < 1e-9);
    }
}

TEST_CASE("softmax examples and slice sums") {
    const Tensor half = eval(Tensor::vector({0, 0}), ops::softmax);
    CHECK(half[0] == 0.5);
    CHECK(half[1] == 0.5);

    const Tensor big = eval(Tensor::vector({1000, 0}), ops::softmax);
    CHECK(big.all_finite());
    CHECK(big[0] == doctest::Approx(1.0));
    CHECK(big[1] < 1e-300);

    const Tensor s = eval(Tensor::vector({1, 2, 3}), ops::softmax);
    const long double z = std::exp(-2.0L) + std::exp(-1.0L) + 1.0L;
    const long double expect[3] = {std::exp(-2.0L) / z, std::exp(-1.0L) / z, 1.0L / z};
    for (int i = 0; i < 3; ++i) CHECK(std::abs(s[i] - static_cast<double>(expect[i])) < 1e-15);

    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor x = random_tensor({5, 7}, rng, 3.0);
        const Tensor p = eval(x, ops::softmax);
        for (std::size_t r = 0; r < 5; ++r) {
            double sum = 0.0;
            for (std::size_t c = 0; c < 7; ++c) {
                CHECK(p.at(r, c) > 0.0);
                CHECK(p.at(r, c) < 1.0);
                sum += p.at(r, c);
            }
            CHECK(std::abs(sum - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("layer_norm examples") {
    Tape tape;
    auto ones = tape.constant(Tensor({3}, 1.0));
    auto zeros = tape.constant(Tensor({3}, 0.0));
    const Tensor flat = ops::layer_norm(tape.constant(Tensor({1, 3}, 5.0)), ones, zeros, 1e-5).value();
    for (double v : flat.data()) CHECK(v == 0.0);

    auto beta = tape.constant(Tensor::vector({1, 2, 3}));
    const Tensor shifted = ops::layer_norm(tape.constant(Tensor::matrix({{4, -1, 9}})), zeros, beta, 1e-5).value();
    CHECK(shifted == Tensor({1, 3}, std::vector<double>{1, 2, 3}));

    Rng rng(9);
    const std::size_t d = 64;
    const Tensor x = random_tensor({1, d}, rng, 4.0);
    const Tensor y = ops::layer_norm(tape.constant(x), tape.constant(Tensor({d}, 1.0)), tape.constant(Tensor({d}, 0.0)),
                                     1e-12)
                         .value();
    double mean = 0.0, var = 0.0;
    for (double v : y.data()) mean += v;
    mean /= d;
    for (double v : y.data()) var += (v - mean) * (v - mean);
    var /= d;
    CHECK(std::abs(mean) < 1e-9);
    CHECK(std::abs(var - 1.0) < 1e-6);
}

TEST_CASE("backward examples") {
    Rng rng(2);
    const Tensor x = random_tensor({2, 3}, rng);
    {
        Tape tape;
        auto v = tape.leaf(x, true);
        tape.backward(ops::sum(v));
        for (double g : tape.grad(v).data()) CHECK(g == 1.0);
    }
    {
        Tape tape;
        auto v = tape.leaf(x, true);
        tape.backward(ops::scale(ops::sum(ops::mul(v, v)), 0.5));
        CHECK(max_abs_diff(tape.grad(v), x) < 1e-15);
    }
    {
        Tape tape;
        auto v = tape.leaf(x, true);
        CHECK_THROWS_AS(tape.backward(v), ContractError);
    }
}

TEST_CASE("gradients accumulate across backward calls until zero_grad") {
    Tape tape;
    auto v = tape.leaf(Tensor::vector({1, 2}), true);
    auto loss = ops::sum(v);
    tape.backward(loss);
    tape.backward(loss);
    CHECK(tape.grad(v) == Tensor({2}, 2.0));
    tape.zero_grad();
    tape.backward(loss);
    CHECK(tape.grad(v) == Tensor({2}, 1.0));
}

TEST_CASE("a parameter bound twice accumulates into one node") {
    Parameter p{"w", Tensor::vector({3.0})};
    Tape tape;
    auto a = tape.param(p, true);
    auto b = tape.param(p, true);
    CHECK(a.id() == b.id());
    tape.backward(ops::mul(a, b));
    const auto grads = tape.param_grads();
    REQUIRE(grads.size() == 1);
    CHECK(grads[0].first == &p);
    CHECK(grads[0].second.item() == 6.0);
}

TEST_CASE("overflow is a NumericError, not a silent value") {
    Tape tape;
    CHECK_THROWS_AS(ops::exp(tape.constant(Tensor::vector({1000.0}))), NumericError);
    CHECK_THROWS_AS(ops::log(tape.constant(Tensor::vector({0.0}))), NumericError);
}

TEST_CASE("grad_check examples") {
    Rng rng(4);
    const Tensor x = random_tensor({3, 4}, rng);
    CHECK(grad_check([](Tape&, Var v) { return ops::sum(v); }, x) < 1e-10);

    const Tensor logits = random_tensor({4, 5}, rng);
    std::vector<std::size_t> targets{0, 3, 2, 4};
    auto xent = [&](Tape&, Var v) {
        auto p = ops::softmax(v);
        auto picked = ops::gather(p, {0 * 5 + 0, 1 * 5 + 3, 2 * 5 + 2, 3 * 5 + 4}, {4});
        return ops::neg(ops::mean(ops::log(picked)));
    };
    CHECK(grad_check(xent, logits) < 1e-4);
}

TEST_CASE("every gradient family passes finite differences over 100 seeds") {
    for (const auto& family : grad_check_families()) {
        if (family == "lora_attention" || family == "reembed" || family == "decoder_dice_ce") continue;
        const GradCheckResult r = run_grad_check(family, 100, 17);
        INFO(family << " max rel error " << r.max_rel_error);
        CHECK(r.pass());
    }
}

TEST_CASE("composed families pass finite differences") {
    for (const std::string family : {"lora_attention", "reembed", "decoder_dice_ce"}) {
        const GradCheckResult r = run_grad_check(family, 5, 23);
        INFO(family << " max rel error " << r.max_rel_error);
        CHECK(r.pass());
    }
}

TEST_CASE("same seed and op sequence replay bit-identically") {
    auto run = [] {
        Rng rng(99);
        Tape tape;
        auto a = tape.leaf(random_tensor({4, 8}, rng), true);
        auto w = tape.leaf(random_tensor({8, 8}, rng), true);
        auto h = ops::gelu(ops::matmul(a, w));
        auto out = ops::attention(h, h, h);
        tape.backward(ops::sum(ops::softmax(out)));
        return std::make_pair(out.value(), tape.grad(w));
    };
    const auto first = run(), second = run();
    CHECK(bit_identical(first.first, second.first));
    CHECK(bit_identical(first.second, second.second));
}
