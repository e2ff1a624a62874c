#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "pseg/adam.hpp"
#include "pseg/gradcheck.hpp"
#include "pseg/ops.hpp"
#include "pseg/rng.hpp"

using namespace pseg;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.vec()) v = rng.normal(0.0, scale);
    return t;
}

} // namespace

TEST_CASE("matmul identity") {
    Rng rng(11);
    Tensor a = random_tensor({2, 2}, rng);
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor out = matmul(a, eye);
    for (std::size_t i = 0; i < 4; ++i) CHECK(out.data()[i] == doctest::Approx(a.data()[i]).epsilon(1e-15));
}

TEST_CASE("softmax symmetry and normalization") {
    Tensor z = Tensor::from_data({1, 2}, {0.0, 0.0});
    Tensor s = softmax_lastdim(z);
    CHECK(s.data()[0] == doctest::Approx(0.5));
    CHECK(s.data()[1] == doctest::Approx(0.5));

    Rng rng(3);
    Tensor x = random_tensor({7, 9}, rng, 3.0);
    Tensor y = softmax_lastdim(x);
    for (int r = 0; r < 7; ++r) {
        double sum = 0.0;
        for (int c = 0; c < 9; ++c) sum += y.data()[r * 9 + c];
        CHECK(std::abs(sum - 1.0) < 1e-9);
    }
}

TEST_CASE("gelu at zero and layer_norm statistics") {
    Tensor z = Tensor::scalar(0.0);
    CHECK(gelu(z).data()[0] == 0.0);

    Tensor c = Tensor::full({1, 8}, 3.25);
    Tensor lc = layer_norm(c);
    for (int i = 0; i < 8; ++i) CHECK(lc.data()[i] == doctest::Approx(0.0));

    Rng rng(5);
    Tensor x = random_tensor({6, 16}, rng, 2.0);
    Tensor y = layer_norm(x);
    for (int r = 0; r < 6; ++r) {
        double mean = 0.0;
        for (int i = 0; i < 16; ++i) mean += y.data()[r * 16 + i];
        mean /= 16.0;
        double var = 0.0;
        for (int i = 0; i < 16; ++i) {
            const double d = y.data()[r * 16 + i] - mean;
            var += d * d;
        }
        var /= 16.0;
        CHECK(std::abs(mean) < 1e-9);
        CHECK(std::abs(var - 1.0) < 1e-6);
    }
}

TEST_CASE("backward of sum(x*x)") {
    Tensor x = Tensor::from_data({1}, {3.0}, true);
    Tape tape;
    TapeGuard guard(tape);
    Tensor loss = sum_all(mul(x, x));
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("fan-out accumulates additively") {
    Tensor x = Tensor::from_data({1}, {1.7}, true);
    Tape tape;
    TapeGuard guard(tape);
    Tensor loss = sum_all(add(x, x));
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2.0));
}

TEST_CASE("grad of f(x)+f(x) is twice grad of f(x)") {
    Rng rng(7);
    Tensor x = random_tensor({3, 3}, rng);

    auto grad_of = [&](bool doubled) {
        Tensor p = x.clone();
        p.set_requires_grad(true);
        Tape tape;
        TapeGuard guard(tape);
        auto f = [&]() { return sum_all(mul(sigmoid(p), p)); };
        Tensor loss = doubled ? add(f(), f()) : f();
        tape.backward(loss);
        return p.grad();
    };
    auto g1 = grad_of(false);
    auto g2 = grad_of(true);
    for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g2[i] == doctest::Approx(2.0 * g1[i]).epsilon(1e-12));
}

TEST_CASE("matmul gradients match finite differences") {
    Rng rng(13);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    const double err_a = finite_diff_check([&](const Tensor& t) { return sum_all(matmul(t, b)); }, a, 1e-5);
    const double err_b = finite_diff_check([&](const Tensor& t) { return sum_all(matmul(a, t)); }, b, 1e-5);
    CHECK(err_a < 1e-6);
    CHECK(err_b < 1e-6);
}

TEST_CASE("finite_diff_check edge behaviors") {
    Rng rng(17);
    Tensor x = random_tensor({5}, rng);
    const double err = finite_diff_check([](const Tensor& t) { return sum_all(mul(t, t)); }, x, 1e-5);
    CHECK(err < 1e-8);

    const double cerr = finite_diff_check([](const Tensor&) { return Tensor::scalar(4.0); }, x, 1e-5);
    CHECK(cerr == 0.0);
}

TEST_CASE("every smooth primitive passes the finite-difference oracle") {
    Rng rng(23);
    const double kEps = 1e-5;

    Tensor m34 = random_tensor({3, 4}, rng);
    Tensor m34b = random_tensor({3, 4}, rng);
    Tensor v4 = random_tensor({4}, rng);
    Tensor img = random_tensor({5, 5, 2}, rng);
    Tensor cw = random_tensor({3, 3, 2, 3}, rng, 0.5);
    Tensor cb = random_tensor({3}, rng);
    Tensor tw = random_tensor({2, 2, 2, 3}, rng, 0.5);

    auto check_wrt = [&](const char* name, const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double tol = 1e-6) {
        INFO(name);
        CHECK(finite_diff_check(f, x, kEps) < tol);
    };

    check_wrt("add", [&](const Tensor& t) { return sum_all(add(t, m34b)); }, m34);
    check_wrt("sub", [&](const Tensor& t) { return sum_all(sub(m34b, t)); }, m34);
    check_wrt("mul", [&](const Tensor& t) { return sum_all(mul(t, m34b)); }, m34);
    check_wrt("divide", [&](const Tensor& t) { return sum_all(divide(m34b, add_scalar(sigmoid(t), 0.5))); }, m34);
    check_wrt("add_scalar", [&](const Tensor& t) { return sum_all(add_scalar(t, 1.25)); }, m34);
    check_wrt("mul_scalar", [&](const Tensor& t) { return sum_all(mul_scalar(t, -0.7)); }, m34);
    check_wrt("reshape", [&](const Tensor& t) { return sum_all(mul(reshape(t, {4, 3}), reshape(m34b, {4, 3}))); },
              m34);
    check_wrt("transpose", [&](const Tensor& t) { return sum_all(mul(transpose2d(t), transpose2d(m34b))); }, m34);
    check_wrt("softmax", [&](const Tensor& t) { return sum_all(mul(softmax_lastdim(t), m34b)); }, m34);
    check_wrt("layer_norm", [&](const Tensor& t) { return sum_all(mul(layer_norm(t), m34b)); }, m34, 1e-4);
    check_wrt("gelu", [&](const Tensor& t) { return sum_all(gelu(t)); }, m34);
    check_wrt("sigmoid", [&](const Tensor& t) { return sum_all(mul(sigmoid(t), m34b)); }, m34);
    check_wrt("softplus", [&](const Tensor& t) { return sum_all(softplus(t)); }, m34);
    check_wrt("mean", [&](const Tensor& t) { return mean_all(mul(t, t)); }, m34);
    check_wrt("conv2d wrt x", [&](const Tensor& t) { return sum_all(mul(conv2d(t, cw, cb, 1, 1), conv2d(img, cw, cb, 1, 1))); }, img);
    check_wrt("conv2d wrt w", [&](const Tensor& t) { return sum_all(gelu(conv2d(img, t, cb, 2, 0))); }, cw);
    check_wrt("conv2d wrt b", [&](const Tensor& t) { return sum_all(gelu(conv2d(img, cw, t, 1, 0))); }, cb);
    check_wrt("tconv wrt x", [&](const Tensor& t) { return sum_all(gelu(transposed_conv2d(t, tw, cb, 2))); }, img);
    check_wrt("tconv wrt w", [&](const Tensor& t) { return sum_all(gelu(transposed_conv2d(img, t, cb, 2))); }, tw);
    check_wrt("row_slice", [&](const Tensor& t) { return sum_all(mul(row_slice(t, 1, 3), row_slice(m34b, 1, 3))); },
              m34);
    check_wrt("col_slice", [&](const Tensor& t) { return sum_all(mul(col_slice(t, 1, 4), col_slice(m34b, 1, 4))); },
              m34);
    check_wrt("concat_rows", [&](const Tensor& t) { return sum_all(mul(concat_rows({t, m34b}), concat_rows({m34b, t}))); },
              m34);
    check_wrt("concat_cols", [&](const Tensor& t) { return sum_all(mul(concat_cols({t, m34b}), concat_cols({m34b, t}))); },
              m34);
    check_wrt("gather_rows", [&](const Tensor& t) { return sum_all(mul(gather_rows(t, {2, 0, 2}), gather_rows(m34b, {2, 0, 2}))); },
              m34);
    check_wrt("gather_elems", [&](const Tensor& t) { return sum_all(mul(gather_elems(t, {0, 5, 11, 5}), gather_elems(m34b, {1, 2, 3, 4}))); },
              m34);
    check_wrt("add_rowvec wrt x", [&](const Tensor& t) { return sum_all(mul(add_rowvec(t, v4), m34b)); }, m34);
    check_wrt("add_rowvec wrt v", [&](const Tensor& t) { return sum_all(mul(add_rowvec(m34, t), m34b)); }, v4);
    check_wrt("mul_rowvec wrt x", [&](const Tensor& t) { return sum_all(mul(mul_rowvec(t, v4), m34b)); }, m34);
    check_wrt("mul_rowvec wrt v", [&](const Tensor& t) { return sum_all(mul(mul_rowvec(m34, t), m34b)); }, v4);

    // relu / minimum / maximum are only piecewise smooth; probe away from the kinks.
    Tensor away = random_tensor({3, 4}, rng);
    for (auto& v : away.vec()) v = (v >= 0 ? v + 0.5 : v - 0.5);
    Tensor far_b = add_scalar(away, 0.2);
    check_wrt("relu", [&](const Tensor& t) { return sum_all(relu(t)); }, away);
    check_wrt("minimum", [&](const Tensor& t) { return sum_all(minimum(t, far_b)); }, away);
    check_wrt("maximum", [&](const Tensor& t) { return sum_all(maximum(t, far_b)); }, away);

    Tensor targets = Tensor::zeros({3, 4});
    {
        Rng trng(29);
        for (auto& v : targets.vec()) v = trng.uniform() < 0.5 ? 0.0 : 1.0;
    }
    check_wrt("bce_with_logits", [&](const Tensor& t) { return bce_with_logits_mean(t, targets); }, m34);
    check_wrt("dice_loss", [&](const Tensor& t) { return dice_loss_with_logits(t, targets); }, m34);

    // dropout rebuilds the identical mask per evaluation via a fixed seed.
    check_wrt("dropout", [&](const Tensor& t) {
        Rng drng(99);
        return sum_all(dropout(t, 0.4, true, drng));
    }, m34);
}

TEST_CASE("dropout eval mode is the identity") {
    Rng rng(31);
    Tensor x = random_tensor({4, 4}, rng);
    Rng drng(1);
    Tensor y = dropout(x, 0.5, false, drng);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("tape replay is deterministic") {
    auto run = [] {
        Rng rng(41);
        Tensor x = random_tensor({4, 4}, rng);
        x.set_requires_grad(true);
        Tensor w = random_tensor({4, 4}, rng);
        w.set_requires_grad(true);
        Tape tape;
        TapeGuard guard(tape);
        Tensor h = gelu(matmul(x, w));
        Tensor loss = add(sum_all(softmax_lastdim(h)), mean_all(layer_norm(h)));
        tape.backward(loss);
        std::vector<double> out = x.grad();
        out.insert(out.end(), w.grad().begin(), w.grad().end());
        return out;
    };
    auto g1 = run();
    auto g2 = run();
    REQUIRE(g1.size() == g2.size());
    for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("adam zero gradient leaves parameters unchanged") {
    std::vector<Tensor> params = {Tensor::from_data({2}, {1.0, -2.0}, true)};
    params[0].zero_grad();
    AdamState st;
    st.init(params);
    adam_step(params, st, 1e-2);
    CHECK(params[0].data()[0] == 1.0);
    CHECK(params[0].data()[1] == -2.0);
    CHECK(st.step == 1);
}

TEST_CASE("adam first step matches the closed form") {
    std::vector<Tensor> params = {Tensor::from_data({1}, {1.0}, true)};
    params[0].grad()[0] = 1.0;
    AdamState st;
    st.init(params);
    adam_step(params, st, 1e-4);
    const double expected = 1.0 - 1e-4 * (1.0 / (1.0 + 1e-8));
    CHECK(params[0].data()[0] == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("adam with constant gradient decreases monotonically") {
    std::vector<Tensor> params = {Tensor::from_data({1}, {5.0}, true)};
    AdamState st;
    st.init(params);
    double prev = params[0].data()[0];
    for (int k = 0; k < 10; ++k) {
        params[0].zero_grad();
        params[0].grad()[0] = 2.0;
        adam_step(params, st, 1e-3);
        CHECK(params[0].data()[0] < prev);
        prev = params[0].data()[0];
    }
}

TEST_CASE("shape and contract errors") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({3, 3});
    CHECK_THROWS_AS((void)add(a, b), ShapeError);
    CHECK_THROWS_AS((void)matmul(a, Tensor::zeros({2, 2})), ShapeError);
    CHECK_THROWS_AS((void)reshape(a, {4, 2}), ShapeError);

    // Loss must be scalar and produced on the tape being rewound.
    Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
    {
        Tape tape;
        TapeGuard guard(tape);
        Tensor y = mul(x, x);
        CHECK_THROWS_AS(tape.backward(y), ShapeError);
    }
    {
        Tape tape;
        Tensor detached = Tensor::scalar(1.0);
        CHECK_THROWS_AS(tape.backward(detached), NumericError);
    }

    // Overflow to infinity is surfaced as a numeric error.
    Tensor big = Tensor::full({2}, 1e308);
    CHECK_THROWS_AS((void)mul(big, big), NumericError);
}
