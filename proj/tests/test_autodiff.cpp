#include <cmath>
#include <limits>
#include <memory>
#include <vector>

#include "doctest.h"
#include "pyrafeat/autodiff.hpp"
#include "pyrafeat/resample.hpp"
#include "test_util.hpp"

using namespace pyrafeat;
using testutil::random_tensor;

namespace {

Tensor<double> softmax_plain(const Tensor<double>& x) {
    Tape<double> tape(Tape<double>::Mode::inference);
    return ad::softmax(tape.constant(x), 0).value();
}

// Direct exponentiate-and-normalise, no max subtraction.
std::vector<double> softmax_oracle(const std::vector<double>& x) {
    std::vector<double> e(x.size());
    double s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (e[i] = std::exp(x[i]));
    for (auto& v : e) v /= s;
    return e;
}

}  // namespace

TEST_CASE("softmax of equal logits is uniform") {
    const auto y = softmax_plain(Tensor<double>({4}, 0.0));
    for (std::size_t i = 0; i < 4; ++i) CHECK(y[i] == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("softmax of [1, 0]") {
    const auto y = softmax_plain(Tensor<double>({2}, {1.0, 0.0}));
    CHECK(y[0] == doctest::Approx(std::exp(1.0) / (std::exp(1.0) + 1.0)));
    CHECK(y[0] == doctest::Approx(0.73106).epsilon(1e-5));
    CHECK(y[1] == doctest::Approx(0.26894).epsilon(1e-5));
}

TEST_CASE("softmax matches the direct oracle on a length-49 vector") {
    const auto x = random_tensor({49}, 7, -3.0, 3.0);
    const auto y = softmax_plain(x);
    const auto ref = softmax_oracle(x.storage());
    for (std::size_t i = 0; i < 49; ++i) CHECK(std::abs(y[i] - ref[i]) <= 1e-12);
}

TEST_CASE("softmax rows sum to one along any axis") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto x = random_tensor({3, 5, 4}, seed, -20.0, 20.0);
        for (std::size_t axis = 0; axis < 3; ++axis) {
            Tape<double> tape(Tape<double>::Mode::inference);
            const auto y = ad::softmax(tape.constant(x), axis).value();
            Tape<double> t2(Tape<double>::Mode::inference);
            const auto s = ad::sum(t2.constant(y), axis).value();
            for (const double v : s.storage()) CHECK(std::abs(v - 1.0) <= 1e-6);
            for (const double v : y.storage()) CHECK((v >= 0.0 && v <= 1.0));
        }
    }
}

TEST_CASE("NaN input is rejected") {
    Tensor<double> x({3}, 0.0);
    x[1] = std::numeric_limits<double>::quiet_NaN();
    Tape<double> tape;
    CHECK_THROWS_AS(tape.constant(x), NumericError);
}

TEST_CASE("bilinear resample: constants and 1x1 inputs") {
    const Tensor<double> c({3, 5, 2}, 3.5);
    const auto up = bilinear_resample(c, 7, 4);
    CHECK(up.shape() == Shape{7, 4, 2});
    for (const double v : up.storage()) CHECK(v == doctest::Approx(3.5).epsilon(1e-15));

    const auto one = random_tensor({1, 1, 3}, 3);
    const auto big = bilinear_resample(one, 5, 6);
    for (std::size_t y = 0; y < 5; ++y)
        for (std::size_t x = 0; x < 6; ++x)
            for (std::size_t k = 0; k < 3; ++k) CHECK(big.at(y, x, k) == one[k]);

    CHECK_THROWS_AS(bilinear_resample(c, 0, 4), ShapeError);
}

TEST_CASE("bilinear 2x2 -> 4x4 matches enumerated weights") {
    const auto src = random_tensor({2, 2, 1}, 11);
    const auto out = bilinear_resample(src, 4, 4);
    // Align-corners=false: output index i samples source coordinate
    // (i + 0.5) / 2 - 0.5 = {-0.25, 0.25, 0.75, 1.25}, clamped to [0, 1].
    const double coord[4] = {0.0, 0.25, 0.75, 1.0};
    for (int y = 0; y < 4; ++y) {
        for (int x = 0; x < 4; ++x) {
            const double fy = coord[y], fx = coord[x];
            const double ref = (1 - fy) * (1 - fx) * src[0] + (1 - fy) * fx * src[1] + fy * (1 - fx) * src[2] +
                               fy * fx * src[3];
            CHECK(std::abs(out.at(y, x, 0) - ref) <= 1e-6);
        }
    }
}

TEST_CASE("backward of identity and square") {
    Parameter<double> p("p", Tensor<double>::scalar(3.0));
    {
        Tape<double> tape;
        tape.backward(tape.param(p));
        CHECK(p.grad.item() == 1.0);
    }
    p.zero_grad();
    {
        Tape<double> tape;
        tape.backward(ad::square(tape.param(p)));
        CHECK(p.grad.item() == 6.0);
    }
}

TEST_CASE("untouched parameters keep zero gradient") {
    Parameter<double> used("used", Tensor<double>({2}, 1.0));
    Parameter<double> unused("unused", Tensor<double>({2}, 1.0));
    Tape<double> tape;
    tape.param(unused);
    tape.backward(ad::sum(ad::square(tape.param(used))));
    CHECK(unused.grad[0] == 0.0);
    CHECK(unused.grad[1] == 0.0);
    CHECK(used.grad[0] == 2.0);
}

TEST_CASE("non-scalar loss is rejected") {
    Parameter<double> p("p", Tensor<double>({2}, 1.0));
    Tape<double> tape;
    CHECK_THROWS_AS(tape.backward(tape.param(p)), ShapeError);
}

namespace {

// Exercises every adjoint in the closed operation set.
Var<double> mixed_graph(Tape<double>& tape, Parameter<double>& a, Parameter<double>& w, Parameter<double>& s) {
    auto x = tape.param(a);                                  // (3, 4, 2)
    auto proj = ad::channel_project(x, tape.param(w));       // (3, 4, 3)
    auto up = ad::bilinear_resample(proj, 5, 6);             // (5, 6, 3)
    auto win = ad::window_gather(up, 3);                     // (5, 6, 9, 3)
    auto logits = ad::sum(win, 3);                           // (5, 6, 9)
    auto sm = ad::softmax(ad::mul(logits, ad::exp(tape.param(s))), 2);
    auto pooled = ad::sum(ad::mul(win, ad::reshape(sm, {5, 6, 9, 1})), 2);  // (5, 6, 3)
    auto flat = ad::reshape(pooled, {30, 3});
    auto mm = ad::matmul(flat, ad::reshape(tape.param(w), {3, 2}));
    auto diff = ad::sub(pooled, ad::add(up, tape.constant(Tensor<double>({1, 1, 3}, 0.1))));
    auto pos = ad::add(ad::square(diff), tape.constant(Tensor<double>::scalar(1.0)));
    return ad::add(ad::mean(ad::log(pos)), ad::mean(ad::square(mm)));
}

}  // namespace

TEST_CASE("gradients of the full operation set match central differences") {
    Parameter<double> a("a", random_tensor({3, 4, 2}, 1));
    Parameter<double> w("w", random_tensor({2, 3}, 2));
    Parameter<double> s("s", Tensor<double>::scalar(0.3));
    auto fn = [&](Tape<double>& tape) { return mixed_graph(tape, a, w, s); };
    const auto res = finite_diff_check(fn, {&a, &w, &s});
    CHECK(res.max_rel_error <= 1e-6);
}

TEST_CASE("finite-difference check of a quadratic bowl") {
    Parameter<double> p("p", random_tensor({5}, 4));
    auto fn = [&](Tape<double>& tape) { return ad::sum(ad::square(tape.param(p))); };
    CHECK(finite_diff_check(fn, {&p}).max_rel_error <= 1e-8);
}

TEST_CASE("finite-difference check of a softmax-composed scalar") {
    Parameter<double> p("p", random_tensor({7}, 5, -2.0, 2.0));
    const auto target = random_tensor({7}, 6, 0.0, 1.0);
    auto fn = [&](Tape<double>& tape) {
        auto y = ad::softmax(tape.param(p), 0);
        return ad::sum(ad::mul(y, tape.constant(target)));
    };
    CHECK(finite_diff_check(fn, {&p}).max_rel_error <= 1e-6);
}

TEST_CASE("backward is linear in the loss") {
    Parameter<double> p("p", random_tensor({4, 3}, 9));
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> dist(-5.0, 5.0);
    for (int trial = 0; trial < 10; ++trial) {
        const double scale = dist(rng);
        Tape<double> t1;
        auto l1 = ad::sum(ad::softmax(ad::square(t1.param(p)), 1));
        l1 = ad::sum(ad::log(ad::add(ad::square(t1.param(p)), t1.constant(Tensor<double>::scalar(0.5)))));
        t1.backward(l1, false);
        Tape<double> t2;
        auto l2 = ad::sum(ad::log(ad::add(ad::square(t2.param(p)), t2.constant(Tensor<double>::scalar(0.5)))));
        t2.backward(ad::mul(l2, scale), false);
        const auto g1 = t1.grad_of(p);
        const auto g2 = t2.grad_of(p);
        for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g2[i] == doctest::Approx(scale * g1[i]).epsilon(1e-12));
    }
}

TEST_CASE("replaying a tape gives bit-identical gradients") {
    Parameter<float> p("p", random_tensor<float>({6, 5, 2}, 12));
    Tape<float> tape;
    auto x = tape.param(p);
    auto loss = ad::mean(ad::square(ad::window_gather(ad::bilinear_resample(x, 9, 7), 3)));
    tape.backward(loss, false);
    const auto g1 = tape.grad_of(p);
    tape.backward(loss, false);
    const auto g2 = tape.grad_of(p);
    CHECK(g1 == g2);
}

TEST_CASE("frozen parameters enter as constants") {
    Parameter<double> p("p", Tensor<double>({2}, 2.0));
    p.frozen = true;
    Tape<double> tape;
    auto x = tape.param(p);
    CHECK_FALSE(x.requires_grad());
}
