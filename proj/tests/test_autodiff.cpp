#include "doctest.h"
#include "recipecrit/autodiff.hpp"
#include "test_util.hpp"

using namespace recipecrit;

namespace {

// Checks d/dX sum(op(X) * R) from the tape against central differences.
void check_op(const std::function<Var(Tape&, Var)>& op, Matrix x, double tol = 1e-6) {
    std::mt19937_64 rng(99);
    Matrix r;
    auto scalar = [&](const Matrix& in) {
        Tape t(false);
        Var out = op(t, t.constant(in));
        if (r.empty()) r = testutil::random_matrix(out.rows(), out.cols(), rng);
        double s = 0.0;
        for (std::size_t i = 0; i < r.data.size(); ++i) s += r.data[i] * out.value().data[i];
        return s;
    };
    scalar(x);
    Tape t2;
    Var in2 = t2.leaf(x);
    Var out2 = op(t2, in2);
    Matrix rcol(static_cast<int>(r.size()), 1);
    rcol.data = r.data;
    Var loss = ad::matmul(ad::reshape(out2, 1, static_cast<int>(out2.value().size())), t2.constant(rcol));
    t2.backward(loss);
    const Matrix numeric = testutil::numeric_gradient(scalar, x);
    CHECK(testutil::max_abs_diff(t2.grad(in2), numeric) < tol);
}

}  // namespace

TEST_CASE("elementwise ops") {
    std::mt19937_64 rng(1);
    const Matrix x = testutil::random_matrix(3, 4, rng);
    check_op([](Tape&, Var v) { return ad::gelu(v); }, x);
    check_op([](Tape&, Var v) { return ad::tanh(v); }, x);
    check_op([](Tape&, Var v) { return ad::scale(v, -2.5); }, x);
    check_op([](Tape&, Var v) { return ad::add(v, ad::gelu(v)); }, x);
    check_op([](Tape&, Var v) { return ad::sum(v); }, x);
}

TEST_CASE("linear layer gradients for input, weight and bias") {
    std::mt19937_64 rng(2);
    const Matrix x = testutil::random_matrix(5, 3, rng);
    const Matrix w = testutil::random_matrix(3, 4, rng);
    const Matrix b = testutil::random_matrix(1, 4, rng);
    check_op([&](Tape& t, Var v) { return ad::linear(v, t.constant(w), t.constant(b)); }, x);
    check_op([&](Tape& t, Var v) { return ad::linear(t.constant(x), v, t.constant(b)); }, w);
    check_op([&](Tape& t, Var v) { return ad::linear(t.constant(x), t.constant(w), v); }, b);
    check_op([&](Tape& t, Var v) { return ad::add_row(t.constant(x), v); }, testutil::random_matrix(1, 3, rng));
}

TEST_CASE("layer norm gradients") {
    std::mt19937_64 rng(3);
    const Matrix x = testutil::random_matrix(4, 6, rng);
    const Matrix g = testutil::random_matrix(1, 6, rng);
    const Matrix b = testutil::random_matrix(1, 6, rng);
    check_op([&](Tape& t, Var v) { return ad::layer_norm(v, t.constant(g), t.constant(b)); }, x);
    check_op([&](Tape& t, Var v) { return ad::layer_norm(t.constant(x), v, t.constant(b)); }, g);
    check_op([&](Tape& t, Var v) { return ad::layer_norm(t.constant(x), t.constant(g), v); }, b);
}

TEST_CASE("attention gradients, self and cross, causal and not") {
    std::mt19937_64 rng(4);
    const Matrix q = testutil::random_matrix(7, 4, rng);
    const Matrix k = testutil::random_matrix(7, 4, rng);
    const Matrix v = testutil::random_matrix(7, 4, rng);
    for (bool causal : {false, true}) {
        std::vector<kernels::AttentionSegment> segs{{0, 3, 0, 3}, {3, 4, 3, 4}};
        kernels::AttentionShape shape{2, causal};
        check_op([&](Tape& t, Var x) { return ad::attention(x, t.constant(k), t.constant(v), segs, shape); }, q);
        check_op([&](Tape& t, Var x) { return ad::attention(t.constant(q), x, t.constant(v), segs, shape); }, k);
        check_op([&](Tape& t, Var x) { return ad::attention(t.constant(q), t.constant(k), x, segs, shape); }, v);
    }
    // cross attention with shared keys between segments
    const Matrix mem = testutil::random_matrix(2, 4, rng);
    std::vector<kernels::AttentionSegment> cross{{0, 3, 0, 2}, {3, 4, 0, 2}};
    check_op([&](Tape& t, Var x) { return ad::attention(t.constant(q), x, x, cross, {2, false}); }, mem);
}

TEST_CASE("structural ops") {
    std::mt19937_64 rng(5);
    const Matrix x = testutil::random_matrix(6, 4, rng);
    check_op([](Tape&, Var v) { return ad::gather_rows(v, {0, 2, 2, 5}); }, x);
    check_op([](Tape&, Var v) { return ad::concat_cols({v, ad::gelu(v), v}); }, x);
    check_op([](Tape&, Var v) { return ad::concat_rows({v, ad::tanh(v)}); }, x);
    check_op([](Tape&, Var v) { return ad::slice_cols(v, 1, 3); }, x);
    check_op([](Tape&, Var v) { return ad::reshape(v, 3, 8); }, x);
    check_op([](Tape&, Var v) { return ad::segment_mean(v, {{0, 2}, {2, 4}, {6, 0}}); }, x);
    check_op([](Tape&, Var v) { return ad::segment_max(v, {{0, 3}, {3, 3}}); }, x);
}

TEST_CASE("segment max routes the gradient to the first maximum") {
    Tape t;
    Matrix m(3, 1);
    m.data = {2.0, 5.0, 5.0};
    Var x = t.leaf(m);
    t.backward(ad::sum(ad::segment_max(x, {{0, 3}})));
    CHECK(t.grad(x).data == std::vector<double>{0.0, 1.0, 0.0});
}

TEST_CASE("loss ops") {
    std::mt19937_64 rng(6);
    const Matrix logits = testutil::random_matrix(3, 5, rng);
    Matrix targets(3, 5), weights(3, 5, 1.0);
    for (int i = 0; i < 15; ++i) targets.data[i] = (i % 3 == 0) ? 1.0 : 0.0;
    weights(1, 2) = 0.0;
    weights(2, 4) = 3.0;
    check_op([&](Tape&, Var v) { return ad::weighted_bce(v, targets, weights, 1e-7); }, logits);
    check_op([&](Tape&, Var v) { return ad::softmax_xent(v, {0, 4, 2}); }, logits);
}

TEST_CASE("clamped bce keeps a gradient when saturated") {
    Tape t;
    Matrix l(1, 4);
    l.data = {40.0, -40.0, 40.0, -40.0};
    Var x = t.leaf(l);
    Matrix y(1, 4);
    y.data = {1.0, 0.0, 0.0, 1.0};
    Var loss = ad::weighted_bce(x, y, Matrix(1, 4, 2.0), 1e-7);
    t.backward(loss);
    const auto& g = t.grad(x).data;
    CHECK(std::abs(g[0]) < 1e-15);
    CHECK(std::abs(g[1]) < 1e-15);
    CHECK(g[2] == doctest::Approx(2.0));
    CHECK(g[3] == doctest::Approx(-2.0));
    const double lo = -std::log(1 - 1e-7), hi = -std::log(1e-7);
    CHECK(loss.value()(0, 0) == doctest::Approx(2 * (2 * lo + 2 * hi)));
}

TEST_CASE("dropout scales kept units and zero probability is identity") {
    std::mt19937_64 rng(7);
    Tape t;
    Var x = t.leaf(Matrix(10, 10, 1.0));
    CHECK(ad::dropout(x, 0.0, rng).id == x.id);
    Var y = ad::dropout(x, 0.5, rng);
    for (double v : y.value().data) CHECK((v == 0.0 || v == 2.0));
}

TEST_CASE("parameters accumulate gradients across tapes; frozen ones do not") {
    Parameter p{"w", Matrix(1, 1, 3.0), {}};
    p.zero_grad();
    for (int i = 0; i < 2; ++i) {
        Tape t;
        Var w = t.param(p);
        t.backward(ad::sum(ad::scale(w, 2.0)));
    }
    CHECK(p.grad(0, 0) == 4.0);
    Parameter frozen{"f", Matrix(1, 1, 1.0), {}};
    Tape t;
    Var f = t.param(frozen, false);
    Var l = t.leaf(Matrix(1, 1, 2.0));
    t.backward(ad::sum(ad::matmul(f, l)));
    CHECK(frozen.grad.empty());
    CHECK(t.grad(l)(0, 0) == 1.0);
}
