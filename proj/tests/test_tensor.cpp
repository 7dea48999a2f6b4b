#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <functional>

#include "soupforge/tape.hpp"
#include "support/finite_diff.hpp"

using namespace soupforge;
using testsupport::brute_dct2;
using testsupport::central_diff;
using testsupport::max_abs_diff;
using testsupport::max_rel_diff;
using testsupport::seeded_tensor;

namespace {

// Builds the graph twice: once to read the tape gradient, once inside the
// finite-difference probe. `build` must return a scalar node.
using Build = std::function<TapeD::Id(TapeD&, TapeD::Id)>;

double fd_vs_tape(const TensorD& x, const Build& build, double h = 1e-5) {
    TapeD tape;
    auto xi = tape.leaf(x);
    auto loss = build(tape, xi);
    tape.backward(loss);
    TensorD analytic = tape.grad(xi);
    TensorD numeric = central_diff(
        [&](const TensorD& probe) {
            TapeD t;
            auto id = t.leaf(probe);
            return double(t.value(build(t, id)).data[0]);
        },
        x, h);
    return max_rel_diff(analytic, numeric);
}

// Scalar loss that weights every element, so a wrong adjoint anywhere shows.
TapeD::Id weighted_sum(TapeD& t, TapeD::Id node, std::uint64_t seed) {
    const auto& v = t.value(node);
    return t.sum(t.mul(node, t.constant(seeded_tensor<double>(v.shape, seed))));
}

}  // namespace

TEST_CASE("tensor shape and construction rules") {
    TensorD t({2, 3});
    CHECK(t.numel() == 6);
    CHECK(t.ndim() == 2);
    CHECK(t.shape_str() == "(2,3)");
    CHECK_THROWS_AS(TensorD({0, 3}), ShapeError);
    CHECK_THROWS_AS(TensorD({-1}), ShapeError);
    CHECK_THROWS_AS(TensorD({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
    auto f = TensorD::full({2}, 3.5);
    CHECK(f.data[0] == 3.5);
    CHECK(f.data[1] == 3.5);
}

TEST_CASE("norms and sign") {
    TensorD v({4}, {3.0, -4.0, 0.0, 1.0});
    CHECK(l1_norm(v) == doctest::Approx(8.0));
    CHECK(l2_norm(v) == doctest::Approx(std::sqrt(26.0)));
    CHECK(linf_norm(v) == doctest::Approx(4.0));
    CHECK(sign_of(2.5) == 1.0);
    CHECK(sign_of(-0.1) == -1.0);
    CHECK(sign_of(0.0) == 0.0);
}

TEST_CASE("non-finite values are rejected at record time") {
    TapeD tape;
    TensorD bad({1}, {std::numeric_limits<double>::infinity()});
    CHECK_THROWS_AS(tape.leaf(bad), NumericError);
    TensorD nan({1}, {std::nan("")});
    CHECK_THROWS_AS(tape.constant(nan), NumericError);
}

TEST_CASE("elementwise op gradients match central differences") {
    auto x = seeded_tensor<double>({3, 4}, 11);
    auto y = seeded_tensor<double>({3, 4}, 12, 0.5, 2.0);

    CHECK(fd_vs_tape(x, [&](TapeD& t, TapeD::Id xi) {
              return weighted_sum(t, t.add(xi, t.constant(y)), 1);
          }) < 1e-7);
    CHECK(fd_vs_tape(x, [&](TapeD& t, TapeD::Id xi) {
              return weighted_sum(t, t.sub(t.constant(y), xi), 2);
          }) < 1e-7);
    CHECK(fd_vs_tape(x, [&](TapeD& t, TapeD::Id xi) {
              return weighted_sum(t, t.mul(xi, t.constant(y)), 3);
          }) < 1e-7);
    CHECK(fd_vs_tape(x, [&](TapeD& t, TapeD::Id xi) {
              return weighted_sum(t, t.scalar_mul(xi, -1.7), 4);
          }) < 1e-7);
}

TEST_CASE("self-referencing graphs accumulate adjoints") {
    auto x = seeded_tensor<double>({5}, 21);
    // x*x + x uses the leaf three times; the adjoint must sum all paths
    CHECK(fd_vs_tape(x, [](TapeD& t, TapeD::Id xi) {
              return t.sum(t.add(t.mul(xi, xi), xi));
          }) < 1e-7);
}

TEST_CASE("matmul gradients, both operand shapes") {
    auto a = seeded_tensor<double>({3, 4}, 31);
    auto v = seeded_tensor<double>({4}, 32);
    auto b = seeded_tensor<double>({4, 2}, 33);

    CHECK(fd_vs_tape(a, [&](TapeD& t, TapeD::Id ai) {
              return weighted_sum(t, t.matmul(ai, t.constant(v)), 5);
          }) < 1e-7);
    CHECK(fd_vs_tape(v, [&](TapeD& t, TapeD::Id vi) {
              return weighted_sum(t, t.matmul(t.constant(a), vi), 6);
          }) < 1e-7);
    CHECK(fd_vs_tape(a, [&](TapeD& t, TapeD::Id ai) {
              return weighted_sum(t, t.matmul(ai, t.constant(b)), 7);
          }) < 1e-7);
    CHECK(fd_vs_tape(b, [&](TapeD& t, TapeD::Id bi) {
              return weighted_sum(t, t.matmul(t.constant(a), bi), 8);
          }) < 1e-7);

    TapeD tape;
    auto bad = tape.constant(seeded_tensor<double>({3}, 34));
    CHECK_THROWS_AS(tape.matmul(tape.constant(a), bad), ShapeError);
}

TEST_CASE("conv2d forward oracle and gradients") {
    // 1x1 kernel with zero bias is elementwise scaling
    TensorD x1({1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
    TensorD w1({1, 1, 1, 1}, {2.0});
    TapeD t1;
    auto out1 = t1.conv2d(t1.constant(x1), t1.constant(w1), t1.constant(TensorD({1})), 0);
    CHECK(max_abs_diff(t1.value(out1), TensorD({1, 2, 2}, {2.0, 4.0, 6.0, 8.0})) == 0.0);

    auto x = seeded_tensor<double>({2, 5, 5}, 41);
    auto w = seeded_tensor<double>({3, 2, 3, 3}, 42);
    auto bias = seeded_tensor<double>({3}, 43);
    for (int pad : {0, 1}) {
        CHECK(fd_vs_tape(x, [&](TapeD& t, TapeD::Id xi) {
                  return weighted_sum(t, t.conv2d(xi, t.constant(w), t.constant(bias), pad), 9);
              }) < 1e-6);
        CHECK(fd_vs_tape(w, [&](TapeD& t, TapeD::Id wi) {
                  return weighted_sum(t, t.conv2d(t.constant(x), wi, t.constant(bias), pad), 10);
              }) < 1e-6);
        CHECK(fd_vs_tape(bias, [&](TapeD& t, TapeD::Id bi) {
                  return weighted_sum(t, t.conv2d(t.constant(x), t.constant(w), bi, pad), 11);
              }) < 1e-6);
    }

    TapeD bad;
    CHECK_THROWS_AS(bad.conv2d(bad.constant(x), bad.constant(seeded_tensor<double>({3, 1, 3, 3}, 44)),
                               bad.constant(bias), 1),
                    ShapeError);
    CHECK_THROWS_AS(bad.conv2d(bad.constant(x), bad.constant(w), bad.constant(bias), -1), ShapeError);
}

TEST_CASE("relu and clip gradients gate by value") {
    // keep probe points away from the kinks
    TensorD x({6}, {-2.0, -0.5, 0.4, 1.3, 0.9, -1.1});
    CHECK(fd_vs_tape(x, [](TapeD& t, TapeD::Id xi) { return t.sum(t.relu(xi)); }) < 1e-7);
    CHECK(fd_vs_tape(x, [](TapeD& t, TapeD::Id xi) { return t.sum(t.clip(xi, -1.0, 1.0)); }) < 1e-7);

    TapeD tape;
    auto xi = tape.leaf(x);
    auto loss = tape.sum(tape.clip(xi, -1.0, 1.0));
    tape.backward(loss);
    const auto& g = tape.grad(xi);
    CHECK(g.data[0] == 0.0);  // below the interval
    CHECK(g.data[2] == 1.0);  // interior
    CHECK_THROWS_AS(tape.clip(xi, 1.0, -1.0), ShapeError);
}

TEST_CASE("sign output and null gradient") {
    TensorD x({3}, {-0.7, 0.0, 2.0});
    TapeD tape;
    auto xi = tape.leaf(x);
    auto s = tape.sign(xi);
    CHECK(max_abs_diff(tape.value(s), TensorD({3}, {-1.0, 0.0, 1.0})) == 0.0);
    tape.backward(tape.sum(s));
    CHECK(l1_norm(tape.grad(xi)) == 0.0);
}

TEST_CASE("avgpool forward value and gradient") {
    TensorD x({1, 2, 2}, {1.0, 3.0, 5.0, 7.0});
    TapeD tape;
    auto out = tape.avgpool(tape.constant(x), 2);
    CHECK(tape.value(out).data[0] == doctest::Approx(4.0));

    auto big = seeded_tensor<double>({2, 4, 4}, 51);
    CHECK(fd_vs_tape(big, [](TapeD& t, TapeD::Id xi) {
              return t.sum(t.mul(t.avgpool(xi, 2), t.avgpool(xi, 2)));
          }) < 1e-7);
    CHECK_THROWS_AS(tape.avgpool(tape.constant(seeded_tensor<double>({1, 3, 4}, 52)), 2), ShapeError);
}

TEST_CASE("flatten, pick and sum") {
    auto x = seeded_tensor<double>({2, 3}, 61);
    CHECK(fd_vs_tape(x, [](TapeD& t, TapeD::Id xi) {
              return t.pick(t.flatten(xi), 4);
          }) < 1e-9);
    CHECK(fd_vs_tape(x, [](TapeD& t, TapeD::Id xi) { return t.sum(xi); }) < 1e-9);
    TapeD tape;
    auto fl = tape.flatten(tape.constant(x));
    CHECK(tape.value(fl).ndim() == 1);
    CHECK_THROWS_AS(tape.pick(fl, 6), ShapeError);
    CHECK_THROWS_AS(tape.pick(fl, -1), ShapeError);
}

TEST_CASE("softmax cross entropy matches the closed form") {
    TensorD z({4}, {0.2, -1.1, 2.0, 0.5});
    int label = 2;
    TapeD tape;
    auto zi = tape.leaf(z);
    auto loss = tape.softmax_cross_entropy(zi, label);

    double m = 2.0, s = 0;
    for (double v : z.data) s += std::exp(v - m);
    CHECK(double(tape.value(loss).data[0]) == doctest::Approx(m + std::log(s) - z.data[label]).epsilon(1e-12));

    tape.backward(loss);
    const auto& g = tape.grad(zi);
    for (int i = 0; i < 4; ++i) {
        double p = std::exp(z.data[i] - m) / s;
        CHECK(double(g.data[i]) == doctest::Approx(p - (i == label ? 1.0 : 0.0)).epsilon(1e-12));
    }

    CHECK(fd_vs_tape(z, [label](TapeD& t, TapeD::Id xi) {
              return t.softmax_cross_entropy(xi, label);
          }) < 1e-8);
    CHECK_THROWS_AS(tape.softmax_cross_entropy(zi, 4), ShapeError);
}

TEST_CASE("dct2 equals the direct-sum transform") {
    for (auto shape : {std::vector<int>{6, 6}, std::vector<int>{2, 4, 5}}) {
        auto x = seeded_tensor<double>(shape, 71);
        TapeD tape;
        auto out = tape.dct2(tape.constant(x));
        CHECK(max_abs_diff(tape.value(out), brute_dct2(x)) < 1e-12);
    }
}

TEST_CASE("dct2 round trip, energy preservation and adjoint") {
    auto x = seeded_tensor<double>({3, 8, 8}, 72);
    TapeD tape;
    auto xi = tape.leaf(x);
    auto fwd = tape.dct2(xi);
    auto back = tape.idct2(fwd);
    CHECK(max_abs_diff(tape.value(back), x) < 1e-12);
    // orthonormal: the spectrum carries exactly the pixel energy
    CHECK(l2_norm(tape.value(fwd)) == doctest::Approx(l2_norm(x)).epsilon(1e-12));

    CHECK(fd_vs_tape(x, [](TapeD& t, TapeD::Id id) {
              return weighted_sum(t, t.dct2(id), 12);
          }) < 1e-7);
    CHECK(fd_vs_tape(x, [](TapeD& t, TapeD::Id id) {
              return weighted_sum(t, t.idct2(id), 13);
          }) < 1e-7);
}

TEST_CASE("smooth2d forward oracle and adjoint") {
    TensorD k({3, 3}, {0.0, 0.1, 0.0, 0.1, 0.6, 0.1, 0.0, 0.1, 0.0});
    auto x = seeded_tensor<double>({2, 5, 5}, 81);

    // direct correlation oracle
    TensorD expect({2, 5, 5});
    for (int c = 0; c < 2; ++c)
        for (int y = 0; y < 5; ++y)
            for (int xx = 0; xx < 5; ++xx) {
                double acc = 0;
                for (int dy = 0; dy < 3; ++dy)
                    for (int dx = 0; dx < 3; ++dx) {
                        int iy = y + dy - 1, ix = xx + dx - 1;
                        if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
                        acc += k.data[dy * 3 + dx] * x.data[(c * 5 + iy) * 5 + ix];
                    }
                expect.data[(c * 5 + y) * 5 + xx] = acc;
            }
    TapeD tape;
    auto out = tape.smooth2d(tape.constant(x), k);
    CHECK(max_abs_diff(tape.value(out), expect) < 1e-12);

    CHECK(fd_vs_tape(x, [&](TapeD& t, TapeD::Id xi) {
              return weighted_sum(t, t.smooth2d(xi, k), 14);
          }) < 1e-7);
    CHECK_THROWS_AS(tape.smooth2d(tape.constant(x), seeded_tensor<double>({2, 2}, 82)), ShapeError);
}

TEST_CASE("resize_nearest mapping and adjoint") {
    TensorD x({1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
    TapeD tape;
    auto same = tape.resize_nearest(tape.constant(x), 2, 2);
    CHECK(max_abs_diff(tape.value(same), x) == 0.0);
    auto up = tape.resize_nearest(tape.constant(x), 4, 4);
    // floor(i * 2 / 4) duplicates each source pixel into a 2x2 block
    CHECK(tape.value(up).data[0] == 1.0);
    CHECK(tape.value(up).data[1] == 1.0);
    CHECK(tape.value(up).data[5] == 1.0);
    CHECK(tape.value(up).data[15] == 4.0);

    auto big = seeded_tensor<double>({2, 4, 4}, 91);
    CHECK(fd_vs_tape(big, [](TapeD& t, TapeD::Id xi) {
              return weighted_sum(t, t.resize_nearest(xi, 7, 3), 15);
          }) < 1e-7);
    CHECK_THROWS_AS(tape.resize_nearest(tape.constant(x), 0, 4), ShapeError);
}

TEST_CASE("pad2d placement and adjoint") {
    TensorD x({1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
    TapeD tape;
    auto out = tape.pad2d(tape.constant(x), 1, 2, 4, 5);
    const auto& v = tape.value(out);
    CHECK(v.shape == std::vector<int>{1, 4, 5});
    CHECK(v.data[1 * 5 + 2] == 1.0);
    CHECK(v.data[2 * 5 + 3] == 4.0);
    CHECK(v.data[0] == 0.0);

    auto big = seeded_tensor<double>({2, 3, 3}, 92);
    CHECK(fd_vs_tape(big, [](TapeD& t, TapeD::Id xi) {
              return weighted_sum(t, t.pad2d(xi, 2, 1, 6, 6), 16);
          }) < 1e-7);
    CHECK_THROWS_AS(tape.pad2d(tape.constant(x), 3, 0, 4, 4), ShapeError);
}

TEST_CASE("backward bookkeeping") {
    TapeD tape;
    auto x = tape.leaf(seeded_tensor<double>({3}, 101));
    auto c = tape.constant(seeded_tensor<double>({3}, 102));
    auto prod = tape.mul(x, c);
    CHECK_THROWS_AS(tape.backward(prod), ShapeError);  // loss must be scalar
    CHECK_THROWS_AS(tape.grad(x), NumericError);       // no sweep has run
    auto loss = tape.sum(prod);
    tape.backward(loss);
    CHECK(l1_norm(tape.grad(c)) == 0.0);  // constants take no gradient
    CHECK(l1_norm(tape.grad(x)) > 0.0);
    CHECK_THROWS_AS(tape.grad(999), ShapeError);
}
