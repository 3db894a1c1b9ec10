#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "vmixer/gradcheck.hpp"
#include "vmixer/ops.hpp"

using namespace vmixer;

namespace {

Tensor leaf(Shape shape, std::vector<float> data) {
    return Tensor::from_data(std::move(shape), std::move(data), true);
}

// Fixed positive readout so every output coordinate reaches the loss with a
// weight bounded away from zero.
Tensor weighted_sum(const Tensor& t, uint64_t seed) {
    Rng rng(seed);
    Tensor w = Tensor::rand_uniform(t.shape(), rng, 0.5, 1.5);
    return sum(mul(t, w));
}

} // namespace

TEST_CASE("elementwise add/sub basics") {
    Tensor a = Tensor::from_data({2}, {1.0f, 2.0f});
    Tensor b = Tensor::from_data({2}, {3.0f, 4.0f});
    Tensor c = add(a, b);
    CHECK(c.data()[0] == 4.0f);
    CHECK(c.data()[1] == 6.0f);

    Tensor z = sub(a, a);
    CHECK(z.data()[0] == 0.0f);
    CHECK(z.data()[1] == 0.0f);
}

TEST_CASE("elementwise shape mismatch names both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 2});
    CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("(2,3)"), DataError);
    CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("(2,2)"), DataError);
}

TEST_CASE("trailing-dim broadcast") {
    Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b = Tensor::from_data({3}, {10, 20, 30});
    Tensor c = add(a, b);
    std::vector<float> expected{11, 22, 33, 14, 25, 36};
    for (size_t i = 0; i < expected.size(); ++i) CHECK(c.data()[i] == expected[i]);

    // Broadcast gradient reduces over the leading axis.
    Tensor bb = leaf({3}, {1, 1, 1});
    Tensor loss = sum(add(a, bb));
    backward(loss);
    for (int i = 0; i < 3; ++i) CHECK(bb.grad()[static_cast<size_t>(i)] == 2.0f);
}

TEST_CASE("grad of sum(a*b) w.r.t. a equals b (finite differences)") {
    for (uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed);
        Tensor a = Tensor::rand_uniform({3, 4}, rng, 0.5, 1.5);
        a.set_requires_grad(true);
        Tensor b = Tensor::rand_uniform({3, 4}, rng, 0.5, 1.5);
        Tensor loss = sum(mul(a, b));
        backward(loss);
        for (int64_t i = 0; i < a.numel(); ++i)
            CHECK(a.grad()[static_cast<size_t>(i)] == b.data()[static_cast<size_t>(i)]);

        Tensor params[] = {a};
        GradcheckOptions opts;
        opts.eps = 1e-2;
        opts.seed = seed;
        double err = finite_diff_gradcheck([&]() { return sum(mul(a, b)); }, params, opts);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("matmul identity and hand case") {
    Rng rng(7);
    Tensor m = Tensor::randn({3, 3}, rng);
    Tensor eye = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor out = matmul(eye, m);
    for (int64_t i = 0; i < 9; ++i)
        CHECK(out.data()[static_cast<size_t>(i)] == doctest::Approx(m.data()[static_cast<size_t>(i)]).epsilon(1e-6));

    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from_data({2, 1}, {1, 1});
    Tensor c = matmul(a, b);
    CHECK(c.data()[0] == 3.0f);
    CHECK(c.data()[1] == 7.0f);
}

TEST_CASE("matmul inner-dimension mismatch") {
    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2})), DataError);
}

TEST_CASE("matmul gradcheck") {
    for (uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed);
        Tensor a = Tensor::rand_uniform({3, 4}, rng, 0.5, 1.5);
        Tensor b = Tensor::rand_uniform({4, 2}, rng, 0.5, 1.5);
        a.set_requires_grad(true);
        b.set_requires_grad(true);
        Tensor params[] = {a, b};
        GradcheckOptions opts;
        opts.eps = 5e-2; // bilinear in each operand, so truncation error vanishes
        opts.seed = seed;
        double err =
            finite_diff_gradcheck([&]() { return weighted_sum(matmul(a, b), seed); }, params, opts);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("batched matmul against per-slice products") {
    Rng rng(3);
    Tensor a = Tensor::randn({2, 3, 2, 4}, rng);
    Tensor b = Tensor::randn({2, 3, 4, 5}, rng);
    Tensor c = matmul(a, b);
    CHECK(c.shape() == Shape{2, 3, 2, 5});
    for (int64_t q = 0; q < 6; ++q) {
        std::vector<float> sa(a.data().begin() + q * 8, a.data().begin() + (q + 1) * 8);
        std::vector<float> sb(b.data().begin() + q * 20, b.data().begin() + (q + 1) * 20);
        Tensor cs = matmul(Tensor::from_data({2, 4}, sa), Tensor::from_data({4, 5}, sb));
        for (int64_t i = 0; i < 10; ++i)
            CHECK(c.data()[static_cast<size_t>(q * 10 + i)] ==
                  cs.data()[static_cast<size_t>(i)]);
    }
}

TEST_CASE("reshape and transpose round-trip bit-exactly") {
    Rng rng(11);
    Tensor t = Tensor::randn({2, 3}, rng);
    Tensor r = reshape(reshape(t, {3, 2}), {2, 3});
    for (int64_t i = 0; i < 6; ++i)
        CHECK(r.data()[static_cast<size_t>(i)] == t.data()[static_cast<size_t>(i)]);

    Tensor tt = permute(permute(t, {1, 0}), {1, 0});
    for (int64_t i = 0; i < 6; ++i)
        CHECK(tt.data()[static_cast<size_t>(i)] == t.data()[static_cast<size_t>(i)]);
}

TEST_CASE("permute matches exhaustive index enumeration on 2x2x2x2") {
    // Oracle: directly enumerate coordinates of the permuted layout.
    Shape shape{2, 2, 2, 2};
    std::vector<float> data(16);
    for (size_t i = 0; i < 16; ++i) data[i] = static_cast<float>(i);
    Tensor t = Tensor::from_data(shape, data);
    std::vector<int> perm{3, 0, 1, 2}; // (H,W,D,N) -> (N,H,W,D)
    Tensor p = permute(t, perm);

    for (int64_t n = 0; n < 2; ++n)
        for (int64_t h = 0; h < 2; ++h)
            for (int64_t w = 0; w < 2; ++w)
                for (int64_t d = 0; d < 2; ++d) {
                    const int64_t out_idx = ((n * 2 + h) * 2 + w) * 2 + d;
                    const int64_t in_idx = ((h * 2 + w) * 2 + d) * 2 + n;
                    CHECK(p.data()[static_cast<size_t>(out_idx)] ==
                          data[static_cast<size_t>(in_idx)]);
                }
}

TEST_CASE("permute rejects invalid permutations") {
    Tensor t = Tensor::zeros({2, 3});
    CHECK_THROWS_AS(permute(t, {0, 0}), DataError);
    CHECK_THROWS_AS(permute(t, {0, 2}), DataError);
    CHECK_THROWS_AS(reshape(t, {4, 2}), DataError);
}

TEST_CASE("permute/reshape gradcheck") {
    for (uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed);
        Tensor t = Tensor::rand_uniform({2, 3, 4}, rng, 0.5, 1.5);
        t.set_requires_grad(true);
        Tensor params[] = {t};
        GradcheckOptions opts;
        opts.eps = 5e-2;
        opts.seed = seed;
        double err = finite_diff_gradcheck(
            [&]() { return weighted_sum(permute_reshape(t, {2, 0, 1}, {4, 6}), seed); }, params,
            opts);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("roll wraps and inverts") {
    Tensor t = Tensor::from_data({4}, {0, 1, 2, 3});
    Tensor r = roll(t, {1}, {0});
    CHECK(r.data()[0] == 3.0f);
    CHECK(r.data()[1] == 0.0f);
    Tensor back = roll(r, {-1}, {0});
    for (int64_t i = 0; i < 4; ++i)
        CHECK(back.data()[static_cast<size_t>(i)] == t.data()[static_cast<size_t>(i)]);
}

TEST_CASE("softmax symmetry, stability, gradcheck") {
    Tensor t = Tensor::from_data({3}, {0, 0, 0});
    Tensor s = softmax(t, 0);
    for (int64_t i = 0; i < 3; ++i)
        CHECK(s.data()[static_cast<size_t>(i)] == doctest::Approx(1.0 / 3.0).epsilon(1e-6));

    Tensor big = Tensor::from_data({2}, {1000.0f, 0.0f});
    Tensor sb = softmax(big, 0);
    CHECK(sb.data()[0] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(sb.data()[1] == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(std::isfinite(sb.data()[0]));

    Tensor bad = Tensor::from_data({2}, {std::nanf(""), 0.0f});
    CHECK_THROWS_AS(softmax(bad, 0), NumericError);

    for (uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed + 100);
        Tensor z = Tensor::randn({2, 5}, rng);
        z.set_requires_grad(true);
        Tensor w = Tensor::rand_uniform({2, 5}, rng, 0.5, 1.5);
        Tensor params[] = {z};
        GradcheckOptions opts;
        opts.seed = seed;
        auto graph = [&]() { return sum(mul(softmax(z, 1), w)); };
        auto value = [&]() {
            double loss = 0.0;
            for (int64_t r = 0; r < 2; ++r) {
                std::vector<double> row(5);
                for (int64_t j = 0; j < 5; ++j) row[static_cast<size_t>(j)] = z.data()[static_cast<size_t>(r * 5 + j)];
                auto p = vmixer_test::softmax_ref(row);
                for (int64_t j = 0; j < 5; ++j)
                    loss += p[static_cast<size_t>(j)] * w.data()[static_cast<size_t>(r * 5 + j)];
            }
            return loss;
        };
        double err = finite_diff_gradcheck(graph, value, params, opts);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("softmax slices sum to one for large-magnitude input") {
    Rng rng(42);
    Tensor z = Tensor::rand_uniform({4, 7}, rng, -1e4, 1e4);
    Tensor s = softmax(z, 1);
    for (int64_t r = 0; r < 4; ++r) {
        double acc = 0.0;
        for (int64_t j = 0; j < 7; ++j) acc += s.data()[static_cast<size_t>(r * 7 + j)];
        CHECK(acc == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("layer_norm values and gradcheck") {
    // Constant slice: epsilon keeps the degenerate variance finite and the
    // pre-affine output is exactly zero.
    Tensor c = Tensor::from_data({3}, {5, 5, 5});
    Tensor g1 = Tensor::from_data({3}, {1, 1, 1});
    Tensor b0 = Tensor::from_data({3}, {0, 0, 0});
    Tensor outc = layer_norm(c, g1, b0, 0);
    for (int64_t i = 0; i < 3; ++i) CHECK(outc.data()[static_cast<size_t>(i)] == 0.0f);

    Tensor t = Tensor::from_data({3}, {1, 2, 3});
    Tensor out = layer_norm(t, g1, b0, 0);
    const double k = std::sqrt(1.5);
    CHECK(out.data()[0] == doctest::Approx(-k).epsilon(1e-5));
    CHECK(out.data()[1] == doctest::Approx(0.0).epsilon(1e-5));
    CHECK(out.data()[2] == doctest::Approx(k).epsilon(1e-5));
    double mean = 0.0, var = 0.0;
    for (int64_t i = 0; i < 3; ++i) mean += out.data()[static_cast<size_t>(i)];
    mean /= 3.0;
    for (int64_t i = 0; i < 3; ++i) {
        double d = out.data()[static_cast<size_t>(i)] - mean;
        var += d * d;
    }
    var /= 3.0;
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-5));
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));

    for (uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed + 11);
        Tensor x = Tensor::randn({4, 6}, rng);
        Tensor gamma = Tensor::rand_uniform({6}, rng, 0.5, 1.5);
        Tensor beta = Tensor::randn({6}, rng, 0.0, 0.1);
        x.set_requires_grad(true);
        gamma.set_requires_grad(true);
        beta.set_requires_grad(true);
        Tensor w = Tensor::rand_uniform({4, 6}, rng, 0.5, 1.5);
        Tensor params[] = {x, gamma, beta};
        GradcheckOptions opts;
        opts.seed = seed;
        auto graph = [&]() { return sum(mul(layer_norm(x, gamma, beta, 1), w)); };
        auto value = [&]() {
            double loss = 0.0;
            auto gd = vmixer_test::widen(gamma);
            auto bd = vmixer_test::widen(beta);
            for (int64_t r = 0; r < 4; ++r) {
                std::vector<double> row(6);
                for (int64_t j = 0; j < 6; ++j) row[static_cast<size_t>(j)] = x.data()[static_cast<size_t>(r * 6 + j)];
                auto y = vmixer_test::layer_norm_ref(row, gd, bd);
                for (int64_t j = 0; j < 6; ++j)
                    loss += y[static_cast<size_t>(j)] * w.data()[static_cast<size_t>(r * 6 + j)];
            }
            return loss;
        };
        double err = finite_diff_gradcheck(graph, value, params, opts);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("gelu endpoints and gradcheck") {
    Tensor z = Tensor::from_data({1}, {0.0f});
    CHECK(gelu(z).data()[0] == 0.0f);
    Tensor ten = Tensor::from_data({1}, {10.0f});
    CHECK(gelu(ten).data()[0] == doctest::Approx(10.0).epsilon(1e-4));

    Tensor x = leaf({4}, {-2.0f, -0.5f, 0.3f, 4.0f});
    Tensor params[] = {x};
    GradcheckOptions opts;
    opts.eps = 1e-2;
    double err = finite_diff_gradcheck([&]() { return weighted_sum(gelu(x), 5); }, params, opts);
    CHECK(err < 1e-4);
}

TEST_CASE("backward basics") {
    Tensor p = leaf({3}, {1, 2, 3});
    backward(sum(p));
    for (int64_t i = 0; i < 3; ++i) CHECK(p.grad()[static_cast<size_t>(i)] == 1.0f);

    Tensor q = leaf({2}, {1, -2});
    backward(sum(mul(q, q)));
    CHECK(q.grad()[0] == 2.0f);
    CHECK(q.grad()[1] == -4.0f);

    // Unreached parameter reads back as zeros.
    Tensor r = leaf({2}, {1, 1});
    Tensor s = leaf({2}, {1, 1});
    backward(sum(r));
    CHECK(s.grad()[0] == 0.0f);
    CHECK(s.grad()[1] == 0.0f);

    // Non-scalar loss is rejected.
    Tensor t = leaf({2}, {1, 1});
    CHECK_THROWS_AS(backward(add(t, t)), DataError);
    CHECK(tape_size() == 0);
}

TEST_CASE("backward consumes the tape") {
    Tensor p = leaf({2}, {1, 2});
    Tensor loss = sum(mul(p, p));
    CHECK(tape_size() > 0);
    backward(loss);
    CHECK(tape_size() == 0);
}

TEST_CASE("no-grad guard suspends recording") {
    Tensor p = leaf({2}, {1, 2});
    {
        NoGradGuard ng;
        Tensor out = mul(p, p);
        CHECK(tape_size() == 0);
        CHECK_FALSE(out.requires_grad());
    }
    Tensor out = mul(p, p);
    CHECK(tape_size() == 1);
    tape_clear();
}

TEST_CASE("gradcheck numeric path is exact for double functions") {
    auto f = [](double p) { return p * p; };
    double numeric = central_difference(f, 3.0, 1e-3);
    CHECK(numeric == doctest::Approx(6.0).epsilon(1e-6));
}

TEST_CASE("gradcheck flags a deliberately wrong gradient") {
    Tensor x = leaf({3}, {0.7f, 1.2f, 0.9f});
    auto buggy_double_grad = [&](const Tensor& in) {
        std::vector<float> vals(in.data().begin(), in.data().end());
        Tensor out = make_tensor(in.shape(), std::move(vals));
        Tensor tin = in, tout = out;
        return record_custom_op({in}, out, [tin, tout]() mutable {
            const auto g = tout.grad();
            auto gi = tin.grad_mutable();
            for (size_t i = 0; i < gi.size(); ++i) gi[i] += 2.0f * g[i]; // wrong by x2
        });
    };
    Tensor params[] = {x};
    double err = finite_diff_gradcheck([&]() { return sum(buggy_double_grad(x)); }, params);
    CHECK(err == doctest::Approx(0.5).epsilon(1e-3));
}

TEST_CASE("softmax cross-entropy composite gradcheck") {
    for (uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed + 17);
        Tensor z = Tensor::randn({4}, rng);
        z.set_requires_grad(true);
        // -log p[0] via composite ops; the finite-difference run is the oracle.
        auto f = [&]() {
            Tensor p = softmax(z, 0);
            Tensor pick = Tensor::from_data({4}, {1, 0, 0, 0});
            Tensor sel = sum(mul(p, pick));
            // log through a custom op to keep the example self-contained
            std::vector<float> lv{static_cast<float>(-std::log(sel.item_f64()))};
            Tensor out = make_tensor({1}, std::move(lv));
            out.impl()->exact_scalar = -std::log(sel.item_f64());
            Tensor tsel = sel, tout = out;
            return record_custom_op({sel}, out, [tsel, tout]() mutable {
                tsel.grad_mutable()[0] += tout.grad()[0] * static_cast<float>(-1.0 / tsel.item_f64());
            });
        };
        Tensor params[] = {z};
        GradcheckOptions opts;
        opts.eps = 1e-2;
        opts.seed = seed;
        double err = finite_diff_gradcheck(f, params, opts);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("all op outputs finite for finite inputs") {
    Rng rng(23);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor a = Tensor::rand_uniform({2, 3, 4}, rng, -100.0, 100.0);
        Tensor b = Tensor::rand_uniform({2, 3, 4}, rng, -100.0, 100.0);
        for (auto op : {Elementwise::Add, Elementwise::Sub, Elementwise::Mul}) {
            Tensor c = elementwise(a, b, op);
            for (float v : c.data()) CHECK(std::isfinite(v));
        }
        Tensor s = softmax(a, 2);
        for (float v : s.data()) CHECK(std::isfinite(v));
        Tensor g = gelu(a);
        for (float v : g.data()) CHECK(std::isfinite(v));
    }
}
