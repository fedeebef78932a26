#include <doctest.h>

#include <stdexcept>

#include <cmath>

#include "mixdiff/autodiff.hpp"
#include "mixdiff/rng.hpp"

using namespace mixdiff;

namespace {

// independent triple-loop multiply oracle
Tensor naive_matmul(const Tensor& a, const Tensor& b) {
    Tensor out = Tensor::zeros({a.rows(), b.cols()});
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (int k = 0; k < a.cols(); ++k) s += a.at(i, k) * b.at(k, j);
            out.at(i, j) = s;
        }
    return out;
}

Tensor random_tensor(const std::vector<int>& shape, Rng& rng, double scale = 1.0) {
    Tensor t = Tensor::zeros(shape);
    for (double& x : t.data) x = scale * rng.normal();
    return t;
}

}  // namespace

TEST_CASE("matmul identity and zero cases") {
    Tensor a = Tensor::matrix(2, 2, {1, 2, 3, 4});
    Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
    Tensor zero = Tensor::zeros({2, 2});
    Tape t;
    Var r = t.matmul(t.constant(a), t.constant(eye));
    CHECK(t.val(r).data == a.data);
    Var z = t.matmul(t.constant(a), t.constant(zero));
    for (double x : t.val(z).data) CHECK(x == 0.0);
}

TEST_CASE("matmul matches the triple-loop oracle") {
    {
        Tape t;
        Var r = t.matmul(t.constant(Tensor::matrix(2, 2, {1, 2, 3, 4})),
                         t.constant(Tensor::matrix(2, 2, {5, 6, 7, 8})));
        CHECK(t.val(r).data == std::vector<double>{19, 22, 43, 50});
    }
    Rng rng(123);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor a = random_tensor({16, 16}, rng);
        Tensor b = random_tensor({16, 16}, rng);
        Tensor expect = naive_matmul(a, b);
        Tape t;
        const Tensor& got = t.val(t.matmul(t.constant(a), t.constant(b)));
        for (size_t i = 0; i < expect.data.size(); ++i) {
            double denom = std::fabs(expect.data[i]) + 1e-30;
            CHECK(std::fabs(got.data[i] - expect.data[i]) / denom < 1e-10);
        }
    }
}

TEST_CASE("matmul dimension mismatch names both shapes") {
    Tape t;
    Var a = t.constant(Tensor::zeros({2, 3}));
    Var b = t.constant(Tensor::zeros({4, 5}));
    try {
        t.matmul(a, b);
        FAIL("expected shape error");
    } catch (const std::invalid_argument& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[4x5]") != std::string::npos);
    }
}

TEST_CASE("softmax rows: symmetry, stability, direct evaluation") {
    Tape t;
    const Tensor& s1 = t.val(t.softmax_rows(t.constant(Tensor::matrix(1, 3, {0, 0, 0}))));
    for (double x : s1.data) CHECK(x == doctest::Approx(1.0 / 3).epsilon(1e-12));

    const Tensor& s2 = t.val(t.softmax_rows(t.constant(Tensor::matrix(1, 2, {1000, 0}))));
    CHECK(s2.all_finite());
    CHECK(s2.data[0] == doctest::Approx(1.0));
    CHECK(s2.data[1] == doctest::Approx(0.0));

    const Tensor& s3 = t.val(t.softmax_rows(t.constant(Tensor::matrix(1, 3, {1, 2, 3}))));
    double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    CHECK(s3.data[0] == doctest::Approx(std::exp(1.0) / z).epsilon(1e-14));
    CHECK(s3.data[1] == doctest::Approx(std::exp(2.0) / z).epsilon(1e-14));
    CHECK(s3.data[2] == doctest::Approx(std::exp(3.0) / z).epsilon(1e-14));
}

TEST_CASE("softmax rows sum to one for extreme magnitudes") {
    Rng rng(7);
    Tensor x = Tensor::zeros({24, 17});
    for (double& v : x.data) v = (rng.uniform() * 2.0 - 1.0) * 1e4;
    Tape t;
    const Tensor& s = t.val(t.softmax_rows(t.constant(x)));
    for (int i = 0; i < s.rows(); ++i) {
        double sum = 0.0;
        for (int j = 0; j < s.cols(); ++j) {
            sum += s.at(i, j);
            CHECK(s.at(i, j) >= 0.0);
        }
        CHECK(std::fabs(sum - 1.0) <= 1e-12);
    }
}

TEST_CASE("masked cross entropy: perfect, uniform, empty mask") {
    const int n = 4, vsz = 8;
    std::vector<int> targets = {1, 5, 2, 7};
    std::vector<double> w(n, 1.0);

    {  // one-hot logits with huge margin -> loss exactly 0
        Tensor logits = Tensor::zeros({n, vsz});
        for (int i = 0; i < n; ++i) logits.at(i, targets[i]) = 1000.0;
        Tape t;
        Var l = t.masked_cross_entropy(t.constant(logits), targets, std::vector<uint8_t>(n, 1), w);
        CHECK(t.val(l).item() == 0.0);
    }
    {  // uniform logits -> log V per masked token
        Tape t;
        Var l = t.masked_cross_entropy(t.constant(Tensor::zeros({n, vsz})), targets,
                                       std::vector<uint8_t>(n, 1), w);
        CHECK(t.val(l).item() == doctest::Approx(std::log(8.0)).epsilon(1e-14));
    }
    {  // all-false mask -> zero loss and zero gradient
        Tensor logits = Tensor::zeros({n, vsz});
        Tape t;
        Var lp = t.param(&logits);
        Var l = t.masked_cross_entropy(lp, targets, std::vector<uint8_t>(n, 0), w);
        CHECK(t.val(l).item() == 0.0);
        GradMap g = t.backward(l);
        for (double x : g.at(&logits).data) CHECK(x == 0.0);
    }
    {  // target outside the vocabulary
        Tape t;
        std::vector<int> bad = {1, 9, 2, 3};
        CHECK_THROWS_AS(t.masked_cross_entropy(t.constant(Tensor::zeros({n, vsz})), bad,
                                               std::vector<uint8_t>(n, 1), w),
                        std::invalid_argument);
    }
}

TEST_CASE("masked mse closed forms") {
    Rng rng(11);
    Tensor target = random_tensor({5, 2}, rng);
    {
        Tape t;
        Var l = t.masked_mse(t.constant(target), target, std::vector<uint8_t>(5, 1));
        CHECK(t.val(l).item() == 0.0);
    }
    {
        Tensor pred = target;
        for (double& x : pred.data) x += 1.0;
        Tape t;
        Var l = t.masked_mse(t.constant(pred), target, std::vector<uint8_t>(5, 1));
        CHECK(t.val(l).item() == doctest::Approx(2.0).epsilon(1e-14));  // d * 1^2
    }
    {
        Tensor pred = random_tensor({5, 2}, rng);
        std::vector<uint8_t> one_row = {0, 0, 1, 0, 0};
        double expect = 0.0;
        for (int j = 0; j < 2; ++j) {
            double c = pred.at(2, j) - target.at(2, j);
            expect += c * c;
        }
        Tape t;
        Var l = t.masked_mse(t.constant(pred), target, one_row);
        CHECK(t.val(l).item() == doctest::Approx(expect).epsilon(1e-14));
    }
}

TEST_CASE("backward: linear and quadratic gradients") {
    Rng rng(3);
    Tensor w = random_tensor({3, 4}, rng);
    Tensor x = random_tensor({3, 4}, rng);
    {  // loss = sum(w . x) -> dw = x
        Tape t;
        Var loss = t.sum(t.mul(t.param(&w), t.constant(x)));
        GradMap g = t.backward(loss);
        CHECK(g.at(&w).data == x.data);
    }
    {  // loss = ||w||^2 -> dw = 2w
        Tape t;
        Var wp = t.param(&w);
        Var loss = t.sum(t.mul(wp, wp));
        GradMap g = t.backward(loss);
        for (size_t i = 0; i < w.data.size(); ++i)
            CHECK(g.at(&w).data[i] == doctest::Approx(2.0 * w.data[i]).epsilon(1e-14));
    }
}

TEST_CASE("backward requires a scalar loss") {
    Tensor w = Tensor::zeros({2, 2});
    Tape t;
    Var wp = t.param(&w);
    CHECK_THROWS_AS(t.backward(wp), std::invalid_argument);
}

TEST_CASE("grad_check: quadratic, composite, constant, eps contract") {
    Rng rng(17);
    Tensor w = random_tensor({3, 3}, rng);
    {
        auto f = [&](Tape& t) {
            Var wp = t.param(&w);
            return t.sum(t.mul(wp, wp));
        };
        CHECK(grad_check(f, {&w}, 1e-5) < 1e-8);
    }
    {
        Tensor logits_w = random_tensor({4, 6}, rng);
        std::vector<int> targets = {0, 3, 5, 2};
        auto f = [&](Tape& t) {
            return t.masked_cross_entropy(t.param(&logits_w), targets, std::vector<uint8_t>(4, 1),
                                          std::vector<double>(4, 1.3), true);
        };
        CHECK(grad_check(f, {&logits_w}, 1e-5) < 1e-5);
    }
    {
        auto f = [&](Tape& t) {
            (void)t.param(&w);
            return t.constant(Tensor::scalar(4.2));
        };
        CHECK(grad_check(f, {&w}, 1e-5) == 0.0);
    }
    {
        auto f = [&](Tape& t) { return t.sum(t.param(&w)); };
        CHECK_THROWS_AS(grad_check(f, {&w}, 1e-2), std::invalid_argument);
        CHECK_THROWS_AS(grad_check(f, {&w}, 1e-8), std::invalid_argument);
    }
}

TEST_CASE("grad_check covers every backbone op") {
    Rng rng(29);
    const double tol = 1e-4;
    const double eps = 1e-5;

    {  // layer_norm + silu + matmul chain
        Tensor x = random_tensor({5, 8}, rng);
        Tensor g = random_tensor({1, 8}, rng, 0.5);
        Tensor b = random_tensor({1, 8}, rng, 0.5);
        Tensor w = random_tensor({8, 3}, rng);
        auto f = [&](Tape& t) {
            Var h = t.layer_norm(t.param(&x), t.param(&g), t.param(&b));
            h = t.silu(t.matmul(h, t.param(&w)));
            return t.sum(h);
        };
        CHECK(grad_check(f, {&x, &g, &b, &w}, eps) < tol);
    }
    {  // rope gradient plus norm preservation (rotations are orthogonal)
        Tensor x = random_tensor({4, 8}, rng);
        std::vector<int> pos = {0, 3, 7, 11};
        Tensor probe = random_tensor({4, 8}, rng);
        auto f = [&](Tape& t) {
            Var r = t.rope(t.param(&x), pos, 2, 10000.0);
            return t.sum(t.mul(r, t.constant(probe)));
        };
        CHECK(grad_check(f, {&x}, eps) < tol);
        Tape t;
        const Tensor& r = t.val(t.rope(t.constant(x), pos, 2, 10000.0));
        double n0 = 0, n1 = 0;
        for (size_t i = 0; i < x.data.size(); ++i) {
            n0 += x.data[i] * x.data[i];
            n1 += r.data[i] * r.data[i];
        }
        CHECK(n1 == doctest::Approx(n0).epsilon(1e-12));
    }
    {  // fused attention under a mask
        Tensor q = random_tensor({3, 8}, rng);
        Tensor k = random_tensor({5, 8}, rng);
        Tensor v = random_tensor({5, 8}, rng);
        Tensor mask = Tensor::zeros({3, 5});
        mask.at(0, 3) = -1e30;
        mask.at(2, 0) = -1e30;
        Tensor probe = random_tensor({3, 8}, rng);
        auto f = [&](Tape& t) {
            Var a = t.attention(t.param(&q), t.param(&k), t.param(&v), mask, 2);
            return t.sum(t.mul(a, t.constant(probe)));
        };
        CHECK(grad_check(f, {&q, &k, &v}, eps) < tol);
    }
    {  // gather/scatter/embed/tile/concat composition
        Tensor table = random_tensor({7, 6}, rng);
        Tensor x = random_tensor({5, 6}, rng);
        Tensor row = random_tensor({1, 6}, rng);
        Tensor probe = random_tensor({9, 6}, rng);
        auto f = [&](Tape& t) {
            Var e = t.embed_rows(t.param(&table), {1, 4, 0});
            Var gx = t.gather_rows(t.param(&x), {4, 2, 0});
            Var sc = t.scatter_rows(gx, {0, 1, 2}, 3);
            Var tr = t.tile_row(t.param(&row), 3);
            Var cat = t.concat_rows({e, sc, tr});
            return t.sum(t.mul(cat, t.constant(probe)));
        };
        CHECK(grad_check(f, {&table, &x, &row}, eps) < tol);
    }
    {  // softmax rows gradient
        Tensor x = random_tensor({4, 5}, rng);
        Tensor probe = random_tensor({4, 5}, rng);
        auto f = [&](Tape& t) {
            return t.sum(t.mul(t.softmax_rows(t.param(&x)), t.constant(probe)));
        };
        CHECK(grad_check(f, {&x}, eps) < tol);
    }
    {  // masked mse gradient
        Tensor pred = random_tensor({4, 3}, rng);
        Tensor target = random_tensor({4, 3}, rng);
        std::vector<uint8_t> mask = {1, 0, 1, 1};
        auto f = [&](Tape& t) { return t.masked_mse(t.param(&pred), target, mask); };
        CHECK(grad_check(f, {&pred}, eps) < tol);
    }
    {  // add_rowvec bias path
        Tensor x = random_tensor({4, 6}, rng);
        Tensor b = random_tensor({1, 6}, rng);
        auto f = [&](Tape& t) { return t.sum(t.silu(t.add_rowvec(t.param(&x), t.param(&b)))); };
        CHECK(grad_check(f, {&x, &b}, eps) < tol);
    }
}

TEST_CASE("rng streams are deterministic and forkable") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c(42);
    for (int i = 0; i < 100; ++i) c.next_u64();
    Rng f1 = a.fork(5), f2 = c.fork(5);
    for (int i = 0; i < 10; ++i) CHECK(f1.next_u64() == f2.next_u64());
}

TEST_CASE("rng integer sampling is unbiased over small ranges") {
    Rng rng(99);
    std::vector<int> counts(5, 0);
    const int n = 100000;
    for (int i = 0; i < n; ++i) ++counts[rng.below(5)];
    for (int c : counts) CHECK(std::fabs(c - n / 5.0) < 5.0 * std::sqrt(n * 0.2 * 0.8));
}

TEST_CASE("tensor invariants") {
    Tensor t = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
    CHECK(t.numel() == 6);
    CHECK(t.shape_str() == "[2x3]");
    CHECK(t.all_finite());
    t.at(1, 2) = HUGE_VAL;
    CHECK(!t.all_finite());
    CHECK_THROWS_AS(Tensor::matrix(2, 2, {1, 2, 3}), std::invalid_argument);
    CHECK_THROWS_AS(Tensor::zeros({2, 2}).item(), std::invalid_argument);
}
