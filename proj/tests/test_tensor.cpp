#include <doctest.h>

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <vector>

#include "dip/rng.hpp"
#include "dip/tensor.hpp"

using namespace dip;

namespace {

// independent oracle: naive triple loop, k innermost
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, int m,
                                 int k, int n) {
    std::vector<double> c(static_cast<std::size_t>(m) * n);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int kk = 0; kk < k; ++kk) acc += a[i * k + kk] * b[kk * n + j];
            c[i * n + j] = acc;
        }
    return c;
}

Tensor random_tensor(Shape s, Rng& rng, double stddev = 1.0, bool requires_grad = true) {
    Tensor t = Tensor::randn(std::move(s), rng, stddev);
    t.requires_grad = requires_grad;
    return t;
}

// entries with |v| in [0.5, 1.5]: keeps every gradient coordinate scaled well
// above the finite-difference noise floor
Tensor bounded_random(Shape s, Rng& rng, bool requires_grad = true) {
    Tensor t(std::move(s));
    for (auto& v : t.data) {
        double u = 0.5 + rng.uniform();
        v = (rng.uniform() < 0.5) ? -u : u;
    }
    t.requires_grad = requires_grad;
    return t;
}

// FD-check every parameter of a scalar-valued graph builder
double check_params(const std::function<Var(Tape&)>& build, std::vector<Tensor*> params,
                    double h = 1e-5) {
    for (Tensor* p : params) p->zero_grad();
    {
        Tape tape;
        tape.backward(build(tape));
    }
    auto f = [&]() {
        Tape tape;
        return build(tape).data()[0];
    };
    double worst = 0.0;
    for (Tensor* p : params) {
        auto rep = finite_diff_check(f, *p, h);
        worst = std::max(worst, rep.max_rel_err);
    }
    return worst;
}

}  // namespace

TEST_CASE("matmul: identity and direct arithmetic") {
    Tape tape;
    Tensor id2({2, 2}, {1, 0, 0, 1});
    Tensor v({2, 1}, {5, 6});
    auto out = tape.matmul(tape.constant(id2), tape.constant(v));
    CHECK(out.data() == std::vector<double>{5, 6});

    Tensor a({2, 2}, {1, 2, 3, 4});
    auto out2 = tape.matmul(tape.constant(a), tape.constant(v));
    CHECK(out2.data() == std::vector<double>{17, 39});
}

TEST_CASE("matmul: shape mismatch names both shapes") {
    Tape tape;
    auto a = tape.constant(Tensor::zeros({2, 3}));
    auto b = tape.constant(Tensor::zeros({2, 3}));
    CHECK_THROWS_WITH_AS(tape.matmul(a, b), doctest::Contains("[2x3]"), std::invalid_argument);
}

TEST_CASE("matmul equals naive triple-loop oracle exactly up to 64x64") {
    Rng rng = Rng::seeded(11);
    for (int trial = 0; trial < 20; ++trial) {
        int m = 1 + static_cast<int>(rng.below(64));
        int k = 1 + static_cast<int>(rng.below(64));
        int n = 1 + static_cast<int>(rng.below(64));
        Tensor a = Tensor::randn({m, k}, rng);
        Tensor b = Tensor::randn({k, n}, rng);
        Tape tape;
        auto c = tape.matmul(tape.constant(a), tape.constant(b));
        auto ref = naive_matmul(a.data, b.data, m, k, n);
        REQUIRE(c.data().size() == ref.size());
        CHECK(std::memcmp(c.data().data(), ref.data(), ref.size() * sizeof(double)) == 0);
    }
}

TEST_CASE("softmax_rows: closed forms") {
    Tape tape;
    auto u = tape.softmax_rows(tape.constant(Tensor::zeros({1, 4})));
    for (double v : u.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-14));

    auto two = tape.softmax_rows(tape.constant(Tensor({1, 2}, {0.0, std::log(2.0)})));
    CHECK(two.data()[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
    CHECK(two.data()[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
}

TEST_CASE("softmax_rows: shift invariance and row-stochastic under huge logits") {
    Rng rng = Rng::seeded(7);
    for (int trial = 0; trial < 50; ++trial) {
        int r = 1 + static_cast<int>(rng.below(6));
        int c = 1 + static_cast<int>(rng.below(9));
        Tensor x = Tensor::randn({r, c}, rng, 500.0);  // magnitude-500 logits
        Tensor shifted = x;
        for (auto& v : shifted.data) v += 7.0;
        Tape tape;
        auto s1 = tape.softmax_rows(tape.constant(x));
        auto s2 = tape.softmax_rows(tape.constant(shifted));
        for (std::size_t i = 0; i < s1.data().size(); ++i)
            CHECK(s1.data()[i] == doctest::Approx(s2.data()[i]).epsilon(1e-12));
        for (int i = 0; i < r; ++i) {
            double sum = 0.0;
            for (int j = 0; j < c; ++j) sum += s1.data()[i * c + j];
            CHECK(std::abs(sum - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("layer_norm: degenerate cases and statistics") {
    Tensor gain = Tensor::full({8}, 1.0);
    Tensor bias = Tensor::zeros({8});
    const double eps = 1e-5;

    Tape tape;
    auto out = tape.layer_norm(tape.constant(Tensor::full({1, 8}, 3.25)), tape.constant(gain),
                               tape.constant(bias), eps);
    for (double v : out.data()) CHECK(std::abs(v) <= std::sqrt(eps));

    Tensor b2 = Tensor::full({8}, -0.5);
    Rng rng = Rng::seeded(3);
    Tensor x = Tensor::randn({4, 8}, rng);
    auto out2 = tape.layer_norm(tape.constant(x), tape.constant(Tensor::zeros({8})), tape.constant(b2), eps);
    for (double v : out2.data()) CHECK(v == -0.5);

    auto out3 = tape.layer_norm(tape.constant(x), tape.constant(gain), tape.constant(bias), eps);
    for (int i = 0; i < 4; ++i) {
        double mu = 0.0, var = 0.0;
        for (int j = 0; j < 8; ++j) mu += out3.data()[i * 8 + j];
        mu /= 8;
        for (int j = 0; j < 8; ++j) {
            double d = out3.data()[i * 8 + j] - mu;
            var += d * d;
        }
        var /= 8;
        CHECK(std::abs(mu) <= 1e-12);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
    }
}

TEST_CASE("concat_rows: empty operand, direct values, linear backward") {
    Tape tape;
    Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor empty({0, 3}, {});
    auto c = tape.concat_rows(tape.constant(a), tape.constant(empty));
    CHECK(c.shape() == Shape{2, 3});
    CHECK(c.data() == a.data);

    Tensor p({1, 2}, {1, 2});
    Tensor q({1, 2}, {3, 4});
    auto c2 = tape.concat_rows(tape.constant(p), tape.constant(q));
    CHECK(c2.data() == std::vector<double>{1, 2, 3, 4});

    Tensor pa = p, qa = q;
    pa.requires_grad = qa.requires_grad = true;
    Tape t2;
    auto loss = t2.sum_all(t2.concat_rows(t2.leaf(pa), t2.leaf(qa)));
    t2.backward(loss);
    CHECK(pa.grad == std::vector<double>{1, 1});
    CHECK(qa.grad == std::vector<double>{1, 1});

    CHECK_THROWS_AS(tape.concat_rows(tape.constant(p), tape.constant(a)), std::invalid_argument);
}

TEST_CASE("backward: sum and quadratic closed forms, unreachable leaves zero") {
    Rng rng = Rng::seeded(5);
    Tensor x = random_tensor({2, 2}, rng);
    Tensor unused = random_tensor({3}, rng);
    Tape tape;
    auto xv = tape.leaf(x);
    (void)tape.leaf(unused);
    tape.backward(tape.sum_all(xv));
    CHECK(x.grad == std::vector<double>(4, 1.0));
    CHECK(unused.grad == std::vector<double>(3, 0.0));

    Tensor y = random_tensor({5}, rng);
    Tape t2;
    auto yv = t2.leaf(y);
    t2.backward(t2.scale(t2.sum_all(t2.mul(yv, yv)), 0.5));
    for (int i = 0; i < 5; ++i) CHECK(y.grad[i] == doctest::Approx(y.data[i]).epsilon(1e-15));
}

TEST_CASE("backward: deterministic, repeated passes bit-identical") {
    Rng rng = Rng::seeded(17);
    Tensor a = random_tensor({4, 6}, rng);
    Tensor b = random_tensor({6, 3}, rng);
    Tape tape;
    auto av = tape.leaf(a);
    auto bv = tape.leaf(b);
    auto loss = tape.sum_all(tape.gelu(tape.matmul(av, bv)));
    tape.backward(loss);
    auto ga = a.grad, gb = b.grad;
    a.zero_grad();
    b.zero_grad();
    tape.backward(loss);
    CHECK(std::memcmp(ga.data(), a.grad.data(), ga.size() * sizeof(double)) == 0);
    CHECK(std::memcmp(gb.data(), b.grad.data(), gb.size() * sizeof(double)) == 0);
}

TEST_CASE("backward rejects non-scalar loss") {
    Tensor x = Tensor::zeros({2, 2});
    x.requires_grad = true;
    Tape tape;
    auto v = tape.leaf(x);
    CHECK_THROWS_AS(tape.backward(v), std::invalid_argument);
}

TEST_CASE("checked mode rejects non-finite values at op boundaries") {
    Tape tape(/*checked=*/true);
    Tensor bad({2}, {1.0, std::nan("")});
    CHECK_THROWS_AS(tape.constant(bad), std::runtime_error);
    Tape unchecked(/*checked=*/false);
    CHECK_NOTHROW(unchecked.constant(bad));
}

TEST_CASE("finite_diff_check: exact quadratic stays below 1e-9") {
    Rng rng = Rng::seeded(23);
    Tensor theta = random_tensor({7}, rng);
    auto build = [&](Tape& t) { return t.scale(t.sum_all(t.mul(t.leaf(theta), t.leaf(theta))), 0.5); };
    theta.zero_grad();
    {
        Tape t;
        t.backward(build(t));
    }
    auto f = [&]() {
        Tape t;
        return build(t).data()[0];
    };
    auto rep = finite_diff_check(f, theta, 1e-5);
    CHECK(rep.max_rel_err <= 1e-9);
}

// property test: every differentiable op matches central differences across
// random shapes and seeds. Probes are kept bounded away from zero so no
// checked coordinate sits at a gradient zero-crossing, where central
// differences measure only rounding noise.
TEST_CASE("gradients match finite differences across ops (>=100 random cases)") {
    Rng rng = Rng::seeded(101);
    int cases = 0;
    double worst = 0.0;

    auto positive = [&rng](Shape s, double lo, double hi) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = lo + (hi - lo) * rng.uniform();
        return t;
    };

    for (int trial = 0; trial < 12; ++trial) {
        int r = 2 + static_cast<int>(rng.below(4));
        int c = 2 + static_cast<int>(rng.below(5));
        int k = 2 + static_cast<int>(rng.below(4));

        {  // add / sub / scale: d/da = p1 + 1.7*p2 >= 1.4, d/db = p1 - p2 >= 0.5
            Tensor a = random_tensor({r, c}, rng);
            Tensor b = random_tensor({r, c}, rng);
            Tensor p1 = positive({r, c}, 1.0, 2.0);
            Tensor p2 = positive({r, c}, 0.25, 0.5);
            auto build = [&](Tape& t) {
                auto av = t.leaf(a), bv = t.leaf(b);
                auto s1 = t.sum_all(t.mul(t.add(av, bv), t.constant(p1)));
                auto s2 = t.sum_all(t.mul(t.sub(t.scale(av, 1.7), bv), t.constant(p2)));
                return t.add(s1, s2);
            };
            worst = std::max(worst, check_params(build, {&a, &b}));
            cases += 2;
        }
        {  // hadamard mul with operands bounded away from zero
            Tensor a = bounded_random({r, c}, rng);
            Tensor b = bounded_random({r, c}, rng);
            Tensor p = positive({r, c}, 0.5, 1.0);
            auto build = [&](Tape& t) {
                return t.sum_all(t.mul(t.mul(t.leaf(a), t.leaf(b)), t.constant(p)));
            };
            worst = std::max(worst, check_params(build, {&a, &b}));
            cases += 2;
        }
        {  // matmul / matmul_nt, positive operands so no inner-product cancellation
            Tensor a = positive({r, k}, 0.5, 1.5);
            Tensor b = positive({k, c}, 0.5, 1.5);
            Tensor bt = positive({c, k}, 0.5, 1.5);
            Tensor p = positive({r, c}, 0.5, 1.5);
            a.requires_grad = b.requires_grad = bt.requires_grad = true;
            auto build = [&](Tape& t) {
                auto m1 = t.matmul(t.leaf(a), t.leaf(b));
                auto m2 = t.matmul_nt(t.leaf(a), t.leaf(bt));
                return t.sum_all(t.mul(t.add(m1, m2), t.constant(p)));
            };
            worst = std::max(worst, check_params(build, {&a, &b, &bt}));
            cases += 3;
        }
        {  // softmax against a one-hot probe: dx_k = y_k(delta - y_j), all |.| > 0
            Tensor a = random_tensor({r, c}, rng, 0.3);
            Tensor onehot = Tensor::zeros({r, c});
            for (int i = 0; i < r; ++i) onehot.data[i * c + static_cast<int>(rng.below(c))] = 1.0;
            auto build = [&](Tape& t) {
                return t.sum_all(t.mul(t.softmax_rows(t.leaf(a)), t.constant(onehot)));
            };
            worst = std::max(worst, check_params(build, {&a}));
            cases += 1;
        }
        {  // log_softmax against one-hot: dx = onehot - softmax
            Tensor a = random_tensor({r, c}, rng, 0.3);
            Tensor onehot = Tensor::zeros({r, c});
            for (int i = 0; i < r; ++i) onehot.data[i * c + static_cast<int>(rng.below(c))] = 1.0;
            auto build = [&](Tape& t) {
                return t.sum_all(t.mul(t.log_softmax_rows(t.leaf(a)), t.constant(onehot)));
            };
            worst = std::max(worst, check_params(build, {&a}));
            cases += 1;
        }
        {  // layer_norm
            Tensor x = random_tensor({r, c}, rng);
            Tensor g = bounded_random({c}, rng);
            Tensor b = random_tensor({c}, rng, 0.3);
            Tensor w = positive({r, c}, 0.5, 1.5);
            auto build = [&](Tape& t) {
                return t.sum_all(
                    t.mul(t.layer_norm(t.leaf(x), t.leaf(g), t.leaf(b), 1e-5), t.constant(w)));
            };
            worst = std::max(worst, check_params(build, {&x, &g, &b}));
            cases += 3;
        }
        {  // gelu / add_rowvec / mean_rows / slice+concat cols; inputs kept away
           // from gelu's derivative zero near x = -0.75
            Tensor x(Shape{r, c});
            for (auto& v : x.data) v = 0.5 * rng.uniform();
            x.requires_grad = true;
            Tensor b = positive({c}, 0.0, 0.4);
            b.requires_grad = true;
            Tensor p = positive({1, c}, 0.5, 1.5);
            auto build = [&](Tape& t) {
                auto h = t.gelu(t.add_rowvec(t.leaf(x), t.leaf(b)));
                int mid = c / 2 + 1;
                auto left = t.slice_cols(h, 0, mid);
                auto joined = (mid < c) ? t.concat_cols(left, t.slice_cols(h, mid, c)) : left;
                return t.sum_all(t.mul(t.mean_rows(joined), t.constant(p)));
            };
            worst = std::max(worst, check_params(build, {&x, &b}));
            cases += 2;
        }
        {  // conv2d + channel_norm + upsample on a small feature map
            int ch = 1 + static_cast<int>(rng.below(3));
            int co = 1 + static_cast<int>(rng.below(3));
            Tensor x = random_tensor({ch, 6, 6}, rng);
            Tensor w = random_tensor({co, ch, 3, 3}, rng, 0.4);
            Tensor bias = random_tensor({co}, rng, 0.2);
            Tensor g = bounded_random({co}, rng);
            Tensor cb = random_tensor({co}, rng, 0.3);
            Tensor probe = positive({co, 12, 12}, 0.5, 1.5);
            auto build = [&](Tape& t) {
                auto y = t.conv2d(t.leaf(x), t.leaf(w), t.leaf(bias), 1, 1);
                auto n = t.channel_norm(y, t.leaf(g), t.leaf(cb), 1e-5);
                auto up = t.upsample_nearest2(n);
                return t.sum_all(t.mul(up, t.constant(probe)));
            };
            // conv bias is a per-channel shift, exactly removed by the norm:
            // its true gradient is zero here; it is checked in the strided
            // case below instead. x/w pass through the norm's centering, so
            // they are checked at the looser model-level tolerance.
            worst = std::max(worst, check_params(build, {&g, &cb}));
            cases += 2;
            double norm_path = check_params(build, {&x, &w});
            CHECK(norm_path <= 1e-5);
            cases += 2;
        }
        {  // strided conv (downsample path), positive so outputs stay off zero
            Tensor x = positive({2, 6, 6}, 0.5, 1.5);
            Tensor w = positive({3, 2, 3, 3}, 0.1, 0.3);
            Tensor bias = positive({3}, 0.1, 0.2);
            x.requires_grad = w.requires_grad = bias.requires_grad = true;
            auto build = [&](Tape& t) {
                auto y = t.conv2d(t.leaf(x), t.leaf(w), t.leaf(bias), 2, 1);
                return t.sum_all(t.mul(y, y));
            };
            worst = std::max(worst, check_params(build, {&x, &w, &bias}));
            cases += 3;
        }
    }
    CHECK(cases >= 100);
    CHECK(worst <= 1e-6);
}
