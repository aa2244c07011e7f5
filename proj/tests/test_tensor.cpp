#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "grow/ops.hpp"
#include "grow/optim.hpp"
#include "grow/tensor.hpp"
#include "oracles.hpp"

using namespace grow;

TEST_CASE("tensor_randn basics") {
    Rng rng(42);
    SECTION("stddev zero gives all zeros") {
        Tensor<float> t = tensor_randn<float>({2, 2}, rng, 0.0);
        for (int64_t i = 0; i < t.numel(); ++i) CHECK(t.data()[i] == 0.0f);
    }
    SECTION("same seed and shape is bitwise deterministic") {
        Rng a(7), b(7);
        Tensor<float> ta = tensor_randn<float>({3, 5}, a, 1.0);
        Tensor<float> tb = tensor_randn<float>({3, 5}, b, 1.0);
        CHECK(bits_equal(ta, tb));
    }
    SECTION("sample mean obeys the CLT bound at n=1e6") {
        Rng r(123);
        Tensor<double> t = tensor_randn<double>({1000000}, r, 1.0);
        double mean = 0.0;
        for (int64_t i = 0; i < t.numel(); ++i) mean += t.data()[i];
        mean /= double(t.numel());
        CHECK(std::abs(mean) < 4.0 / std::sqrt(1e6));
    }
    SECTION("rank-0 rejected") {
        Rng r(1);
        CHECK_THROWS_WITH(tensor_randn<float>({}, r, 1.0), Catch::Matchers::ContainsSubstring("rank-0"));
    }
}

TEST_CASE("rng uniform_int stays in range and is deterministic") {
    Rng a(99, 3), b(99, 3);
    for (int i = 0; i < 1000; ++i) {
        uint64_t x = a.uniform_int(17);
        CHECK(x < 17);
        CHECK(x == b.uniform_int(17));
    }
}

TEST_CASE("matmul") {
    SECTION("identity") {
        Tensor<float> i2 = Tensor<float>::from({2, 2}, {1, 0, 0, 1});
        Tensor<float> b = Tensor<float>::from({2, 2}, {5, 6, 7, 8});
        CHECK(bits_equal(matmul(i2, b), b));
    }
    SECTION("hand-computed 2x2") {
        Tensor<float> a = Tensor<float>::from({2, 2}, {1, 2, 3, 4});
        Tensor<float> b = Tensor<float>::from({2, 2}, {5, 6, 7, 8});
        Tensor<float> c = matmul(a, b);
        CHECK(c.data()[0] == 19.0f);
        CHECK(c.data()[1] == 22.0f);
        CHECK(c.data()[2] == 43.0f);
        CHECK(c.data()[3] == 50.0f);
    }
    SECTION("random case matches the naive triple-loop oracle") {
        Rng rng(5);
        Tensor<float> a = tensor_randn<float>({7, 5}, rng);
        Tensor<float> b = tensor_randn<float>({5, 3}, rng);
        CHECK(oracle::max_rel_err(matmul(a, b), oracle::matmul(a, b)) < 1e-6);
    }
    SECTION("batched against per-slice oracle") {
        Rng rng(6);
        Tensor<double> a = tensor_randn<double>({2, 3, 4, 5}, rng);
        Tensor<double> b = tensor_randn<double>({2, 3, 5, 6}, rng);
        Tensor<double> c = matmul(a, b);
        for (int64_t s = 0; s < 6; ++s) {
            Tensor<double> as = Tensor<double>::from(
                {4, 5}, std::vector<double>(a.data() + s * 20, a.data() + (s + 1) * 20));
            Tensor<double> bs = Tensor<double>::from(
                {5, 6}, std::vector<double>(b.data() + s * 30, b.data() + (s + 1) * 30));
            Tensor<double> cs = oracle::matmul(as, bs);
            for (int64_t i = 0; i < 24; ++i)
                CHECK(oracle::rel_err(c.data()[s * 24 + i], cs.data()[i]) < 1e-12);
        }
    }
    SECTION("mismatched inner extent names both shapes") {
        Tensor<float> a = Tensor<float>::zeros({2, 3});
        Tensor<float> b = Tensor<float>::zeros({4, 2});
        CHECK_THROWS_WITH(matmul(a, b), Catch::Matchers::ContainsSubstring("(2,3)") &&
                                            Catch::Matchers::ContainsSubstring("(4,2)"));
    }
}

TEST_CASE("layer_norm") {
    SECTION("constant row normalizes to zeros") {
        Tensor<float> x = Tensor<float>::from({1, 4}, {3, 3, 3, 3});
        Tensor<float> y = layer_norm(x, 1e-5);
        for (int64_t i = 0; i < 4; ++i) CHECK(y.data()[i] == 0.0f);
    }
    SECTION("already-normalized row is nearly unchanged") {
        Tensor<double> x = Tensor<double>::from({1, 2}, {1, -1});
        Tensor<double> y = layer_norm(x, 1e-5);
        CHECK(y.data()[0] == Catch::Approx(1.0).margin(1e-4));
        CHECK(y.data()[1] == Catch::Approx(-1.0).margin(1e-4));
    }
    SECTION("random rows have zero mean and unit variance") {
        Rng rng(8);
        Tensor<double> x = tensor_randn<double>({4, 8}, rng);
        Tensor<double> y = layer_norm(x, 1e-8);
        for (int64_t r = 0; r < 4; ++r) {
            double mean = 0.0, var = 0.0;
            for (int64_t j = 0; j < 8; ++j) mean += y.data()[r * 8 + j];
            mean /= 8.0;
            for (int64_t j = 0; j < 8; ++j) {
                double c = y.data()[r * 8 + j] - mean;
                var += c * c;
            }
            var /= 8.0;
            CHECK(std::abs(mean) < 1e-6);
            CHECK(std::abs(var - 1.0) < 1e-4);
        }
    }
    SECTION("width-1 row with eps=0 is a division by zero") {
        Tensor<float> x = Tensor<float>::from({2, 1}, {1, 2});
        CHECK_THROWS_WITH(layer_norm(x, 0.0), Catch::Matchers::ContainsSubstring("division by zero"));
    }
}

TEST_CASE("softmax_lastdim") {
    SECTION("uniform logits") {
        Tensor<float> x = Tensor<float>::zeros({1, 3});
        Tensor<float> y = softmax_lastdim(x);
        for (int64_t i = 0; i < 3; ++i) CHECK(y.data()[i] == Catch::Approx(1.0 / 3.0));
    }
    SECTION("max subtraction avoids overflow") {
        Tensor<float> x = Tensor<float>::from({1, 2}, {1000, 0});
        Tensor<float> y = softmax_lastdim(x);
        CHECK(y.data()[0] == Catch::Approx(1.0));
        CHECK(y.data()[1] == Catch::Approx(0.0).margin(1e-30));
        CHECK(all_finite(y));
    }
    SECTION("random row matches the 64-bit exp/sum oracle") {
        Rng rng(9);
        Tensor<float> x = tensor_randn<float>({1, 11}, rng);
        Tensor<float> y = softmax_lastdim(x);
        auto ref = oracle::softmax_row(x.data(), 11);
        for (int64_t i = 0; i < 11; ++i) CHECK(oracle::rel_err(double(y.data()[i]), ref[size_t(i)]) < 1e-6);
    }
    SECTION("rows sum to one") {
        Rng rng(10);
        Tensor<double> x = tensor_randn<double>({5, 7}, rng);
        Tensor<double> y = softmax_lastdim(x);
        for (int64_t r = 0; r < 5; ++r) {
            double sum = 0.0;
            for (int64_t j = 0; j < 7; ++j) sum += y.data()[r * 7 + j];
            CHECK(sum == Catch::Approx(1.0).epsilon(1e-12));
        }
    }
    SECTION("NaN propagates") {
        Tensor<float> x = Tensor<float>::from({1, 2}, {std::nanf(""), 0.0f});
        CHECK(!all_finite(softmax_lastdim(x)));
    }
}

TEST_CASE("linear") {
    Rng rng(11);
    SECTION("zero weight and bias from any input") {
        Tensor<float> x = tensor_randn<float>({3, 4}, rng);
        Tensor<float> w = Tensor<float>::zeros({4, 5});
        Tensor<float> b = Tensor<float>::zeros({5});
        Tensor<float> y = linear(x, w, b);
        for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 0.0f);
    }
    SECTION("identity weight passes through") {
        Tensor<float> x = tensor_randn<float>({3, 4}, rng);
        Tensor<float> w = Tensor<float>::zeros({4, 4});
        for (int64_t i = 0; i < 4; ++i) w.data()[i * 4 + i] = 1.0f;
        CHECK(bits_equal(linear(x, w, Tensor<float>::zeros({4})), x));
    }
    SECTION("matches matmul + add composition exactly") {
        Tensor<float> x = tensor_randn<float>({6, 4}, rng);
        Tensor<float> w = tensor_randn<float>({4, 3}, rng);
        Tensor<float> b = tensor_randn<float>({3}, rng);
        Tensor<float> via_ops = matmul(x, w);
        Tensor<float> expect = Tensor<float>::zeros({6, 3});
        for (int64_t r = 0; r < 6; ++r)
            for (int64_t j = 0; j < 3; ++j)
                expect.data()[r * 3 + j] = via_ops.data()[r * 3 + j] + b.data()[j];
        CHECK(bits_equal(linear(x, w, b), expect));
    }
    SECTION("shape mismatch errors") {
        CHECK_THROWS_AS(linear(Tensor<float>::zeros({2, 3}), Tensor<float>::zeros({4, 2})), Error);
    }
}

TEST_CASE("scaled_dot_product_attention") {
    Rng rng(12);
    SECTION("single key broadcasts v") {
        Tensor<float> q = tensor_randn<float>({1, 2, 3, 4}, rng);
        Tensor<float> k = tensor_randn<float>({1, 2, 1, 4}, rng);
        Tensor<float> v = tensor_randn<float>({1, 2, 1, 4}, rng);
        Tensor<float> y = scaled_dot_product_attention(q, k, v);
        for (int64_t h = 0; h < 2; ++h)
            for (int64_t qi = 0; qi < 3; ++qi)
                for (int64_t d = 0; d < 4; ++d)
                    CHECK(y.data()[(h * 3 + qi) * 4 + d] == v.data()[h * 4 + d]);
    }
    SECTION("zero queries average the values uniformly") {
        Tensor<double> q = Tensor<double>::zeros({1, 1, 2, 4});
        Tensor<double> k = tensor_randn<double>({1, 1, 3, 4}, rng);
        Tensor<double> v = tensor_randn<double>({1, 1, 3, 4}, rng);
        Tensor<double> y = scaled_dot_product_attention(q, k, v);
        for (int64_t d = 0; d < 4; ++d) {
            double mean = (v.data()[d] + v.data()[4 + d] + v.data()[8 + d]) / 3.0;
            CHECK(y.data()[d] == Catch::Approx(mean).epsilon(1e-12));
        }
    }
    SECTION("two-head three-token case matches the loop oracle") {
        Tensor<float> q = tensor_randn<float>({2, 2, 3, 5}, rng);
        Tensor<float> k = tensor_randn<float>({2, 2, 3, 5}, rng);
        Tensor<float> v = tensor_randn<float>({2, 2, 3, 5}, rng);
        CHECK(oracle::max_rel_err(scaled_dot_product_attention(q, k, v), oracle::attention(q, k, v)) < 1e-6);
    }
    SECTION("depth mismatch errors") {
        CHECK_THROWS_AS(scaled_dot_product_attention(Tensor<float>::zeros({1, 1, 2, 3}),
                                                     Tensor<float>::zeros({1, 1, 2, 4}),
                                                     Tensor<float>::zeros({1, 1, 2, 4})),
                        Error);
    }
}

TEST_CASE("backward") {
    SECTION("grad of sum is ones") {
        Tensor<float> x = Tensor<float>::from({2, 2}, {1, 2, 3, 4}).set_requires_grad(true);
        backward(sum_all(x));
        for (float g : x.grad()) CHECK(g == 1.0f);
    }
    SECTION("grad of half squared norm is x") {
        Tensor<float> x = Tensor<float>::from({3}, {1.5f, -2.0f, 0.25f}).set_requires_grad(true);
        backward(scale(sum_all(mul(x, x)), 0.5));
        for (int64_t i = 0; i < 3; ++i) CHECK(x.grad()[size_t(i)] == x.data()[i]);
    }
    SECTION("repeated backward accumulates into leaves") {
        Tensor<float> x = Tensor<float>::from({2}, {1, 2}).set_requires_grad(true);
        Tensor<float> loss = sum_all(x);
        backward(loss);
        backward(loss);
        for (float g : x.grad()) CHECK(g == 2.0f);
    }
    SECTION("non-scalar loss rejected") {
        Tensor<float> x = Tensor<float>::from({2}, {1, 2}).set_requires_grad(true);
        CHECK_THROWS_AS(backward(mul(x, x)), Error);
    }
    SECTION("composite graph matches finite differences") {
        Rng rng(13);
        Tensor<double> w1 = tensor_randn<double>({4, 6}, rng).set_requires_grad(true);
        Tensor<double> w2 = tensor_randn<double>({6, 2}, rng).set_requires_grad(true);
        Tensor<double> x = tensor_randn<double>({3, 4}, rng);
        auto loss_of = [&](const Tensor<double>& w1v, const Tensor<double>& w2v) {
            Tensor<double> h = gelu(linear(x, w1v));
            Tensor<double> y = softmax_lastdim(linear(layer_norm(h, 1e-5), w2v));
            return mean_all(mul(y, y));
        };
        backward(loss_of(w1, w2));
        autograd::NoGradGuard ng;
        Tensor<double> fd1 = finite_diff_grad(
            [&](const Tensor<double>& p) { return loss_of(p, w2).item(); }, w1, 1e-5);
        Tensor<double> fd2 = finite_diff_grad(
            [&](const Tensor<double>& p) { return loss_of(w1, p).item(); }, w2, 1e-5);
        for (int64_t i = 0; i < w1.numel(); ++i) {
            double a = w1.grad()[size_t(i)], f = fd1.data()[i];
            if (std::max(std::abs(a), std::abs(f)) > 1e-6) CHECK(oracle::rel_err(a, f) < 1e-4);
        }
        for (int64_t i = 0; i < w2.numel(); ++i) {
            double a = w2.grad()[size_t(i)], f = fd2.data()[i];
            if (std::max(std::abs(a), std::abs(f)) > 1e-6) CHECK(oracle::rel_err(a, f) < 1e-4);
        }
    }
}

TEST_CASE("finite_diff_grad") {
    SECTION("gradient of sum is ones") {
        Tensor<double> x = Tensor<double>::from({4}, {1, 2, 3, 4});
        Tensor<double> g = finite_diff_grad(
            [](const Tensor<double>& p) {
                double s = 0;
                for (int64_t i = 0; i < p.numel(); ++i) s += p.data()[i];
                return s;
            },
            x, 1e-4);
        for (int64_t i = 0; i < 4; ++i) CHECK(g.data()[i] == Catch::Approx(1.0).epsilon(1e-8));
    }
    SECTION("gradient of half squared norm at [3]") {
        Tensor<double> x = Tensor<double>::from({1}, {3});
        Tensor<double> g = finite_diff_grad(
            [](const Tensor<double>& p) { return 0.5 * p.data()[0] * p.data()[0]; }, x, 1e-3);
        CHECK(g.data()[0] == Catch::Approx(3.0).margin(1e-6));
    }
    SECTION("h must be positive") {
        Tensor<double> x = Tensor<double>::from({1}, {1});
        CHECK_THROWS_AS(finite_diff_grad([](const Tensor<double>&) { return 0.0; }, x, 0.0), Error);
    }
}

TEST_CASE("adam_step") {
    SECTION("zero gradients leave parameters unchanged") {
        Tensor<float> p = Tensor<float>::from({3}, {1, 2, 3}).set_requires_grad(true);
        std::vector<NamedParam<float>> params{{"p", p}};
        AdamState<float> st;
        AdamConfig cfg;
        Tensor<float> before = p.clone();
        for (int i = 0; i < 5; ++i) adam_step(params, st, cfg);
        CHECK(bits_equal(p, before));
    }
    SECTION("beta1=beta2=0 reduces to the sign-scaled step") {
        Tensor<double> p = Tensor<double>::from({1}, {2.0}).set_requires_grad(true);
        backward(scale(sum_all(p), 3.0));  // grad = 3
        std::vector<NamedParam<double>> params{{"p", p}};
        AdamState<double> st;
        AdamConfig cfg;
        cfg.lr = 0.1;
        cfg.beta1 = 0.0;
        cfg.beta2 = 0.0;
        adam_step(params, st, cfg);
        CHECK(p.data()[0] == Catch::Approx(2.0 - 0.1 * 3.0 / (3.0 + cfg.eps)).epsilon(1e-12));
    }
    SECTION("descends f(p)=p^2 with strictly decreasing |p|") {
        Tensor<double> p = Tensor<double>::from({1}, {1.0}).set_requires_grad(true);
        std::vector<NamedParam<double>> params{{"p", p}};
        AdamState<double> st;
        AdamConfig cfg;
        cfg.lr = 0.1;
        double prev = std::abs(p.data()[0]);
        for (int i = 0; i < 10; ++i) {
            p.zero_grad();
            backward(sum_all(mul(p, p)));
            adam_step(params, st, cfg);
            double cur = std::abs(p.data()[0]);
            CHECK(cur < prev);
            prev = cur;
        }
    }
    SECTION("non-finite gradient names the parameter") {
        Tensor<float> p = Tensor<float>::from({1}, {1}).set_requires_grad(true);
        Tensor<float> bad = Tensor<float>::from({1}, {std::nanf("")});
        backward(sum_all(mul(p, bad)));
        std::vector<NamedParam<float>> params{{"theta.w", p}};
        AdamState<float> st;
        CHECK_THROWS_WITH(adam_step(params, st, AdamConfig{}),
                          Catch::Matchers::ContainsSubstring("theta.w"));
    }
}

TEST_CASE("op sequences re-run bitwise identically with the same seed") {
    auto run = [](uint64_t seed) {
        Rng rng(seed);
        Tensor<float> a = tensor_randn<float>({4, 6}, rng);
        Tensor<float> b = tensor_randn<float>({6, 3}, rng);
        Tensor<float> y = softmax_lastdim(matmul(gelu(a), b));
        return y;
    };
    CHECK(bits_equal(run(1234), run(1234)));
}

TEST_CASE("reshape shares storage and transposes materialize the index map") {
    Rng rng(14);
    Tensor<float> x = tensor_randn<float>({2, 3, 4}, rng);
    Tensor<float> r = reshape(x, {6, 4});
    CHECK(r.data() == x.data());  // metadata-only
    Tensor<float> t = transpose(x, 0, 1);
    for (int64_t i = 0; i < 2; ++i)
        for (int64_t j = 0; j < 3; ++j)
            for (int64_t k = 0; k < 4; ++k)
                CHECK(t.data()[(j * 2 + i) * 4 + k] == x.data()[(i * 3 + j) * 4 + k]);
}

TEST_CASE("per-op gradients match finite differences in 64-bit mode") {
    Rng rng(15);
    SECTION("linear") {
        Tensor<double> x = tensor_randn<double>({3, 4}, rng);
        Tensor<double> w = tensor_randn<double>({4, 5}, rng).set_requires_grad(true);
        Tensor<double> b = tensor_randn<double>({5}, rng).set_requires_grad(true);
        backward(mean_all(gelu(linear(x, w, b))));
        autograd::NoGradGuard ng;
        auto f = [&](const Tensor<double>& wv) {
            Tensor<double> y = gelu(linear(x, wv, b));
            double s = 0;
            for (int64_t i = 0; i < y.numel(); ++i) s += y.data()[i];
            return s / double(y.numel());
        };
        Tensor<double> fd = finite_diff_grad(f, w, 1e-3);
        for (int64_t i = 0; i < w.numel(); ++i)
            if (std::max(std::abs(w.grad()[size_t(i)]), std::abs(fd.data()[i])) > 1e-6)
                CHECK(oracle::rel_err(w.grad()[size_t(i)], fd.data()[i]) < 1e-4);
    }
    SECTION("attention") {
        Tensor<double> q = tensor_randn<double>({1, 2, 3, 4}, rng).set_requires_grad(true);
        Tensor<double> k = tensor_randn<double>({1, 2, 3, 4}, rng);
        Tensor<double> v = tensor_randn<double>({1, 2, 3, 4}, rng);
        backward(mean_all(scaled_dot_product_attention(q, k, v)));
        autograd::NoGradGuard ng;
        Tensor<double> fd = finite_diff_grad(
            [&](const Tensor<double>& qv) {
                Tensor<double> y = scaled_dot_product_attention(qv, k, v);
                double s = 0;
                for (int64_t i = 0; i < y.numel(); ++i) s += y.data()[i];
                return s / double(y.numel());
            },
            q, 1e-3);
        for (int64_t i = 0; i < q.numel(); ++i)
            if (std::max(std::abs(q.grad()[size_t(i)]), std::abs(fd.data()[i])) > 1e-6)
                CHECK(oracle::rel_err(q.grad()[size_t(i)], fd.data()[i]) < 1e-4);
    }
    SECTION("layer_norm with external affine") {
        Tensor<double> x = tensor_randn<double>({2, 6}, rng).set_requires_grad(true);
        Tensor<double> g = tensor_randn<double>({2, 6}, rng).set_requires_grad(true);
        Tensor<double> b = tensor_randn<double>({2, 6}, rng).set_requires_grad(true);
        backward(mean_all(mul(affine_rows(layer_norm(x, 1e-5), g, b),
                              affine_rows(layer_norm(x, 1e-5), g, b))));
        autograd::NoGradGuard ng;
        auto f = [&](const Tensor<double>& xv) {
            Tensor<double> y = affine_rows(layer_norm(xv, 1e-5), g, b);
            double s = 0;
            for (int64_t i = 0; i < y.numel(); ++i) s += y.data()[i] * y.data()[i];
            return s / double(y.numel());
        };
        Tensor<double> fd = finite_diff_grad(f, x, 1e-4);
        for (int64_t i = 0; i < x.numel(); ++i)
            if (std::max(std::abs(x.grad()[size_t(i)]), std::abs(fd.data()[i])) > 1e-6)
                CHECK(oracle::rel_err(x.grad()[size_t(i)], fd.data()[i]) < 1e-4);
    }
}
