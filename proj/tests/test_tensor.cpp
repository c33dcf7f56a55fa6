#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "davqa/tensor.hpp"

using namespace davqa;

TEST_CASE("matmul identity and hand cases") {
    Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor v = Tensor::from({2, 1}, {3, 4});
    Tensor out = matmul(eye, v);
    CHECK(out.data() == std::vector<double>{3, 4});

    Tensor row = Tensor::from({1, 2}, {1, 2});
    CHECK(matmul(row, v).item() == 11.0);
}

TEST_CASE("matmul rejects mismatched inner dimensions, naming both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[4x2]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient of sum(a.b) w.r.t. a equals ones.b^T") {
    Rng rng(101);
    Tensor a = Tensor::randn({3, 4}, rng);
    Tensor b = Tensor::randn({4, 2}, rng);
    a.set_requires_grad(true);
    b.set_requires_grad(true);

    Tensor loss = sum_all(matmul(a, b));
    loss.backward();

    // algebraic oracle: d sum(AB) / dA = 1 * B^T
    Tensor expected = matmul(Tensor::full({3, 2}, 1.0), transpose(b));
    REQUIRE(a.grad().size() == expected.numel());
    for (std::size_t i = 0; i < expected.numel(); ++i) {
        CHECK(a.grad()[i] == Catch::Approx(expected.data()[i]).margin(1e-12));
    }

    // independent central-difference oracle on a few coordinates
    const double eps = 1e-5;
    NoGradGuard ng;
    for (std::size_t i : {0u, 5u, 11u}) {
        const double saved = a.data()[i];
        a.data()[i] = saved + eps;
        const double up = sum_all(matmul(a, b)).item();
        a.data()[i] = saved - eps;
        const double down = sum_all(matmul(a, b)).item();
        a.data()[i] = saved;
        CHECK(a.grad()[i] == Catch::Approx((up - down) / (2 * eps)).epsilon(1e-6));
    }
}

TEST_CASE("gelu matches an independent erf oracle") {
    Tensor zero = Tensor::scalar(0.0);
    CHECK(gelu(zero).item() == 0.0);

    CHECK(gelu(Tensor::scalar(20.0)).item() == Catch::Approx(20.0).margin(1e-9));
    CHECK(std::abs(gelu(Tensor::scalar(-20.0)).item()) < 1e-9);

    const double x = 1.0;
    const double oracle = 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
    CHECK(gelu(Tensor::scalar(x)).item() == Catch::Approx(oracle).margin(1e-12));

    // derivative against central differences at a few points
    for (double p : {-1.7, -0.3, 0.0, 0.9, 2.4}) {
        Tensor t = Tensor::scalar(p);
        t.set_requires_grad(true);
        gelu(t).backward();
        const double eps = 1e-6;
        const double num =
            (gelu(Tensor::scalar(p + eps)).item() - gelu(Tensor::scalar(p - eps)).item()) / (2 * eps);
        CHECK(t.grad()[0] == Catch::Approx(num).margin(1e-8));
    }
}

TEST_CASE("softmax cross entropy hand values") {
    SECTION("uniform logits give ln V") {
        Tensor logits = Tensor::full({1, 4}, 0.37);
        CHECK(softmax_cross_entropy(logits, {2}).item() == Catch::Approx(std::log(4.0)).margin(1e-12));
    }
    SECTION("huge margin at the target drives loss to zero") {
        Tensor logits = Tensor::from({1, 3}, {50.0, 0.0, 0.0});
        CHECK(softmax_cross_entropy(logits, {0}).item() < 1e-9);
    }
    SECTION("random 2x5 case matches a log-sum-exp oracle") {
        Rng rng(7);
        Tensor logits = Tensor::randn({2, 5}, rng, 2.0);
        std::vector<int> targets{3, 0};
        double oracle = 0.0;
        for (std::size_t r = 0; r < 2; ++r) {
            double lse = 0.0;
            for (std::size_t c = 0; c < 5; ++c) lse += std::exp(logits(r, c));
            oracle += std::log(lse) - logits(r, targets[r]);
        }
        oracle /= 2.0;
        CHECK(softmax_cross_entropy(logits, targets).item() == Catch::Approx(oracle).margin(1e-10));
    }
    SECTION("out-of-range target is an index error") {
        Tensor logits = Tensor::zeros({1, 3});
        CHECK_THROWS_AS(softmax_cross_entropy(logits, {3}), IndexError);
        CHECK_THROWS_AS(softmax_cross_entropy(logits, {-1}), IndexError);
    }
    SECTION("backward is (softmax - onehot) / B") {
        Tensor logits = Tensor::from({2, 3}, {1.0, 2.0, 0.5, -1.0, 0.0, 1.0});
        logits.set_requires_grad(true);
        softmax_cross_entropy(logits, {1, 2}).backward();
        for (std::size_t r = 0; r < 2; ++r) {
            double lse = 0.0;
            for (std::size_t c = 0; c < 3; ++c) lse += std::exp(logits(r, c));
            for (std::size_t c = 0; c < 3; ++c) {
                double expect = std::exp(logits(r, c)) / lse;
                if ((r == 0 && c == 1) || (r == 1 && c == 2)) expect -= 1.0;
                CHECK(logits.grad()[r * 3 + c] == Catch::Approx(expect / 2.0).margin(1e-12));
            }
        }
    }
}

TEST_CASE("backward on simple closed-form graphs") {
    SECTION("sum gives ones") {
        Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
        x.set_requires_grad(true);
        sum_all(x).backward();
        CHECK(x.grad() == std::vector<double>(6, 1.0));
    }
    SECTION("sum of squares gives 2x") {
        Tensor x = Tensor::from({1, 4}, {1.5, -2.0, 0.0, 3.0});
        x.set_requires_grad(true);
        sum_all(mul(x, x)).backward();
        for (std::size_t i = 0; i < 4; ++i)
            CHECK(x.grad()[i] == Catch::Approx(2.0 * x.data()[i]).margin(1e-12));
    }
    SECTION("non-scalar loss is a contract error") {
        Tensor x = Tensor::zeros({2, 2});
        x.set_requires_grad(true);
        CHECK_THROWS_AS(add(x, x).backward(), ContractError);
    }
    SECTION("gradients accumulate when a tensor is used twice") {
        Tensor x = Tensor::scalar(3.0);
        x.set_requires_grad(true);
        sum_all(add(x, x)).backward();
        CHECK(x.grad()[0] == 2.0);
    }
}

TEST_CASE("composite network gradients pass grad_check") {
    // small bottleneck block: y = ln(x) -> linear -> gelu -> linear -> CE
    Rng rng(42);
    Tensor x = Tensor::randn({4, 6}, rng);
    Tensor gamma = Tensor::full({6}, 1.0);
    Tensor beta = Tensor::zeros({6});
    Tensor w1 = Tensor::randn({3, 6}, rng, 0.5);
    Tensor b1 = Tensor::randn({3}, rng, 0.1);
    Tensor w2 = Tensor::randn({5, 3}, rng, 0.5);
    Tensor b2 = Tensor::zeros({5});
    std::vector<int> targets{0, 2, 4, 1};
    for (Tensor* t : {&x, &gamma, &beta, &w1, &b1, &w2, &b2}) t->set_requires_grad(true);

    auto f = [&]() {
        Tensor h = layer_norm(x, gamma, beta);
        h = gelu(linear(h, w1, b1));
        Tensor logits = linear(h, w2, b2);
        return softmax_cross_entropy(logits, targets);
    };
    const double err = grad_check(f, {x, gamma, beta, w1, b1, w2, b2});
    CHECK(err < 1e-5);
}

TEST_CASE("shape plumbing ops carry exact gradients") {
    Rng rng(9);
    Tensor a = Tensor::randn({2, 3}, rng);
    Tensor b = Tensor::randn({4, 3}, rng);
    Tensor table = Tensor::randn({5, 3}, rng);
    for (Tensor* t : {&a, &b, &table}) t->set_requires_grad(true);

    auto f = [&]() {
        Tensor stacked = concat_rows({a, b, embedding_rows(table, {4, 0, 4})});
        Tensor mid = slice_rows(stacked, 1, 7);
        Tensor wide = concat_cols({mid, softmax_rows(mid)});
        Tensor back = slice_cols(wide, 2, 3);
        return mean_all(mul(back, back));
    };
    CHECK(grad_check(f, {a, b, table}) < 1e-6);
}

TEST_CASE("slice bounds and concat widths are validated") {
    Tensor x = Tensor::zeros({3, 4});
    CHECK_THROWS_AS(slice_rows(x, 2, 2), IndexError);
    CHECK_THROWS_AS(slice_cols(x, 4, 1), IndexError);
    CHECK_THROWS_AS(concat_rows({x, Tensor::zeros({1, 3})}), ShapeError);
    CHECK_THROWS_AS(embedding_rows(x, {5}), IndexError);
}

TEST_CASE("scale_by gates a branch with exact gradients") {
    Rng rng(31);
    Tensor x = Tensor::randn({3, 4}, rng);
    Tensor gate = Tensor::scalar(0.0);
    x.set_requires_grad(true);
    gate.set_requires_grad(true);

    SECTION("zero gate yields an exact zero branch") {
        Tensor y = scale_by(x, gate);
        for (double v : y.data()) CHECK(v == 0.0);
    }
    SECTION("gradients for both the branch and the gate") {
        gate.data()[0] = 0.37;
        auto f = [&]() { return mean_all(mul(scale_by(x, gate), x)); };
        CHECK(grad_check(f, {x, gate}) < 1e-7);
    }
    SECTION("gate must be a single element") {
        CHECK_THROWS_AS(scale_by(x, Tensor::zeros({2})), ShapeError);
    }
}

TEST_CASE("no-grad scope records no graph") {
    Tensor x = Tensor::scalar(2.0);
    x.set_requires_grad(true);
    NoGradGuard ng;
    Tensor y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("adamw first step moves a unit-grad scalar by exactly lr") {
    ParameterStore store;
    Tensor p = store.add("p", Tensor::scalar(1.0));
    {
        Tensor loss = sum_all(p);  // grad = 1
        loss.backward();
    }
    AdamWConfig cfg;
    cfg.learning_rate = 0.1;
    cfg.weight_decay = 0.0;
    AdamW opt(cfg);
    opt.step(store);
    // bias correction makes m_hat = g and v_hat = g^2, so the step is
    // lr * g / (|g| + eps) = lr to within eps
    CHECK(p.data()[0] == Catch::Approx(0.9).margin(1e-8));
    CHECK(opt.step_count() == 1);
}

TEST_CASE("adamw leaves frozen parameters bit-identical and skips their moments") {
    ParameterStore store;
    Tensor frozen = store.add("backbone.w", Tensor::from({2, 2}, {1.25, -0.5, 0.75, 2.0}), false);
    Tensor live = store.add("adapter.w", Tensor::from({2, 2}, {0.1, 0.2, 0.3, 0.4}), true);
    const std::vector<double> frozen_before = frozen.data();

    AdamW opt;
    for (int i = 0; i < 3; ++i) {
        store.zero_grads();
        // frozen tensor participates in the forward pass but records no grad
        Tensor loss = sum_all(mul(matmul(frozen, live), matmul(frozen, live)));
        loss.backward();
        opt.step(store);
    }
    CHECK(frozen.data() == frozen_before);
    CHECK_FALSE(opt.has_moments_for("backbone.w"));
    CHECK(opt.has_moments_for("adapter.w"));
    CHECK(live.data() != std::vector<double>{0.1, 0.2, 0.3, 0.4});
}

TEST_CASE("adamw zero grad and zero decay leaves values unchanged") {
    ParameterStore store;
    Tensor p = store.add("p", Tensor::from({2}, {1.0, -2.0}));
    Tensor loss = sum_all(mul(p, scale(p, 0.0)));  // grad = 0
    loss.backward();
    AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    AdamW opt(cfg);
    opt.step(store);
    CHECK(p.data() == std::vector<double>{1.0, -2.0});
}

TEST_CASE("adamw requires grads on trainable parameters") {
    ParameterStore store;
    store.add("p", Tensor::scalar(1.0));
    AdamW opt;
    CHECK_THROWS_AS(opt.step(store), ContractError);
}

TEST_CASE("grad_check on x squared at x=3") {
    Tensor x = Tensor::scalar(3.0);
    x.set_requires_grad(true);
    auto f = [&]() { return sum_all(mul(x, x)); };
    CHECK(grad_check(f, {x}) < 1e-9);
}

TEST_CASE("grad_check sampling checks a deterministic subset") {
    Rng rng(55);
    Tensor w = Tensor::randn({8, 8}, rng);
    Tensor x = Tensor::randn({2, 8}, rng);
    w.set_requires_grad(true);
    auto f = [&]() { return mean_all(gelu(linear(x, w))); };
    GradCheckOptions opts;
    opts.max_coords_per_tensor = 10;
    const double e1 = grad_check(f, {w}, opts);
    const double e2 = grad_check(f, {w}, opts);
    CHECK(e1 < 1e-6);
    CHECK(e1 == e2);  // same seed, same coordinates, same answer
}

TEST_CASE("parameter store enforces unique names and reports lookups") {
    ParameterStore store;
    store.add("a", Tensor::scalar(1.0));
    CHECK_THROWS_AS(store.add("a", Tensor::scalar(2.0)), ConflictError);
    CHECK_THROWS_AS(store.at("missing"), LookupError);
    CHECK(store.contains("a"));
}

TEST_CASE("parameter store checksum tracks values, names and shapes") {
    ParameterStore s1, s2;
    s1.add("w", Tensor::from({2, 2}, {1, 2, 3, 4}));
    s2.add("w", Tensor::from({2, 2}, {1, 2, 3, 4}));
    CHECK(s1.checksum() == s2.checksum());

    s2.at("w").tensor.data()[3] = 4.0000001;
    CHECK(s1.checksum() != s2.checksum());

    ParameterStore s3;
    s3.add("w", Tensor::from({4, 1}, {1, 2, 3, 4}));  // same bytes, different shape
    CHECK(s1.checksum() != s3.checksum());
}

TEST_CASE("freeze_all turns every parameter non-trainable") {
    ParameterStore store;
    store.add("a", Tensor::scalar(1.0));
    store.add("b", Tensor::zeros({3}));
    CHECK_FALSE(store.all_frozen());
    store.freeze_all();
    CHECK(store.all_frozen());
    CHECK_FALSE(store.at("a").tensor.requires_grad());
}

TEST_CASE("repeated forward passes are bit-identical") {
    Rng rng(77);
    Tensor x = Tensor::randn({6, 6}, rng);
    Tensor w = Tensor::randn({6, 6}, rng);
    Tensor g = Tensor::full({6}, 1.0), b = Tensor::zeros({6});
    auto run = [&]() { return softmax_rows(layer_norm(gelu(matmul(x, w)), g, b)); };
    Tensor r1 = run(), r2 = run();
    CHECK(r1.data() == r2.data());
}
