#include <catch2/catch_amalgamated.hpp>

#include "davqa/hooks.hpp"

using namespace davqa;

namespace {

// toy two-stage "model": x -> site a (scale by 2) -> site b (add 1)
struct ToyModel {
    HookEngine hooks;

    ToyModel() {
        hooks.declare_site("stage.a", {2, 2});
        hooks.declare_site("stage.b", {2, 2});
    }

    Tensor forward(const Tensor& x) const {
        Tensor a = hooks.apply("stage.a", scale(x, 2.0));
        Tensor b = hooks.apply("stage.b", add(a, Tensor::full({2, 2}, 1.0)));
        return b;
    }
};

const Tensor kInput = Tensor::from({2, 2}, {1.0, -2.0, 0.5, 3.0});

}  // namespace

TEST_CASE("zero-delta hook leaves outputs bit-exact") {
    ToyModel model;
    const std::vector<double> baseline = model.forward(kInput).data();
    model.hooks.register_hook("stage.a", [](const Tensor& h) { return Tensor::zeros(h.shape()); });
    CHECK(model.forward(kInput).data() == baseline);
}

TEST_CASE("hooks at two sites compose in stage order") {
    ToyModel model;
    model.hooks.register_hook("stage.a", [](const Tensor& h) { return Tensor::full(h.shape(), 10.0); });
    model.hooks.register_hook("stage.b", [](const Tensor& h) { return scale(h, 1.0); });  // doubles b
    // stage.a: 2x + 10; stage.b base: 2x + 11; doubled: 4x + 22
    Tensor out = model.forward(kInput);
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(out.data()[i] == Catch::Approx(4.0 * kInput.data()[i] + 22.0).margin(1e-15));
}

TEST_CASE("unknown site errors name the available sites") {
    ToyModel model;
    try {
        model.hooks.register_hook("stage.z", [](const Tensor& h) { return h; });
        FAIL("expected LookupError");
    } catch (const LookupError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("stage.z") != std::string::npos);
        CHECK(msg.find("stage.a") != std::string::npos);
        CHECK(msg.find("stage.b") != std::string::npos);
    }
}

TEST_CASE("occupied slot rejects a second hook") {
    ToyModel model;
    model.hooks.register_hook("stage.a", [](const Tensor& h) { return Tensor::zeros(h.shape()); });
    CHECK_THROWS_AS(
        model.hooks.register_hook("stage.a", [](const Tensor& h) { return Tensor::zeros(h.shape()); }),
        ConflictError);
}

TEST_CASE("register then remove restores the baseline bit-exact") {
    ToyModel model;
    const std::vector<double> baseline = model.forward(kInput).data();
    HookHandle h =
        model.hooks.register_hook("stage.a", [](const Tensor& t) { return Tensor::full(t.shape(), 3.25); });
    CHECK(model.forward(kInput).data() != baseline);
    model.hooks.remove_hook(h);
    CHECK(model.forward(kInput).data() == baseline);

    model.hooks.remove_hook(h);  // double remove: no error, no effect
    CHECK(model.forward(kInput).data() == baseline);
}

TEST_CASE("removing one of two hooks keeps the other applied") {
    ToyModel model;
    HookHandle ha =
        model.hooks.register_hook("stage.a", [](const Tensor& t) { return Tensor::full(t.shape(), 1.0); });
    model.hooks.register_hook("stage.b", [](const Tensor& t) { return Tensor::full(t.shape(), 5.0); });

    ToyModel only_b;
    only_b.hooks.register_hook("stage.b", [](const Tensor& t) { return Tensor::full(t.shape(), 5.0); });

    model.hooks.remove_hook(ha);
    CHECK(model.forward(kInput).data() == only_b.forward(kInput).data());
    CHECK(model.hooks.active_count() == 1);
}

TEST_CASE("wrong-shaped delta is rejected, never broadcast") {
    ToyModel model;
    model.hooks.register_hook("stage.a", [](const Tensor&) { return Tensor::zeros({1, 2}); });
    CHECK_THROWS_AS(model.forward(kInput), ShapeError);
}

TEST_CASE("base output violating the site contract is rejected") {
    HookEngine hooks;
    hooks.declare_site("s", {3, 3});
    CHECK_THROWS_AS(hooks.apply("s", Tensor::zeros({2, 2})), ShapeError);
}

TEST_CASE("swap_active_set replaces the whole set atomically") {
    ToyModel model;
    auto mk = [](double v) {
        return [v](const Tensor& t) { return Tensor::full(t.shape(), v); };
    };
    model.hooks.swap_active_set({{"stage.a", mk(1.0)}}, std::nullopt);
    const std::vector<double> first = model.forward(kInput).data();

    SECTION("swap to another set and back reproduces the first episode bit-exact") {
        model.hooks.swap_active_set({{"stage.a", mk(7.0)}, {"stage.b", mk(2.0)}}, std::nullopt);
        CHECK(model.forward(kInput).data() != first);
        model.hooks.swap_active_set({{"stage.a", mk(1.0)}}, std::nullopt);
        CHECK(model.forward(kInput).data() == first);
    }
    SECTION("swapping to the same set is idempotent") {
        model.hooks.swap_active_set({{"stage.a", mk(1.0)}}, std::nullopt);
        CHECK(model.forward(kInput).data() == first);
        CHECK(model.hooks.active_count() == 1);
    }
    SECTION("failed swap leaves the previous set intact") {
        CHECK_THROWS_AS(model.hooks.swap_active_set({{"stage.zzz", mk(0.0)}}, std::nullopt), LookupError);
        CHECK(model.forward(kInput).data() == first);
        CHECK(model.hooks.active_count() == 1);
    }
}

TEST_CASE("prefix slot binds, swaps and clears") {
    HookEngine hooks;
    hooks.declare_site("s", {1, 1});
    CHECK_FALSE(hooks.bound_prefix().has_value());
    hooks.bind_prefix(Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}));
    REQUIRE(hooks.bound_prefix().has_value());
    CHECK(hooks.bound_prefix()->shape() == Shape{2, 3});
    hooks.swap_active_set({}, std::nullopt);
    CHECK_FALSE(hooks.bound_prefix().has_value());
    hooks.bind_prefix(Tensor::zeros({2, 3}));
    hooks.clear_prefix();
    CHECK_FALSE(hooks.bound_prefix().has_value());
}

TEST_CASE("epoch counter detects mid-episode mutation") {
    ToyModel model;
    const std::uint64_t start = model.hooks.epoch();
    model.hooks.assert_epoch(start, "generation");  // unchanged: fine
    model.hooks.register_hook("stage.a", [](const Tensor& t) { return Tensor::zeros(t.shape()); });
    CHECK_THROWS_AS(model.hooks.assert_epoch(start, "generation"), StateError);
}

TEST_CASE("site dump lists names, contracts and hook status") {
    ToyModel model;
    model.hooks.register_hook("stage.b", [](const Tensor& t) { return Tensor::zeros(t.shape()); });
    const std::string dump = model.hooks.dump_sites();
    CHECK(dump.find("stage.a [2x2]") != std::string::npos);
    CHECK(dump.find("stage.b [2x2] [hooked]") != std::string::npos);
}
