#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "davqa/checkpoint.hpp"

using namespace davqa;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const char* name) {
    fs::path dir = fs::temp_directory_path() / "davqa_ckpt_tests";
    fs::create_directories(dir);
    return dir / name;
}

ParameterStore make_store(double offset = 0.0) {
    ParameterStore s;
    Rng rng(31);
    s.add("vision.patch_proj", Tensor::randn({8, 4}, rng));
    s.add("vision.block.1.w", Tensor::randn({4, 4}, rng), false);
    Tensor bias = Tensor::from({4}, {0.1 + offset, 0.2, 0.3, 0.4});
    s.add("text.bias", bias);
    return s;
}

}  // namespace

TEST_CASE("checkpoint round-trips values, shapes and metadata") {
    const fs::path path = temp_file("roundtrip.ckpt");
    ParameterStore store = make_store();
    nlohmann::json meta{{"domain", "count"}, {"l", 10}};
    ckpt::save(store, path, meta);

    ckpt::Checkpoint ck = ckpt::load(path);
    REQUIRE(ck.records.size() == 3);
    CHECK(ck.meta.at("domain") == "count");
    CHECK(ck.meta.at("l") == 10);
    CHECK(ck.records[0].name == "vision.patch_proj");
    CHECK(ck.records[0].shape == Shape{8, 4});

    // loading into a differently-valued store makes it byte-identical
    ParameterStore other = make_store(0.5);
    CHECK(other.checksum() != store.checksum());
    ckpt::load_into(ck, other);
    CHECK(other.checksum() == store.checksum());

    // single-record extraction matches the stored tensor
    Tensor bias = ck.tensor_of("text.bias");
    CHECK(bias.data() == store.at("text.bias").tensor.data());
}

TEST_CASE("checkpoint rejects foreign and corrupted files") {
    SECTION("missing file") {
        CHECK_THROWS_AS(ckpt::load(temp_file("nope.ckpt")), FileError);
    }
    SECTION("wrong magic") {
        const fs::path path = temp_file("foreign.bin");
        std::ofstream(path, std::ios::binary) << "GGUFxxxx-not-our-format-at-all";
        CHECK_THROWS_AS(ckpt::load(path), FormatError);
    }
    SECTION("flipped payload byte is caught by the checksum") {
        const fs::path path = temp_file("corrupt.ckpt");
        ckpt::save(make_store(), path);
        auto size = fs::file_size(path);
        std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(static_cast<std::streamoff>(size - 5));
        char b = 0x7f;
        f.write(&b, 1);
        f.close();
        try {
            ckpt::load(path);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(std::string(e.what()).find("checksum") != std::string::npos);
        }
    }
    SECTION("truncated payload") {
        const fs::path path = temp_file("trunc.ckpt");
        ckpt::save(make_store(), path);
        fs::resize_file(path, fs::file_size(path) - 16);
        CHECK_THROWS_AS(ckpt::load(path), FormatError);
    }
}

TEST_CASE("load_into insists on an exact parameter match") {
    const fs::path path = temp_file("mismatch.ckpt");
    ckpt::save(make_store(), path);
    ckpt::Checkpoint ck = ckpt::load(path);

    SECTION("missing parameter") {
        ParameterStore store;
        store.add("vision.patch_proj", Tensor::zeros({8, 4}));
        CHECK_THROWS_AS(ckpt::load_into(ck, store), ContractError);
    }
    SECTION("shape drift") {
        ParameterStore store;
        store.add("vision.patch_proj", Tensor::zeros({4, 8}));
        store.add("vision.block.1.w", Tensor::zeros({4, 4}));
        store.add("text.bias", Tensor::zeros({4}));
        CHECK_THROWS_AS(ckpt::load_into(ck, store), ShapeError);
    }
    SECTION("renamed parameter") {
        ParameterStore store;
        store.add("vision.patch_projX", Tensor::zeros({8, 4}));
        store.add("vision.block.1.w", Tensor::zeros({4, 4}));
        store.add("text.bias", Tensor::zeros({4}));
        CHECK_THROWS_AS(ckpt::load_into(ck, store), LookupError);
    }
}

TEST_CASE("saving twice produces byte-identical files") {
    const fs::path p1 = temp_file("det1.ckpt"), p2 = temp_file("det2.ckpt");
    ckpt::save(make_store(), p1, {{"k", "v"}});
    ckpt::save(make_store(), p2, {{"k", "v"}});
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), {});
    std::string b2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(b1 == b2);
    CHECK(b1.size() > 0);
}
