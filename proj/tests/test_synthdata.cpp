#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>

#include "davqa/synthdata.hpp"

using namespace davqa;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("davqa-synth-" + std::to_string(::getpid()) + "-" +
                                            std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    static int& counter() {
        static int c = 0;
        return c;
    }
};

bool same_bits(const Image& a, const Image& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

double mean_of(const Image& img) {
    double s = 0.0;
    for (double v : img) s += v;
    return s / static_cast<double>(img.size());
}

}  // namespace

TEST_CASE("vocabulary is closed, unique and round-trips") {
    const auto& words = vocab::table();
    REQUIRE(words.size() == 64);
    std::set<std::string> uniq(words.begin(), words.end());
    REQUIRE(uniq.size() == 64);
    for (int d = 0; d <= 9; ++d) REQUIRE(vocab::word(vocab::digit(d)) == std::to_string(d));
    REQUIRE(vocab::id("yes") == vocab::yes);
    REQUIRE(vocab::word(vocab::id("tallest")) == "tallest");
    for (std::size_t i = 0; i < words.size(); ++i) REQUIRE(vocab::id(words[i]) == static_cast<int>(i));
    REQUIRE_THROWS_AS(vocab::id("zebra"), LookupError);
    REQUIRE_THROWS_AS(vocab::word(64), IndexError);
    REQUIRE(vocab::text({vocab::digit(2), vocab::id("plus"), vocab::digit(3)}) == "2 plus 3");
}

TEST_CASE("samples are deterministic in the seed and well-formed") {
    for (const DomainSpec& spec : DomainSpec::builtin()) {
        const VqaSample a = gen_sample(spec, 42);
        const VqaSample b = gen_sample(spec, 42);
        const VqaSample c = gen_sample(spec, 43);
        REQUIRE(same_bits(a.image, b.image));
        REQUIRE(a.answer == b.answer);
        REQUIRE_FALSE(same_bits(a.image, c.image));
        REQUIRE(a.image.size() == kImageSide * kImageSide);
        REQUIRE(a.question == spec.question);
        for (double v : a.image) {
            REQUIRE(v >= 0.0);
            REQUIRE(v <= 1.0);
            // pixels live on the 1/255 grid so byte serialization is lossless
            REQUIRE(v == std::round(v * 255.0) / 255.0);
        }
    }
}

TEST_CASE("stored answers match the image-derived oracle") {
    for (const DomainSpec& spec : DomainSpec::builtin()) {
        for (std::uint64_t s = 0; s < 200; ++s) {
            const VqaSample sample = gen_sample(spec, mix_seed(7, {s}));
            REQUIRE(oracle_answer(sample) == sample.answer);
        }
    }
}

TEST_CASE("answer distributions are balanced") {
    const DomainSpec& anomaly = DomainSpec::by_name("anomaly");
    int yes = 0;
    const int n = 2000;
    for (int i = 0; i < n; ++i) {
        if (gen_sample(anomaly, mix_seed(11, {static_cast<std::uint64_t>(i)})).answer[0] == vocab::yes)
            ++yes;
    }
    const double yes_rate = 100.0 * yes / n;
    REQUIRE(yes_rate >= 47.0);
    REQUIRE(yes_rate <= 53.0);

    const DomainSpec& count = DomainSpec::by_name("count");
    std::map<int, int> hist;
    for (int i = 0; i < n; ++i)
        hist[gen_sample(count, mix_seed(13, {static_cast<std::uint64_t>(i)})).answer[0]]++;
    REQUIRE(hist.size() == 6);  // counts 1..6 all occur
    for (const auto& [tok, freq] : hist) REQUIRE(freq > n / 12);
}

TEST_CASE("mean-intensity bands separate the domains") {
    // a single threshold between each adjacent pair of domains classifies
    // perfectly, which is what makes the router learnable at this scale
    std::map<std::string, std::pair<double, double>> band;  // name -> [min,max]
    for (const DomainSpec& spec : DomainSpec::builtin()) {
        double lo = 1.0, hi = 0.0;
        for (std::uint64_t s = 0; s < 300; ++s) {
            const double m = mean_of(gen_sample(spec, mix_seed(17, {s})).image);
            lo = std::min(lo, m);
            hi = std::max(hi, m);
        }
        band[spec.name] = {lo, hi};
    }
    REQUIRE(band["count"].second < band["anomaly"].first);
    REQUIRE(band["anomaly"].second < band["arith"].first);
    REQUIRE(band["arith"].second < band["chart"].first);
}

TEST_CASE("dataset splits follow the ratios with disjoint seeds") {
    const auto& specs = DomainSpec::builtin();
    const Dataset ds = gen_dataset(specs, 2000, {0.8, 0.1, 0.1}, 99);
    REQUIRE(ds.train.size() == 1600 * specs.size());
    REQUIRE(ds.val.size() == 200 * specs.size());
    REQUIRE(ds.test.size() == 200 * specs.size());

    std::set<std::uint64_t> seeds;
    for (const auto* split : {&ds.train, &ds.val, &ds.test})
        for (const VqaSample& s : *split) seeds.insert(s.seed);
    REQUIRE(seeds.size() == ds.train.size() + ds.val.size() + ds.test.size());

    // per-domain stratification: equal counts per domain in every split
    for (const auto* split : {&ds.train, &ds.val, &ds.test}) {
        std::map<std::string, int> per;
        for (const VqaSample& s : *split) per[s.domain]++;
        REQUIRE(per.size() == specs.size());
        for (const auto& [name, cnt] : per)
            REQUIRE(cnt == static_cast<int>(split->size() / specs.size()));
    }

    REQUIRE_THROWS_AS(gen_dataset(specs, 100, {0.5, 0.2, 0.2}, 1), ConfigError);
}

TEST_CASE("dataset JSONL round-trips bit-exactly") {
    TempDir tmp;
    const auto& specs = DomainSpec::builtin();
    const Dataset ds = gen_dataset(specs, 40, {0.8, 0.1, 0.1}, 5);
    const fs::path file = tmp.path / "train.jsonl";
    export_dataset(ds.train, file);
    const std::vector<VqaSample> back = import_dataset(file);
    REQUIRE(back.size() == ds.train.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        REQUIRE(back[i].domain == ds.train[i].domain);
        REQUIRE(back[i].seed == ds.train[i].seed);
        REQUIRE(back[i].question == ds.train[i].question);
        REQUIRE(back[i].answer == ds.train[i].answer);
        REQUIRE(same_bits(back[i].image, ds.train[i].image));
    }

    // exporting twice yields identical bytes
    const fs::path file2 = tmp.path / "again.jsonl";
    export_dataset(ds.train, file2);
    REQUIRE(file_sha256(file) == file_sha256(file2));
}

TEST_CASE("malformed dataset lines fail with the line number") {
    TempDir tmp;
    const fs::path file = tmp.path / "bad.jsonl";
    const VqaSample good = gen_sample(DomainSpec::by_name("count"), 3);
    {
        std::ofstream out(file);
        out << sample_to_json(good).dump() << '\n';
        out << "{\"domain\": \"count\"}\n";  // missing fields
    }
    try {
        import_dataset(file);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        REQUIRE(std::string(e.what()).find("line 2") != std::string::npos);
    }

    {
        std::ofstream out(file, std::ios::trunc);
        out << "not json at all\n";
    }
    REQUIRE_THROWS_AS(import_dataset(file), FormatError);
    REQUIRE_THROWS_AS(import_dataset(tmp.path / "missing.jsonl"), FileError);
}

TEST_CASE("suite export writes a manifest with the master seed") {
    TempDir tmp;
    const Dataset ds = gen_dataset(DomainSpec::builtin(), 20, {0.8, 0.1, 0.1}, 123);
    const fs::path mpath = export_suite(ds, tmp.path / "data");
    REQUIRE(fs::exists(mpath));
    std::ifstream in(mpath);
    nlohmann::json manifest;
    in >> manifest;
    REQUIRE(manifest["master_seed"].get<std::uint64_t>() == 123);
    REQUIRE(manifest["counts"]["train"].get<std::size_t>() == ds.train.size());
    REQUIRE(manifest["files"]["train.jsonl"].get<std::string>() ==
            file_sha256(tmp.path / "data" / "train.jsonl"));
    for (const std::string name : {"train.jsonl", "val.jsonl", "test.jsonl"})
        REQUIRE(fs::exists(tmp.path / "data" / name));
}

TEST_CASE("generated images feed the backbone directly") {
    BackboneConfig cfg;  // full-size defaults match the generator's geometry
    Backbone model(cfg, 1);
    const VqaSample s = gen_sample(DomainSpec::by_name("chart"), 8);
    const Tensor patches = model.embed_patches(s.image);
    REQUIRE(patches.rows() == cfg.tokens());
    REQUIRE(patches.cols() == cfg.d_v);
}
