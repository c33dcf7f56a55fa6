#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "davqa/backbone.hpp"
#include "davqa/errors.hpp"
#include "davqa/rng.hpp"
#include "davqa/sha256.hpp"

namespace davqa {

// ---- closed 64-token vocabulary ----

namespace vocab {

inline constexpr int pad = 0;
inline constexpr int end = 1;
inline constexpr int yes = 12;
inline constexpr int no = 13;

inline int digit(int d) {
    if (d < 0 || d > 9) throw IndexError("digit token out of range: " + std::to_string(d));
    return 2 + d;
}

inline const std::vector<std::string>& table() {
    static const std::vector<std::string> words = [] {
        std::vector<std::string> w{"<pad>", "<end>", "0", "1", "2",  "3",    "4",     "5",
                                   "6",     "7",     "8", "9", "yes", "no",   "how",   "many",
                                   "blobs", "are",   "there", "is", "an",   "odd",  "shape", "present",
                                   "dots",  "in",    "total", "what", "plus", "which", "bar",  "tallest"};
        while (w.size() < 64) w.push_back("w" + std::to_string(w.size()));
        return w;
    }();
    return words;
}

inline int id(const std::string& word) {
    const auto& t = table();
    for (std::size_t i = 0; i < t.size(); ++i)
        if (t[i] == word) return static_cast<int>(i);
    throw LookupError("word '" + word + "' is not in the vocabulary");
}

inline std::string word(int token) {
    const auto& t = table();
    if (token < 0 || static_cast<std::size_t>(token) >= t.size()) {
        throw IndexError("token id " + std::to_string(token) + " out of vocabulary");
    }
    return t[static_cast<std::size_t>(token)];
}

inline std::vector<int> ids(const std::vector<std::string>& words) {
    std::vector<int> out;
    out.reserve(words.size());
    for (const auto& w : words) out.push_back(id(w));
    return out;
}

inline std::string text(const std::vector<int>& tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        out += word(tokens[i]);
    }
    return out;
}

}  // namespace vocab

// ---- domain specs and samples ----

inline constexpr std::size_t kImageSide = 32;

struct VqaSample {
    std::string domain;
    std::uint64_t seed = 0;
    Image image;
    std::vector<int> question;
    std::vector<int> answer;
};

// Background-intensity bands are disjoint across domains by construction, so
// a threshold on mean intensity already separates them — that is what makes
// the routing classifier's job learnable at desk scale.
struct DomainSpec {
    std::string name;
    int renderer_id = 0;
    double bg_lo = 0.0, bg_hi = 0.0;
    std::vector<int> question;        // fixed template per domain
    std::size_t answer_variants = 0;  // distinct emittable answers (random baseline = 1/this)

    static const std::vector<DomainSpec>& builtin() {
        static const std::vector<DomainSpec> specs = [] {
            std::vector<DomainSpec> s;
            s.push_back({"count", 0, 0.04, 0.12, vocab::ids({"how", "many", "blobs", "are", "there"}), 6});
            s.push_back({"anomaly", 1, 0.28, 0.36, vocab::ids({"is", "an", "odd", "shape", "present"}), 2});
            // answers are the sum digit 2..8, so seven distinct answers
            s.push_back({"arith", 2, 0.52, 0.60, vocab::ids({"how", "many", "dots", "in", "total"}), 7});
            s.push_back({"chart", 3, 0.76, 0.84, vocab::ids({"which", "bar", "is", "tallest"}), 4});
            return s;
        }();
        return specs;
    }

    static const DomainSpec& by_name(const std::string& name) {
        for (const DomainSpec& s : builtin())
            if (s.name == name) return s;
        throw LookupError("unknown domain '" + name + "'");
    }

    static std::size_t index_of(const std::string& name) {
        const auto& all = builtin();
        for (std::size_t i = 0; i < all.size(); ++i)
            if (all[i].name == name) return i;
        throw LookupError("unknown domain '" + name + "'");
    }
};

namespace detail {

// Pixels live on the 1/255 grid so byte export/import is bit-exact.
inline double snap255(double v) {
    v = std::min(1.0, std::max(0.0, v));
    return std::round(v * 255.0) / 255.0;
}

inline void fill_background(Image& img, Rng& rng, double lo, double hi) {
    const double bg = rng.uniform(lo, hi);
    for (std::size_t r = 0; r < kImageSide; ++r) {
        for (std::size_t c = 0; c < kImageSide; ++c) {
            // mild checker texture keeps the background non-constant
            const double texture = (((r / 2) + (c / 2)) % 2) ? 0.015 : 0.0;
            img[r * kImageSide + c] = snap255(bg + texture);
        }
    }
}

inline void paint_rect(Image& img, std::size_t r0, std::size_t c0, std::size_t h, std::size_t w,
                       double value) {
    for (std::size_t r = r0; r < r0 + h; ++r)
        for (std::size_t c = c0; c < c0 + w; ++c) img[r * kImageSide + c] = snap255(value);
}

// Picks n distinct cells of the 4x4 cell grid in shuffled order.
inline std::vector<std::size_t> pick_cells(Rng& rng, std::size_t n) {
    std::vector<std::size_t> cells(16);
    for (std::size_t i = 0; i < 16; ++i) cells[i] = i;
    for (std::size_t i = 15; i > 0; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.uniform_int(i + 1));
        std::swap(cells[i], cells[j]);
    }
    cells.resize(n);
    return cells;
}

inline std::pair<std::size_t, std::size_t> cell_origin(std::size_t cell) {
    return {(cell / 4) * 8, (cell % 4) * 8};
}

}  // namespace detail

// Deterministic sample construction: every random draw comes from a stream
// seeded only by (spec, seed).
inline VqaSample gen_sample(const DomainSpec& spec, std::uint64_t seed) {
    Rng rng(mix_seed(seed, {0x5a3c, static_cast<std::uint64_t>(spec.renderer_id)}));
    VqaSample s;
    s.domain = spec.name;
    s.seed = seed;
    s.question = spec.question;
    s.image.assign(kImageSide * kImageSide, 0.0);
    detail::fill_background(s.image, rng, spec.bg_lo, spec.bg_hi);

    switch (spec.renderer_id) {
        case 0: {  // COUNT: n blobs of varying size and contrast; answer = n.
            // Two faint one-pixel speckles act as distractors: they stay below
            // the blob-intensity convention so the task is counting shapes,
            // not summing brightness. Speckles get their own cells so they
            // can never split a blob into two components.
            const int n = 1 + static_cast<int>(rng.uniform_int(6));
            const std::vector<std::size_t> cells =
                detail::pick_cells(rng, static_cast<std::size_t>(n) + 2);
            for (int k = 0; k < n; ++k) {
                auto [r0, c0] = detail::cell_origin(cells[static_cast<std::size_t>(k)]);
                const std::size_t h = 2 + rng.uniform_int(2), w = 2 + rng.uniform_int(2);
                const std::size_t jr = rng.uniform_int(6 - h), jc = rng.uniform_int(6 - w);
                detail::paint_rect(s.image, r0 + 1 + jr, c0 + 1 + jc, h, w,
                                   rng.uniform(0.34, 0.66));
            }
            for (std::size_t k = static_cast<std::size_t>(n); k < cells.size(); ++k) {
                auto [r0, c0] = detail::cell_origin(cells[k]);
                detail::paint_rect(s.image, r0 + 2 + rng.uniform_int(4), c0 + 2 + rng.uniform_int(4),
                                   1, 1, 0.2);
            }
            s.answer = {vocab::digit(n)};
            break;
        }
        case 1: {  // ANOMALY: jittered 2x2 squares everywhere; one slightly
                   // brighter L-shape half the time. The contrast between the
                   // planted shape (0.62) and the regular squares (0.5) is kept
                   // subtle on purpose so the task does not saturate.
            std::array<std::pair<std::size_t, std::size_t>, 16> spots{};
            for (std::size_t cell = 0; cell < 16; ++cell) {
                auto [r0, c0] = detail::cell_origin(cell);
                spots[cell] = {r0 + 2 + rng.uniform_int(3), c0 + 2 + rng.uniform_int(3)};
                detail::paint_rect(s.image, spots[cell].first, spots[cell].second, 2, 2, 0.5);
            }
            const bool planted = rng.bernoulli(0.5);
            if (planted) {
                const std::size_t cell = rng.uniform_int(16);
                auto [r, c] = spots[cell];
                detail::paint_rect(s.image, r, c, 2, 2, 0.62);
                detail::paint_rect(s.image, r + 2, c, 1, 1, 0.62);  // the irregular foot
            }
            s.answer = {planted ? vocab::yes : vocab::no};
            break;
        }
        case 2: {  // ARITH: a dots left, b dots right; answer "a plus b is a+b"
            const int a = 1 + static_cast<int>(rng.uniform_int(4));
            const int b = 1 + static_cast<int>(rng.uniform_int(4));
            // left half cells: grid columns 0..1; right half: 2..3
            auto place = [&](int count, std::size_t col_base) {
                std::vector<std::size_t> cells;  // 8 cells per half
                for (std::size_t i = 0; i < 8; ++i) cells.push_back((i / 2) * 4 + col_base + (i % 2));
                for (std::size_t i = 7; i > 0; --i) {
                    const std::size_t j = static_cast<std::size_t>(rng.uniform_int(i + 1));
                    std::swap(cells[i], cells[j]);
                }
                for (int k = 0; k < count; ++k) {
                    auto [r0, c0] = detail::cell_origin(cells[static_cast<std::size_t>(k)]);
                    const std::size_t jr = rng.uniform_int(4), jc = rng.uniform_int(4);
                    detail::paint_rect(s.image, r0 + 1 + jr, c0 + 1 + jc, 2, 2, 0.9);
                }
            };
            place(a, 0);
            place(b, 2);
            s.answer = {vocab::digit(a + b)};  // the sum digit is the whole answer
            break;
        }
        case 3: {  // CHART: four bars, unique tallest; answer "bar k is tallest".
                   // The tallest bar clears every distractor by several rows so
                   // the comparison is visually decisive rather than a near-tie.
            const std::size_t tallest = rng.uniform_int(4);
            const int peak = 20 + static_cast<int>(rng.uniform_int(7));  // 20..26
            std::array<int, 4> heights{};
            heights[tallest] = peak;
            for (std::size_t i = 0; i < 4; ++i) {
                if (i == tallest) continue;
                int h;
                bool fresh;
                do {
                    h = 5 + static_cast<int>(rng.uniform_int(9));  // 5..13
                    fresh = true;
                    for (std::size_t j = 0; j < i; ++j) fresh = fresh && (j == tallest || heights[j] != h);
                } while (!fresh);
                heights[i] = h;
            }
            for (std::size_t i = 0; i < 4; ++i) {
                detail::paint_rect(s.image, kImageSide - static_cast<std::size_t>(heights[i]), i * 8 + 1,
                                   static_cast<std::size_t>(heights[i]), 6, 0.95);
            }
            s.answer = {vocab::id("bar"), vocab::digit(static_cast<int>(tallest) + 1), vocab::id("is"),
                        vocab::id("tallest")};
            break;
        }
        default:
            throw ConfigError("unknown renderer id " + std::to_string(spec.renderer_id));
    }
    return s;
}

// ---- image-based answer oracle ----

namespace detail {

inline std::size_t count_components_above(const Image& img, double threshold, std::size_t col_begin,
                                          std::size_t col_end) {
    std::vector<bool> seen(kImageSide * kImageSide, false);
    std::size_t components = 0;
    std::vector<std::size_t> stack;
    for (std::size_t r = 0; r < kImageSide; ++r) {
        for (std::size_t c = col_begin; c < col_end; ++c) {
            const std::size_t i = r * kImageSide + c;
            if (seen[i] || img[i] <= threshold) continue;
            ++components;
            stack.push_back(i);
            seen[i] = true;
            while (!stack.empty()) {
                const std::size_t j = stack.back();
                stack.pop_back();
                const std::size_t jr = j / kImageSide, jc = j % kImageSide;
                const std::size_t neighbors[4][2] = {
                    {jr, jc + 1}, {jr, jc - 1}, {jr + 1, jc}, {jr - 1, jc}};
                for (const auto& n : neighbors) {
                    if (n[0] >= kImageSide || n[1] < col_begin || n[1] >= col_end) continue;
                    const std::size_t k = n[0] * kImageSide + n[1];
                    if (!seen[k] && img[k] > threshold) {
                        seen[k] = true;
                        stack.push_back(k);
                    }
                }
            }
        }
    }
    return components;
}

}  // namespace detail

// Re-derives the gold answer from pixels alone (the question fixes the task).
// This is the self-consistency oracle for generated data: it shares no state
// with the renderer beyond the published intensity conventions.
inline std::vector<int> oracle_answer(const VqaSample& sample) {
    const DomainSpec& spec = DomainSpec::by_name(sample.domain);
    switch (spec.renderer_id) {
        case 0:
            return {vocab::digit(static_cast<int>(
                detail::count_components_above(sample.image, 0.3, 0, kImageSide)))};
        case 1: {
            // anything brighter than the regular squares (0.5) is the anomaly
            for (double v : sample.image)
                if (v > 0.56) return {vocab::yes};
            return {vocab::no};
        }
        case 2: {
            const int a = static_cast<int>(
                detail::count_components_above(sample.image, 0.75, 0, kImageSide / 2));
            const int b = static_cast<int>(
                detail::count_components_above(sample.image, 0.75, kImageSide / 2, kImageSide));
            return {vocab::digit(a + b)};
        }
        case 3: {
            std::size_t best = 0, best_h = 0;
            for (std::size_t i = 0; i < 4; ++i) {
                std::size_t h = 0;
                for (std::size_t r = 0; r < kImageSide; ++r)
                    h += sample.image[r * kImageSide + i * 8 + 2] > 0.9 ? 1 : 0;
                if (h > best_h) {
                    best_h = h;
                    best = i;
                }
            }
            return {vocab::id("bar"), vocab::digit(static_cast<int>(best) + 1), vocab::id("is"),
                    vocab::id("tallest")};
        }
        default:
            throw ConfigError("unknown renderer for domain '" + sample.domain + "'");
    }
}

// ---- dataset assembly ----

enum class Split { train = 1, val = 2, test = 3 };

struct Dataset {
    std::vector<VqaSample> train, val, test;
    std::uint64_t master_seed = 0;
    std::size_t n_per_domain = 0;
};

inline std::uint64_t sample_seed(std::uint64_t master, std::size_t domain_index, Split split,
                                 std::size_t index) {
    return mix_seed(master, {0xda7a, domain_index + 1, static_cast<std::uint64_t>(split), index});
}

inline Dataset gen_dataset(const std::vector<DomainSpec>& specs, std::size_t n_per_domain,
                           std::array<double, 3> ratios, std::uint64_t seed) {
    const double total = ratios[0] + ratios[1] + ratios[2];
    if (std::abs(total - 1.0) > 1e-9) {
        throw ConfigError("split ratios sum to " + std::to_string(total) + ", expected 1");
    }
    Dataset ds;
    ds.master_seed = seed;
    ds.n_per_domain = n_per_domain;
    const auto n_train = static_cast<std::size_t>(std::llround(ratios[0] * static_cast<double>(n_per_domain)));
    const auto n_val = static_cast<std::size_t>(std::llround(ratios[1] * static_cast<double>(n_per_domain)));
    const std::size_t n_test = n_per_domain - n_train - n_val;
    for (std::size_t d = 0; d < specs.size(); ++d) {
        const std::size_t di = DomainSpec::index_of(specs[d].name);
        for (std::size_t i = 0; i < n_train; ++i)
            ds.train.push_back(gen_sample(specs[d], sample_seed(seed, di, Split::train, i)));
        for (std::size_t i = 0; i < n_val; ++i)
            ds.val.push_back(gen_sample(specs[d], sample_seed(seed, di, Split::val, i)));
        for (std::size_t i = 0; i < n_test; ++i)
            ds.test.push_back(gen_sample(specs[d], sample_seed(seed, di, Split::test, i)));
    }
    return ds;
}

// ---- JSONL export / import ----

namespace detail {

inline const char* b64_alphabet() {
    return "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

inline std::string b64_encode(const std::vector<std::uint8_t>& bytes) {
    const char* tab = b64_alphabet();
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    for (std::size_t i = 0; i < bytes.size(); i += 3) {
        std::uint32_t chunk = static_cast<std::uint32_t>(bytes[i]) << 16;
        if (i + 1 < bytes.size()) chunk |= static_cast<std::uint32_t>(bytes[i + 1]) << 8;
        if (i + 2 < bytes.size()) chunk |= bytes[i + 2];
        out += tab[(chunk >> 18) & 63];
        out += tab[(chunk >> 12) & 63];
        out += i + 1 < bytes.size() ? tab[(chunk >> 6) & 63] : '=';
        out += i + 2 < bytes.size() ? tab[chunk & 63] : '=';
    }
    return out;
}

inline std::vector<std::uint8_t> b64_decode(const std::string& text) {
    auto value_of = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    if (text.size() % 4 != 0) throw FormatError("base64 length not a multiple of 4");
    std::vector<std::uint8_t> out;
    out.reserve(text.size() / 4 * 3);
    for (std::size_t i = 0; i < text.size(); i += 4) {
        std::uint32_t chunk = 0;
        int pads = 0;
        for (std::size_t j = 0; j < 4; ++j) {
            chunk <<= 6;
            const char c = text[i + j];
            if (c == '=') {
                ++pads;
            } else {
                const int v = value_of(c);
                if (v < 0 || pads > 0) throw FormatError("invalid base64 character");
                chunk |= static_cast<std::uint32_t>(v);
            }
        }
        out.push_back(static_cast<std::uint8_t>((chunk >> 16) & 0xff));
        if (pads < 2) out.push_back(static_cast<std::uint8_t>((chunk >> 8) & 0xff));
        if (pads < 1) out.push_back(static_cast<std::uint8_t>(chunk & 0xff));
    }
    return out;
}

}  // namespace detail

inline nlohmann::json sample_to_json(const VqaSample& s) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t r = 0; r < kImageSide; ++r) {
        std::vector<std::uint8_t> row(kImageSide);
        for (std::size_t c = 0; c < kImageSide; ++c) {
            row[c] = static_cast<std::uint8_t>(std::llround(s.image[r * kImageSide + c] * 255.0));
        }
        rows.push_back(detail::b64_encode(row));
    }
    nlohmann::json j;
    j["domain"] = s.domain;
    j["seed"] = s.seed;
    j["question_tokens"] = s.question;
    j["answer_tokens"] = s.answer;
    j["image_base64_rows"] = std::move(rows);
    return j;
}

inline VqaSample sample_from_json(const nlohmann::json& j) {
    VqaSample s;
    s.domain = j.at("domain").get<std::string>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.question = j.at("question_tokens").get<std::vector<int>>();
    s.answer = j.at("answer_tokens").get<std::vector<int>>();
    const auto& rows = j.at("image_base64_rows");
    if (rows.size() != kImageSide) {
        throw FormatError("expected " + std::to_string(kImageSide) + " image rows, got " +
                          std::to_string(rows.size()));
    }
    s.image.assign(kImageSide * kImageSide, 0.0);
    for (std::size_t r = 0; r < kImageSide; ++r) {
        const std::vector<std::uint8_t> row = detail::b64_decode(rows[r].get<std::string>());
        if (row.size() != kImageSide) throw FormatError("image row " + std::to_string(r) + " has wrong width");
        for (std::size_t c = 0; c < kImageSide; ++c) s.image[r * kImageSide + c] = row[c] / 255.0;
    }
    return s;
}

inline void export_dataset(const std::vector<VqaSample>& samples, const std::filesystem::path& path) {
    if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FileError("cannot open dataset file for writing: " + path.string());
    for (const VqaSample& s : samples) out << sample_to_json(s).dump() << '\n';
    if (!out) throw FileError("short write exporting dataset: " + path.string());
}

inline std::vector<VqaSample> import_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FileError("cannot open dataset file: " + path.string());
    std::vector<VqaSample> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            out.push_back(sample_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("line " + std::to_string(line_no) + " of " + path.string() +
                              " is not a valid sample record: " + e.what());
        } catch (const FormatError& e) {
            throw FormatError("line " + std::to_string(line_no) + " of " + path.string() + ": " + e.what());
        }
    }
    return out;
}

inline std::string file_sha256(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FileError("cannot hash missing file: " + path.string());
    Sha256 h;
    char buf[65536];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        h.update(buf, static_cast<std::size_t>(in.gcount()));
        if (!in) break;
    }
    return h.hex_digest();
}

// Writes train/val/test JSONL plus a manifest recording the master seed,
// per-domain sizes and file hashes — the id that evaluation reports cite.
inline std::filesystem::path export_suite(const Dataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    export_dataset(ds.train, dir / "train.jsonl");
    export_dataset(ds.val, dir / "val.jsonl");
    export_dataset(ds.test, dir / "test.jsonl");
    nlohmann::json manifest;
    manifest["master_seed"] = ds.master_seed;
    manifest["n_per_domain"] = ds.n_per_domain;
    manifest["counts"] = {{"train", ds.train.size()}, {"val", ds.val.size()}, {"test", ds.test.size()}};
    nlohmann::json domains = nlohmann::json::array();
    for (const DomainSpec& s : DomainSpec::builtin()) domains.push_back(s.name);
    manifest["domains"] = std::move(domains);
    manifest["files"] = {{"train.jsonl", file_sha256(dir / "train.jsonl")},
                         {"val.jsonl", file_sha256(dir / "val.jsonl")},
                         {"test.jsonl", file_sha256(dir / "test.jsonl")}};
    const std::filesystem::path mpath = dir / "manifest.json";
    std::ofstream out(mpath, std::ios::trunc);
    if (!out) throw FileError("cannot write dataset manifest: " + mpath.string());
    out << manifest.dump(2) << '\n';
    return mpath;
}

}  // namespace davqa
