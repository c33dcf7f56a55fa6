#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "davqa/errors.hpp"

namespace davqa {

using TokenSeq = std::vector<int>;

// ---- exact-match metrics ----

inline double accuracy(const std::vector<TokenSeq>& predictions, const std::vector<TokenSeq>& golds) {
    if (predictions.size() != golds.size()) {
        throw ContractError("accuracy: " + std::to_string(predictions.size()) + " predictions vs " +
                            std::to_string(golds.size()) + " golds");
    }
    if (predictions.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i)
        if (predictions[i] == golds[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

// With a single gold answer per sample the multi-annotator consensus score
// collapses to exact match; kept as its own column for table parity.
inline double vqa_score(const std::vector<TokenSeq>& predictions, const std::vector<TokenSeq>& golds) {
    return accuracy(predictions, golds);
}

// ---- sentence BLEU ----

namespace detail {

inline std::map<std::vector<int>, int> ngram_counts(const TokenSeq& seq, std::size_t n) {
    std::map<std::vector<int>, int> counts;
    if (seq.size() < n) return counts;
    for (std::size_t i = 0; i + n <= seq.size(); ++i)
        counts[std::vector<int>(seq.begin() + static_cast<std::ptrdiff_t>(i),
                                seq.begin() + static_cast<std::ptrdiff_t>(i + n))]++;
    return counts;
}

}  // namespace detail

// Uniform-weight sentence BLEU over orders 1..4. Orders where the candidate
// has no n-grams at all drop out of the geometric mean; orders with n-grams
// but zero matches enter with epsilon so one miss does not zero the score.
inline double bleu(const TokenSeq& candidate, const TokenSeq& reference) {
    if (reference.empty()) throw ContractError("bleu: empty reference");
    if (candidate.empty()) return 0.0;
    constexpr double epsilon = 1e-9;
    double log_sum = 0.0;
    std::size_t used_orders = 0;
    for (std::size_t n = 1; n <= 4; ++n) {
        const auto cand = detail::ngram_counts(candidate, n);
        if (cand.empty()) continue;  // order skipped entirely
        const auto ref = detail::ngram_counts(reference, n);
        std::size_t total = 0, clipped = 0;
        for (const auto& [gram, count] : cand) {
            total += static_cast<std::size_t>(count);
            const auto it = ref.find(gram);
            if (it != ref.end()) clipped += static_cast<std::size_t>(std::min(count, it->second));
        }
        const double p = clipped > 0
                             ? static_cast<double>(clipped) / static_cast<double>(total)
                             : epsilon;
        log_sum += std::log(p);
        ++used_orders;
    }
    if (used_orders == 0) return 0.0;
    const double geo = std::exp(log_sum / static_cast<double>(used_orders));
    const double c = static_cast<double>(candidate.size());
    const double r = static_cast<double>(reference.size());
    const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
    return bp * geo;
}

// ---- ROUGE-L ----

inline double rouge_l(const TokenSeq& candidate, const TokenSeq& reference, bool* warned = nullptr) {
    if (candidate.empty() || reference.empty()) {
        if (warned) *warned = true;
        return 0.0;
    }
    const std::size_t n = candidate.size(), m = reference.size();
    std::vector<std::size_t> prev(m + 1, 0), cur(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        for (std::size_t j = 1; j <= m; ++j) {
            cur[j] = candidate[i - 1] == reference[j - 1] ? prev[j - 1] + 1
                                                          : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    const double lcs = static_cast<double>(prev[m]);
    if (lcs == 0.0) return 0.0;
    const double p = lcs / static_cast<double>(n);
    const double r = lcs / static_cast<double>(m);
    return 2.0 * p * r / (p + r);
}

// ---- METEOR-lite ----

namespace detail {

// Exact search for the minimum chunk count over all maximum-cardinality 1-1
// exact-token alignments. Sequences here are short generated answers, so the
// masked DFS with memoization stays tiny.
struct ChunkSearch {
    const TokenSeq& cand;
    const TokenSeq& ref;
    // memo key: candidate position, used-reference mask, index-after-previous
    // match (0 = previous candidate token unmatched)
    std::map<std::tuple<std::size_t, std::uint64_t, std::size_t>, std::pair<int, int>> memo;

    std::pair<int, int> best(std::size_t ci, std::uint64_t mask, std::size_t cont) {
        // returns {max matches, min chunks} for the suffix starting at ci
        if (ci == cand.size()) return {0, 0};
        const auto key = std::make_tuple(ci, mask, cont);
        const auto it = memo.find(key);
        if (it != memo.end()) return it->second;
        // option: leave cand[ci] unmatched
        std::pair<int, int> result = best(ci + 1, mask, 0);
        for (std::size_t rj = 0; rj < ref.size(); ++rj) {
            if (ref[rj] != cand[ci] || (mask >> rj) & 1u) continue;
            // cont encodes (index that would extend the current chunk) + 1
            const bool continues = cont != 0 && rj + 1 == cont;
            auto sub = best(ci + 1, mask | (1ull << rj), rj + 2);
            sub.first += 1;
            sub.second += continues ? 0 : 1;
            if (sub.first > result.first ||
                (sub.first == result.first && sub.second < result.second)) {
                result = sub;
            }
        }
        memo.emplace(key, result);
        return result;
    }
};

}  // namespace detail

inline double meteor_lite(const TokenSeq& candidate, const TokenSeq& reference,
                          bool* warned = nullptr) {
    if (candidate.empty() || reference.empty()) {
        if (warned) *warned = true;
        return 0.0;
    }
    if (reference.size() > 63) throw ContractError("meteor_lite: reference longer than 63 tokens");
    detail::ChunkSearch search{candidate, reference, {}};
    const auto [matches, chunks] = search.best(0, 0, 0);
    if (matches == 0) return 0.0;
    const double m = matches;
    const double p = m / static_cast<double>(candidate.size());
    const double r = m / static_cast<double>(reference.size());
    constexpr double alpha = 0.9;  // recall-weighted harmonic mean
    const double f = p * r / (alpha * p + (1.0 - alpha) * r);
    const double frag = static_cast<double>(chunks) / m;
    const double penalty = 1.0 - 0.5 * frag * frag * frag;
    return f * penalty;
}

// ---- aggregated evaluation report ----

struct MetricRow {
    double accuracy = 0.0;
    double vqa = 0.0;
    double bleu = 0.0;
    double rouge_l = 0.0;
    double meteor = 0.0;
    std::size_t count = 0;
};

inline MetricRow compute_row(const std::vector<TokenSeq>& predictions,
                             const std::vector<TokenSeq>& golds) {
    MetricRow row;
    row.count = predictions.size();
    row.accuracy = accuracy(predictions, golds);
    row.vqa = vqa_score(predictions, golds);
    if (predictions.empty()) return row;
    double b = 0.0, rl = 0.0, mt = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        b += bleu(predictions[i], golds[i]);
        rl += rouge_l(predictions[i], golds[i]);
        mt += meteor_lite(predictions[i], golds[i]);
    }
    const auto n = static_cast<double>(predictions.size());
    row.bleu = b / n;
    row.rouge_l = rl / n;
    row.meteor = mt / n;
    return row;
}

struct EvalReport {
    std::map<std::string, MetricRow> per_domain;
    MetricRow overall;
    nlohmann::json config_echo;
};

inline nlohmann::json row_to_json(const MetricRow& r) {
    return {{"accuracy", r.accuracy}, {"vqa_score", r.vqa},   {"bleu", r.bleu},
            {"rouge_l", r.rouge_l},   {"meteor", r.meteor},    {"count", r.count}};
}

inline nlohmann::json report_to_json(const EvalReport& rep) {
    nlohmann::json j;
    for (const auto& [name, row] : rep.per_domain) j["per_domain"][name] = row_to_json(row);
    j["overall"] = row_to_json(rep.overall);
    j["config"] = rep.config_echo;
    return j;
}

// Plain-text metric-by-domain grid; values scaled x100 to match the usual
// table convention.
inline std::string report_to_table(const EvalReport& rep) {
    std::vector<std::string> domains;
    for (const auto& [name, row] : rep.per_domain) domains.push_back(name);
    std::ostringstream out;
    auto cell = [&](const std::string& s) {
        out << s;
        for (std::size_t i = s.size(); i < 10; ++i) out << ' ';
    };
    auto num = [&](double v) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.2f", v * 100.0);
        cell(buf);
    };
    cell("metric");
    for (const auto& d : domains) cell(d);
    cell("overall");
    out << '\n';
    const std::vector<std::pair<std::string, double MetricRow::*>> fields = {
        {"accuracy", &MetricRow::accuracy}, {"vqa", &MetricRow::vqa},
        {"bleu", &MetricRow::bleu},         {"rouge_l", &MetricRow::rouge_l},
        {"meteor", &MetricRow::meteor}};
    for (const auto& [label, member] : fields) {
        cell(label);
        for (const auto& d : domains) num(rep.per_domain.at(d).*member);
        num(rep.overall.*member);
        out << '\n';
    }
    cell("samples");
    for (const auto& d : domains) cell(std::to_string(rep.per_domain.at(d).count));
    cell(std::to_string(rep.overall.count));
    out << '\n';
    return out.str();
}

}  // namespace davqa
