#pragma once

// Independent reference implementations of the evaluation metrics, written
// from the metric definitions with deliberately different algorithms than
// the library (explicit n-gram lists, full DP tables, exhaustive alignment
// search). Shared by the metric tests and the acceptance gate.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "davqa/metrics.hpp"

using davqa::TokenSeq;

namespace oracle {

// BLEU via explicit n-gram lists and pow-based geometric mean.
inline double bleu(const TokenSeq& cand, const TokenSeq& ref) {
    if (cand.empty()) return 0.0;
    auto grams = [](const TokenSeq& s, std::size_t n) {
        std::vector<std::string> out;
        for (std::size_t i = 0; i + n <= s.size(); ++i) {
            std::string g;
            for (std::size_t j = 0; j < n; ++j) g += std::to_string(s[i + j]) + ",";
            out.push_back(g);
        }
        return out;
    };
    double product = 1.0;
    int used = 0;
    for (std::size_t n = 1; n <= 4; ++n) {
        const auto cg = grams(cand, n);
        if (cg.empty()) continue;
        auto rg = grams(ref, n);
        std::size_t matched = 0;
        for (const auto& g : cg) {
            const auto it = std::find(rg.begin(), rg.end(), g);
            if (it != rg.end()) {
                ++matched;
                rg.erase(it);  // clip by consuming reference grams
            }
        }
        const double p = matched ? static_cast<double>(matched) / static_cast<double>(cg.size())
                                 : 1e-9;
        product *= p;
        ++used;
    }
    if (!used) return 0.0;
    const double geo = std::pow(product, 1.0 / used);
    const double bp =
        cand.size() < ref.size()
            ? std::exp(1.0 - static_cast<double>(ref.size()) / static_cast<double>(cand.size()))
            : 1.0;
    return bp * geo;
}

// ROUGE-L via recursive LCS.
inline std::size_t lcs(const TokenSeq& a, const TokenSeq& b, std::size_t i, std::size_t j) {
    if (i == a.size() || j == b.size()) return 0;
    if (a[i] == b[j]) return 1 + lcs(a, b, i + 1, j + 1);
    return std::max(lcs(a, b, i + 1, j), lcs(a, b, i, j + 1));
}

inline double rouge_l(const TokenSeq& cand, const TokenSeq& ref) {
    if (cand.empty() || ref.empty()) return 0.0;
    const double l = static_cast<double>(lcs(cand, ref, 0, 0));
    if (l == 0.0) return 0.0;
    const double p = l / static_cast<double>(cand.size());
    const double r = l / static_cast<double>(ref.size());
    return 2 * p * r / (p + r);
}

// METEOR-lite via exhaustive alignment enumeration: maximize matches, then
// minimize chunks, no memoization.
inline void enumerate(const TokenSeq& cand, const TokenSeq& ref, std::size_t ci, std::vector<int>& assign,
               std::vector<bool>& used, int& best_matches, int& best_chunks) {
    if (ci == cand.size()) {
        int matches = 0, chunks = 0;
        int prev_ci = -10, prev_rj = -10;
        for (std::size_t i = 0; i < cand.size(); ++i) {
            if (assign[i] < 0) continue;
            ++matches;
            const bool adjacent = static_cast<int>(i) == prev_ci + 1 && assign[i] == prev_rj + 1;
            if (!adjacent) ++chunks;
            prev_ci = static_cast<int>(i);
            prev_rj = assign[i];
        }
        if (matches > best_matches || (matches == best_matches && chunks < best_chunks)) {
            best_matches = matches;
            best_chunks = chunks;
        }
        return;
    }
    assign[ci] = -1;
    enumerate(cand, ref, ci + 1, assign, used, best_matches, best_chunks);
    for (std::size_t rj = 0; rj < ref.size(); ++rj) {
        if (used[rj] || ref[rj] != cand[ci]) continue;
        used[rj] = true;
        assign[ci] = static_cast<int>(rj);
        enumerate(cand, ref, ci + 1, assign, used, best_matches, best_chunks);
        assign[ci] = -1;
        used[rj] = false;
    }
}

inline double meteor(const TokenSeq& cand, const TokenSeq& ref) {
    if (cand.empty() || ref.empty()) return 0.0;
    std::vector<int> assign(cand.size(), -1);
    std::vector<bool> used(ref.size(), false);
    int best_matches = 0, best_chunks = 0;
    enumerate(cand, ref, 0, assign, used, best_matches, best_chunks);
    if (best_matches == 0) return 0.0;
    const double m = best_matches;
    const double p = m / static_cast<double>(cand.size());
    const double r = m / static_cast<double>(ref.size());
    const double f = p * r / (0.9 * p + 0.1 * r);
    const double frag = best_chunks / m;
    return f * (1.0 - 0.5 * frag * frag * frag);
}

}  // namespace oracle
