#pragma once

// Multi-reference corpus BLEU-4. Per-sentence statistics are additive; the
// corpus score applies the brevity penalty once over the summed counts and
// uses no smoothing, so any empty n-gram precision zeroes the score.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "alst/error.hpp"
#include "alst/text.hpp"

namespace alst {

struct BleuStats {
    std::array<std::int64_t, 4> matches{};  // clipped n-gram matches, n = index+1
    std::array<std::int64_t, 4> totals{};   // candidate n-gram counts
    std::int64_t cand_len = 0;
    std::int64_t ref_len = 0;  // effective (closest) reference length

    BleuStats& operator+=(const BleuStats& o) {
        for (int n = 0; n < 4; ++n) {
            matches[static_cast<std::size_t>(n)] += o.matches[static_cast<std::size_t>(n)];
            totals[static_cast<std::size_t>(n)] += o.totals[static_cast<std::size_t>(n)];
        }
        cand_len += o.cand_len;
        ref_len += o.ref_len;
        return *this;
    }
};

struct BleuScore {
    double bleu = 0.0;  // in [0,100]
    std::array<double, 4> precisions{};
    double brevity_penalty = 1.0;
    std::int64_t cand_len = 0;
    std::int64_t ref_len = 0;
};

// Clipped n-gram statistics for one sentence against 1..4 references.
// Clipping uses the max count of each n-gram across references; the
// effective reference length is the closest to the candidate, ties going
// to the shorter reference.
inline BleuStats sentence_stats(const std::vector<std::string>& candidate,
                                const std::vector<std::vector<std::string>>& references) {
    if (references.empty()) throw data_error("bleu: at least one reference required");
    BleuStats s;
    s.cand_len = static_cast<std::int64_t>(candidate.size());

    std::int64_t best_diff = -1;
    for (const auto& ref : references) {
        const auto len = static_cast<std::int64_t>(ref.size());
        const std::int64_t diff = std::llabs(len - s.cand_len);
        if (best_diff < 0 || diff < best_diff || (diff == best_diff && len < s.ref_len)) {
            best_diff = diff;
            s.ref_len = len;
        }
    }

    for (int n = 1; n <= 4; ++n) {
        const auto ulen = static_cast<std::int64_t>(candidate.size());
        if (ulen < n) break;
        std::map<std::vector<std::string>, std::int64_t> cand_counts;
        for (std::int64_t i = 0; i + n <= ulen; ++i)
            ++cand_counts[{candidate.begin() + i, candidate.begin() + i + n}];

        std::map<std::vector<std::string>, std::int64_t> clip;
        for (const auto& ref : references) {
            std::map<std::vector<std::string>, std::int64_t> rc;
            for (std::size_t i = 0; i + n <= ref.size(); ++i)
                ++rc[{ref.begin() + static_cast<std::ptrdiff_t>(i),
                      ref.begin() + static_cast<std::ptrdiff_t>(i) + n}];
            for (const auto& [gram, count] : rc) {
                auto& c = clip[gram];
                c = std::max(c, count);
            }
        }

        auto& m = s.matches[static_cast<std::size_t>(n - 1)];
        for (const auto& [gram, count] : cand_counts) {
            const auto it = clip.find(gram);
            if (it != clip.end()) m += std::min(count, it->second);
        }
        s.totals[static_cast<std::size_t>(n - 1)] = ulen - n + 1;
    }
    return s;
}

inline BleuScore corpus_bleu(const BleuStats& s) {
    if (s.totals[0] <= 0) throw data_error("bleu: empty corpus (no candidate unigrams)");
    BleuScore out;
    out.cand_len = s.cand_len;
    out.ref_len = s.ref_len;
    out.brevity_penalty =
        s.cand_len >= s.ref_len
            ? 1.0
            : std::exp(1.0 - static_cast<double>(s.ref_len) / static_cast<double>(s.cand_len));
    double log_sum = 0.0;
    bool any_zero = false;
    for (int n = 0; n < 4; ++n) {
        const auto i = static_cast<std::size_t>(n);
        out.precisions[i] = s.totals[i] > 0
                                ? static_cast<double>(s.matches[i]) / static_cast<double>(s.totals[i])
                                : 0.0;
        if (out.precisions[i] <= 0.0)
            any_zero = true;
        else
            log_sum += std::log(out.precisions[i]);
    }
    out.bleu = any_zero ? 0.0 : 100.0 * out.brevity_penalty * std::exp(log_sum / 4.0);
    return out;
}

// Evaluation tokenization: lowercase, strip punctuation, split whitespace.
inline std::vector<std::string> tokenize_eval(const std::string& text) {
    return split_whitespace(normalize_eval(text));
}

}  // namespace alst
