#pragma once

// Byte pair encoding over arbitrary symbol sequences: phone labels on the
// source side, characters with an end-of-word marker on the target side.
// Encoding supports BPE-dropout (each applicable merge instance is skipped
// independently with a fixed probability), which regularizes the phone
// segmentation during training.

#include <algorithm>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "alst/error.hpp"
#include "alst/text.hpp"

namespace alst {

struct EncodedSequence {
    std::vector<int> ids;
    // Per id: (start, length) over the base-symbol sequence it covers.
    // Concatenated spans always reconstruct the input order exactly.
    std::vector<std::pair<int, int>> spans;
};

struct CompressionStats {
    double mean_length_ratio = 1.0;  // encoded length / base length, averaged
    double vocab_utilization = 0.0;  // distinct learned units used / learned units
};

class Tokenizer {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kUnk = 3;
    static constexpr int kReserved = 4;

    Tokenizer() {
        units_ = reserved_tags();
        for (std::size_t i = 0; i < units_.size(); ++i) unit_ids_[units_[i]] = static_cast<int>(i);
    }

    // Greedy most-frequent-pair training. Stops once the vocabulary budget
    // (reserved + alphabet + merges <= vocab_size) is spent or no pair
    // occurs at least twice. Ties break on the lexicographically smaller
    // (left, right) unit-string pair. Merge scope is one corpus sequence;
    // pairs never span sequences.
    static Tokenizer train(const std::vector<std::vector<std::string>>& corpus, int vocab_size) {
        if (corpus.empty()) throw data_error("bpe train: empty corpus");
        Tokenizer tok;
        std::map<std::string, bool> seen;
        for (const auto& seq : corpus)
            for (const auto& sym : seq) seen[sym] = true;
        if (seen.empty()) throw data_error("bpe train: corpus has no symbols");
        for (const auto& [sym, _] : seen) {
            for (const auto& tag : reserved_tags())
                if (sym == tag)
                    throw data_error("bpe train: symbol collides with reserved tag " + sym);
            tok.add_unit(sym);
        }
        tok.alphabet_size_ = static_cast<int>(tok.units_.size()) - kReserved;

        const int budget = vocab_size - kReserved - tok.alphabet_size_;
        if (budget < 0)
            throw config_error("bpe train: vocab_size " + std::to_string(vocab_size) +
                               " below reserved + alphabet = " +
                               std::to_string(kReserved + tok.alphabet_size_));

        std::vector<std::vector<int>> seqs;
        seqs.reserve(corpus.size());
        for (const auto& seq : corpus) {
            std::vector<int> ids;
            ids.reserve(seq.size());
            for (const auto& sym : seq) ids.push_back(tok.unit_ids_.at(sym));
            seqs.push_back(std::move(ids));
        }

        for (int m = 0; m < budget; ++m) {
            std::map<std::pair<int, int>, std::int64_t> counts;
            for (const auto& s : seqs)
                for (std::size_t i = 0; i + 1 < s.size(); ++i) ++counts[{s[i], s[i + 1]}];
            std::pair<int, int> best{-1, -1};
            std::int64_t best_count = 0;
            for (const auto& [pair, count] : counts) {
                if (count < 2 || count < best_count) continue;
                const bool take =
                    best.first < 0 || count > best_count ||
                    std::make_pair(tok.units_[static_cast<std::size_t>(pair.first)],
                                   tok.units_[static_cast<std::size_t>(pair.second)]) <
                        std::make_pair(tok.units_[static_cast<std::size_t>(best.first)],
                                       tok.units_[static_cast<std::size_t>(best.second)]);
                if (take) {
                    best = pair;
                    best_count = count;
                }
            }
            if (best.first < 0) break;
            const int out = tok.add_merge(best.first, best.second);
            for (auto& s : seqs) apply_merge(s, best.first, best.second, out);
        }
        return tok;
    }

    // Applies merges in priority order. With dropout_rate > 0 every
    // applicable merge instance is skipped independently with that
    // probability; dropout 0 is deterministic, dropout 1 yields the raw
    // base-symbol ids. Unknown base symbols map to the unk id.
    EncodedSequence encode(const std::vector<std::string>& symbols, double dropout_rate,
                           std::mt19937& rng) const {
        if (dropout_rate < 0.0 || dropout_rate > 1.0)
            throw config_error("bpe encode: dropout must be in [0,1]");
        EncodedSequence enc;
        enc.ids.reserve(symbols.size());
        enc.spans.reserve(symbols.size());
        for (std::size_t i = 0; i < symbols.size(); ++i) {
            const auto it = unit_ids_.find(symbols[i]);
            const bool known =
                it != unit_ids_.end() && it->second >= kReserved && base_or_reserved(it->second);
            enc.ids.push_back(known ? it->second : kUnk);
            enc.spans.emplace_back(static_cast<int>(i), 1);
        }
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (const auto& m : merges_) {
            std::size_t w = 0;
            for (std::size_t i = 0; i < enc.ids.size();) {
                if (i + 1 < enc.ids.size() && enc.ids[i] == m.left && enc.ids[i + 1] == m.right &&
                    !(dropout_rate > 0.0 && u(rng) < dropout_rate)) {
                    enc.ids[w] = m.out;
                    enc.spans[w] = {enc.spans[i].first, enc.spans[i].second + enc.spans[i + 1].second};
                    i += 2;
                } else {
                    enc.ids[w] = enc.ids[i];
                    enc.spans[w] = enc.spans[i];
                    i += 1;
                }
                ++w;
            }
            enc.ids.resize(w);
            enc.spans.resize(w);
        }
        return enc;
    }

    std::vector<int> encode_ids(const std::vector<std::string>& symbols) const {
        std::mt19937 rng(0);  // unused at dropout 0
        return encode(symbols, 0.0, rng).ids;
    }

    std::vector<std::string> decode(const std::vector<int>& ids) const {
        std::vector<std::string> out;
        for (int id : ids) {
            if (id < 0 || id >= static_cast<int>(units_.size()))
                throw data_error("bpe decode: unknown id " + std::to_string(id));
            if (id < kReserved) {
                out.push_back(units_[static_cast<std::size_t>(id)]);
                continue;
            }
            for (auto& sym : split_whitespace(units_[static_cast<std::size_t>(id)]))
                out.push_back(std::move(sym));
        }
        return out;
    }

    int vocab_size() const { return static_cast<int>(units_.size()); }
    int alphabet_size() const { return alphabet_size_; }
    int merge_count() const { return static_cast<int>(merges_.size()); }
    const std::string& unit(int id) const { return units_.at(static_cast<std::size_t>(id)); }
    std::pair<int, int> merge(int idx) const {
        const auto& m = merges_.at(static_cast<std::size_t>(idx));
        return {m.left, m.right};
    }

    // A tokenizer that keeps only the first n merges; the alphabet and all
    // retained ids are unchanged.
    Tokenizer with_merges(int n) const {
        if (n < 0 || n > merge_count())
            throw config_error("bpe: cannot keep " + std::to_string(n) + " of " +
                               std::to_string(merge_count()) + " merges");
        Tokenizer tok;
        tok.units_.assign(units_.begin(),
                          units_.begin() + kReserved + alphabet_size_);
        tok.unit_ids_.clear();
        for (std::size_t i = 0; i < tok.units_.size(); ++i)
            tok.unit_ids_[tok.units_[i]] = static_cast<int>(i);
        tok.alphabet_size_ = alphabet_size_;
        for (int i = 0; i < n; ++i) tok.add_merge(merges_[static_cast<std::size_t>(i)].left,
                                                  merges_[static_cast<std::size_t>(i)].right);
        return tok;
    }

    // Versioned text format: header, alphabet size, alphabet entries, then
    // one merge per line as left<TAB>right unit strings.
    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw data_error("bpe save: cannot open " + path);
        out << "PHONEBPE v1\n" << alphabet_size_ << "\n";
        for (int i = 0; i < alphabet_size_; ++i)
            out << units_[static_cast<std::size_t>(kReserved + i)] << "\n";
        for (const auto& m : merges_)
            out << units_[static_cast<std::size_t>(m.left)] << "\t"
                << units_[static_cast<std::size_t>(m.right)] << "\n";
        if (!out) throw data_error("bpe save: write failed for " + path);
    }

    static Tokenizer load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw data_error("bpe load: cannot open " + path);
        std::string line;
        if (!std::getline(in, line) || line != "PHONEBPE v1")
            throw data_error("bpe load: bad header in " + path);
        if (!std::getline(in, line)) throw data_error("bpe load: missing alphabet size");
        int alphabet = 0;
        try {
            alphabet = std::stoi(line);
        } catch (const std::exception&) {
            throw data_error("bpe load: bad alphabet size '" + line + "'");
        }
        if (alphabet <= 0) throw data_error("bpe load: non-positive alphabet size");
        Tokenizer tok;
        for (int i = 0; i < alphabet; ++i) {
            if (!std::getline(in, line)) throw data_error("bpe load: truncated alphabet");
            if (line.empty() || tok.unit_ids_.count(line))
                throw data_error("bpe load: bad alphabet entry '" + line + "'");
            tok.add_unit(line);
        }
        tok.alphabet_size_ = alphabet;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto tab = line.find('\t');
            if (tab == std::string::npos)
                throw data_error("bpe load: merge line without tab: '" + line + "'");
            const std::string left = line.substr(0, tab);
            const std::string right = line.substr(tab + 1);
            const auto li = tok.unit_ids_.find(left);
            const auto ri = tok.unit_ids_.find(right);
            if (li == tok.unit_ids_.end() || ri == tok.unit_ids_.end())
                throw data_error("bpe load: merge references unknown unit in '" + line + "'");
            tok.add_merge(li->second, ri->second);
        }
        return tok;
    }

private:
    struct Merge {
        int left, right, out;
    };

    static const std::vector<std::string>& reserved_tags() {
        static const std::vector<std::string> tags{"<pad>", "<bos>", "<eos>", "<unk>"};
        return tags;
    }

    bool base_or_reserved(int id) const { return id < kReserved + alphabet_size_; }

    int add_unit(const std::string& s) {
        const auto it = unit_ids_.find(s);
        if (it != unit_ids_.end()) return it->second;
        units_.push_back(s);
        const int id = static_cast<int>(units_.size()) - 1;
        unit_ids_[s] = id;
        return id;
    }

    int add_merge(int left, int right) {
        const int out = add_unit(units_[static_cast<std::size_t>(left)] + " " +
                                 units_[static_cast<std::size_t>(right)]);
        merges_.push_back({left, right, out});
        return out;
    }

    static void apply_merge(std::vector<int>& s, int left, int right, int out) {
        std::size_t w = 0;
        for (std::size_t i = 0; i < s.size();) {
            if (i + 1 < s.size() && s[i] == left && s[i + 1] == right) {
                s[w] = out;
                i += 2;
            } else {
                s[w] = s[i];
                i += 1;
            }
            ++w;
        }
        s.resize(w);
    }

    std::vector<std::string> units_;
    std::unordered_map<std::string, int> unit_ids_;
    int alphabet_size_ = 0;
    std::vector<Merge> merges_;
};

// Mean encoded/base length ratio and vocabulary utilization under
// deterministic encoding. Empty sequences are ignored.
inline CompressionStats compression_stats(const std::vector<std::vector<std::string>>& corpus,
                                          const Tokenizer& tok) {
    if (corpus.empty()) throw data_error("compression_stats: empty corpus");
    double ratio_sum = 0.0;
    std::int64_t n_seqs = 0;
    std::vector<std::uint8_t> used(static_cast<std::size_t>(tok.vocab_size()), 0);
    for (const auto& seq : corpus) {
        if (seq.empty()) continue;
        const auto ids = tok.encode_ids(seq);
        for (int id : ids) used[static_cast<std::size_t>(id)] = 1;
        ratio_sum += static_cast<double>(ids.size()) / static_cast<double>(seq.size());
        ++n_seqs;
    }
    if (n_seqs == 0) throw data_error("compression_stats: corpus has no non-empty sequences");
    CompressionStats s;
    s.mean_length_ratio = ratio_sum / static_cast<double>(n_seqs);
    int distinct = 0;
    for (std::size_t i = Tokenizer::kReserved; i < used.size(); ++i) distinct += used[i];
    const int learned = tok.alphabet_size() + tok.merge_count();
    s.vocab_utilization = learned > 0 ? static_cast<double>(distinct) / learned : 0.0;
    return s;
}

// ---------------------------------------------------------------------------
// Target-text unit helpers
// ---------------------------------------------------------------------------

// Marker closing every word on the target side; merges never cross it
// because each word trains as its own sequence.
inline const std::string kWordEnd = "</w>";

// One unit sequence per word: the word's code points plus the end marker.
// Text is eval-normalized (lowercased, punctuation stripped) first.
inline std::vector<std::vector<std::string>> word_units(const std::string& text) {
    std::vector<std::vector<std::string>> words;
    for (const auto& w : split_whitespace(normalize_eval(text))) {
        auto units = utf8_codepoints(w);
        units.push_back(kWordEnd);
        words.push_back(std::move(units));
    }
    return words;
}

// Flattened variant used when encoding a whole sentence.
inline std::vector<std::string> text_units(const std::string& text) {
    std::vector<std::string> flat;
    for (auto& w : word_units(text))
        for (auto& u : w) flat.push_back(std::move(u));
    return flat;
}

// Inverse of text_units over decoded symbols: words end at the marker.
inline std::string units_to_text(const std::vector<std::string>& units) {
    std::string out, word;
    for (const auto& u : units) {
        if (u == kWordEnd) {
            if (!out.empty()) out.push_back(' ');
            out += word;
            word.clear();
        } else {
            word += u;
        }
    }
    if (!word.empty()) {
        if (!out.empty()) out.push_back(' ');
        out += word;
    }
    return out;
}

// Phone-file line format: one utterance per line, space-separated labels.
inline std::vector<std::string> phone_symbols(const std::string& line) {
    return split_whitespace(line);
}

}  // namespace alst
