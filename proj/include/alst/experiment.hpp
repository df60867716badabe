#pragma once

// Run-level helpers shared by the CLI and the acceptance suite: tokenizer
// corpus loading, batch translation, and BLEU evaluation of a model over a
// manifest.

#include <fstream>
#include <string>
#include <vector>

#include "alst/bpe.hpp"
#include "alst/datapipe.hpp"
#include "alst/metrics.hpp"
#include "alst/model.hpp"

namespace alst {

// One utterance per line, space-separated symbols.
inline std::vector<std::vector<std::string>> read_phone_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw data_error("phone corpus: cannot open " + path);
    std::vector<std::vector<std::string>> corpus;
    std::string line;
    while (std::getline(in, line)) {
        auto syms = phone_symbols(line);
        if (!syms.empty()) corpus.push_back(std::move(syms));
    }
    if (corpus.empty()) throw data_error("phone corpus: " + path + " has no utterances");
    return corpus;
}

// One sentence per line; merge scope is the word.
inline std::vector<std::vector<std::string>> read_text_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw data_error("text corpus: cannot open " + path);
    std::vector<std::vector<std::string>> corpus;
    std::string line;
    while (std::getline(in, line))
        for (auto& w : word_units(line)) corpus.push_back(std::move(w));
    if (corpus.empty()) throw data_error("text corpus: " + path + " has no words");
    return corpus;
}

// Greedy or beam translation of every record; returns detokenized text.
inline std::vector<std::string> translate_all(const Model<float>& model,
                                              const std::vector<ManifestRecord>& records,
                                              const Tokenizer& phone_tok,
                                              const Tokenizer& target_tok, int beam, int max_len) {
    std::vector<std::string> hyps;
    hyps.reserve(records.size());
    for (const auto& r : records) {
        const auto feats = read_features(r.feats_path);
        Tensor<float> x({feats.frames, feats.dim}, feats.values);
        Fwd<float> ctx;
        const auto phones = phone_tok.encode_ids(phone_symbols(r.phones));
        const auto mem = model.encode(ctx, x, feats.frames, phones);
        const auto out = model.generate(mem, max_len, beam);
        hyps.push_back(units_to_text(target_tok.decode(out.ids)));
    }
    return hyps;
}

// Corpus BLEU of hypotheses against each record's references (falling back
// to its target when no explicit references exist).
inline double corpus_bleu_against_records(const std::vector<std::string>& hyps,
                                          const std::vector<ManifestRecord>& records) {
    if (hyps.size() != records.size())
        throw data_error("bleu: " + std::to_string(hyps.size()) + " hypotheses for " +
                         std::to_string(records.size()) + " records");
    BleuStats total;
    for (std::size_t i = 0; i < hyps.size(); ++i) {
        std::vector<std::vector<std::string>> refs;
        for (const auto& r : records[i].references) refs.push_back(tokenize_eval(r));
        if (refs.empty()) refs.push_back(tokenize_eval(records[i].target));
        total += sentence_stats(tokenize_eval(hyps[i]), refs);
    }
    // A model that emits nothing scores zero rather than erroring out.
    if (total.totals[0] == 0) return 0.0;
    return corpus_bleu(total).bleu;
}

inline double translate_bleu(const Model<float>& model,
                             const std::vector<ManifestRecord>& records,
                             const Tokenizer& phone_tok, const Tokenizer& target_tok, int beam,
                             int max_len) {
    return corpus_bleu_against_records(
        translate_all(model, records, phone_tok, target_tok, beam, max_len), records);
}

}  // namespace alst
