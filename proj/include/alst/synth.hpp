#pragma once

// Synthetic speech-translation task. A fixed pseudo-language maps syllables
// (1-3 phones from a 40-phone alphabet) to target tokens deterministically,
// with every adjacent token pair swapped so the alignment is non-monotonic.
// Features are per-phone prototype vectors plus Gaussian noise; with some
// probability a syllable's frames are replaced by pure noise while its phone
// string stays correct, which is exactly the regime where the phone stream
// carries information the acoustics lost.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "alst/datapipe.hpp"
#include "alst/error.hpp"

namespace alst {

struct SynthSpec {
    int n_train = 2000;
    int n_valid = 200;
    int n_test = 200;
    std::uint32_t seed = 1;
    double noise_sigma = 0.1;
    double corruption_prob = 0.0;

    // Pseudo-language shape.
    int n_phones = 40;
    int n_syllables = 200;
    int min_syllables = 3, max_syllables = 12;
    int min_frames = 4, max_frames = 8;
    int feat_dim = 83;

    void validate() const {
        if (n_train < 3 || n_valid < 3 || n_test < 3)
            throw config_error("synth: every split needs at least 3 utterances");
        if (noise_sigma < 0.0) throw config_error("synth: noise_sigma must be >= 0");
        if (corruption_prob < 0.0 || corruption_prob > 1.0)
            throw config_error("synth: corruption_prob must be in [0,1]");
        if (n_phones < 2 || n_syllables < 2) throw config_error("synth: language too small");
        if (min_syllables < 1 || max_syllables < min_syllables)
            throw config_error("synth: bad syllable count range");
        if (min_frames < 1 || max_frames < min_frames)
            throw config_error("synth: bad frame count range");
        if (feat_dim < 1) throw config_error("synth: feat_dim must be positive");
    }
};

struct SynthLanguage {
    std::vector<std::string> phones;            // labels, e.g. "p07"
    std::vector<std::vector<int>> syllables;    // phone indices per syllable
    std::vector<std::string> tokens;            // target token per syllable
    std::vector<std::vector<float>> prototypes; // per phone: feat_dim values
};

inline SynthLanguage build_language(const SynthSpec& spec, std::mt19937& rng) {
    SynthLanguage lang;
    for (int i = 0; i < spec.n_phones; ++i) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "p%02d", i);
        lang.phones.emplace_back(buf);
    }
    std::uniform_int_distribution<int> syl_len(1, 3), phone(0, spec.n_phones - 1);
    std::set<std::vector<int>> seen;
    while (static_cast<int>(lang.syllables.size()) < spec.n_syllables) {
        std::vector<int> s;
        const int n = syl_len(rng);
        for (int k = 0; k < n; ++k) s.push_back(phone(rng));
        if (seen.insert(s).second) lang.syllables.push_back(std::move(s));
    }
    for (int i = 0; i < spec.n_syllables; ++i) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "w%03d", i);
        lang.tokens.emplace_back(buf);
    }
    std::normal_distribution<double> proto(0.0, 1.0);
    for (int i = 0; i < spec.n_phones; ++i) {
        std::vector<float> p(static_cast<std::size_t>(spec.feat_dim));
        for (auto& v : p) v = static_cast<float>(proto(rng));
        lang.prototypes.push_back(std::move(p));
    }
    return lang;
}

struct SynthStats {
    std::int64_t syllables = 0;
    std::int64_t corrupted_syllables = 0;
};

// Writes train/valid/test manifests, ALSF feature files under feats/, and
// plain-text phone/target corpora for tokenizer training. Fully determined
// by the spec (same seed, bit-identical output).
inline SynthStats synth_generate(const SynthSpec& spec, const std::string& out_dir) {
    spec.validate();
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "feats");

    std::mt19937 rng(spec.seed);
    const SynthLanguage lang = build_language(spec, rng);

    std::uniform_int_distribution<int> utt_len(spec.min_syllables, spec.max_syllables);
    std::uniform_int_distribution<int> syl(0, spec.n_syllables - 1);
    std::uniform_int_distribution<int> frames_per_phone(spec.min_frames, spec.max_frames);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> jitter(0.0, 1.0);

    SynthStats stats;
    std::ofstream phones_txt(fs::path(out_dir) / "train.phones.txt");
    std::ofstream text_txt(fs::path(out_dir) / "train.text.txt");
    if (!phones_txt || !text_txt) throw data_error("synth: cannot write corpus files in " + out_dir);

    const struct Split {
        const char* name;
        int count;
    } splits[] = {{"train", spec.n_train}, {"valid", spec.n_valid}, {"test", spec.n_test}};

    for (const auto& split : splits) {
        std::vector<ManifestRecord> records;
        for (int n = 0; n < split.count; ++n) {
            char idbuf[32];
            std::snprintf(idbuf, sizeof idbuf, "%s-%06d", split.name, n);

            const int n_syl = utt_len(rng);
            std::vector<int> syllable_ids;
            for (int s = 0; s < n_syl; ++s) syllable_ids.push_back(syl(rng));

            std::string phones, target;
            FeatureMatrix feats;
            feats.dim = spec.feat_dim;

            std::vector<std::string> toks;
            for (const int sid : syllable_ids) {
                ++stats.syllables;
                const bool corrupted = spec.corruption_prob > 0.0 && u(rng) < spec.corruption_prob;
                if (corrupted) ++stats.corrupted_syllables;
                for (const int pid : lang.syllables[static_cast<std::size_t>(sid)]) {
                    if (!phones.empty()) phones.push_back(' ');
                    phones += lang.phones[static_cast<std::size_t>(pid)];
                    const int nf = frames_per_phone(rng);
                    const auto& proto = lang.prototypes[static_cast<std::size_t>(pid)];
                    for (int f = 0; f < nf; ++f)
                        for (int d = 0; d < spec.feat_dim; ++d) {
                            float v;
                            if (corrupted)
                                v = static_cast<float>(jitter(rng));
                            else if (spec.noise_sigma > 0.0)
                                v = proto[static_cast<std::size_t>(d)] +
                                    static_cast<float>(spec.noise_sigma * jitter(rng));
                            else
                                v = proto[static_cast<std::size_t>(d)];
                            feats.values.push_back(v);
                        }
                    feats.frames += nf;
                }
                toks.push_back(lang.tokens[static_cast<std::size_t>(sid)]);
            }
            // Swap adjacent token pairs: source order s0 s1 s2 s3 s4 maps to
            // target order s1 s0 s3 s2 s4.
            for (std::size_t i = 0; i + 1 < toks.size(); i += 2) std::swap(toks[i], toks[i + 1]);
            for (const auto& t : toks) {
                if (!target.empty()) target.push_back(' ');
                target += t;
            }

            const std::string feat_rel = std::string("feats/") + idbuf + ".alsf";
            write_features(feats, (fs::path(out_dir) / feat_rel).string());

            ManifestRecord rec;
            rec.id = idbuf;
            rec.feats_path = feat_rel;
            rec.phones = phones;
            rec.target = target;
            if (std::string(split.name) == "test") rec.references = {target};
            records.push_back(std::move(rec));

            if (std::string(split.name) == "train") {
                phones_txt << phones << "\n";
                text_txt << target << "\n";
            }
        }
        save_manifest(records, (fs::path(out_dir) / (std::string(split.name) + ".jsonl")).string());
    }
    return stats;
}

}  // namespace alst
