#pragma once

// Manifest loading, corpus filtering, and padded/masked batch assembly.
// Manifests are JSON-lines; feature matrices are the ALSF binary format
// (magic, u32 frames, u32 dim, f32 little-endian row-major).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "alst/bpe.hpp"
#include "alst/error.hpp"
#include "alst/model.hpp"
#include "alst/tensor.hpp"
#include "alst/text.hpp"

namespace alst {

struct ManifestRecord {
    std::string id;
    std::string feats_path;
    std::string phones;  // space-separated phone labels
    std::string target;  // translation text
    std::vector<std::string> references;
};

struct FeatureMatrix {
    int frames = 0;
    int dim = 0;
    std::vector<float> values;  // frames x dim, row-major
};

namespace detail {
constexpr char kFeatMagic[4] = {'A', 'L', 'S', 'F'};
}

inline void write_features(const FeatureMatrix& m, const std::string& path) {
    if (m.frames < 1 || m.dim < 1 ||
        m.values.size() != static_cast<std::size_t>(m.frames) * static_cast<std::size_t>(m.dim))
        throw config_error("features write: inconsistent matrix for " + path);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw data_error("features write: cannot open " + path);
    out.write(detail::kFeatMagic, 4);
    const auto frames = static_cast<std::uint32_t>(m.frames);
    const auto dim = static_cast<std::uint32_t>(m.dim);
    out.write(reinterpret_cast<const char*>(&frames), 4);
    out.write(reinterpret_cast<const char*>(&dim), 4);
    out.write(reinterpret_cast<const char*>(m.values.data()),
              static_cast<std::streamsize>(m.values.size() * sizeof(float)));
    if (!out) throw data_error("features write: write failed for " + path);
}

inline std::pair<int, int> read_feature_header(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("features read: cannot open " + path);
    char magic[4];
    std::uint32_t frames = 0, dim = 0;
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(&frames), 4);
    in.read(reinterpret_cast<char*>(&dim), 4);
    if (!in || std::memcmp(magic, detail::kFeatMagic, 4) != 0)
        throw data_error("features read: bad header in " + path);
    if (frames < 1 || dim < 1) throw data_error("features read: empty matrix in " + path);
    return {static_cast<int>(frames), static_cast<int>(dim)};
}

inline FeatureMatrix read_features(const std::string& path) {
    const auto [frames, dim] = read_feature_header(path);
    FeatureMatrix m;
    m.frames = frames;
    m.dim = dim;
    m.values.resize(static_cast<std::size_t>(frames) * static_cast<std::size_t>(dim));
    std::ifstream in(path, std::ios::binary);
    in.seekg(12);
    in.read(reinterpret_cast<char*>(m.values.data()),
            static_cast<std::streamsize>(m.values.size() * sizeof(float)));
    if (!in) throw data_error("features read: truncated payload in " + path);
    for (float v : m.values)
        if (!std::isfinite(v)) throw data_error("features read: non-finite value in " + path);
    return m;
}

// JSON-lines manifest; relative feature paths resolve against the manifest
// directory. Record ids must be unique; feature files must exist with a
// valid header.
inline std::vector<ManifestRecord> load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw data_error("manifest: cannot open " + path);
    const auto root = std::filesystem::path(path).parent_path();
    std::vector<ManifestRecord> records;
    std::vector<std::string> seen_ids;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw data_error("manifest: " + path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        ManifestRecord r;
        try {
            r.id = j.at("id").get<std::string>();
            r.feats_path = j.at("feats").get<std::string>();
            r.phones = j.at("phones").get<std::string>();
            r.target = j.at("target").get<std::string>();
            if (j.contains("references"))
                r.references = j.at("references").get<std::vector<std::string>>();
        } catch (const nlohmann::json::exception& e) {
            throw data_error("manifest: " + path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        if (std::filesystem::path(r.feats_path).is_relative())
            r.feats_path = (root / r.feats_path).string();
        records.push_back(std::move(r));
        seen_ids.push_back(records.back().id);
    }
    std::sort(seen_ids.begin(), seen_ids.end());
    const auto dup = std::adjacent_find(seen_ids.begin(), seen_ids.end());
    if (dup != seen_ids.end()) throw data_error("manifest: duplicate id '" + *dup + "'");
    for (const auto& r : records) read_feature_header(r.feats_path);
    return records;
}

inline void save_manifest(const std::vector<ManifestRecord>& records, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw data_error("manifest: cannot open " + path + " for writing");
    for (const auto& r : records) {
        nlohmann::json j{{"id", r.id},
                         {"feats", r.feats_path},
                         {"phones", r.phones},
                         {"target", r.target}};
        if (!r.references.empty()) j["references"] = r.references;
        out << j.dump() << "\n";
    }
    if (!out) throw data_error("manifest: write failed for " + path);
}

struct FilterLog {
    int removed_target_chars = 0;
    int removed_frames = 0;
};

// Drops pairs with target translations over max_target_chars (Unicode scalar
// values, counted after punctuation stripping) or source features over
// max_frames frames. Both bounds are inclusive on the keep side.
inline std::vector<ManifestRecord> filter_pairs(const std::vector<ManifestRecord>& records,
                                                FilterLog* log = nullptr,
                                                int max_target_chars = 400, int max_frames = 3000) {
    FilterLog local;
    std::vector<ManifestRecord> kept;
    kept.reserve(records.size());
    for (const auto& r : records) {
        if (utf8_length(normalize_eval(r.target)) > static_cast<std::size_t>(max_target_chars)) {
            ++local.removed_target_chars;
            continue;
        }
        if (read_feature_header(r.feats_path).first > max_frames) {
            ++local.removed_frames;
            continue;
        }
        kept.push_back(r);
    }
    if (log) *log = local;
    return kept;
}

// One padded, masked minibatch. Masks exactly delimit true lengths; the pad
// id never appears at an unmasked position.
struct Batch {
    int size = 0;
    int feat_dim = 0;
    int max_frames = 0, max_phones = 0, max_targets = 0;

    Tensor<float> feats;                   // [size * max_frames, feat_dim] row blocks
    std::vector<std::uint8_t> feat_mask;   // size * max_frames
    std::vector<int> feat_len;

    std::vector<int> phone_ids;            // size * max_phones, padded with kPadId
    std::vector<std::uint8_t> phone_mask;
    std::vector<int> phone_len;

    std::vector<int> target_ids;           // size * max_targets, [bos ... eos pad...]
    std::vector<std::uint8_t> target_mask;
    std::vector<int> target_len;

    std::vector<std::string> ids;

    Tensor<float> item_feats(int i) const {
        Tensor<float> t({max_frames, feat_dim});
        std::copy_n(feats.data() + static_cast<std::int64_t>(i) * max_frames * feat_dim,
                    static_cast<std::int64_t>(max_frames) * feat_dim, t.data());
        return t;
    }
    std::vector<int> item_phones(int i) const {
        return {phone_ids.begin() + static_cast<std::ptrdiff_t>(i) * max_phones,
                phone_ids.begin() + static_cast<std::ptrdiff_t>(i + 1) * max_phones};
    }
    // Framed target truncated to its true length.
    std::vector<int> item_targets(int i) const {
        const auto begin = target_ids.begin() + static_cast<std::ptrdiff_t>(i) * max_targets;
        return {begin, begin + target_len[static_cast<std::size_t>(i)]};
    }
};

struct BatchStats {
    int all_unk_phone_records = 0;
};

// Length-sorted bucketing with an epoch-level shuffle of bucket order.
// phone_dropout > 0 applies BPE-dropout to the phone encodings (training
// only); the stream is derived from `seed`, so identical seeds give
// identical batches.
inline std::vector<Batch> make_batches(const std::vector<ManifestRecord>& records,
                                       const Tokenizer& phone_tok, const Tokenizer& target_tok,
                                       int batch_size, std::uint32_t seed,
                                       double phone_dropout = 0.0, BatchStats* stats = nullptr) {
    if (batch_size < 1) throw config_error("make_batches: batch_size must be >= 1");
    struct Item {
        const ManifestRecord* rec;
        FeatureMatrix feats;
        std::vector<int> phones;
        std::vector<int> targets;  // framed
    };
    std::mt19937 bpe_rng(seed ^ 0x9E3779B9u);
    BatchStats local;
    std::vector<Item> items;
    items.reserve(records.size());
    for (const auto& r : records) {
        Item it;
        it.rec = &r;
        it.feats = read_features(r.feats_path);
        const auto symbols = phone_symbols(r.phones);
        it.phones = phone_tok.encode(symbols, phone_dropout, bpe_rng).ids;
        if (!it.phones.empty() &&
            std::all_of(it.phones.begin(), it.phones.end(),
                        [](int id) { return id == Tokenizer::kUnk; })) {
            ++local.all_unk_phone_records;
            std::cerr << "warning: record " << r.id << " has no known phone symbols\n";
        }
        it.targets.push_back(kBosId);
        for (int id : target_tok.encode_ids(text_units(r.target))) it.targets.push_back(id);
        it.targets.push_back(kEosId);
        items.push_back(std::move(it));
    }
    if (stats) *stats = local;

    std::vector<std::size_t> order(items.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (items[a].feats.frames != items[b].feats.frames)
            return items[a].feats.frames < items[b].feats.frames;
        return items[a].rec->id < items[b].rec->id;
    });

    std::vector<std::vector<std::size_t>> buckets;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size))
        buckets.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                             order.begin() +
                                 static_cast<std::ptrdiff_t>(std::min(
                                     order.size(), i + static_cast<std::size_t>(batch_size))));
    std::mt19937 shuffle_rng(seed);
    std::shuffle(buckets.begin(), buckets.end(), shuffle_rng);

    std::vector<Batch> batches;
    batches.reserve(buckets.size());
    for (const auto& bucket : buckets) {
        Batch b;
        b.size = static_cast<int>(bucket.size());
        for (const auto i : bucket) {
            b.max_frames = std::max(b.max_frames, items[i].feats.frames);
            b.max_phones = std::max(b.max_phones, static_cast<int>(items[i].phones.size()));
            b.max_targets = std::max(b.max_targets, static_cast<int>(items[i].targets.size()));
            b.feat_dim = items[i].feats.dim;
        }
        for (const auto i : bucket)
            if (items[i].feats.dim != b.feat_dim)
                throw data_error("make_batches: feature dim differs across records (" +
                                 items[i].rec->id + ")");
        b.feats = Tensor<float>({b.size * b.max_frames, b.feat_dim});
        b.feat_mask.assign(static_cast<std::size_t>(b.size) * b.max_frames, 0);
        b.phone_ids.assign(static_cast<std::size_t>(b.size) * b.max_phones, kPadId);
        b.phone_mask.assign(b.phone_ids.size(), 0);
        b.target_ids.assign(static_cast<std::size_t>(b.size) * b.max_targets, kPadId);
        b.target_mask.assign(b.target_ids.size(), 0);
        int row = 0;
        for (const auto i : bucket) {
            const auto& it = items[i];
            b.ids.push_back(it.rec->id);
            b.feat_len.push_back(it.feats.frames);
            b.phone_len.push_back(static_cast<int>(it.phones.size()));
            b.target_len.push_back(static_cast<int>(it.targets.size()));
            std::copy(it.feats.values.begin(), it.feats.values.end(),
                      b.feats.data() + static_cast<std::int64_t>(row) * b.max_frames * b.feat_dim);
            for (int t = 0; t < it.feats.frames; ++t)
                b.feat_mask[static_cast<std::size_t>(row) * b.max_frames + t] = 1;
            for (std::size_t p = 0; p < it.phones.size(); ++p) {
                b.phone_ids[static_cast<std::size_t>(row) * b.max_phones + p] = it.phones[p];
                b.phone_mask[static_cast<std::size_t>(row) * b.max_phones + p] = 1;
            }
            for (std::size_t t = 0; t < it.targets.size(); ++t) {
                b.target_ids[static_cast<std::size_t>(row) * b.max_targets + t] = it.targets[t];
                b.target_mask[static_cast<std::size_t>(row) * b.max_targets + t] = 1;
            }
            ++row;
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

}  // namespace alst
