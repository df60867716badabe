#pragma once

// Single entry point wiring all modules into reproducible experiments.
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
// failure. Every failure prints one machine-parsable line to stderr.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "alst/checkpoint.hpp"
#include "alst/config.hpp"
#include "alst/datapipe.hpp"
#include "alst/error.hpp"
#include "alst/experiment.hpp"
#include "alst/metrics.hpp"
#include "alst/model.hpp"
#include "alst/synth.hpp"
#include "alst/trainer.hpp"

namespace alst::cli {

namespace fs = std::filesystem;

namespace detail {

struct Loaded {
    Tokenizer phone_tok, target_tok;
    std::vector<ManifestRecord> train, valid, test;
};

inline Loaded load_experiment_data(const ExperimentConfig& cfg, bool need_train,
                                   bool need_test) {
    Loaded out;
    if (cfg.data.phone_vocab.empty() || cfg.data.target_vocab.empty())
        throw config_error("config: data.phone_vocab and data.target_vocab are required");
    out.phone_tok = Tokenizer::load(cfg.data.phone_vocab);
    out.target_tok = Tokenizer::load(cfg.data.target_vocab);
    FilterLog log;
    if (need_train) {
        if (cfg.data.train_manifest.empty() || cfg.data.valid_manifest.empty())
            throw config_error("config: data.train_manifest and data.valid_manifest are required");
        out.train = filter_pairs(load_manifest(cfg.data.train_manifest), &log,
                                 cfg.data.max_target_chars, cfg.data.max_frames);
        if (log.removed_target_chars + log.removed_frames > 0)
            std::cerr << "filtered " << log.removed_target_chars << " over-length targets, "
                      << log.removed_frames << " over-length feature files\n";
        out.valid = filter_pairs(load_manifest(cfg.data.valid_manifest), nullptr,
                                 cfg.data.max_target_chars, cfg.data.max_frames);
    }
    if (need_test) {
        if (cfg.data.test_manifest.empty())
            throw config_error("config: data.test_manifest is required");
        out.test = load_manifest(cfg.data.test_manifest);
    }
    return out;
}

inline std::unique_ptr<Model<float>> build_model(ExperimentConfig& cfg, const Loaded& data) {
    cfg.model.phone_vocab = data.phone_tok.vocab_size();
    cfg.model.target_vocab = data.target_tok.vocab_size();
    return std::make_unique<Model<float>>(cfg.model, cfg.train.seed);
}

inline void write_run_dir(const ExperimentConfig& cfg, const std::string& run_dir) {
    fs::create_directories(run_dir);
    std::ofstream out(fs::path(run_dir) / "config.ini");
    if (!out) throw data_error("run dir: cannot write config into " + run_dir);
    out << cfg.serialize();
}

// One training arm of the ablation grid.
struct ArmResult {
    std::string fusion;
    std::string tokenization;
    double bleu = 0.0;
};

inline ArmResult run_arm(ExperimentConfig cfg, FusionMode fusion, const std::string& tok_name,
                         const Tokenizer& phone_tok, const Tokenizer& target_tok,
                         const std::vector<ManifestRecord>& train_recs,
                         const std::vector<ManifestRecord>& valid_recs,
                         const std::vector<ManifestRecord>& test_recs,
                         const std::string& run_dir, int beam, int max_len) {
    cfg.model.fusion = fusion;
    cfg.model.phone_vocab = phone_tok.vocab_size();
    cfg.model.target_vocab = target_tok.vocab_size();
    Model<float> model(cfg.model, cfg.train.seed);
    const auto result =
        train(model, train_recs, valid_recs, phone_tok, target_tok, cfg.train, run_dir);
    std::vector<std::string> kept;
    for (const auto& k : result.kept) kept.push_back(k.path);
    load_entries(model.params(), average_checkpoints(kept), "averaged checkpoints");
    ArmResult arm;
    arm.fusion = to_string(fusion);
    arm.tokenization = tok_name;
    arm.bleu = translate_bleu(model, test_recs, phone_tok, target_tok, beam, max_len);
    return arm;
}

}  // namespace detail

inline int run_or_throw(int argc, char** argv) {
    CLI::App app{"alst: phone-assisted speech translation at desk scale"};
    app.require_subcommand(1);

    // ---- synth ----------------------------------------------------------
    auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset");
    SynthSpec synth_spec;
    std::string synth_out;
    synth_cmd->add_option("--out", synth_out, "output dataset directory")->required();
    synth_cmd->add_option("--n-train", synth_spec.n_train, "training utterances");
    synth_cmd->add_option("--n-valid", synth_spec.n_valid, "validation utterances");
    synth_cmd->add_option("--n-test", synth_spec.n_test, "test utterances");
    synth_cmd->add_option("--seed", synth_spec.seed, "generator seed");
    synth_cmd->add_option("--noise-sigma", synth_spec.noise_sigma, "feature noise stddev");
    synth_cmd->add_option("--corruption-prob", synth_spec.corruption_prob,
                          "per-syllable probability of pure-noise features");
    synth_cmd->add_option("--n-phones", synth_spec.n_phones, "phone inventory size");
    synth_cmd->add_option("--n-syllables", synth_spec.n_syllables, "syllable inventory size");
    synth_cmd->add_option("--feat-dim", synth_spec.feat_dim, "feature dimension");

    // ---- bpe-train ------------------------------------------------------
    auto* bpe_train_cmd = app.add_subcommand("bpe-train", "train a BPE tokenizer");
    std::string bpe_input, bpe_output, bpe_mode = "phones";
    int bpe_vocab_size = 1000;
    bpe_train_cmd->add_option("--input", bpe_input, "corpus file, one utterance per line")
        ->required();
    bpe_train_cmd->add_option("--output", bpe_output, "tokenizer file to write")->required();
    bpe_train_cmd->add_option("--vocab-size", bpe_vocab_size, "total vocabulary budget");
    bpe_train_cmd->add_option("--mode", bpe_mode, "phones|text")
        ->check(CLI::IsMember({"phones", "text"}));

    // ---- bpe-encode -----------------------------------------------------
    auto* bpe_encode_cmd = app.add_subcommand("bpe-encode", "encode a corpus with a tokenizer");
    std::string enc_vocab, enc_input, enc_output, enc_mode = "phones";
    double enc_dropout = 0.0;
    std::uint32_t enc_seed = 1;
    bpe_encode_cmd->add_option("--vocab", enc_vocab, "tokenizer file")->required();
    bpe_encode_cmd->add_option("--input", enc_input, "corpus file")->required();
    bpe_encode_cmd->add_option("--output", enc_output, "output file (default stdout)");
    bpe_encode_cmd->add_option("--dropout", enc_dropout, "BPE-dropout rate");
    bpe_encode_cmd->add_option("--seed", enc_seed, "dropout stream seed");
    bpe_encode_cmd->add_option("--mode", enc_mode, "phones|text")
        ->check(CLI::IsMember({"phones", "text"}));

    // ---- train ----------------------------------------------------------
    auto* train_cmd = app.add_subcommand("train", "train a model");
    std::string train_config_path, train_run_dir, train_fusion;
    std::vector<std::string> train_sets;
    train_cmd->add_option("--config", train_config_path, "experiment config file");
    train_cmd->add_option("--run-dir", train_run_dir, "run directory")->required();
    train_cmd->add_option("--fusion", train_fusion, "fusion mode (none|encoder|decoder|both)");
    train_cmd->add_option("--set", train_sets, "override, e.g. --set train.seed=7");

    // ---- translate ------------------------------------------------------
    auto* translate_cmd = app.add_subcommand("translate", "decode a manifest to hypotheses");
    std::string tr_config_path, tr_checkpoint, tr_manifest, tr_output;
    std::vector<std::string> tr_sets;
    int tr_beam = 5, tr_max_len = 128;
    translate_cmd->add_option("--config", tr_config_path, "experiment config file")->required();
    translate_cmd->add_option("--checkpoint", tr_checkpoint, "checkpoint file")->required();
    translate_cmd->add_option("--manifest", tr_manifest, "manifest to translate")->required();
    translate_cmd->add_option("--output", tr_output, "hypotheses file, one per line")->required();
    translate_cmd->add_option("--beam", tr_beam, "beam size (1 = greedy)");
    translate_cmd->add_option("--max-len", tr_max_len, "decoding length limit");
    translate_cmd->add_option("--set", tr_sets, "config override");

    // ---- average --------------------------------------------------------
    auto* average_cmd = app.add_subcommand("average", "average checkpoints elementwise");
    std::string avg_output;
    std::vector<std::string> avg_inputs;
    average_cmd->add_option("--output", avg_output, "averaged checkpoint to write")->required();
    average_cmd->add_option("inputs", avg_inputs, "checkpoint files")->required();

    // ---- score ----------------------------------------------------------
    auto* score_cmd = app.add_subcommand("score", "corpus BLEU of a hypotheses file");
    std::string score_cand;
    std::vector<std::string> score_refs;
    score_cmd->add_option("--candidates", score_cand, "hypotheses, one per line")->required();
    score_cmd->add_option("--refs", score_refs, "1..4 reference files")->required();

    // ---- ablate ---------------------------------------------------------
    auto* ablate_cmd = app.add_subcommand("ablate", "fusion x tokenization comparison grid");
    std::string ab_data_dir, ab_out_dir, ab_config_path, ab_json;
    std::vector<std::string> ab_sets;
    int ab_phone_vocab = 1000, ab_target_vocab = 1000, ab_beam = 1, ab_max_len = 48, ab_jobs = 1;
    ablate_cmd->add_option("--data", ab_data_dir, "synthetic dataset directory")->required();
    ablate_cmd->add_option("--out", ab_out_dir, "directory for the per-arm runs")->required();
    ablate_cmd->add_option("--config", ab_config_path, "experiment config file");
    ablate_cmd->add_option("--set", ab_sets, "config override");
    ablate_cmd->add_option("--phone-vocab-size", ab_phone_vocab, "phone BPE budget");
    ablate_cmd->add_option("--target-vocab-size", ab_target_vocab, "target BPE budget");
    ablate_cmd->add_option("--beam", ab_beam, "decoding beam");
    ablate_cmd->add_option("--max-len", ab_max_len, "decoding length limit");
    ablate_cmd->add_option("--jobs", ab_jobs, "arms trained in parallel");
    ablate_cmd->add_option("--json", ab_json, "also write the grid as JSON");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            app.exit(e);
            return 0;
        }
        std::ostringstream os;
        app.exit(e, os, os);
        throw config_error(os.str());
    }

    if (*synth_cmd) {
        const auto stats = synth_generate(synth_spec, synth_out);
        std::cout << "wrote " << synth_spec.n_train << "/" << synth_spec.n_valid << "/"
                  << synth_spec.n_test << " utterances to " << synth_out << " ("
                  << stats.corrupted_syllables << "/" << stats.syllables
                  << " syllables corrupted)\n";
        return 0;
    }

    if (*bpe_train_cmd) {
        const auto corpus =
            bpe_mode == "phones" ? read_phone_corpus(bpe_input) : read_text_corpus(bpe_input);
        const auto tok = Tokenizer::train(corpus, bpe_vocab_size);
        tok.save(bpe_output);
        std::cout << "alphabet " << tok.alphabet_size() << ", merges " << tok.merge_count()
                  << ", vocab " << tok.vocab_size() << " -> " << bpe_output << "\n";
        return 0;
    }

    if (*bpe_encode_cmd) {
        const auto tok = Tokenizer::load(enc_vocab);
        std::ifstream in(enc_input);
        if (!in) throw data_error("bpe-encode: cannot open " + enc_input);
        std::ofstream file_out;
        if (!enc_output.empty()) {
            file_out.open(enc_output);
            if (!file_out) throw data_error("bpe-encode: cannot open " + enc_output);
        }
        std::ostream& out = enc_output.empty() ? std::cout : file_out;
        std::mt19937 rng(enc_seed);
        std::string line;
        while (std::getline(in, line)) {
            const auto units =
                enc_mode == "phones" ? phone_symbols(line) : text_units(line);
            const auto enc = tok.encode(units, enc_dropout, rng);
            for (std::size_t i = 0; i < enc.ids.size(); ++i)
                out << (i ? "\t" : "") << tok.unit(enc.ids[i]);
            out << "\n";
        }
        return 0;
    }

    if (*train_cmd) {
        ExperimentConfig cfg;
        if (!train_config_path.empty()) cfg.load_file(train_config_path);
        if (!train_fusion.empty()) cfg.set("model.fusion", train_fusion);
        for (const auto& s : train_sets) cfg.set_assignment(s);
        const auto data = detail::load_experiment_data(cfg, true, false);
        auto model = detail::build_model(cfg, data);
        detail::write_run_dir(cfg, train_run_dir);
        const auto result = train(*model, data.train, data.valid, data.phone_tok, data.target_tok,
                                  cfg.train, train_run_dir);
        std::cout << "trained " << result.steps << " steps; best valid loss "
                  << result.best_valid_loss << "; kept " << result.kept.size()
                  << " checkpoints in " << train_run_dir << "\n";
        return 0;
    }

    if (*translate_cmd) {
        ExperimentConfig cfg;
        cfg.load_file(tr_config_path);
        for (const auto& s : tr_sets) cfg.set_assignment(s);
        auto data = detail::load_experiment_data(cfg, false, false);
        auto model = detail::build_model(cfg, data);
        load_checkpoint(model->params(), tr_checkpoint);
        const auto records = load_manifest(tr_manifest);
        const auto hyps =
            translate_all(*model, records, data.phone_tok, data.target_tok, tr_beam, tr_max_len);
        std::ofstream out(tr_output, std::ios::trunc);
        if (!out) throw data_error("translate: cannot open " + tr_output);
        for (const auto& h : hyps) out << h << "\n";
        std::cout << "wrote " << hyps.size() << " hypotheses to " << tr_output << "\n";
        return 0;
    }

    if (*average_cmd) {
        write_checkpoint(average_checkpoints(avg_inputs), avg_output);
        std::cout << "averaged " << avg_inputs.size() << " checkpoints -> " << avg_output << "\n";
        return 0;
    }

    if (*score_cmd) {
        if (score_refs.empty() || score_refs.size() > 4)
            throw config_error("score: between 1 and 4 reference files required");
        auto read_lines = [](const std::string& path) {
            std::ifstream in(path);
            if (!in) throw data_error("score: cannot open " + path);
            std::vector<std::string> lines;
            std::string line;
            while (std::getline(in, line)) lines.push_back(line);
            return lines;
        };
        const auto cands = read_lines(score_cand);
        std::vector<std::vector<std::string>> refs;
        for (const auto& p : score_refs) {
            refs.push_back(read_lines(p));
            if (refs.back().size() != cands.size())
                throw data_error("score: " + p + " has " + std::to_string(refs.back().size()) +
                                 " lines, candidates have " + std::to_string(cands.size()));
        }
        BleuStats total;
        for (std::size_t i = 0; i < cands.size(); ++i) {
            std::vector<std::vector<std::string>> sentence_refs;
            for (const auto& r : refs) sentence_refs.push_back(tokenize_eval(r[i]));
            total += sentence_stats(tokenize_eval(cands[i]), sentence_refs);
        }
        const auto s = corpus_bleu(total);
        nlohmann::json j{{"bleu", s.bleu},
                         {"precisions", s.precisions},
                         {"bp", s.brevity_penalty},
                         {"cand_len", s.cand_len},
                         {"ref_len", s.ref_len}};
        std::cout << j.dump() << "\n";
        return 0;
    }

    if (*ablate_cmd) {
        ExperimentConfig cfg;
        if (!ab_config_path.empty()) cfg.load_file(ab_config_path);
        for (const auto& s : ab_sets) cfg.set_assignment(s);
        if (cfg.data.train_manifest.empty())
            cfg.data.train_manifest = (fs::path(ab_data_dir) / "train.jsonl").string();
        if (cfg.data.valid_manifest.empty())
            cfg.data.valid_manifest = (fs::path(ab_data_dir) / "valid.jsonl").string();
        if (cfg.data.test_manifest.empty())
            cfg.data.test_manifest = (fs::path(ab_data_dir) / "test.jsonl").string();

        const auto phone_corpus =
            read_phone_corpus((fs::path(ab_data_dir) / "train.phones.txt").string());
        const auto text_corpus =
            read_text_corpus((fs::path(ab_data_dir) / "train.text.txt").string());
        const auto target_tok = Tokenizer::train(text_corpus, ab_target_vocab);
        const auto bpe_tok = Tokenizer::train(phone_corpus, ab_phone_vocab);
        const auto raw_tok = bpe_tok.with_merges(0);

        FilterLog log;
        const auto train_recs = filter_pairs(load_manifest(cfg.data.train_manifest), &log,
                                             cfg.data.max_target_chars, cfg.data.max_frames);
        const auto valid_recs = filter_pairs(load_manifest(cfg.data.valid_manifest), nullptr,
                                             cfg.data.max_target_chars, cfg.data.max_frames);
        const auto test_recs = load_manifest(cfg.data.test_manifest);

        const FusionMode fusions[] = {FusionMode::none, FusionMode::encoder, FusionMode::decoder,
                                      FusionMode::both};
        struct Job {
            FusionMode fusion;
            const Tokenizer* tok;
            const char* tok_name;
        };
        std::vector<Job> jobs;
        for (const auto f : fusions) {
            jobs.push_back({f, &bpe_tok, "bpe"});
            jobs.push_back({f, &raw_tok, "raw"});
        }

        std::vector<detail::ArmResult> results(jobs.size());
        std::size_t next = 0;
        const int workers = std::max(1, ab_jobs);
        auto run_job = [&](std::size_t j) {
            const auto& job = jobs[j];
            const std::string run_dir =
                (fs::path(ab_out_dir) /
                 (std::string(to_string(job.fusion)) + "_" + job.tok_name))
                    .string();
            results[j] = detail::run_arm(cfg, job.fusion, job.tok_name, *job.tok, target_tok,
                                         train_recs, valid_recs, test_recs, run_dir, ab_beam,
                                         ab_max_len);
        };
        while (next < jobs.size()) {
            std::vector<std::future<void>> batch;
            for (int w = 0; w < workers && next < jobs.size(); ++w, ++next)
                batch.push_back(std::async(std::launch::async, run_job, next));
            for (auto& f : batch) f.get();
        }

        std::ostringstream table;
        table << std::left << std::setw(10) << "fusion" << std::right << std::setw(10) << "bpe"
              << std::setw(10) << "raw" << "\n";
        nlohmann::json grid = nlohmann::json::array();
        for (const auto f : fusions) {
            double bleu_bpe = 0, bleu_raw = 0;
            for (const auto& r : results) {
                if (r.fusion != to_string(f)) continue;
                (r.tokenization == "bpe" ? bleu_bpe : bleu_raw) = r.bleu;
            }
            table << std::left << std::setw(10) << to_string(f) << std::right << std::fixed
                  << std::setprecision(2) << std::setw(10) << bleu_bpe << std::setw(10) << bleu_raw
                  << "\n";
            grid.push_back({{"fusion", to_string(f)}, {"bpe", bleu_bpe}, {"raw", bleu_raw}});
        }
        std::cout << table.str();
        if (!ab_json.empty()) {
            std::ofstream out(ab_json, std::ios::trunc);
            if (!out) throw data_error("ablate: cannot open " + ab_json);
            out << grid.dump(2) << "\n";
        }
        return 0;
    }

    return 0;
}

inline int run(int argc, char** argv) {
    try {
        return run_or_throw(argc, argv);
    } catch (const config_error& e) {
        std::cerr << "error: config: " << e.what() << "\n";
        return 2;
    } catch (const data_error& e) {
        std::cerr << "error: data: " << e.what() << "\n";
        return 3;
    } catch (const numeric_error& e) {
        std::cerr << "error: numeric: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: internal: " << e.what() << "\n";
        return 4;
    }
}

}  // namespace alst::cli
