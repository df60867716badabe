#pragma once

// Declarative experiment configuration: a flat key = value text format with
// [model] / [train] / [data] sections. Precedence is flag > file > default;
// unknown keys are rejected and the resolved config is echoed verbatim into
// every run directory.

#include <fstream>
#include <sstream>
#include <string>

#include "alst/error.hpp"
#include "alst/model.hpp"
#include "alst/trainer.hpp"

namespace alst {

struct DataConfig {
    std::string train_manifest;
    std::string valid_manifest;
    std::string test_manifest;
    std::string phone_vocab;   // tokenizer file
    std::string target_vocab;  // tokenizer file
    int max_target_chars = 400;
    int max_frames = 3000;
};

struct ExperimentConfig {
    ModelConfig model;
    TrainConfig train;
    DataConfig data;

    // Desk-scale defaults; the reference-scale warmup of 25000 is meant for
    // full corpora and never ramps up on runs of a few thousand steps.
    ExperimentConfig() { train.warmup_steps = 1000; }

    void set(const std::string& key, const std::string& value) {
        const auto parse_int = [&](int min_v = std::numeric_limits<int>::min()) {
            try {
                const int v = std::stoi(value);
                if (v < min_v) throw config_error("config: " + key + " must be >= " + std::to_string(min_v));
                return v;
            } catch (const config_error&) {
                throw;
            } catch (const std::exception&) {
                throw config_error("config: bad integer '" + value + "' for " + key);
            }
        };
        const auto parse_double = [&] {
            try {
                return std::stod(value);
            } catch (const std::exception&) {
                throw config_error("config: bad number '" + value + "' for " + key);
            }
        };
        const auto parse_u32 = [&] {
            try {
                return static_cast<std::uint32_t>(std::stoul(value));
            } catch (const std::exception&) {
                throw config_error("config: bad seed '" + value + "' for " + key);
            }
        };

        if (key == "model.d_model") model.d_model = parse_int(1);
        else if (key == "model.heads") model.heads = parse_int(1);
        else if (key == "model.ffn_dim") model.ffn_dim = parse_int(1);
        else if (key == "model.acoustic_layers") model.acoustic_layers = parse_int(1);
        else if (key == "model.phone_layers") model.phone_layers = parse_int(1);
        else if (key == "model.decoder_layers") model.decoder_layers = parse_int(1);
        else if (key == "model.conv_kernel") model.conv_kernel = parse_int(1);
        else if (key == "model.dropout") model.dropout = parse_double();
        else if (key == "model.label_smoothing") model.label_smoothing = parse_double();
        else if (key == "model.fusion") model.fusion = parse_fusion_mode(value);
        else if (key == "model.acoustic_feature_dim") model.acoustic_feature_dim = parse_int(1);
        else if (key == "model.subsample_factor") model.subsample_factor = parse_int(2);
        else if (key == "train.warmup_steps") train.warmup_steps = parse_int(1);
        else if (key == "train.noam_scale") train.noam_scale = parse_double();
        else if (key == "train.batch_size") train.batch_size = parse_int(1);
        else if (key == "train.max_steps") train.max_steps = parse_int(1);
        else if (key == "train.seed") train.seed = parse_u32();
        else if (key == "train.adam_beta1") train.adam_beta1 = parse_double();
        else if (key == "train.adam_beta2") train.adam_beta2 = parse_double();
        else if (key == "train.adam_eps") train.adam_eps = parse_double();
        else if (key == "train.keep_best") train.keep_best = parse_int(1);
        else if (key == "train.clip_norm") train.clip_norm = parse_double();
        else if (key == "train.phone_dropout") train.phone_dropout = parse_double();
        else if (key == "train.validate_every") train.validate_every = parse_int(0);
        else if (key == "data.train_manifest") data.train_manifest = value;
        else if (key == "data.valid_manifest") data.valid_manifest = value;
        else if (key == "data.test_manifest") data.test_manifest = value;
        else if (key == "data.phone_vocab") data.phone_vocab = value;
        else if (key == "data.target_vocab") data.target_vocab = value;
        else if (key == "data.max_target_chars") data.max_target_chars = parse_int(1);
        else if (key == "data.max_frames") data.max_frames = parse_int(1);
        else throw config_error("config: unknown key '" + key + "'");
    }

    // key=value assignment with an explicit section prefix, e.g.
    // "train.seed=7".
    void set_assignment(const std::string& assignment) {
        const auto eq = assignment.find('=');
        if (eq == std::string::npos)
            throw config_error("config: expected key=value, got '" + assignment + "'");
        set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
    }

    void load_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw data_error("config: cannot open " + path);
        std::string line, section;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            if (line.front() == '[') {
                if (line.back() != ']')
                    throw config_error("config: " + path + ":" + std::to_string(line_no) +
                                       ": malformed section header");
                section = trim(line.substr(1, line.size() - 2));
                if (section != "model" && section != "train" && section != "data")
                    throw config_error("config: unknown section '" + section + "'");
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw config_error("config: " + path + ":" + std::to_string(line_no) +
                                   ": expected key = value");
            if (section.empty())
                throw config_error("config: " + path + ":" + std::to_string(line_no) +
                                   ": key outside any section");
            set(section + "." + trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
    }

    std::string serialize() const {
        std::ostringstream os;
        os << "[model]\n";
        os << "d_model = " << model.d_model << "\n";
        os << "heads = " << model.heads << "\n";
        os << "ffn_dim = " << model.ffn_dim << "\n";
        os << "acoustic_layers = " << model.acoustic_layers << "\n";
        os << "phone_layers = " << model.phone_layers << "\n";
        os << "decoder_layers = " << model.decoder_layers << "\n";
        os << "conv_kernel = " << model.conv_kernel << "\n";
        os << "dropout = " << model.dropout << "\n";
        os << "label_smoothing = " << model.label_smoothing << "\n";
        os << "fusion = " << to_string(model.fusion) << "\n";
        os << "acoustic_feature_dim = " << model.acoustic_feature_dim << "\n";
        os << "subsample_factor = " << model.subsample_factor << "\n";
        os << "\n[train]\n";
        os << "warmup_steps = " << train.warmup_steps << "\n";
        os << "noam_scale = " << train.noam_scale << "\n";
        os << "batch_size = " << train.batch_size << "\n";
        os << "max_steps = " << train.max_steps << "\n";
        os << "seed = " << train.seed << "\n";
        os << "adam_beta1 = " << train.adam_beta1 << "\n";
        os << "adam_beta2 = " << train.adam_beta2 << "\n";
        os << "adam_eps = " << train.adam_eps << "\n";
        os << "keep_best = " << train.keep_best << "\n";
        os << "clip_norm = " << train.clip_norm << "\n";
        os << "phone_dropout = " << train.phone_dropout << "\n";
        os << "validate_every = " << train.validate_every << "\n";
        os << "\n[data]\n";
        os << "train_manifest = " << data.train_manifest << "\n";
        os << "valid_manifest = " << data.valid_manifest << "\n";
        os << "test_manifest = " << data.test_manifest << "\n";
        os << "phone_vocab = " << data.phone_vocab << "\n";
        os << "target_vocab = " << data.target_vocab << "\n";
        os << "max_target_chars = " << data.max_target_chars << "\n";
        os << "max_frames = " << data.max_frames << "\n";
        return os.str();
    }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }
};

}  // namespace alst
