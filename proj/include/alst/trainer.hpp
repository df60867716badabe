#pragma once

// Optimization loop: Adam with the Noam learning-rate schedule, global-norm
// gradient clipping, per-epoch validation, best-k checkpoint retention and
// a JSON-lines metrics log.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "alst/checkpoint.hpp"
#include "alst/datapipe.hpp"
#include "alst/error.hpp"
#include "alst/model.hpp"

namespace alst {

struct TrainConfig {
    int warmup_steps = 25000;  // reference-scale default; desk runs override
    double noam_scale = 1.0;
    int batch_size = 16;
    int max_steps = 1000;
    std::uint32_t seed = 1;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.98;
    double adam_eps = 1e-9;
    int keep_best = 5;
    double clip_norm = 5.0;
    double phone_dropout = 0.1;  // BPE-dropout on training phone sequences
    int validate_every = 0;      // steps; 0 = once per epoch

    void validate() const {
        if (warmup_steps < 1) throw config_error("train: warmup_steps must be >= 1");
        if (keep_best < 1) throw config_error("train: keep_best must be >= 1");
        if (batch_size < 1) throw config_error("train: batch_size must be >= 1");
        if (max_steps < 1) throw config_error("train: max_steps must be >= 1");
        if (noam_scale <= 0.0) throw config_error("train: noam_scale must be positive");
        if (clip_norm <= 0.0) throw config_error("train: clip_norm must be positive");
        if (phone_dropout < 0.0 || phone_dropout > 1.0)
            throw config_error("train: phone_dropout must be in [0,1]");
        if (validate_every < 0) throw config_error("train: validate_every must be >= 0");
    }
};

// lr(step) = scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5);
// both branches meet at step == warmup, where the schedule peaks.
inline double noam_lr(std::int64_t step, int d_model, int warmup, double scale) {
    if (step < 1) throw config_error("noam_lr: step must be >= 1 (got " + std::to_string(step) + ")");
    if (d_model < 1 || warmup < 1) throw config_error("noam_lr: d_model and warmup must be >= 1");
    const double s = static_cast<double>(step);
    return scale * std::pow(static_cast<double>(d_model), -0.5) *
           std::min(std::pow(s, -0.5), s * std::pow(static_cast<double>(warmup), -1.5));
}

// Bias-corrected Adam over a ParameterSet. Gradients arrive index-aligned
// with the parameter set; an empty slot means the gradient was never
// materialized, which is an error naming the parameter.
template <typename T>
class Adam {
public:
    Adam(const ParameterSet<T>& params, double beta1 = 0.9, double beta2 = 0.98,
         double eps = 1e-9)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (const auto& p : params) {
            m_.emplace_back(p.data->size(), T(0));
            v_.emplace_back(p.data->size(), T(0));
        }
    }

    std::int64_t step_count() const { return step_; }

    void step(const ParameterSet<T>& params, const std::vector<std::vector<T>>& grads, double lr) {
        if (grads.size() != params.size() || params.size() != m_.size())
            throw config_error("adam: gradient list does not match parameter set");
        ++step_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto& p = params[i];
            if (grads[i].size() != p.data->size())
                throw config_error("adam: missing or misshapen gradient for parameter " + p.name);
            auto& m = m_[i];
            auto& v = v_[i];
            auto& w = *p.data;
            const auto& g = grads[i];
            for (std::size_t k = 0; k < w.size(); ++k) {
                m[k] = static_cast<T>(beta1_ * m[k] + (1.0 - beta1_) * g[k]);
                v[k] = static_cast<T>(beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k]);
                const double mhat = m[k] / bc1;
                const double vhat = v[k] / bc2;
                w[k] = static_cast<T>(w[k] - lr * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

private:
    double beta1_, beta2_, eps_;
    std::int64_t step_ = 0;
    std::vector<std::vector<T>> m_, v_;
};

template <typename T>
double global_grad_norm(const std::vector<std::vector<T>>& grads) {
    double sq = 0.0;
    for (const auto& g : grads)
        for (const T v : g) sq += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(sq);
}

template <typename T>
void clip_global_norm(std::vector<std::vector<T>>& grads, double max_norm) {
    const double norm = global_grad_norm(grads);
    if (norm <= max_norm || norm == 0.0) return;
    const T f = static_cast<T>(max_norm / norm);
    for (auto& g : grads)
        for (auto& v : g) v *= f;
}

struct CheckpointRank {
    std::string path;
    double valid_loss = 0.0;
    std::int64_t step = 0;
};

struct TrainResult {
    std::int64_t steps = 0;
    double final_train_loss = 0.0;
    double best_valid_loss = std::numeric_limits<double>::infinity();
    std::vector<CheckpointRank> kept;  // best first
    std::string metrics_path;
};

namespace detail {

// Teacher-forced batch loss as one tape scalar: per-utterance means weighted
// by their token counts, i.e. the mean over all non-pad tokens in the batch.
template <typename T>
struct BatchLoss {
    Tensor<T> loss;
    double value = 0.0;
    std::int64_t correct = 0;
    std::int64_t tokens = 0;
};

template <typename T>
BatchLoss<T> batch_loss(const Model<T>& model, Fwd<T>& ctx, const Batch& batch) {
    std::vector<std::pair<Tensor<T>, int>> parts;
    std::int64_t correct = 0, tokens = 0;
    for (int i = 0; i < batch.size; ++i) {
        Tensor<T> feats;
        if constexpr (std::is_same_v<T, float>) {
            feats = batch.item_feats(i);
        } else {
            const Tensor<float> f32 = batch.item_feats(i);
            feats = Tensor<T>(f32.shape());
            for (std::int64_t k = 0; k < f32.size(); ++k)
                feats.data()[k] = static_cast<T>(f32.data()[k]);
        }
        const auto mem = model.encode(ctx, feats, batch.feat_len[static_cast<std::size_t>(i)],
                                      batch.item_phones(i),
                                      batch.phone_len[static_cast<std::size_t>(i)]);
        const auto tf = model.teacher_forced(ctx, mem, batch.item_targets(i));
        parts.emplace_back(tf.loss, tf.tokens);
        correct += tf.correct;
        tokens += tf.tokens;
    }
    BatchLoss<T> out;
    out.correct = correct;
    out.tokens = tokens;
    Tensor<T> acc;
    for (const auto& [loss, n] : parts) {
        Tensor<T> weighted = scale(loss, static_cast<T>(n) / static_cast<T>(tokens));
        acc = acc.size() == 0 ? weighted : add(acc, weighted);
    }
    out.loss = acc;
    out.value = static_cast<double>(acc.item());
    return out;
}

}  // namespace detail

// Evaluation loss over a record set (dropout off, deterministic batches).
template <typename T>
double evaluate_loss(const Model<T>& model, const std::vector<ManifestRecord>& records,
                     const Tokenizer& phone_tok, const Tokenizer& target_tok, int batch_size) {
    const auto batches = make_batches(records, phone_tok, target_tok, batch_size, 0, 0.0);
    double loss_sum = 0.0;
    std::int64_t tokens = 0;
    for (const auto& b : batches) {
        Fwd<T> ctx;
        const auto bl = detail::batch_loss(model, ctx, b);
        loss_sum += bl.value * static_cast<double>(bl.tokens);
        tokens += bl.tokens;
    }
    if (tokens == 0) throw data_error("evaluate: no tokens in validation set");
    return loss_sum / static_cast<double>(tokens);
}

// Full training loop. Deterministic for a fixed seed: batch order, BPE
// dropout and layer dropout all derive from TrainConfig::seed. Keeps the
// keep_best checkpoints ranked by validation loss under run_dir, and logs
// one JSON record per validation to metrics.jsonl.
inline TrainResult train(Model<float>& model, const std::vector<ManifestRecord>& train_records,
                         const std::vector<ManifestRecord>& valid_records,
                         const Tokenizer& phone_tok, const Tokenizer& target_tok,
                         const TrainConfig& cfg, const std::string& run_dir) {
    cfg.validate();
    if (train_records.empty()) throw data_error("train: empty training set");
    if (valid_records.empty()) throw data_error("train: empty validation set");
    namespace fs = std::filesystem;
    fs::create_directories(run_dir);

    TrainResult result;
    result.metrics_path = (fs::path(run_dir) / "metrics.jsonl").string();
    std::ofstream metrics(result.metrics_path, std::ios::trunc);
    if (!metrics) throw data_error("train: cannot open " + result.metrics_path);

    Adam<float> adam(model.params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    std::mt19937 dropout_rng(cfg.seed * 2654435761u + 17u);

    std::vector<CheckpointRank> kept;
    std::int64_t step = 0;
    std::int64_t last_validated = -1;
    int epoch = 0;
    double epoch_loss_sum = 0.0;
    std::int64_t epoch_loss_count = 0;
    double last_lr = 0.0;

    const auto validate_now = [&] {
        if (step == last_validated) return;
        last_validated = step;
        const double valid_loss =
            evaluate_loss(model, valid_records, phone_tok, target_tok, cfg.batch_size);
        const double train_loss =
            epoch_loss_count > 0 ? epoch_loss_sum / static_cast<double>(epoch_loss_count) : 0.0;
        epoch_loss_sum = 0.0;
        epoch_loss_count = 0;

        char name[32];
        std::snprintf(name, sizeof name, "step%04lld.alst", static_cast<long long>(step));
        const std::string path = (fs::path(run_dir) / name).string();
        save_checkpoint(model.params(), path);
        kept.push_back({path, valid_loss, step});
        std::sort(kept.begin(), kept.end(), [](const CheckpointRank& a, const CheckpointRank& b) {
            if (a.valid_loss != b.valid_loss) return a.valid_loss < b.valid_loss;
            return a.step < b.step;
        });
        while (static_cast<int>(kept.size()) > cfg.keep_best) {
            fs::remove(kept.back().path);
            kept.pop_back();
        }

        nlohmann::json rec{{"step", step},
                           {"epoch", epoch},
                           {"train_loss", train_loss},
                           {"valid_loss", valid_loss},
                           {"lr", last_lr}};
        metrics << rec.dump() << "\n";
        metrics.flush();
        result.final_train_loss = train_loss;
        result.best_valid_loss = std::min(result.best_valid_loss, valid_loss);
    };

    bool done = false;
    while (!done) {
        const auto batches = make_batches(train_records, phone_tok, target_tok, cfg.batch_size,
                                          cfg.seed + static_cast<std::uint32_t>(epoch),
                                          cfg.phone_dropout);
        for (const auto& batch : batches) {
            Tape<float> tape;
            Fwd<float> ctx;
            ctx.tape = &tape;
            ctx.training = true;
            ctx.dropout_rate = static_cast<float>(model.config().dropout);
            ctx.rng = &dropout_rng;

            detail::BatchLoss<float> bl;
            try {
                bl = detail::batch_loss(model, ctx, batch);
            } catch (const numeric_error& e) {
                throw numeric_error("train: numeric failure at step " + std::to_string(step + 1) +
                                    " (epoch " + std::to_string(epoch) + "): " + e.what());
            }
            if (!std::isfinite(bl.value))
                throw numeric_error("train: non-finite loss " + std::to_string(bl.value) +
                                    " at step " + std::to_string(step + 1) + " (epoch " +
                                    std::to_string(epoch) + ", batch of " +
                                    std::to_string(batch.size) + ")");
            tape.backward(bl.loss);

            std::vector<std::vector<float>> grads;
            grads.reserve(model.params().size());
            for (const auto& p : model.params()) grads.push_back(ctx.grad_of(p).values());
            clip_global_norm(grads, cfg.clip_norm);

            ++step;
            last_lr = noam_lr(step, model.config().d_model, cfg.warmup_steps, cfg.noam_scale);
            adam.step(model.params(), grads, last_lr);

            epoch_loss_sum += bl.value;
            ++epoch_loss_count;

            if (cfg.validate_every > 0 && step % cfg.validate_every == 0) validate_now();
            if (step >= cfg.max_steps) {
                done = true;
                break;
            }
        }
        if (!done && cfg.validate_every == 0) validate_now();
        ++epoch;
    }
    validate_now();

    result.steps = step;
    result.kept = kept;
    return result;
}

// Elementwise arithmetic mean of checkpoints. All inputs must agree on
// parameter names and shapes; the error names the first divergence. Values
// are summed in ascending order at double precision, so the result is
// exactly permutation-invariant.
inline std::vector<CheckpointEntry> average_checkpoints(const std::vector<std::string>& paths) {
    if (paths.empty()) throw config_error("average: no checkpoints given");
    std::vector<std::vector<CheckpointEntry>> all;
    all.reserve(paths.size());
    for (const auto& p : paths) all.push_back(read_checkpoint(p));
    const auto& first = all.front();
    for (std::size_t c = 1; c < all.size(); ++c) {
        if (all[c].size() != first.size())
            throw data_error("average: " + paths[c] + " has " + std::to_string(all[c].size()) +
                             " parameters, " + paths[0] + " has " + std::to_string(first.size()));
        for (std::size_t i = 0; i < first.size(); ++i) {
            if (all[c][i].name != first[i].name)
                throw data_error("average: parameter " + std::to_string(i) + " diverges: '" +
                                 all[c][i].name + "' vs '" + first[i].name + "'");
            if (all[c][i].shape != first[i].shape)
                throw data_error("average: shape mismatch for parameter " + first[i].name);
        }
    }
    std::vector<CheckpointEntry> out = first;
    const std::size_t k = all.size();
    std::vector<double> vals(k);
    for (std::size_t i = 0; i < out.size(); ++i) {
        for (std::size_t e = 0; e < out[i].values.size(); ++e) {
            for (std::size_t c = 0; c < k; ++c) vals[c] = static_cast<double>(all[c][i].values[e]);
            std::sort(vals.begin(), vals.end());
            double sum = 0.0;
            for (const double v : vals) sum += v;
            out[i].values[e] = static_cast<float>(sum / static_cast<double>(k));
        }
    }
    return out;
}

}  // namespace alst
