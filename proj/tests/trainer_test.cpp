#include "alst/trainer.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "alst/synth.hpp"

using namespace alst;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

struct TinyTask {
    std::vector<ManifestRecord> train, valid;
    Tokenizer ptok, ttok;
};

TinyTask make_tiny_task(const fs::path& dir, int n_train = 8) {
    SynthSpec spec;
    spec.n_train = n_train;
    spec.n_valid = 3;
    spec.n_test = 3;
    spec.seed = 5;
    spec.noise_sigma = 0.05;
    spec.n_phones = 8;
    spec.n_syllables = 10;
    spec.feat_dim = 7;
    spec.min_syllables = 2;
    spec.max_syllables = 4;
    synth_generate(spec, dir.string());

    TinyTask task;
    task.train = load_manifest((dir / "train.jsonl").string());
    task.valid = load_manifest((dir / "valid.jsonl").string());
    std::vector<std::vector<std::string>> phone_corpus, text_corpus;
    for (const auto& r : task.train) {
        phone_corpus.push_back(phone_symbols(r.phones));
        for (auto& w : word_units(r.target)) text_corpus.push_back(std::move(w));
    }
    task.ptok = Tokenizer::train(phone_corpus, 30);
    task.ttok = Tokenizer::train(text_corpus, 40);
    return task;
}

ModelConfig tiny_model_config(const TinyTask& task, FusionMode fusion) {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.heads = 2;
    cfg.ffn_dim = 24;
    cfg.acoustic_layers = 1;
    cfg.phone_layers = 1;
    cfg.decoder_layers = 1;
    cfg.conv_kernel = 3;
    cfg.dropout = 0.05;
    cfg.label_smoothing = 0.1;
    cfg.fusion = fusion;
    cfg.acoustic_feature_dim = 7;
    cfg.phone_vocab = task.ptok.vocab_size();
    cfg.target_vocab = task.ttok.vocab_size();
    return cfg;
}

}  // namespace

// ---------------------------------------------------------------------------
// noam_lr
// ---------------------------------------------------------------------------

TEST(NoamLr, BranchesCrossExactlyAtWarmup) {
    const int d = 64, warmup = 137;
    const double scale = 2.0;
    const double at_warmup = noam_lr(warmup, d, warmup, scale);
    const double both = scale * std::pow(d, -0.5) * std::pow(warmup, -0.5);
    EXPECT_DOUBLE_EQ(at_warmup, both);
}

TEST(NoamLr, IncreasesToWarmupThenDecreases) {
    const int warmup = 50;
    for (int s = 1; s < warmup; ++s)
        EXPECT_LT(noam_lr(s, 32, warmup, 1.0), noam_lr(s + 1, 32, warmup, 1.0)) << s;
    for (int s = warmup; s < 3 * warmup; ++s)
        EXPECT_GT(noam_lr(s, 32, warmup, 1.0), noam_lr(s + 1, 32, warmup, 1.0)) << s;
}

TEST(NoamLr, ReferenceValueAtPaperScale) {
    EXPECT_NEAR(noam_lr(25000, 256, 25000, 1.0), 3.953e-4, 1e-7);
}

TEST(NoamLr, StepZeroRejected) {
    EXPECT_THROW(noam_lr(0, 256, 25000, 1.0), config_error);
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

namespace {

ParameterSet<float> single_param_set(Tensor<float>& w) {
    ParameterSet<float> ps;
    ps.add("w", w);
    return ps;
}

}  // namespace

TEST(AdamStep, ZeroGradientsLeaveParametersUnchanged) {
    Tensor<float> w({3}, {1.0f, -2.0f, 0.5f});
    auto ps = single_param_set(w);
    Adam<float> adam(ps);
    adam.step(ps, {std::vector<float>(3, 0.0f)}, 0.1);
    EXPECT_EQ(w.values(), (std::vector<float>{1.0f, -2.0f, 0.5f}));
}

TEST(AdamStep, ConstantGradientApproachesLrTimesSign) {
    Tensor<float> w({2}, {0.0f, 0.0f});
    auto ps = single_param_set(w);
    Adam<float> adam(ps);
    const std::vector<float> g{0.37f, -1.4f};
    const double lr = 1e-3;
    float prev0 = 0, prev1 = 0;
    for (int i = 0; i < 300; ++i) {
        prev0 = w.data()[0];
        prev1 = w.data()[1];
        adam.step(ps, {g}, lr);
    }
    EXPECT_NEAR(prev0 - w.data()[0], lr, 1e-5);    // positive gradient: -lr step
    EXPECT_NEAR(w.data()[1] - prev1, lr, 1e-5);    // negative gradient: +lr step
}

TEST(AdamStep, ScalarQuadraticConvergesWithin500Steps) {
    Tensor<float> w({1}, {0.0f});
    auto ps = single_param_set(w);
    Adam<float> adam(ps);
    for (int i = 0; i < 500; ++i) {
        const float g = 2.0f * (w.data()[0] - 3.0f);
        adam.step(ps, {{g}}, 0.02);
    }
    EXPECT_NEAR(w.data()[0], 3.0f, 0.05);
}

TEST(AdamStep, MissingGradientNamesParameter) {
    Tensor<float> w({3});
    Tensor<float> u({2});
    ParameterSet<float> ps;
    ps.add("layer.w", w);
    ps.add("layer.u", u);
    Adam<float> adam(ps);
    try {
        adam.step(ps, {std::vector<float>(3, 0.0f), {}}, 0.1);
        FAIL() << "expected config_error";
    } catch (const config_error& e) {
        EXPECT_NE(std::string(e.what()).find("layer.u"), std::string::npos);
    }
}

TEST(ClipGlobalNorm, ScalesDownToTheBound) {
    std::vector<std::vector<float>> grads{{3.0f, 0.0f}, {0.0f, 4.0f}};  // norm 5
    clip_global_norm(grads, 5.0);
    EXPECT_FLOAT_EQ(grads[0][0], 3.0f);  // at the bound: untouched
    clip_global_norm(grads, 2.5);
    EXPECT_NEAR(global_grad_norm(grads), 2.5, 1e-6);
    EXPECT_NEAR(grads[0][0], 1.5f, 1e-6);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

TEST(Checkpoint, SaveLoadRoundTripIsBitwise) {
    const auto dir = fresh_dir("alst_ckpt_rt");
    const auto task_dir = fresh_dir("alst_ckpt_rt_data");
    auto task = make_tiny_task(task_dir);
    Model<float> model(tiny_model_config(task, FusionMode::both), 3);

    std::vector<std::vector<float>> before;
    for (const auto& p : model.params()) before.push_back(*p.data);
    save_checkpoint(model.params(), (dir / "m.alst").string());

    for (const auto& p : model.params()) std::fill(p.data->begin(), p.data->end(), 7.5f);
    load_checkpoint(model.params(), (dir / "m.alst").string());

    std::size_t i = 0;
    for (const auto& p : model.params()) {
        ASSERT_EQ(*p.data, before[i]) << p.name;
        ++i;
    }
}

TEST(Checkpoint, CorruptionIsDetected) {
    const auto dir = fresh_dir("alst_ckpt_bad");
    std::vector<CheckpointEntry> entries{{"a", {2, 2}, {1, 2, 3, 4}}};
    const auto path = (dir / "c.alst").string();
    write_checkpoint(entries, path);

    auto raw = slurp(path);
    raw[raw.size() / 2] ^= 0x5A;  // flip payload bits
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << raw;
    }
    EXPECT_THROW(read_checkpoint(path), data_error);

    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << "NOTA";
    }
    EXPECT_THROW(read_checkpoint(path), data_error);
}

TEST(Checkpoint, LoadRejectsNameMismatch) {
    const auto dir = fresh_dir("alst_ckpt_names");
    Tensor<float> w({2}, {1, 2});
    ParameterSet<float> ps;
    ps.add("w", w);
    write_checkpoint({{"not_w", {2}, {1, 2}}}, (dir / "c.alst").string());
    EXPECT_THROW(load_checkpoint(ps, (dir / "c.alst").string()), data_error);
}

// ---------------------------------------------------------------------------
// average_checkpoints
// ---------------------------------------------------------------------------

namespace {

std::string write_random_ckpt(const fs::path& dir, const std::string& name, unsigned seed) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<float> u(-2, 2);
    std::vector<CheckpointEntry> entries;
    entries.push_back({"a.w", {3, 2}, {}});
    entries.push_back({"b.w", {4}, {}});
    for (auto& e : entries) {
        std::int64_t n = 1;
        for (int d : e.shape) n *= d;
        for (int i = 0; i < n; ++i) e.values.push_back(u(rng));
    }
    const auto path = (dir / name).string();
    write_checkpoint(entries, path);
    return path;
}

}  // namespace

TEST(AverageCheckpoints, IdempotentOnCopies) {
    const auto dir = fresh_dir("alst_avg_idem");
    const auto p = write_random_ckpt(dir, "a.alst", 1);
    const auto avg = average_checkpoints({p, p, p, p, p});
    const auto orig = read_checkpoint(p);
    for (std::size_t i = 0; i < avg.size(); ++i) EXPECT_EQ(avg[i].values, orig[i].values);
}

TEST(AverageCheckpoints, MeanOfZeroAndTwoIsOne) {
    const auto dir = fresh_dir("alst_avg_mean");
    std::vector<CheckpointEntry> zero{{"w", {3}, {0, 0, 0}}};
    std::vector<CheckpointEntry> two{{"w", {3}, {2, 2, 2}}};
    write_checkpoint(zero, (dir / "z.alst").string());
    write_checkpoint(two, (dir / "t.alst").string());
    const auto avg = average_checkpoints({(dir / "z.alst").string(), (dir / "t.alst").string()});
    EXPECT_EQ(avg[0].values, (std::vector<float>{1, 1, 1}));
}

TEST(AverageCheckpoints, MatchesBruteForceMean) {
    const auto dir = fresh_dir("alst_avg_brute");
    std::vector<std::string> paths;
    for (int i = 0; i < 5; ++i)
        paths.push_back(write_random_ckpt(dir, "c" + std::to_string(i) + ".alst", 10 + i));
    const auto avg = average_checkpoints(paths);

    std::vector<std::vector<CheckpointEntry>> all;
    for (const auto& p : paths) all.push_back(read_checkpoint(p));
    for (std::size_t e = 0; e < avg.size(); ++e)
        for (std::size_t i = 0; i < avg[e].values.size(); ++i) {
            double sum = 0;
            for (const auto& ck : all) sum += ck[e].values[i];
            EXPECT_NEAR(avg[e].values[i], sum / 5.0, 1e-6);
        }
}

TEST(AverageCheckpoints, PermutationInvariantBitwise) {
    const auto dir = fresh_dir("alst_avg_perm");
    std::vector<std::string> paths;
    for (int i = 0; i < 4; ++i)
        paths.push_back(write_random_ckpt(dir, "c" + std::to_string(i) + ".alst", 30 + i));
    const auto a = average_checkpoints(paths);
    std::vector<std::string> shuffled{paths[2], paths[0], paths[3], paths[1]};
    const auto b = average_checkpoints(shuffled);
    for (std::size_t e = 0; e < a.size(); ++e) EXPECT_EQ(a[e].values, b[e].values);
}

TEST(AverageCheckpoints, NamesFirstDivergentParameter) {
    const auto dir = fresh_dir("alst_avg_div");
    write_checkpoint({{"a.w", {2}, {1, 2}}, {"b.w", {2}, {3, 4}}}, (dir / "x.alst").string());
    write_checkpoint({{"a.w", {2}, {1, 2}}, {"c.w", {2}, {3, 4}}}, (dir / "y.alst").string());
    try {
        average_checkpoints({(dir / "x.alst").string(), (dir / "y.alst").string()});
        FAIL() << "expected data_error";
    } catch (const data_error& e) {
        EXPECT_NE(std::string(e.what()).find("c.w"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("b.w"), std::string::npos);
    }
}

// ---------------------------------------------------------------------------
// train()
// ---------------------------------------------------------------------------

TEST(Train, RunsWritesMetricsAndKeepsBestCheckpoints) {
    const auto data_dir = fresh_dir("alst_train_data");
    const auto run_dir = fresh_dir("alst_train_run");
    auto task = make_tiny_task(data_dir);
    Model<float> model(tiny_model_config(task, FusionMode::both), 17);

    TrainConfig cfg;
    cfg.warmup_steps = 20;
    cfg.noam_scale = 1.0;
    cfg.batch_size = 4;
    cfg.max_steps = 6;
    cfg.seed = 23;
    cfg.keep_best = 2;
    cfg.validate_every = 1;
    const auto result = train(model, task.train, task.valid, task.ptok, task.ttok, cfg,
                              run_dir.string());

    EXPECT_EQ(result.steps, 6);
    ASSERT_EQ(result.kept.size(), 2u);
    EXPECT_LE(result.kept[0].valid_loss, result.kept[1].valid_loss);

    // Metrics log: one JSON record per validation with the required keys.
    std::ifstream metrics(result.metrics_path);
    ASSERT_TRUE(metrics.good());
    std::string line;
    int n_records = 0;
    std::vector<double> logged_losses;
    while (std::getline(metrics, line)) {
        const auto j = nlohmann::json::parse(line);
        for (const char* key : {"step", "epoch", "train_loss", "valid_loss", "lr"})
            ASSERT_TRUE(j.contains(key)) << key;
        logged_losses.push_back(j["valid_loss"].get<double>());
        ++n_records;
    }
    EXPECT_EQ(n_records, 6);

    // The kept checkpoints are exactly the two lowest logged validation losses.
    std::vector<double> sorted = logged_losses;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_DOUBLE_EQ(result.kept[0].valid_loss, sorted[0]);
    EXPECT_DOUBLE_EQ(result.kept[1].valid_loss, sorted[1]);

    // Only the kept checkpoint files remain on disk.
    int n_ckpt = 0;
    for (const auto& e : fs::directory_iterator(run_dir))
        if (e.path().extension() == ".alst") ++n_ckpt;
    EXPECT_EQ(n_ckpt, 2);
    for (const auto& k : result.kept) EXPECT_TRUE(fs::exists(k.path));
}

TEST(Train, IdenticalSeedsGiveIdenticalLogs) {
    const auto data_dir = fresh_dir("alst_train_det_data");
    auto task = make_tiny_task(data_dir);

    auto run = [&](const fs::path& run_dir) {
        Model<float> model(tiny_model_config(task, FusionMode::encoder), 29);
        TrainConfig cfg;
        cfg.warmup_steps = 20;
        cfg.batch_size = 4;
        cfg.max_steps = 5;
        cfg.seed = 31;
        cfg.validate_every = 1;
        train(model, task.train, task.valid, task.ptok, task.ttok, cfg, run_dir.string());
        return slurp(run_dir / "metrics.jsonl");
    };
    EXPECT_EQ(run(fresh_dir("alst_train_det_a")), run(fresh_dir("alst_train_det_b")));
}

TEST(Train, DivergenceAbortsWithStepDiagnostics) {
    const auto data_dir = fresh_dir("alst_train_div_data");
    const auto run_dir = fresh_dir("alst_train_div_run");
    auto task = make_tiny_task(data_dir);
    Model<float> model(tiny_model_config(task, FusionMode::none), 37);

    TrainConfig cfg;
    cfg.warmup_steps = 1;
    cfg.noam_scale = 1e14;  // drives the weights to overflow almost immediately
    cfg.batch_size = 4;
    cfg.max_steps = 50;
    cfg.seed = 41;
    cfg.validate_every = 0;
    try {
        train(model, task.train, task.valid, task.ptok, task.ttok, cfg, run_dir.string());
        FAIL() << "expected numeric_error";
    } catch (const numeric_error& e) {
        EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
    }
}

TEST(Train, OverfitsOnePairAndGreedyDecodingReproducesIt) {
    const auto data_dir = fresh_dir("alst_overfit_data");
    auto task = make_tiny_task(data_dir, 8);
    const std::vector<ManifestRecord> one{task.train[0]};

    Model<float> model(tiny_model_config(task, FusionMode::none), 43);
    TrainConfig cfg;
    cfg.warmup_steps = 50;
    cfg.noam_scale = 1.0;
    cfg.batch_size = 1;
    cfg.max_steps = 600;
    cfg.seed = 47;
    cfg.phone_dropout = 0.0;
    cfg.validate_every = 200;
    const auto run_dir = fresh_dir("alst_overfit_run");
    train(model, one, one, task.ptok, task.ttok, cfg, run_dir.string());

    const auto feats = read_features(one[0].feats_path);
    Tensor<float> x({feats.frames, feats.dim}, feats.values);
    Fwd<float> ctx;
    const auto mem = model.encode(ctx, x, feats.frames, {});
    const auto out = model.generate(mem, 32, 1);
    const auto hyp = units_to_text(task.ttok.decode(out.ids));
    EXPECT_EQ(hyp, normalize_eval(one[0].target));
}
