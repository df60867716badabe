#include "alst/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "test_util.hpp"

using namespace alst;
using alst::testing::expect_all_eq;
using alst::testing::expect_all_near;

using D = Tensor<double>;

namespace {

constexpr double kFdStep = 1e-5;
constexpr double kFdTol = 1e-4;

}  // namespace

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

TEST(Matmul, IdentityCase) {
    D eye({2, 2}, {1, 0, 0, 1});
    D a({2, 2}, {1, 2, 3, 4});
    expect_all_eq(matmul(eye, a), {1, 2, 3, 4});
}

TEST(Matmul, HandProduct1x2x1) {
    D a({1, 2}, {1, 2});
    D b({2, 1}, {3, 4});
    expect_all_eq(matmul(a, b), {11});
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    D a({2, 3});
    D b({2, 2});
    try {
        matmul(a, b);
        FAIL() << "expected shape_error";
    } catch (const shape_error& e) {
        EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("[2,2]"), std::string::npos);
    }
}

TEST(Matmul, GradOfSumMatchesHandValueAndFiniteDiff) {
    D a0({2, 2}, {1, 1, 1, 1});
    D b({2, 2}, {2, 0, 0, 2});
    auto f = [&](const D& a) { return sum(matmul(a, b)); };

    Tape<double> tape;
    D a = tape.leaf(a0);
    tape.backward(f(a));
    expect_all_near(tape.grad(a), {2, 2, 2, 2}, 1e-12);

    EXPECT_LT(finite_diff_check(f, a0, kFdStep), kFdTol);
}

TEST(Matmul, GradFlowsToBothOperands) {
    std::mt19937 rng(7);
    D a0 = random_uniform<double>({3, 4}, -1, 1, rng);
    D b0 = random_uniform<double>({4, 2}, -1, 1, rng);
    auto fa = [&](const D& a) { return sum(matmul(a, b0)); };
    auto fb = [&](const D& b) { return sum(matmul(a0, b)); };
    EXPECT_LT(finite_diff_check(fa, a0, kFdStep), kFdTol);
    EXPECT_LT(finite_diff_check(fb, b0, kFdStep), kFdTol);
}

TEST(MatmulNT, MatchesExplicitTranspose) {
    std::mt19937 rng(3);
    D a = random_uniform<double>({3, 5}, -1, 1, rng);
    D b = random_uniform<double>({4, 5}, -1, 1, rng);
    D got = matmul_nt(a, b);
    ASSERT_EQ(got.shape(), (Shape{3, 4}));
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) {
            double want = 0;
            for (int k = 0; k < 5; ++k) want += a.data()[i * 5 + k] * b.data()[j * 5 + k];
            EXPECT_NEAR(got.data()[i * 4 + j], want, 1e-12);
        }
    auto fa = [&](const D& x) { return sum(matmul_nt(x, b)); };
    auto fb = [&](const D& x) { return sum(matmul_nt(a, x)); };
    EXPECT_LT(finite_diff_check(fa, a, kFdStep), kFdTol);
    EXPECT_LT(finite_diff_check(fb, b, kFdStep), kFdTol);
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

TEST(Softmax, UniformInput) {
    D x({3}, {0, 0, 0});
    expect_all_near(softmax(x), {1.0 / 3, 1.0 / 3, 1.0 / 3}, 1e-12);
}

TEST(Softmax, LargeInputDoesNotOverflow) {
    D x({2}, {1000, 0});
    D p = softmax(x);
    EXPECT_NEAR(p.data()[0], 1.0, 1e-9);
    EXPECT_NEAR(p.data()[1], 0.0, 1e-9);
    EXPECT_TRUE(std::isfinite(p.data()[0]));
}

TEST(Softmax, SingleUnmaskedEntry) {
    D x({2}, {1, 2});
    std::vector<std::uint8_t> mask{1, 0};
    D p = softmax(x, &mask);
    EXPECT_EQ(p.data()[0], 1.0);
    EXPECT_EQ(p.data()[1], 0.0);  // exactly zero
}

TEST(Softmax, RowsSumToOneAndMaskedEntriesExactlyZero) {
    std::mt19937 rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        D x = random_uniform<double>({4, 7}, -5, 5, rng);
        std::vector<std::uint8_t> mask(x.size());
        std::uniform_int_distribution<int> coin(0, 1);
        for (int r = 0; r < 4; ++r) {
            bool any = false;
            for (int c = 0; c < 7; ++c) {
                mask[r * 7 + c] = static_cast<std::uint8_t>(coin(rng));
                any = any || mask[r * 7 + c];
            }
            if (!any) mask[r * 7] = 1;
        }
        D p = softmax(x, &mask);
        for (int r = 0; r < 4; ++r) {
            double s = 0;
            for (int c = 0; c < 7; ++c) {
                if (!mask[r * 7 + c]) EXPECT_EQ(p.data()[r * 7 + c], 0.0);
                s += p.data()[r * 7 + c];
            }
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(Softmax, FullyMaskedRowRejected) {
    D x({2, 2}, {1, 2, 3, 4});
    std::vector<std::uint8_t> mask{1, 1, 0, 0};
    EXPECT_THROW(softmax(x, &mask), numeric_error);
}

TEST(Softmax, Gradient) {
    std::mt19937 rng(5);
    D x0 = random_uniform<double>({3, 6}, -2, 2, rng);
    D w = random_uniform<double>({3, 6}, -1, 1, rng);
    auto f = [&](const D& x) { return sum(mul(softmax(x), w)); };
    EXPECT_LT(finite_diff_check(f, x0, kFdStep), kFdTol);
}

// ---------------------------------------------------------------------------
// layer_norm
// ---------------------------------------------------------------------------

TEST(LayerNorm, ConstantRowsMapToZero) {
    D x({2, 4}, {3, 3, 3, 3, -1, -1, -1, -1});
    D gain = D::full({4}, 1.0);
    D bias({4});
    D y = layer_norm(x, gain, bias, 1e-5);
    for (std::int64_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y.data()[i], 0.0, 1e-6);
}

TEST(LayerNorm, HandNormalization) {
    D x({1, 2}, {1, 3});
    D gain = D::full({2}, 1.0);
    D bias({2});
    expect_all_near(layer_norm(x, gain, bias, 1e-12), {-1.0, 1.0}, 1e-5);
}

TEST(LayerNorm, GradientOnRandom4x8) {
    std::mt19937 rng(17);
    D x0 = random_uniform<double>({4, 8}, -2, 2, rng);
    D gain0 = random_uniform<double>({8}, 0.5, 1.5, rng);
    D bias0 = random_uniform<double>({8}, -0.5, 0.5, rng);
    D w = random_uniform<double>({4, 8}, -1, 1, rng);
    auto fx = [&](const D& x) { return sum(mul(layer_norm(x, gain0, bias0, 1e-5), w)); };
    auto fg = [&](const D& g) { return sum(mul(layer_norm(x0, g, bias0, 1e-5), w)); };
    auto fb = [&](const D& b) { return sum(mul(layer_norm(x0, gain0, b, 1e-5), w)); };
    EXPECT_LT(finite_diff_check(fx, x0, kFdStep), kFdTol);
    EXPECT_LT(finite_diff_check(fg, gain0, kFdStep), kFdTol);
    EXPECT_LT(finite_diff_check(fb, bias0, kFdStep), kFdTol);
}

// ---------------------------------------------------------------------------
// convolutions
// ---------------------------------------------------------------------------

TEST(DepthwiseConv, ImpulseKernelIsIdentity) {
    std::mt19937 rng(2);
    D x = random_uniform<double>({5, 3}, -1, 1, rng);
    D k({3, 3}, {0, 0, 0, 1, 1, 1, 0, 0, 0});
    expect_all_near(depthwise_conv1d(x, k), x.values(), 1e-12);
}

TEST(DepthwiseConv, HandConvolutionWithZeroPadding) {
    D x({3, 1}, {1, 2, 3});
    D k({3, 1}, {1, 1, 1});
    expect_all_near(depthwise_conv1d(x, k), {3, 6, 5}, 1e-12);
}

TEST(DepthwiseConv, EvenKernelRejected) {
    EXPECT_THROW(depthwise_conv1d(D({4, 2}), D({2, 2})), config_error);
}

TEST(DepthwiseConv, Gradient) {
    std::mt19937 rng(23);
    D x0 = random_uniform<double>({6, 4}, -1, 1, rng);
    D k0 = random_uniform<double>({3, 4}, -1, 1, rng);
    D w = random_uniform<double>({6, 4}, -1, 1, rng);
    auto fx = [&](const D& x) { return sum(mul(depthwise_conv1d(x, k0), w)); };
    auto fk = [&](const D& k) { return sum(mul(depthwise_conv1d(x0, k), w)); };
    EXPECT_LT(finite_diff_check(fx, x0, kFdStep), kFdTol);
    EXPECT_LT(finite_diff_check(fk, k0, kFdStep), kFdTol);
}

TEST(StridedConv, OutputLengthIsCeilOfStride) {
    std::mt19937 rng(29);
    for (int len = 1; len <= 9; ++len) {
        D x = random_uniform<double>({len, 2}, -1, 1, rng);
        D k = random_uniform<double>({3, 2, 4}, -1, 1, rng);
        EXPECT_EQ(conv1d_strided(x, k, 2).dim(0), (len + 1) / 2) << "len=" << len;
    }
}

TEST(StridedConv, Stride1MatchesIndependentLoop) {
    std::mt19937 rng(31);
    D x = random_uniform<double>({5, 2}, -1, 1, rng);
    D k = random_uniform<double>({3, 2, 3}, -1, 1, rng);
    D got = conv1d_strided(x, k, 1);
    for (int t = 0; t < 5; ++t)
        for (int o = 0; o < 3; ++o) {
            double want = 0;
            for (int j = 0; j < 3; ++j) {
                const int s = t + j - 1;
                if (s < 0 || s >= 5) continue;
                for (int c = 0; c < 2; ++c) want += x.data()[s * 2 + c] * k.data()[(j * 2 + c) * 3 + o];
            }
            EXPECT_NEAR(got.data()[t * 3 + o], want, 1e-12);
        }
}

TEST(StridedConv, Gradient) {
    std::mt19937 rng(37);
    D x0 = random_uniform<double>({7, 3}, -1, 1, rng);
    D k0 = random_uniform<double>({3, 3, 2}, -1, 1, rng);
    D w = random_uniform<double>({4, 2}, -1, 1, rng);
    auto fx = [&](const D& x) { return sum(mul(conv1d_strided(x, k0, 2), w)); };
    auto fk = [&](const D& k) { return sum(mul(conv1d_strided(x0, k, 2), w)); };
    EXPECT_LT(finite_diff_check(fx, x0, kFdStep), kFdTol);
    EXPECT_LT(finite_diff_check(fk, k0, kFdStep), kFdTol);
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

TEST(Activations, Relu) {
    D x({2}, {-1, 2});
    expect_all_eq(relu(x), {0, 2});
}

TEST(Activations, SwishAtZero) {
    EXPECT_EQ(swish(D::scalar(0)).item(), 0.0);
}

TEST(Activations, GluWithZeroGateHalvesInput) {
    D x({1, 4}, {2.0, -3.0, 0.0, 0.0});
    expect_all_near(glu(x), {1.0, -1.5}, 1e-12);
}

TEST(Activations, GluOddLastDimRejected) {
    EXPECT_THROW(glu(D({2, 3})), shape_error);
}

TEST(Activations, Gradients) {
    std::mt19937 rng(41);
    D x0 = random_uniform<double>({3, 4}, -2, 2, rng);
    // relu is kinked at 0; keep probes away from it.
    for (std::int64_t i = 0; i < x0.size(); ++i)
        if (std::abs(x0.data()[i]) < 0.05) x0.data()[i] = 0.1;
    D w = random_uniform<double>({3, 4}, -1, 1, rng);
    D w2 = random_uniform<double>({3, 2}, -1, 1, rng);
    auto frelu = [&](const D& x) { return sum(mul(relu(x), w)); };
    auto fswish = [&](const D& x) { return sum(mul(swish(x), w)); };
    auto fsig = [&](const D& x) { return sum(mul(sigmoid(x), w)); };
    auto fglu = [&](const D& x) { return sum(mul(glu(x), w2)); };
    EXPECT_LT(finite_diff_check(frelu, x0, kFdStep), kFdTol);
    EXPECT_LT(finite_diff_check(fswish, x0, kFdStep), kFdTol);
    EXPECT_LT(finite_diff_check(fsig, x0, kFdStep), kFdTol);
    EXPECT_LT(finite_diff_check(fglu, x0, kFdStep), kFdTol);
}

// ---------------------------------------------------------------------------
// embedding lookup
// ---------------------------------------------------------------------------

TEST(Embedding, SingleIdPicksRow) {
    D table({3, 2}, {1, 2, 3, 4, 5, 6});
    expect_all_eq(embedding_lookup(table, {0}), {1, 2});
}

TEST(Embedding, RepeatedIdAccumulatesGradient) {
    std::mt19937 rng(43);
    D table0 = random_uniform<double>({4, 3}, -1, 1, rng);
    D w = random_uniform<double>({2, 3}, -1, 1, rng);
    auto f = [&](const D& t) { return sum(mul(embedding_lookup(t, {2, 2}), w)); };
    // Analytic: row 2 gets both upstream rows, everything else zero.
    Tape<double> tape;
    D table = tape.leaf(table0);
    tape.backward(f(table));
    D g = tape.grad(table);
    for (int c = 0; c < 3; ++c) {
        EXPECT_NEAR(g.data()[2 * 3 + c], w.data()[c] + w.data()[3 + c], 1e-12);
        EXPECT_EQ(g.data()[0 * 3 + c], 0.0);
    }
    EXPECT_LT(finite_diff_check(f, table0, kFdStep), kFdTol);
}

TEST(Embedding, EmptyIdsGiveEmptyTensor) {
    D table({3, 2});
    D out = embedding_lookup(table, {});
    EXPECT_EQ(out.shape(), (Shape{0, 2}));
    EXPECT_EQ(out.size(), 0);
}

TEST(Embedding, OutOfRangeIdNamesOffender) {
    D table({3, 2});
    try {
        embedding_lookup(table, {0, 7});
        FAIL() << "expected index_error";
    } catch (const index_error& e) {
        EXPECT_NE(std::string(e.what()).find("7"), std::string::npos);
    }
}

// ---------------------------------------------------------------------------
// cross entropy with label smoothing
// ---------------------------------------------------------------------------

TEST(CrossEntropy, UniformLogitsGiveLogV) {
    D logits({1, 4});
    D loss = cross_entropy_label_smoothed(logits, {2}, 0.0, -1);
    EXPECT_NEAR(loss.item(), std::log(4.0), 1e-12);
}

TEST(CrossEntropy, ZeroSmoothingEqualsPlainNll) {
    std::mt19937 rng(47);
    for (int c = 0; c < 3; ++c) {
        D logits = random_uniform<double>({5, 6}, -3, 3, rng);
        std::vector<int> targets;
        std::uniform_int_distribution<int> pick(0, 5);
        for (int t = 0; t < 5; ++t) targets.push_back(pick(rng));
        const double got = cross_entropy_label_smoothed(logits, targets, 0.0, -1).item();
        // Independent NLL: -mean log softmax(logits)[t, y_t] via log-sum-exp.
        double want = 0;
        for (int t = 0; t < 5; ++t) {
            const double* row = logits.data() + t * 6;
            double mx = row[0];
            for (int i = 1; i < 6; ++i) mx = std::max(mx, row[i]);
            double lse = 0;
            for (int i = 0; i < 6; ++i) lse += std::exp(row[i] - mx);
            want += -(row[targets[t]] - mx - std::log(lse));
        }
        want /= 5;
        EXPECT_NEAR(got, want, 1e-10);
    }
}

TEST(CrossEntropy, ConfidentCorrectLogitsDriveLossToZero) {
    D logits({2, 3}, {50, 0, 0, 0, 50, 0});
    D loss = cross_entropy_label_smoothed(logits, {0, 1}, 0.0, -1);
    EXPECT_LT(loss.item(), 1e-9);
}

TEST(CrossEntropy, PadPositionsExcludedFromMean) {
    D logits({2, 3}, {1, 2, 3, 100, -50, 7});
    const double with_pad = cross_entropy_label_smoothed(logits, {1, 0}, 0.0, 0).item();
    D row({1, 3}, {1, 2, 3});
    const double alone = cross_entropy_label_smoothed(row, {1}, 0.0, -1).item();
    EXPECT_NEAR(with_pad, alone, 1e-12);  // second row has the pad id target
}

TEST(CrossEntropy, AllPaddedRejected) {
    D logits({2, 3});
    EXPECT_THROW(cross_entropy_label_smoothed(logits, {0, 0}, 0.0, 0), numeric_error);
}

TEST(CrossEntropy, GradientWithSmoothing) {
    std::mt19937 rng(53);
    D logits0 = random_uniform<double>({4, 5}, -2, 2, rng);
    auto f = [&](const D& l) { return cross_entropy_label_smoothed(l, {1, 0, 4, 2}, 0.1, -1); };
    EXPECT_LT(finite_diff_check(f, logits0, kFdStep), kFdTol);
}

// ---------------------------------------------------------------------------
// backward bookkeeping
// ---------------------------------------------------------------------------

TEST(Backward, SumGivesOnes) {
    Tape<double> tape;
    D x = tape.leaf(D({2, 2}, {1, 2, 3, 4}));
    tape.backward(sum(x));
    expect_all_eq(tape.grad(x), {1, 1, 1, 1});
}

TEST(Backward, ElementwiseSquare) {
    Tape<double> tape;
    D x = tape.leaf(D({2}, {1, 2}));
    tape.backward(sum(mul(x, x)));
    expect_all_near(tape.grad(x), {2, 4}, 1e-12);
}

TEST(Backward, NonScalarLossRejected) {
    Tape<double> tape;
    D x = tape.leaf(D({2}, {1, 2}));
    D y = mul(x, x);
    EXPECT_THROW(tape.backward(y), shape_error);
}

TEST(Backward, SecondInvocationRejected) {
    Tape<double> tape;
    D x = tape.leaf(D({2}, {1, 2}));
    D loss = sum(x);
    tape.backward(loss);
    EXPECT_THROW(tape.backward(loss), autodiff_error);
}

TEST(Backward, VisitsEveryNodeExactlyOnce) {
    Tape<double> tape;
    D x = tape.leaf(D({3}, {1, 2, 3}));
    D y = mul(x, x);
    D z = add(y, x);
    D loss = sum(z);
    tape.backward(loss);
    EXPECT_EQ(tape.last_backward_visits(), tape.node_count());
    // Two paths into x: d/dx sum(x*x + x) = 2x + 1, accumulated once each.
    expect_all_near(tape.grad(x), {3, 5, 7}, 1e-12);
}

TEST(Backward, ForwardIsDeterministic) {
    std::mt19937 rng(59);
    D a = random_uniform<double>({4, 4}, -1, 1, rng);
    D b = random_uniform<double>({4, 4}, -1, 1, rng);
    D r1 = matmul(softmax(a), relu(b));
    D r2 = matmul(softmax(a), relu(b));
    expect_all_eq(r1, r2.values());
}

// ---------------------------------------------------------------------------
// finite_diff_check itself
// ---------------------------------------------------------------------------

TEST(FiniteDiff, SumHasNearZeroError) {
    std::mt19937 rng(61);
    D x = random_uniform<double>({3, 3}, -1, 1, rng);
    EXPECT_LT(finite_diff_check([](const D& t) { return sum(t); }, x, kFdStep), 1e-9);
}

TEST(FiniteDiff, SoftmaxThenPick) {
    std::mt19937 rng(67);
    D x = random_uniform<double>({2, 5}, -2, 2, rng);
    D onehot({2, 5});
    onehot.data()[3] = 1.0;
    onehot.data()[5 + 1] = 1.0;
    auto f = [&](const D& t) { return sum(mul(softmax(t), onehot)); };
    EXPECT_LT(finite_diff_check(f, x, kFdStep), kFdTol);
}

TEST(FiniteDiff, FlagsDeliberatelyWrongBackward) {
    // Fixture op: forward is sum(x), backward claims the gradient is 0.5.
    auto broken_sum = [](const D& x) {
        double s = 0;
        for (std::int64_t i = 0; i < x.size(); ++i) s += x.data()[i];
        D out = D::scalar(s);
        if (x.on_tape()) {
            const int xn = x.node();
            const std::int64_t n = x.size();
            out.attach(x.tape(), x.tape()->add_node(1, [=](const double* g, Tape<double>& tp) {
                double* gx = tp.grad_buffer(xn);
                for (std::int64_t i = 0; i < n; ++i) gx[i] += 0.5 * g[0];
            }));
        }
        return out;
    };
    std::mt19937 rng(71);
    D x = random_uniform<double>({4}, -1, 1, rng);
    EXPECT_GT(finite_diff_check(broken_sum, x, kFdStep), 1e-2);
}

// ---------------------------------------------------------------------------
// dropout and structural ops
// ---------------------------------------------------------------------------

TEST(Dropout, ZeroRateIsIdentity) {
    std::mt19937 rng(73);
    D x = random_uniform<double>({3, 3}, -1, 1, rng);
    std::mt19937 stream(1);
    expect_all_eq(dropout(x, 0.0, stream), x.values());
}

TEST(Dropout, SurvivorsScaledAndGradientMatchesMask) {
    D x0 = D::full({1000}, 1.0);
    std::mt19937 stream(9);
    Tape<double> tape;
    D x = tape.leaf(x0);
    D y = dropout(x, 0.5, stream);
    int kept = 0;
    for (std::int64_t i = 0; i < y.size(); ++i) {
        if (y.data()[i] != 0.0) {
            EXPECT_EQ(y.data()[i], 2.0);
            ++kept;
        }
    }
    EXPECT_NEAR(kept / 1000.0, 0.5, 0.06);
    tape.backward(sum(y));
    D g = tape.grad(x);
    for (std::int64_t i = 0; i < g.size(); ++i)
        EXPECT_EQ(g.data()[i], y.data()[i] == 0.0 ? 0.0 : 2.0);
}

TEST(Dropout, InvalidRateRejected) {
    D x({2}, {1, 2});
    std::mt19937 stream(1);
    EXPECT_THROW(dropout(x, 1.0, stream), config_error);
    EXPECT_THROW(dropout(x, -0.1, stream), config_error);
}

TEST(Structural, SliceConcatRoundTripAndGradient) {
    std::mt19937 rng(79);
    D x0 = random_uniform<double>({3, 6}, -1, 1, rng);
    D back = concat_cols<double>({slice_cols(x0, 0, 2), slice_cols(x0, 2, 4)});
    expect_all_eq(back, x0.values());

    D w = random_uniform<double>({3, 2}, -1, 1, rng);
    auto f = [&](const D& x) { return sum(mul(slice_cols(x, 2, 2), w)); };
    EXPECT_LT(finite_diff_check(f, x0, kFdStep), kFdTol);
}

TEST(Structural, ZeroRowsFrom) {
    std::mt19937 rng(83);
    D x0 = random_uniform<double>({4, 3}, -1, 1, rng);
    D y = zero_rows_from(x0, 2);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 3; ++c)
            EXPECT_EQ(y.data()[r * 3 + c], r < 2 ? x0.data()[r * 3 + c] : 0.0);
    D w = random_uniform<double>({4, 3}, -1, 1, rng);
    auto f = [&](const D& x) { return sum(mul(zero_rows_from(x, 2), w)); };
    EXPECT_LT(finite_diff_check(f, x0, kFdStep), kFdTol);
}

TEST(Structural, MixedTapesRejected) {
    Tape<double> t1, t2;
    D a = t1.leaf(D({2}, {1, 2}));
    D b = t2.leaf(D({2}, {3, 4}));
    EXPECT_THROW(add(a, b), autodiff_error);
}
