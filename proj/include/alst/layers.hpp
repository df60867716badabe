#pragma once

// Network building blocks shared by the encoders and the decoder: parameter
// bookkeeping, linear/attention/feed-forward/conformer layers and sinusoidal
// positions. Everything is templated on the scalar type so the whole model
// can run at double for gradient checking.

#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "alst/error.hpp"
#include "alst/tensor.hpp"

namespace alst {

// Named registry of every trainable tensor. Entries share storage with the
// layer that owns the parameter, so in-place updates (optimizer, checkpoint
// load) are visible to the model immediately.
template <typename T>
class ParameterSet {
public:
    struct Entry {
        std::string name;
        Shape shape;
        std::shared_ptr<std::vector<T>> data;
    };

    void add(const std::string& name, const Tensor<T>& t) {
        if (index_.count(name)) throw config_error("parameter registered twice: " + name);
        index_[name] = items_.size();
        items_.push_back({name, t.shape(), t.storage()});
    }

    std::size_t size() const { return items_.size(); }
    const Entry& operator[](std::size_t i) const { return items_[i]; }
    const Entry& at(const std::string& name) const {
        const auto it = index_.find(name);
        if (it == index_.end()) throw config_error("unknown parameter: " + name);
        return items_[it->second];
    }
    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    std::int64_t total_elements() const {
        std::int64_t n = 0;
        for (const auto& e : items_) n += static_cast<std::int64_t>(e.data->size());
        return n;
    }

    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }

private:
    std::vector<Entry> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Per-forward state: the tape (null for inference), the dropout stream and
// a cache mapping parameters to their tape leaves so each parameter gets
// exactly one node per tape no matter how often it is used.
template <typename T>
struct Fwd {
    Tape<T>* tape = nullptr;
    bool training = false;
    T dropout_rate = T(0);
    std::mt19937* rng = nullptr;

    std::unordered_map<const void*, Tensor<T>> leaves;

    Tensor<T> p(const Tensor<T>& param) {
        if (!tape) return param;
        const void* key = param.storage().get();
        auto it = leaves.find(key);
        if (it == leaves.end()) it = leaves.emplace(key, tape->leaf(param)).first;
        return it->second;
    }

    Tensor<T> drop(const Tensor<T>& x) {
        if (!training || dropout_rate <= T(0)) return x;
        if (!rng) throw config_error("forward: training dropout requires an rng stream");
        return dropout(x, dropout_rate, *rng);
    }

    // Gradient of a parameter after backward; zeros when the parameter did
    // not participate in the forward.
    Tensor<T> grad_of(const typename ParameterSet<T>::Entry& e) const {
        const auto it = leaves.find(e.data.get());
        if (it == leaves.end()) return Tensor<T>(e.shape);
        return tape->grad(it->second);
    }
};

// Deterministic weight init: Xavier-uniform for projections, scaled normal
// for embeddings.
template <typename T>
struct Init {
    std::mt19937 rng;
    explicit Init(std::uint32_t seed) : rng(seed) {}

    Tensor<T> xavier(Shape shape, int fan_in, int fan_out) {
        const T limit = std::sqrt(T(6) / static_cast<T>(fan_in + fan_out));
        return random_uniform<T>(std::move(shape), -limit, limit, rng);
    }

    Tensor<T> embedding(int vocab, int dim) {
        return random_normal<T>({vocab, dim}, T(0), T(1) / std::sqrt(static_cast<T>(dim)), rng);
    }
};

template <typename T>
struct Linear {
    Tensor<T> w, b;

    Linear() = default;
    Linear(int in, int out, Init<T>& init)
        : w(init.xavier({in, out}, in, out)), b(Tensor<T>({out})) {}

    Tensor<T> forward(Fwd<T>& ctx, const Tensor<T>& x) const {
        return add_rows(matmul(x, ctx.p(w)), ctx.p(b));
    }

    void register_params(ParameterSet<T>& ps, const std::string& prefix) const {
        ps.add(prefix + ".w", w);
        ps.add(prefix + ".b", b);
    }
};

template <typename T>
struct LayerNorm {
    Tensor<T> gain, bias;
    T eps = T(1e-5);

    LayerNorm() = default;
    explicit LayerNorm(int d) : gain(Tensor<T>::full({d}, T(1))), bias(Tensor<T>({d})) {}

    Tensor<T> forward(Fwd<T>& ctx, const Tensor<T>& x) const {
        return layer_norm(x, ctx.p(gain), ctx.p(bias), eps);
    }

    void register_params(ParameterSet<T>& ps, const std::string& prefix) const {
        ps.add(prefix + ".gain", gain);
        ps.add(prefix + ".bias", bias);
    }
};

// Attention masks are flat [rows, cols] byte arrays, 1 = may attend.
inline std::vector<std::uint8_t> key_mask(int rows, int cols, int valid_cols) {
    std::vector<std::uint8_t> m(static_cast<std::size_t>(rows) * cols, 0);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < valid_cols; ++c) m[static_cast<std::size_t>(r) * cols + c] = 1;
    return m;
}

inline std::vector<std::uint8_t> causal_mask(int len) {
    std::vector<std::uint8_t> m(static_cast<std::size_t>(len) * len, 0);
    for (int r = 0; r < len; ++r)
        for (int c = 0; c <= r; ++c) m[static_cast<std::size_t>(r) * len + c] = 1;
    return m;
}

template <typename T>
struct MultiHeadAttention {
    int d_model = 0, heads = 0;
    Linear<T> wq, wk, wv, wo;

    MultiHeadAttention() = default;
    MultiHeadAttention(int d, int n_heads, Init<T>& init)
        : d_model(d),
          heads(n_heads),
          wq(d, d, init),
          wk(d, d, init),
          wv(d, d, init),
          wo(d, d, init) {
        if (d % n_heads != 0)
            throw config_error("attention: d_model " + std::to_string(d) +
                               " not divisible by heads " + std::to_string(n_heads));
    }

    Tensor<T> forward(Fwd<T>& ctx, const Tensor<T>& query_in, const Tensor<T>& kv_in,
                      const std::vector<std::uint8_t>* mask) const {
        const Tensor<T> q = wq.forward(ctx, query_in);
        const Tensor<T> k = wk.forward(ctx, kv_in);
        const Tensor<T> v = wv.forward(ctx, kv_in);
        const int dk = d_model / heads;
        const T inv_sqrt_dk = T(1) / std::sqrt(static_cast<T>(dk));
        std::vector<Tensor<T>> ctx_heads;
        ctx_heads.reserve(static_cast<std::size_t>(heads));
        for (int h = 0; h < heads; ++h) {
            const Tensor<T> qh = slice_cols(q, h * dk, dk);
            const Tensor<T> kh = slice_cols(k, h * dk, dk);
            const Tensor<T> vh = slice_cols(v, h * dk, dk);
            Tensor<T> probs = softmax(scale(matmul_nt(qh, kh), inv_sqrt_dk), mask);
            probs = ctx.drop(probs);
            ctx_heads.push_back(matmul(probs, vh));
        }
        return wo.forward(ctx, concat_cols(ctx_heads));
    }

    void register_params(ParameterSet<T>& ps, const std::string& prefix) const {
        wq.register_params(ps, prefix + ".wq");
        wk.register_params(ps, prefix + ".wk");
        wv.register_params(ps, prefix + ".wv");
        wo.register_params(ps, prefix + ".wo");
    }
};

template <typename T>
struct FeedForward {
    Linear<T> in, out;
    bool use_swish = true;

    FeedForward() = default;
    FeedForward(int d, int hidden, bool swish_act, Init<T>& init)
        : in(d, hidden, init), out(hidden, d, init), use_swish(swish_act) {}

    Tensor<T> forward(Fwd<T>& ctx, const Tensor<T>& x) const {
        Tensor<T> h = in.forward(ctx, x);
        h = use_swish ? swish(h) : relu(h);
        return out.forward(ctx, ctx.drop(h));
    }

    void register_params(ParameterSet<T>& ps, const std::string& prefix) const {
        in.register_params(ps, prefix + ".in");
        out.register_params(ps, prefix + ".out");
    }
};

// Conformer convolution module: pointwise expansion with GLU gating, a
// depthwise kernel over time, swish, pointwise back to d_model. Padded
// rows are re-zeroed first so the depthwise kernel never reads them.
template <typename T>
struct ConvModule {
    Linear<T> pw_in;   // d -> 2d
    Tensor<T> dw;      // [kernel, d]
    Linear<T> pw_out;  // d -> d

    ConvModule() = default;
    ConvModule(int d, int kernel, Init<T>& init)
        : pw_in(d, 2 * d, init),
          dw(init.xavier({kernel, d}, kernel, kernel)),
          pw_out(d, d, init) {
        if (kernel % 2 == 0)
            throw config_error("conv module: kernel must be odd, got " + std::to_string(kernel));
    }

    Tensor<T> forward(Fwd<T>& ctx, const Tensor<T>& x, int valid_len) const {
        Tensor<T> h = glu(pw_in.forward(ctx, x));
        if (valid_len < h.dim(0)) h = zero_rows_from(h, valid_len);
        h = swish(depthwise_conv1d(h, ctx.p(dw)));
        return pw_out.forward(ctx, h);
    }

    void register_params(ParameterSet<T>& ps, const std::string& prefix) const {
        pw_in.register_params(ps, prefix + ".pw_in");
        ps.add(prefix + ".dw", dw);
        pw_out.register_params(ps, prefix + ".pw_out");
    }
};

// One conformer block: half-step feed-forward, self-attention, convolution
// module, half-step feed-forward, closing layer norm. Pre-norm residuals.
template <typename T>
struct ConformerBlock {
    FeedForward<T> ffn1, ffn2;
    MultiHeadAttention<T> attn;
    ConvModule<T> conv;
    LayerNorm<T> ln_ffn1, ln_attn, ln_conv, ln_ffn2, ln_out;

    ConformerBlock() = default;
    ConformerBlock(int d, int heads, int ffn_dim, int kernel, Init<T>& init)
        : ffn1(d, ffn_dim, true, init),
          ffn2(d, ffn_dim, true, init),
          attn(d, heads, init),
          conv(d, kernel, init),
          ln_ffn1(d),
          ln_attn(d),
          ln_conv(d),
          ln_ffn2(d),
          ln_out(d) {}

    Tensor<T> forward(Fwd<T>& ctx, const Tensor<T>& x_in, int valid_len) const {
        Tensor<T> x = add(x_in, scale(ctx.drop(ffn1.forward(ctx, ln_ffn1.forward(ctx, x_in))), T(0.5)));
        const auto mask = key_mask(x.dim(0), x.dim(0), valid_len);
        const Tensor<T> a = ln_attn.forward(ctx, x);
        x = add(x, ctx.drop(attn.forward(ctx, a, a, &mask)));
        x = add(x, ctx.drop(conv.forward(ctx, ln_conv.forward(ctx, x), valid_len)));
        x = add(x, scale(ctx.drop(ffn2.forward(ctx, ln_ffn2.forward(ctx, x))), T(0.5)));
        return ln_out.forward(ctx, x);
    }

    void register_params(ParameterSet<T>& ps, const std::string& prefix) const {
        ffn1.register_params(ps, prefix + ".ffn1");
        ln_ffn1.register_params(ps, prefix + ".ln_ffn1");
        attn.register_params(ps, prefix + ".attn");
        ln_attn.register_params(ps, prefix + ".ln_attn");
        conv.register_params(ps, prefix + ".conv");
        ln_conv.register_params(ps, prefix + ".ln_conv");
        ffn2.register_params(ps, prefix + ".ffn2");
        ln_ffn2.register_params(ps, prefix + ".ln_ffn2");
        ln_out.register_params(ps, prefix + ".ln_out");
    }
};

// Sinusoidal absolute positions, added to sqrt(d)-scaled inputs.
template <typename T>
struct PositionalEncoding {
    int d_model = 0;

    PositionalEncoding() = default;
    explicit PositionalEncoding(int d) : d_model(d) {}

    Tensor<T> table(int len) const {
        Tensor<T> pe({len, d_model});
        for (int t = 0; t < len; ++t)
            for (int i = 0; i < d_model; i += 2) {
                const double angle =
                    t / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d_model));
                pe.data()[t * d_model + i] = static_cast<T>(std::sin(angle));
                if (i + 1 < d_model) pe.data()[t * d_model + i + 1] = static_cast<T>(std::cos(angle));
            }
        return pe;
    }

    Tensor<T> add_to(Fwd<T>& ctx, const Tensor<T>& x) const {
        Tensor<T> scaled = scale(x, std::sqrt(static_cast<T>(d_model)));
        return ctx.drop(add(scaled, table(x.dim(0))));
    }
};

template <typename T>
struct Embedding {
    Tensor<T> table;
    PositionalEncoding<T> pos;

    Embedding() = default;
    Embedding(int vocab, int d, Init<T>& init) : table(init.embedding(vocab, d)), pos(d) {}

    Tensor<T> forward(Fwd<T>& ctx, const std::vector<int>& ids) const {
        return pos.add_to(ctx, embedding_lookup(ctx.p(table), ids));
    }

    void register_params(ParameterSet<T>& ps, const std::string& prefix) const {
        ps.add(prefix + ".table", table);
    }
};

// Two (or log2(factor)) stride-2 convolutions over time with swish, then a
// linear map into the model dimension. Output length is ceil(T / factor).
template <typename T>
struct Subsampler {
    struct Stage {
        Tensor<T> kernel;  // [3, in, out]
        Tensor<T> bias;    // [out]
    };
    std::vector<Stage> stages;
    Linear<T> proj;
    PositionalEncoding<T> pos;
    int factor = 4;

    Subsampler() = default;
    Subsampler(int feat_dim, int d_model, int subsample_factor, Init<T>& init)
        : factor(subsample_factor) {
        if (factor < 2 || (factor & (factor - 1)) != 0)
            throw config_error("subsampler: factor must be a power of two >= 2, got " +
                               std::to_string(factor));
        int in = feat_dim;
        for (int f = factor; f > 1; f /= 2) {
            stages.push_back({init.xavier({3, in, d_model}, 3 * in, 3 * d_model),
                              Tensor<T>({d_model})});
            in = d_model;
        }
        proj = Linear<T>(d_model, d_model, init);
        pos = PositionalEncoding<T>(d_model);
    }

    static int subsampled_len(int len, int factor) {
        return (len + factor - 1) / factor;
    }

    Tensor<T> forward(Fwd<T>& ctx, const Tensor<T>& feats, int valid_len, int* out_len) const {
        Tensor<T> x = feats;
        int len = valid_len;
        for (const auto& st : stages) {
            if (len < x.dim(0)) x = zero_rows_from(x, len);
            x = swish(add_rows(conv1d_strided(x, ctx.p(st.kernel), 2), ctx.p(st.bias)));
            len = (len + 1) / 2;
        }
        *out_len = len;
        return pos.add_to(ctx, proj.forward(ctx, x));
    }

    void register_params(ParameterSet<T>& ps, const std::string& prefix) const {
        for (std::size_t i = 0; i < stages.size(); ++i) {
            ps.add(prefix + ".conv" + std::to_string(i) + ".kernel", stages[i].kernel);
            ps.add(prefix + ".conv" + std::to_string(i) + ".bias", stages[i].bias);
        }
        proj.register_params(ps, prefix + ".proj");
    }
};

}  // namespace alst
