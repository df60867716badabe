#pragma once

// The speech-translation network: a conformer acoustic encoder, an optional
// conformer phone encoder, cross-attention fusion of the two streams on the
// acoustic time axis, and a transformer decoder that may carry an extra
// stacked attention sublayer over the phone memory.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "alst/error.hpp"
#include "alst/layers.hpp"
#include "alst/tensor.hpp"

namespace alst {

// Reserved token ids, fixed across every vocabulary in the system.
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;

enum class FusionMode { none, encoder, decoder, both };

inline const char* to_string(FusionMode m) {
    switch (m) {
        case FusionMode::none: return "none";
        case FusionMode::encoder: return "encoder";
        case FusionMode::decoder: return "decoder";
        case FusionMode::both: return "both";
    }
    return "?";
}

inline FusionMode parse_fusion_mode(const std::string& s) {
    if (s == "none") return FusionMode::none;
    if (s == "encoder") return FusionMode::encoder;
    if (s == "decoder") return FusionMode::decoder;
    if (s == "both") return FusionMode::both;
    throw config_error("unknown fusion mode '" + s + "' (none|encoder|decoder|both)");
}

struct ModelConfig {
    int d_model = 256;
    int heads = 4;
    int ffn_dim = 2048;
    int acoustic_layers = 12;
    int phone_layers = 6;
    int decoder_layers = 6;
    int conv_kernel = 15;
    double dropout = 0.1;
    double label_smoothing = 0.1;
    FusionMode fusion = FusionMode::none;
    int acoustic_feature_dim = 83;  // 80 filterbank + 3 pitch
    int phone_vocab = 0;
    int target_vocab = 0;
    int subsample_factor = 4;

    bool uses_phone_encoder() const { return fusion != FusionMode::none; }
    bool uses_encoder_fusion() const {
        return fusion == FusionMode::encoder || fusion == FusionMode::both;
    }
    bool uses_decoder_fusion() const {
        return fusion == FusionMode::decoder || fusion == FusionMode::both;
    }

    void validate() const {
        if (d_model < 1) throw config_error("model: d_model must be positive");
        if (heads < 1 || d_model % heads != 0)
            throw config_error("model: d_model " + std::to_string(d_model) +
                               " must be divisible by heads " + std::to_string(heads));
        if (ffn_dim < 1) throw config_error("model: ffn_dim must be positive");
        if (acoustic_layers < 1 || decoder_layers < 1)
            throw config_error("model: encoder/decoder need at least one layer");
        if (uses_phone_encoder() && phone_layers < 1)
            throw config_error("model: phone encoder needs at least one layer");
        if (conv_kernel < 1 || conv_kernel % 2 == 0)
            throw config_error("model: conv_kernel must be odd and positive");
        if (dropout < 0.0 || dropout >= 1.0)
            throw config_error("model: dropout must be in [0,1)");
        if (label_smoothing < 0.0 || label_smoothing >= 1.0)
            throw config_error("model: label_smoothing must be in [0,1)");
        if (acoustic_feature_dim < 1) throw config_error("model: acoustic_feature_dim must be positive");
        if (target_vocab < 5) throw config_error("model: target_vocab too small");
        if (uses_phone_encoder() && phone_vocab < 5)
            throw config_error("model: phone_vocab too small for fusion mode " +
                               std::string(to_string(fusion)));
        if (subsample_factor < 2 || (subsample_factor & (subsample_factor - 1)) != 0)
            throw config_error("model: subsample_factor must be a power of two >= 2");
    }
};

template <typename T>
struct EncodedMemory {
    Tensor<T> acoustic;  // [T', d_model], fused when encoder fusion is on
    int acoustic_len = 0;
    Tensor<T> phone;  // [P, d_model], present only when the decoder reads it
    int phone_len = 0;
    bool has_phone = false;
};

// Decoder block: masked self-attention, cross-attention over the acoustic
// memory, optionally a stacked cross-attention over the phone memory placed
// directly after it, then the feed-forward. Pre-norm residuals throughout.
template <typename T>
struct DecoderBlock {
    MultiHeadAttention<T> self_attn, src_attn;
    std::optional<MultiHeadAttention<T>> phone_attn;
    FeedForward<T> ffn;
    LayerNorm<T> ln_self, ln_src, ln_phone, ln_ffn;

    DecoderBlock() = default;
    DecoderBlock(int d, int heads, int ffn_dim, bool with_phone, Init<T>& init)
        : self_attn(d, heads, init),
          src_attn(d, heads, init),
          ffn(d, ffn_dim, false, init),
          ln_self(d),
          ln_src(d),
          ln_ffn(d) {
        if (with_phone) {
            phone_attn.emplace(d, heads, init);
            ln_phone = LayerNorm<T>(d);
        }
    }

    Tensor<T> forward(Fwd<T>& ctx, const Tensor<T>& x_in, const EncodedMemory<T>& mem,
                      const std::vector<std::uint8_t>& causal) const {
        const Tensor<T> s = ln_self.forward(ctx, x_in);
        Tensor<T> x = add(x_in, ctx.drop(self_attn.forward(ctx, s, s, &causal)));
        const auto src_mask = key_mask(x.dim(0), mem.acoustic.dim(0), mem.acoustic_len);
        x = add(x, ctx.drop(src_attn.forward(ctx, ln_src.forward(ctx, x), mem.acoustic, &src_mask)));
        if (phone_attn) {
            if (!mem.has_phone)
                throw config_error("decoder: fusion mode needs a phone memory but none was built");
            const auto ph_mask = key_mask(x.dim(0), mem.phone.dim(0), mem.phone_len);
            x = add(x, ctx.drop(phone_attn->forward(ctx, ln_phone.forward(ctx, x), mem.phone, &ph_mask)));
        }
        return add(x, ctx.drop(ffn.forward(ctx, ln_ffn.forward(ctx, x))));
    }

    void register_params(ParameterSet<T>& ps, const std::string& prefix) const {
        self_attn.register_params(ps, prefix + ".self_attn");
        ln_self.register_params(ps, prefix + ".ln_self");
        src_attn.register_params(ps, prefix + ".src_attn");
        ln_src.register_params(ps, prefix + ".ln_src");
        if (phone_attn) {
            phone_attn->register_params(ps, prefix + ".phone_attn");
            ln_phone.register_params(ps, prefix + ".ln_phone");
        }
        ffn.register_params(ps, prefix + ".ffn");
        ln_ffn.register_params(ps, prefix + ".ln_ffn");
    }
};

struct GenerateResult {
    std::vector<int> ids;  // generated tokens, without <bos>/<eos>
    double score = 0.0;    // length-normalized log probability
    bool truncated = false;
};

template <typename T>
struct TeacherForced {
    Tensor<T> loss;
    int correct = 0;
    int tokens = 0;
};

template <typename T>
class Model {
public:
    Model(ModelConfig cfg, std::uint32_t seed) : cfg_(cfg) {
        cfg_.validate();
        Init<T> init(seed);
        sub_ = Subsampler<T>(cfg_.acoustic_feature_dim, cfg_.d_model, cfg_.subsample_factor, init);
        enc2_.reserve(static_cast<std::size_t>(cfg_.acoustic_layers));
        for (int i = 0; i < cfg_.acoustic_layers; ++i)
            enc2_.emplace_back(cfg_.d_model, cfg_.heads, cfg_.ffn_dim, cfg_.conv_kernel, init);
        if (cfg_.uses_phone_encoder()) {
            phone_emb_.emplace(cfg_.phone_vocab, cfg_.d_model, init);
            enc1_.reserve(static_cast<std::size_t>(cfg_.phone_layers));
            for (int i = 0; i < cfg_.phone_layers; ++i)
                enc1_.emplace_back(cfg_.d_model, cfg_.heads, cfg_.ffn_dim, cfg_.conv_kernel, init);
        }
        if (cfg_.uses_encoder_fusion()) {
            fuse_attn_.emplace(cfg_.d_model, cfg_.heads, init);
            fuse_ln_ = LayerNorm<T>(cfg_.d_model);
        }
        tgt_emb_ = Embedding<T>(cfg_.target_vocab, cfg_.d_model, init);
        dec_.reserve(static_cast<std::size_t>(cfg_.decoder_layers));
        for (int i = 0; i < cfg_.decoder_layers; ++i)
            dec_.emplace_back(cfg_.d_model, cfg_.heads, cfg_.ffn_dim, cfg_.uses_decoder_fusion(),
                              init);
        dec_ln_ = LayerNorm<T>(cfg_.d_model);
        out_ = Linear<T>(cfg_.d_model, cfg_.target_vocab, init);
        register_all();
    }

    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    const ModelConfig& config() const { return cfg_; }
    const ParameterSet<T>& params() const { return params_; }

    // Subsampling then the conformer stack; *out_len receives
    // ceil(valid_len / subsample_factor).
    Tensor<T> acoustic_encode(Fwd<T>& ctx, const Tensor<T>& feats, int valid_len,
                              int* out_len) const {
        if (feats.rank() != 2 || feats.dim(1) != cfg_.acoustic_feature_dim)
            throw config_error("acoustic_encode: features are " + shape_str(feats.shape()) +
                               ", expected [*, " + std::to_string(cfg_.acoustic_feature_dim) + "]");
        if (valid_len < 1 || valid_len > feats.dim(0))
            throw config_error("acoustic_encode: valid length " + std::to_string(valid_len) +
                               " outside 1.." + std::to_string(feats.dim(0)));
        int len = 0;
        Tensor<T> x = sub_.forward(ctx, feats, valid_len, &len);
        for (const auto& block : enc2_) x = block.forward(ctx, x, len);
        if (out_len) *out_len = len;
        return x;
    }

    // Embedding with positions, then the phone conformer stack. Empty phone
    // sequences are rejected; the fusion modes always need at least one
    // phone position to attend to.
    Tensor<T> phone_encode(Fwd<T>& ctx, const std::vector<int>& ids, int valid_len = -1) const {
        if (!cfg_.uses_phone_encoder())
            throw config_error("phone_encode: fusion mode none has no phone encoder");
        if (valid_len < 0) valid_len = static_cast<int>(ids.size());
        if (ids.empty() || valid_len < 1)
            throw config_error("phone_encode: empty phone sequence with fusion active");
        if (valid_len > static_cast<int>(ids.size()))
            throw config_error("phone_encode: valid length exceeds sequence");
        Tensor<T> x = phone_emb_->forward(ctx, ids);
        for (const auto& block : enc1_) x = block.forward(ctx, x, valid_len);
        return x;
    }

    // fused = LN(acoustic + MHA(q=acoustic, k=phone, v=phone)); keeps the
    // acoustic time axis.
    Tensor<T> encoder_fuse(Fwd<T>& ctx, const Tensor<T>& acoustic, const Tensor<T>& phone,
                           int phone_len = -1) const {
        if (!fuse_attn_)
            throw config_error("encoder_fuse: fusion mode " + std::string(to_string(cfg_.fusion)) +
                               " has no encoder fusion block");
        if (phone.dim(0) < 1) throw config_error("encoder_fuse: phone memory missing or empty");
        if (phone_len < 0) phone_len = phone.dim(0);
        const auto mask = key_mask(acoustic.dim(0), phone.dim(0), phone_len);
        return fuse_ln_.forward(ctx, add(acoustic, fuse_attn_->forward(ctx, acoustic, phone, &mask)));
    }

    EncodedMemory<T> encode(Fwd<T>& ctx, const Tensor<T>& feats, int feat_len,
                            const std::vector<int>& phone_ids, int phone_len = -1) const {
        EncodedMemory<T> mem;
        mem.acoustic = acoustic_encode(ctx, feats, feat_len, &mem.acoustic_len);
        if (!cfg_.uses_phone_encoder()) return mem;
        if (phone_len < 0) phone_len = static_cast<int>(phone_ids.size());
        Tensor<T> phone = phone_encode(ctx, phone_ids, phone_len);
        if (cfg_.uses_encoder_fusion())
            mem.acoustic = encoder_fuse(ctx, mem.acoustic, phone, phone_len);
        if (cfg_.uses_decoder_fusion()) {
            mem.phone = phone;
            mem.phone_len = phone_len;
            mem.has_phone = true;
        }
        return mem;
    }

    // Teacher-forced decoder pass: targets_in must begin with <bos>. Returns
    // one logit row per input position.
    Tensor<T> decode_forward(Fwd<T>& ctx, const std::vector<int>& targets_in,
                             const EncodedMemory<T>& mem) const {
        if (targets_in.empty() || targets_in.front() != kBosId)
            throw config_error("decode_forward: target input must begin with <bos>");
        if (cfg_.uses_decoder_fusion() && !mem.has_phone)
            throw config_error("decode_forward: fusion mode " +
                               std::string(to_string(cfg_.fusion)) + " needs a phone memory");
        Tensor<T> x = tgt_emb_.forward(ctx, targets_in);
        const auto causal = causal_mask(static_cast<int>(targets_in.size()));
        for (const auto& block : dec_) x = block.forward(ctx, x, mem, causal);
        return out_.forward(ctx, dec_ln_.forward(ctx, x));
    }

    // Loss and token accuracy for one framed target sequence [bos, ..., eos].
    TeacherForced<T> teacher_forced(Fwd<T>& ctx, const EncodedMemory<T>& mem,
                                    const std::vector<int>& framed_targets) const {
        if (framed_targets.size() < 2)
            throw config_error("teacher_forced: framed target needs at least <bos> and <eos>");
        const std::vector<int> in(framed_targets.begin(), framed_targets.end() - 1);
        const std::vector<int> out(framed_targets.begin() + 1, framed_targets.end());
        Tensor<T> logits = decode_forward(ctx, in, mem);
        TeacherForced<T> r;
        r.loss = cross_entropy_label_smoothed(logits, out, static_cast<T>(cfg_.label_smoothing),
                                              kPadId);
        const int v = cfg_.target_vocab;
        for (std::size_t t = 0; t < out.size(); ++t) {
            if (out[t] == kPadId) continue;
            const T* row = logits.data() + static_cast<std::int64_t>(t) * v;
            int best = 0;
            for (int c = 1; c < v; ++c)
                if (row[c] > row[best]) best = c;
            if (best == out[t]) ++r.correct;
            ++r.tokens;
        }
        return r;
    }

    // Autoregressive decoding. beam == 1 is greedy argmax; beam > 1 is beam
    // search with final selection by score / length. Stops at <eos> or
    // max_len (the latter flags the result as truncated).
    GenerateResult generate(const EncodedMemory<T>& mem, int max_len, int beam) const {
        if (beam < 1) throw config_error("generate: beam must be >= 1");
        if (max_len < 1) throw config_error("generate: max_len must be >= 1");
        Fwd<T> ctx;  // evaluation mode: no tape, no dropout

        struct Hyp {
            std::vector<int> ids;
            double logp = 0.0;
        };
        std::vector<Hyp> live{{{kBosId}, 0.0}};
        std::vector<GenerateResult> done;

        for (int step = 0; step < max_len && !live.empty(); ++step) {
            struct Cand {
                double logp;
                int parent;
                int token;
            };
            std::vector<Cand> cands;
            for (std::size_t p = 0; p < live.size(); ++p) {
                Tensor<T> logits = decode_forward(ctx, live[p].ids, mem);
                const int v = cfg_.target_vocab;
                const T* row = logits.data() + (logits.dim(0) - 1) * static_cast<std::int64_t>(v);
                // log-softmax of the last row
                T mx = row[0];
                for (int c = 1; c < v; ++c) mx = std::max(mx, row[c]);
                double denom = 0.0;
                for (int c = 0; c < v; ++c) denom += std::exp(static_cast<double>(row[c] - mx));
                const double log_denom = std::log(denom);
                for (int c = 0; c < v; ++c) {
                    if (c == kPadId || c == kBosId) continue;  // never emit structural ids
                    const double lp = static_cast<double>(row[c] - mx) - log_denom;
                    cands.push_back({live[p].logp + lp, static_cast<int>(p), c});
                }
            }
            std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
                if (a.logp != b.logp) return a.logp > b.logp;
                if (a.parent != b.parent) return a.parent < b.parent;
                return a.token < b.token;
            });
            std::vector<Hyp> next;
            for (const auto& c : cands) {
                if (static_cast<int>(next.size() + done.size()) >= beam) break;
                Hyp h = live[static_cast<std::size_t>(c.parent)];
                h.ids.push_back(c.token);
                h.logp = c.logp;
                if (c.token == kEosId) {
                    GenerateResult r;
                    r.ids.assign(h.ids.begin() + 1, h.ids.end() - 1);
                    r.score = h.logp / static_cast<double>(h.ids.size() - 1);
                    done.push_back(std::move(r));
                } else {
                    next.push_back(std::move(h));
                }
            }
            live = std::move(next);
        }

        if (!done.empty()) {
            const auto best = std::max_element(
                done.begin(), done.end(),
                [](const GenerateResult& a, const GenerateResult& b) { return a.score < b.score; });
            return *best;
        }
        // Nothing finished within max_len: return the best live prefix.
        GenerateResult r;
        r.truncated = true;
        if (!live.empty()) {
            const auto best = std::max_element(live.begin(), live.end(), [](const Hyp& a, const Hyp& b) {
                return a.logp / std::max<std::size_t>(a.ids.size() - 1, 1) <
                       b.logp / std::max<std::size_t>(b.ids.size() - 1, 1);
            });
            r.ids.assign(best->ids.begin() + 1, best->ids.end());
            r.score = best->logp / std::max<double>(static_cast<double>(best->ids.size()) - 1.0, 1.0);
        }
        return r;
    }

private:
    void register_all() {
        sub_.register_params(params_, "enc2.sub");
        for (std::size_t i = 0; i < enc2_.size(); ++i)
            enc2_[i].register_params(params_, "enc2.block" + std::to_string(i));
        if (phone_emb_) {
            phone_emb_->register_params(params_, "enc1.emb");
            for (std::size_t i = 0; i < enc1_.size(); ++i)
                enc1_[i].register_params(params_, "enc1.block" + std::to_string(i));
        }
        if (fuse_attn_) {
            fuse_attn_->register_params(params_, "fuse.attn");
            fuse_ln_.register_params(params_, "fuse.ln");
        }
        tgt_emb_.register_params(params_, "dec.emb");
        for (std::size_t i = 0; i < dec_.size(); ++i)
            dec_[i].register_params(params_, "dec.block" + std::to_string(i));
        dec_ln_.register_params(params_, "dec.ln");
        out_.register_params(params_, "dec.out");
    }

    ModelConfig cfg_;
    Subsampler<T> sub_;
    std::vector<ConformerBlock<T>> enc2_;
    std::optional<Embedding<T>> phone_emb_;
    std::vector<ConformerBlock<T>> enc1_;
    std::optional<MultiHeadAttention<T>> fuse_attn_;
    LayerNorm<T> fuse_ln_;
    Embedding<T> tgt_emb_;
    std::vector<DecoderBlock<T>> dec_;
    LayerNorm<T> dec_ln_;
    Linear<T> out_;
    ParameterSet<T> params_;
};

}  // namespace alst
