#pragma once

#include <optional>
#include <string>
#include <vector>

#include "grow/ops.hpp"
#include "grow/optim.hpp"
#include "grow/rng.hpp"
#include "grow/tensor.hpp"

namespace grow {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
    int64_t channels = 4;   // C
    int64_t frames = 4;     // T
    int64_t height = 8;     // H
    int64_t width = 8;      // W
    int64_t hidden = 64;    // d
    int64_t heads = 4;      // n_h
    int64_t blocks = 4;     // N
    int64_t ffn_mult = 4;
    int64_t d_t5 = 32;
    int64_t d_llm = 32;
    bool llm_branch = false;

    int64_t spatial() const { return height * width; }
    int64_t tokens() const { return frames * height * width; }
    int64_t head_dim() const { return hidden / heads; }

    void validate() const {
        auto pos = [](int64_t v, const char* name) {
            if (v < 1) fail(ErrorKind::config, std::string("model config: ") + name + " must be >= 1");
        };
        pos(channels, "channels");
        pos(frames, "frames");
        pos(height, "height");
        pos(width, "width");
        pos(hidden, "hidden");
        pos(heads, "heads");
        pos(blocks, "blocks");
        pos(ffn_mult, "ffn_mult");
        pos(d_t5, "d_t5");
        pos(d_llm, "d_llm");
        if (hidden % heads != 0)
            fail(ErrorKind::config, "model config: hidden (" + std::to_string(hidden) +
                                        ") not divisible by heads (" + std::to_string(heads) + ")");
        if (hidden % 2 != 0)
            fail(ErrorKind::config, "model config: hidden must be even for the sinusoid embedding");
    }

    bool same_extents(const ModelConfig& o) const {
        return channels == o.channels && frames == o.frames && height == o.height && width == o.width &&
               hidden == o.hidden && heads == o.heads && ffn_mult == o.ffn_mult && d_t5 == o.d_t5 &&
               d_llm == o.d_llm;
    }
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename S>
struct Attention {
    Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
};

enum class MlpAct { none, gelu };

template <typename S>
struct Mlp {
    Tensor<S> w1, b1, w2, b2;
    MlpAct act = MlpAct::gelu;

    Tensor<S> forward(const Tensor<S>& x) const {
        Tensor<S> h = linear(x, w1, b1);
        if (act == MlpAct::gelu) h = gelu(h);
        return linear(h, w2, b2);
    }
};

// Modulation chunk offsets in units of hidden width. The block owns one
// modulation linear producing gamma/beta/alpha for the spatial, temporal,
// t5 cross-attention, and ffn sub-layers, plus gamma/beta for the llm
// sub-layer (whose gain is the tanh gate instead of alpha).
inline constexpr int64_t kModSpatial = 0;
inline constexpr int64_t kModTemporal = 3;
inline constexpr int64_t kModCrossT5 = 6;
inline constexpr int64_t kModFfn = 9;
inline constexpr int64_t kModCrossLlm = 12;

inline int64_t modulation_width(int64_t hidden, bool llm_branch) {
    return hidden * (llm_branch ? 14 : 12);
}

template <typename S>
struct TransformerBlock {
    Attention<S> spatial, temporal, cross_t5;
    std::optional<Attention<S>> cross_llm;
    Tensor<S> gate;  // scalar lambda; tanh(gate) multiplies the llm residual
    Mlp<S> ffn;
    Tensor<S> mod_w, mod_b;

    bool has_llm() const { return cross_llm.has_value(); }
};

template <typename S>
struct DitModel {
    ModelConfig cfg;
    Tensor<S> embed_w, embed_b;  // C -> d token embedder
    Tensor<S> head_w, head_b;    // d -> C noise projector
    Mlp<S> time_mlp;             // d -> d on the sinusoid
    Mlp<S> t5_embedder;          // d_t5 -> d_t5, two linears, no activation
    std::optional<Mlp<S>> llm_embedder;
    Tensor<S> null_t5;
    std::optional<Tensor<S>> null_llm;
    std::vector<TransformerBlock<S>> blocks;

    bool has_llm() const { return cfg.llm_branch; }

    std::vector<NamedParam<S>> named_params() const;
    DitModel clone() const;
    template <typename S2>
    DitModel<S2> cast() const;
};

namespace detail {

template <typename S>
Tensor<S> init_weight(Shape shape, int64_t fan_in, Rng& rng) {
    Tensor<S> t = tensor_randn<S>(std::move(shape), rng, 1.0 / std::sqrt(double(fan_in)));
    t.set_requires_grad(true);
    return t;
}

template <typename S>
Tensor<S> init_zeros(Shape shape) {
    Tensor<S> t = Tensor<S>::zeros(std::move(shape));
    t.set_requires_grad(true);
    return t;
}

template <typename S>
Attention<S> init_attention(int64_t d, int64_t d_kv, Rng& rng) {
    Attention<S> a;
    a.wq = init_weight<S>({d, d}, d, rng);
    a.bq = init_zeros<S>({d});
    a.wk = init_weight<S>({d_kv, d}, d_kv, rng);
    a.bk = init_zeros<S>({d});
    a.wv = init_weight<S>({d_kv, d}, d_kv, rng);
    a.bv = init_zeros<S>({d});
    a.wo = init_weight<S>({d, d}, d, rng);
    a.bo = init_zeros<S>({d});
    return a;
}

template <typename S>
Mlp<S> init_mlp(int64_t d_in, int64_t d_hidden, int64_t d_out, MlpAct act, Rng& rng) {
    Mlp<S> m;
    m.w1 = init_weight<S>({d_in, d_hidden}, d_in, rng);
    m.b1 = init_zeros<S>({d_hidden});
    m.w2 = init_weight<S>({d_hidden, d_out}, d_hidden, rng);
    m.b2 = init_zeros<S>({d_out});
    m.act = act;
    return m;
}

// Modulation bias starts at gamma=1, beta=0, alpha=0 so fresh blocks begin
// as near-identity and grow their residuals during training.
template <typename S>
void init_modulation(TransformerBlock<S>& blk, int64_t d, bool llm, Rng& rng) {
    int64_t m = modulation_width(d, llm);
    blk.mod_w = init_weight<S>({d, m}, d, rng);
    blk.mod_b = init_zeros<S>({m});
    auto set_chunk = [&](int64_t chunk, S v) {
        for (int64_t j = 0; j < d; ++j) blk.mod_b.data()[chunk * d + j] = v;
    };
    set_chunk(kModSpatial, S(1));
    set_chunk(kModTemporal, S(1));
    set_chunk(kModCrossT5, S(1));
    set_chunk(kModFfn, S(1));
    if (llm) set_chunk(kModCrossLlm, S(1));
}

template <typename S>
TransformerBlock<S> init_block(const ModelConfig& cfg, Rng& rng) {
    TransformerBlock<S> blk;
    blk.spatial = init_attention<S>(cfg.hidden, cfg.hidden, rng);
    blk.temporal = init_attention<S>(cfg.hidden, cfg.hidden, rng);
    blk.cross_t5 = init_attention<S>(cfg.hidden, cfg.d_t5, rng);
    if (cfg.llm_branch) {
        blk.cross_llm = init_attention<S>(cfg.hidden, cfg.d_llm, rng);
        blk.gate = init_zeros<S>({1});
    }
    blk.ffn = init_mlp<S>(cfg.hidden, cfg.hidden * cfg.ffn_mult, cfg.hidden, MlpAct::gelu, rng);
    init_modulation(blk, cfg.hidden, cfg.llm_branch, rng);
    return blk;
}

template <typename S>
void collect_attention(std::vector<NamedParam<S>>& out, const std::string& prefix, const Attention<S>& a) {
    out.push_back({prefix + ".wq", a.wq});
    out.push_back({prefix + ".bq", a.bq});
    out.push_back({prefix + ".wk", a.wk});
    out.push_back({prefix + ".bk", a.bk});
    out.push_back({prefix + ".wv", a.wv});
    out.push_back({prefix + ".bv", a.bv});
    out.push_back({prefix + ".wo", a.wo});
    out.push_back({prefix + ".bo", a.bo});
}

template <typename S>
void collect_mlp(std::vector<NamedParam<S>>& out, const std::string& prefix, const Mlp<S>& m) {
    out.push_back({prefix + ".w1", m.w1});
    out.push_back({prefix + ".b1", m.b1});
    out.push_back({prefix + ".w2", m.w2});
    out.push_back({prefix + ".b2", m.b2});
}

template <typename S>
Attention<S> clone_attention(const Attention<S>& a) {
    return {a.wq.clone(), a.bq.clone(), a.wk.clone(), a.bk.clone(),
            a.wv.clone(), a.bv.clone(), a.wo.clone(), a.bo.clone()};
}

template <typename S>
Mlp<S> clone_mlp(const Mlp<S>& m) {
    Mlp<S> out{m.w1.clone(), m.b1.clone(), m.w2.clone(), m.b2.clone(), m.act};
    return out;
}

template <typename S, typename S2>
Tensor<S2> cast_tensor(const Tensor<S>& t) {
    Tensor<S2> out = Tensor<S2>::zeros(t.shape());
    for (int64_t i = 0; i < t.numel(); ++i) out.data()[i] = S2(t.data()[i]);
    out.set_requires_grad(t.requires_grad());
    return out;
}

}  // namespace detail

template <typename S>
DitModel<S> init_model(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    DitModel<S> m;
    m.cfg = cfg;
    m.embed_w = detail::init_weight<S>({cfg.channels, cfg.hidden}, cfg.channels, rng);
    m.embed_b = detail::init_zeros<S>({cfg.hidden});
    m.head_w = detail::init_weight<S>({cfg.hidden, cfg.channels}, cfg.hidden, rng);
    m.head_b = detail::init_zeros<S>({cfg.channels});
    m.time_mlp = detail::init_mlp<S>(cfg.hidden, cfg.hidden, cfg.hidden, MlpAct::gelu, rng);
    m.t5_embedder = detail::init_mlp<S>(cfg.d_t5, cfg.d_t5, cfg.d_t5, MlpAct::none, rng);
    m.null_t5 = detail::init_weight<S>({cfg.d_t5}, cfg.d_t5, rng);
    if (cfg.llm_branch) {
        m.llm_embedder = detail::init_mlp<S>(cfg.d_llm, cfg.d_llm, cfg.d_llm, MlpAct::none, rng);
        m.null_llm = detail::init_weight<S>({cfg.d_llm}, cfg.d_llm, rng);
    }
    m.blocks.reserve(size_t(cfg.blocks));
    for (int64_t i = 0; i < cfg.blocks; ++i) m.blocks.push_back(detail::init_block<S>(cfg, rng));
    return m;
}

template <typename S>
std::vector<NamedParam<S>> DitModel<S>::named_params() const {
    std::vector<NamedParam<S>> out;
    out.push_back({"embed.w", embed_w});
    out.push_back({"embed.b", embed_b});
    out.push_back({"head.w", head_w});
    out.push_back({"head.b", head_b});
    detail::collect_mlp(out, "time", time_mlp);
    detail::collect_mlp(out, "t5_embedder", t5_embedder);
    out.push_back({"null.t5", null_t5});
    if (llm_embedder) detail::collect_mlp(out, "llm_embedder", *llm_embedder);
    if (null_llm) out.push_back({"null.llm", *null_llm});
    for (size_t i = 0; i < blocks.size(); ++i) {
        std::string p = "blocks." + std::to_string(i);
        detail::collect_attention(out, p + ".spatial", blocks[i].spatial);
        detail::collect_attention(out, p + ".temporal", blocks[i].temporal);
        detail::collect_attention(out, p + ".cross_t5", blocks[i].cross_t5);
        if (blocks[i].cross_llm) {
            detail::collect_attention(out, p + ".cross_llm", *blocks[i].cross_llm);
            out.push_back({p + ".gate", blocks[i].gate});
        }
        detail::collect_mlp(out, p + ".ffn", blocks[i].ffn);
        out.push_back({p + ".mod.w", blocks[i].mod_w});
        out.push_back({p + ".mod.b", blocks[i].mod_b});
    }
    return out;
}

template <typename S>
DitModel<S> DitModel<S>::clone() const {
    DitModel<S> m;
    m.cfg = cfg;
    m.embed_w = embed_w.clone();
    m.embed_b = embed_b.clone();
    m.head_w = head_w.clone();
    m.head_b = head_b.clone();
    m.time_mlp = detail::clone_mlp(time_mlp);
    m.t5_embedder = detail::clone_mlp(t5_embedder);
    m.null_t5 = null_t5.clone();
    if (llm_embedder) m.llm_embedder = detail::clone_mlp(*llm_embedder);
    if (null_llm) m.null_llm = null_llm->clone();
    m.blocks.reserve(blocks.size());
    for (const auto& b : blocks) {
        TransformerBlock<S> nb;
        nb.spatial = detail::clone_attention(b.spatial);
        nb.temporal = detail::clone_attention(b.temporal);
        nb.cross_t5 = detail::clone_attention(b.cross_t5);
        if (b.cross_llm) {
            nb.cross_llm = detail::clone_attention(*b.cross_llm);
            nb.gate = b.gate.clone();
        }
        nb.ffn = detail::clone_mlp(b.ffn);
        nb.mod_w = b.mod_w.clone();
        nb.mod_b = b.mod_b.clone();
        m.blocks.push_back(std::move(nb));
    }
    return m;
}

template <typename S>
template <typename S2>
DitModel<S2> DitModel<S>::cast() const {
    DitModel<S2> m;
    m.cfg = cfg;
    m.embed_w = detail::cast_tensor<S, S2>(embed_w);
    m.embed_b = detail::cast_tensor<S, S2>(embed_b);
    m.head_w = detail::cast_tensor<S, S2>(head_w);
    m.head_b = detail::cast_tensor<S, S2>(head_b);
    auto cast_mlp = [](const Mlp<S>& a) {
        Mlp<S2> o{detail::cast_tensor<S, S2>(a.w1), detail::cast_tensor<S, S2>(a.b1),
                  detail::cast_tensor<S, S2>(a.w2), detail::cast_tensor<S, S2>(a.b2), a.act};
        return o;
    };
    auto cast_attn = [](const Attention<S>& a) {
        Attention<S2> o{detail::cast_tensor<S, S2>(a.wq), detail::cast_tensor<S, S2>(a.bq),
                        detail::cast_tensor<S, S2>(a.wk), detail::cast_tensor<S, S2>(a.bk),
                        detail::cast_tensor<S, S2>(a.wv), detail::cast_tensor<S, S2>(a.bv),
                        detail::cast_tensor<S, S2>(a.wo), detail::cast_tensor<S, S2>(a.bo)};
        return o;
    };
    m.time_mlp = cast_mlp(time_mlp);
    m.t5_embedder = cast_mlp(t5_embedder);
    m.null_t5 = detail::cast_tensor<S, S2>(null_t5);
    if (llm_embedder) m.llm_embedder = cast_mlp(*llm_embedder);
    if (null_llm) m.null_llm = detail::cast_tensor<S, S2>(*null_llm);
    for (const auto& b : blocks) {
        TransformerBlock<S2> nb;
        nb.spatial = cast_attn(b.spatial);
        nb.temporal = cast_attn(b.temporal);
        nb.cross_t5 = cast_attn(b.cross_t5);
        if (b.cross_llm) {
            nb.cross_llm = cast_attn(*b.cross_llm);
            nb.gate = detail::cast_tensor<S, S2>(b.gate);
        }
        nb.ffn = cast_mlp(b.ffn);
        nb.mod_w = detail::cast_tensor<S, S2>(b.mod_w);
        nb.mod_b = detail::cast_tensor<S, S2>(b.mod_b);
        m.blocks.push_back(std::move(nb));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Conditions
// ---------------------------------------------------------------------------

template <typename S>
struct CondBatch {
    Tensor<S> c_t5;     // (B, L5, d_t5)
    Tensor<S> mask_t5;  // (B, L5), 0/1
    std::optional<Tensor<S>> c_llm;
    std::optional<Tensor<S>> mask_llm;

    int64_t batch() const { return c_t5.size(0); }
};

// mask (B, L) of 0/1 -> additive key bias (B, L) of {-1e9, 0}.
template <typename S>
Tensor<S> mask_to_key_bias(const Tensor<S>& mask) {
    Tensor<S> bias = Tensor<S>::zeros(mask.shape());
    for (int64_t i = 0; i < mask.numel(); ++i)
        bias.data()[i] = mask.data()[i] > S(0.5) ? S(0) : S(-1e9);
    return bias;
}

// ---------------------------------------------------------------------------
// Embedding and token plumbing
// ---------------------------------------------------------------------------

// Half-sine, half-cosine embedding with log-spaced frequencies
// w_i = 10000^(-i/(d/2)); layout [sin(t w_0..), cos(t w_0..)].
template <typename S>
Tensor<S> sinusoid_timestep(const std::vector<int64_t>& ts, int64_t d) {
    if (d % 2 != 0) fail(ErrorKind::config, "timestep embedding width must be even, got " + std::to_string(d));
    int64_t half = d / 2;
    int64_t b = int64_t(ts.size());
    Tensor<S> out = Tensor<S>::zeros({b, d});
    for (int64_t i = 0; i < b; ++i) {
        if (ts[size_t(i)] < 0) fail(ErrorKind::usage, "timestep must be non-negative");
        double t = double(ts[size_t(i)]);
        for (int64_t j = 0; j < half; ++j) {
            double w = std::exp(-std::log(10000.0) * double(j) / double(half));
            out.data()[i * d + j] = S(std::sin(t * w));
            out.data()[i * d + half + j] = S(std::cos(t * w));
        }
    }
    return out;
}

// Sinusoid over integer positions, used for the fixed spatial/temporal
// positional encodings.
template <typename S>
Tensor<S> sinusoid_positions(int64_t n, int64_t d) {
    std::vector<int64_t> pos(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) pos[size_t(i)] = i;
    return sinusoid_timestep<S>(pos, d);
}

template <typename S>
Tensor<S> timestep_embedding(const DitModel<S>& model, const std::vector<int64_t>& ts) {
    return model.time_mlp.forward(sinusoid_timestep<S>(ts, model.cfg.hidden));
}

namespace detail {

// (B,C,T,H,W) -> (B, T*H*W, C) rows ordered (t, h, w).
template <typename S>
Tensor<S> latent_to_rows(const Tensor<S>& z) {
    int64_t b = z.size(0), c = z.size(1), t = z.size(2), h = z.size(3), w = z.size(4);
    int64_t l = t * h * w;
    std::vector<S> out(size_t(z.numel()));
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t p = 0; p < l; ++p)
                out[size_t((bi * l + p) * c + ci)] = z.data()[(bi * c + ci) * l + p];
    auto zn = z.node();
    return make_op<S>({b, l, c}, std::move(out), {zn}, [zn, b, c, l](TensorNode<S>& self) {
        auto& g = zn->grad_buf();
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t ci = 0; ci < c; ++ci)
                for (int64_t p = 0; p < l; ++p)
                    g[size_t((bi * c + ci) * l + p)] += self.grad[size_t((bi * l + p) * c + ci)];
    });
}

// (B, T*H*W, C) -> (B,C,T,H,W).
template <typename S>
Tensor<S> rows_to_latent(const Tensor<S>& x, int64_t t, int64_t h, int64_t w) {
    int64_t b = x.size(0), l = x.size(1), c = x.size(2);
    if (l != t * h * w)
        fail(ErrorKind::shape, "token count " + std::to_string(l) + " != T*H*W = " + std::to_string(t * h * w));
    std::vector<S> out(size_t(x.numel()));
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t p = 0; p < l; ++p)
                out[size_t((bi * c + ci) * l + p)] = x.data()[(bi * l + p) * c + ci];
    auto xn = x.node();
    return make_op<S>({b, c, t, h, w}, std::move(out), {xn}, [xn, b, c, l](TensorNode<S>& self) {
        auto& g = xn->grad_buf();
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t ci = 0; ci < c; ++ci)
                for (int64_t p = 0; p < l; ++p)
                    g[size_t((bi * l + p) * c + ci)] += self.grad[size_t((bi * c + ci) * l + p)];
    });
}

}  // namespace detail

// Fixed additive positional table: pe[t*S + s] = pe_temporal[t] + pe_spatial[s].
template <typename S>
Tensor<S> positional_table(const ModelConfig& cfg) {
    Tensor<S> pe_t = sinusoid_positions<S>(cfg.frames, cfg.hidden);
    Tensor<S> pe_s = sinusoid_positions<S>(cfg.spatial(), cfg.hidden);
    Tensor<S> out = Tensor<S>::zeros({cfg.tokens(), cfg.hidden});
    int64_t d = cfg.hidden, sp = cfg.spatial();
    for (int64_t t = 0; t < cfg.frames; ++t)
        for (int64_t s = 0; s < sp; ++s)
            for (int64_t j = 0; j < d; ++j)
                out.data()[(t * sp + s) * d + j] = pe_t.data()[t * d + j] + pe_s.data()[s * d + j];
    return out;
}

// Per-position linear embedding C -> d plus fixed positional encodings.
template <typename S>
Tensor<S> tokens_from_latent(const DitModel<S>& model, const Tensor<S>& z, bool add_positional = true) {
    const ModelConfig& cfg = model.cfg;
    Shape expect{z.size(0), cfg.channels, cfg.frames, cfg.height, cfg.width};
    if (z.rank() != 5 || z.shape() != expect)
        fail(ErrorKind::shape, "latent " + shape_str(z.shape()) + " does not match config " + shape_str(expect));
    Tensor<S> x = linear(detail::latent_to_rows(z), model.embed_w, model.embed_b);
    if (add_positional) x = add_rows(x, positional_table<S>(cfg));
    return x;  // (B, T*H*W, d)
}

// Linear projection d -> C and reshape back to (B,C,T,H,W).
template <typename S>
Tensor<S> latent_from_tokens(const DitModel<S>& model, const Tensor<S>& tokens) {
    const ModelConfig& cfg = model.cfg;
    if (tokens.rank() != 3 || tokens.size(1) != cfg.tokens() || tokens.size(2) != cfg.hidden)
        fail(ErrorKind::shape, "tokens " + shape_str(tokens.shape()) + " do not match config");
    Tensor<S> rows = linear(tokens, model.head_w, model.head_b);
    return detail::rows_to_latent(rows, cfg.frames, cfg.height, cfg.width);
}

// (B,T,S,d) -> (B*T, S, d); element (b,t,s,:) lands at (b*T + t, s, :).
template <typename S>
Tensor<S> reshape_spatial(const Tensor<S>& x) {
    if (x.rank() != 4) fail(ErrorKind::shape, "reshape_spatial expects rank-4, got " + shape_str(x.shape()));
    return reshape(x, {x.size(0) * x.size(1), x.size(2), x.size(3)});
}

template <typename S>
Tensor<S> reshape_spatial_inverse(const Tensor<S>& x, int64_t b, int64_t t) {
    return reshape(x, {b, t, x.size(1), x.size(2)});
}

// (B,T,S,d) -> (B*S, T, d); element (b,t,s,:) lands at (b*S + s, t, :).
template <typename S>
Tensor<S> reshape_temporal(const Tensor<S>& x) {
    if (x.rank() != 4) fail(ErrorKind::shape, "reshape_temporal expects rank-4, got " + shape_str(x.shape()));
    Tensor<S> swapped = transpose(x, 1, 2);  // (B,S,T,d)
    return reshape(swapped, {x.size(0) * x.size(2), x.size(1), x.size(3)});
}

template <typename S>
Tensor<S> reshape_temporal_inverse(const Tensor<S>& x, int64_t b, int64_t s) {
    Tensor<S> unflat = reshape(x, {b, s, x.size(1), x.size(2)});  // (B,S,T,d)
    return transpose(unflat, 1, 2);
}

// gamma * LayerNorm(x) + beta, taken literally; gamma/beta are (B, d).
template <typename S>
Tensor<S> apply_s_adaln(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                        double eps = 1e-5) {
    return affine_rows(layer_norm(x, eps), gamma, beta);
}

// ---------------------------------------------------------------------------
// Attention wrapper
// ---------------------------------------------------------------------------

// q_in (R, Lq, d), kv_in (R, Lk, d_kv); ends in the sub-layer's last linear.
template <typename S>
Tensor<S> mha(const Tensor<S>& q_in, const Tensor<S>& kv_in, const Attention<S>& p, int64_t heads,
              const Tensor<S>* key_bias = nullptr) {
    int64_t r = q_in.size(0), lq = q_in.size(1), d = q_in.size(2);
    int64_t lk = kv_in.size(1);
    int64_t dh = d / heads;
    auto split = [&](const Tensor<S>& t, int64_t len) {
        return transpose(reshape(t, {r, len, heads, dh}), 1, 2);  // (R, h, len, dh)
    };
    Tensor<S> q = split(linear(q_in, p.wq, p.bq), lq);
    Tensor<S> k = split(linear(kv_in, p.wk, p.bk), lk);
    Tensor<S> v = split(linear(kv_in, p.wv, p.bv), lk);
    Tensor<S> ctx = scaled_dot_product_attention(q, k, v, key_bias);
    Tensor<S> merged = reshape(transpose(ctx, 1, 2), {r, lq, d});
    return linear(merged, p.wo, p.bo);
}

// ---------------------------------------------------------------------------
// Sub-layers; x is (B, T, S, d) throughout, t_emb is (B, d)
// ---------------------------------------------------------------------------

enum class Axis { spatial, temporal };
enum class CrossSlot { t5, llm };

namespace detail {

struct ModChunk {
    int64_t offset;
    bool has_alpha;
};

inline ModChunk mod_chunk(Axis axis) {
    return axis == Axis::spatial ? ModChunk{kModSpatial, true} : ModChunk{kModTemporal, true};
}

inline ModChunk mod_chunk(CrossSlot slot) {
    return slot == CrossSlot::t5 ? ModChunk{kModCrossT5, true} : ModChunk{kModCrossLlm, false};
}

template <typename S>
struct Modulation {
    Tensor<S> gamma, beta, alpha;  // alpha undefined for the llm slot
};

template <typename S>
Modulation<S> modulate(const TransformerBlock<S>& blk, const Tensor<S>& t_emb, ModChunk chunk) {
    int64_t d = t_emb.size(-1);
    Tensor<S> mod = linear(t_emb, blk.mod_w, blk.mod_b);
    Modulation<S> out;
    out.gamma = slice_lastdim(mod, chunk.offset * d, d);
    out.beta = slice_lastdim(mod, (chunk.offset + 1) * d, d);
    if (chunk.has_alpha) out.alpha = slice_lastdim(mod, (chunk.offset + 2) * d, d);
    return out;
}

}  // namespace detail

template <typename S>
Tensor<S> self_attention_sublayer(const Tensor<S>& x, const TransformerBlock<S>& blk, Axis axis,
                                  const Tensor<S>& t_emb, int64_t heads) {
    int64_t b = x.size(0), t = x.size(1), s = x.size(2);
    auto mod = detail::modulate(blk, t_emb, detail::mod_chunk(axis));
    Tensor<S> h = apply_s_adaln(x, mod.gamma, mod.beta);
    Tensor<S> a;
    if (axis == Axis::spatial) {
        Tensor<S> hs = reshape_spatial(h);
        a = reshape_spatial_inverse(mha(hs, hs, blk.spatial, heads), b, t);
    } else {
        Tensor<S> ht = reshape_temporal(h);
        a = reshape_temporal_inverse(mha(ht, ht, blk.temporal, heads), b, s);
    }
    return add(x, gain_rows(a, mod.alpha));
}

template <typename S>
Tensor<S> cross_attention_sublayer(const Tensor<S>& x, const TransformerBlock<S>& blk, CrossSlot slot,
                                   const Tensor<S>& t_emb, int64_t heads, const Tensor<S>& cond,
                                   const Tensor<S>& mask) {
    if (slot == CrossSlot::llm && !blk.has_llm())
        fail(ErrorKind::state, "llm cross-attention invoked but the branch is disabled");
    const Attention<S>& p = slot == CrossSlot::t5 ? blk.cross_t5 : *blk.cross_llm;
    if (cond.size(-1) != p.wk.size(0))
        fail(ErrorKind::shape, "condition width " + shape_str(cond.shape()) + " does not match projection " +
                                   shape_str(p.wk.shape()));
    int64_t b = x.size(0), t = x.size(1), s = x.size(2), d = x.size(3);
    auto mod = detail::modulate(blk, t_emb, detail::mod_chunk(slot));
    Tensor<S> h = apply_s_adaln(x, mod.gamma, mod.beta);
    Tensor<S> bias = mask_to_key_bias(mask);
    Tensor<S> att = mha(reshape(h, {b, t * s, d}), cond, p, heads, &bias);
    Tensor<S> att4 = reshape(att, {b, t, s, d});
    if (slot == CrossSlot::t5) return add(x, gain_rows(att4, mod.alpha));
    return add(x, scale_by(att4, tanh_op(blk.gate)));
}

template <typename S>
Tensor<S> ffn_sublayer(const Tensor<S>& x, const TransformerBlock<S>& blk, const Tensor<S>& t_emb) {
    auto mod = detail::modulate(blk, t_emb, detail::ModChunk{kModFfn, true});
    Tensor<S> h = blk.ffn.forward(apply_s_adaln(x, mod.gamma, mod.beta));
    return add(x, gain_rows(h, mod.alpha));
}

// Spatial -> temporal -> t5 cross -> llm cross -> feed-forward.
template <typename S>
Tensor<S> transformer_block_forward(const Tensor<S>& x, const TransformerBlock<S>& blk,
                                    const Tensor<S>& t_emb, int64_t heads, const CondBatch<S>& cond) {
    if (cond.c_llm && !blk.has_llm())
        fail(ErrorKind::state, "llm condition provided but the block has no llm branch");
    Tensor<S> h = self_attention_sublayer(x, blk, Axis::spatial, t_emb, heads);
    h = self_attention_sublayer(h, blk, Axis::temporal, t_emb, heads);
    h = cross_attention_sublayer(h, blk, CrossSlot::t5, t_emb, heads, cond.c_t5, cond.mask_t5);
    if (blk.has_llm() && cond.c_llm)
        h = cross_attention_sublayer(h, blk, CrossSlot::llm, t_emb, heads, *cond.c_llm, *cond.mask_llm);
    return ffn_sublayer(h, blk, t_emb);
}

// Full denoiser: epsilon_hat has the shape of z_t.
template <typename S>
Tensor<S> model_forward(const DitModel<S>& model, const Tensor<S>& z_t, const std::vector<int64_t>& ts,
                        const CondBatch<S>& cond) {
    const ModelConfig& cfg = model.cfg;
    if (int64_t(ts.size()) != z_t.size(0))
        fail(ErrorKind::shape, "timestep count != batch");
    if (cond.c_t5.size(-1) != cfg.d_t5)
        fail(ErrorKind::shape, "t5 condition width " + std::to_string(cond.c_t5.size(-1)) +
                                   " != config d_t5 " + std::to_string(cfg.d_t5));
    if (cond.c_llm) {
        if (!cfg.llm_branch) fail(ErrorKind::state, "llm condition provided but the branch is disabled");
        if (cond.c_llm->size(-1) != cfg.d_llm)
            fail(ErrorKind::shape, "llm condition width " + std::to_string(cond.c_llm->size(-1)) +
                                       " != config d_llm " + std::to_string(cfg.d_llm));
    }
    Tensor<S> tokens = tokens_from_latent(model, z_t);
    Tensor<S> t_emb = timestep_embedding(model, ts);
    Tensor<S> x = reshape(tokens, {z_t.size(0), cfg.frames, cfg.spatial(), cfg.hidden});
    for (const auto& blk : model.blocks) x = transformer_block_forward(x, blk, t_emb, cfg.heads, cond);
    return latent_from_tokens(model, reshape(x, {z_t.size(0), cfg.tokens(), cfg.hidden}));
}

}  // namespace grow
