#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "grow/dit.hpp"

namespace grow {

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

struct TemplateSpec {
    std::string prefix;
    std::string suffix;
};

inline TemplateSpec default_llm_template() {
    return {"[INST] Describe and generate: ", " [/INST]"};
}

// p_sl = p + separator + p_l; an empty long prompt leaves p unchanged.
// Merging is deliberately not idempotent: merging twice double-appends.
inline std::string merge_prompts_sl(const std::string& p, const std::string& p_l,
                                    const std::string& separator = ". ") {
    if (p.empty()) fail(ErrorKind::usage, "short prompt required");
    if (p_l.empty()) return p;
    return p + separator + p_l;
}

inline std::string apply_llm_template(const std::string& p_sl, const TemplateSpec& tmpl) {
    return tmpl.prefix + p_sl + tmpl.suffix;
}

inline std::string strip_llm_template(const std::string& p_star, const TemplateSpec& tmpl) {
    if (p_star.size() < tmpl.prefix.size() + tmpl.suffix.size() ||
        p_star.compare(0, tmpl.prefix.size(), tmpl.prefix) != 0 ||
        p_star.compare(p_star.size() - tmpl.suffix.size(), tmpl.suffix.size(), tmpl.suffix) != 0)
        fail(ErrorKind::usage, "text does not carry the expected template");
    return p_star.substr(tmpl.prefix.size(), p_star.size() - tmpl.prefix.size() - tmpl.suffix.size());
}

struct PromptSet {
    std::string p;       // short prompt
    std::string p_l;     // long detailed prompt
    std::string p_sl;    // merged
    std::string p_star;  // templated for the llm encoder
};

inline PromptSet make_prompt_set(const std::string& p, const std::string& p_l, const TemplateSpec& tmpl,
                                 const std::string& separator = ". ") {
    PromptSet ps;
    ps.p = p;
    ps.p_l = p_l;
    ps.p_sl = merge_prompts_sl(p, p_l, separator);
    ps.p_star = apply_llm_template(ps.p_sl, tmpl);
    return ps;
}

// One record per line, TAB-separated (p, p_l); a missing p_l column is fine.
inline std::vector<std::pair<std::string, std::string>> load_prompt_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::io, "cannot open prompt file '" + path + "'");
    std::vector<std::pair<std::string, std::string>> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos) out.emplace_back(line, "");
        else out.emplace_back(line.substr(0, tab), line.substr(tab + 1));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Deterministic stub encoders
// ---------------------------------------------------------------------------

// Stand-in for a frozen pretrained encoder: whitespace tokens hash into a
// frozen Gaussian embedding table derived from the encoder seed.
struct StubSpec {
    int64_t length = 16;
    int64_t width = 32;
    int64_t vocab = 4096;
    uint64_t seed = 17;
};

inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

template <typename S>
struct EncodedText {
    Tensor<S> tokens;  // (L, width); padded positions are zero
    Tensor<S> mask;    // (L,) of 0/1
    int64_t n_valid = 0;
};

template <typename S>
EncodedText<S> encode_stub(const std::string& text, const StubSpec& spec) {
    std::vector<std::string> words;
    std::string cur;
    for (char c : text) {
        if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
            if (!cur.empty()) words.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) words.push_back(cur);

    EncodedText<S> out;
    out.tokens = Tensor<S>::zeros({spec.length, spec.width});
    out.mask = Tensor<S>::zeros({spec.length});
    out.n_valid = std::min<int64_t>(int64_t(words.size()), spec.length);
    for (int64_t i = 0; i < out.n_valid; ++i) {
        uint64_t idx = fnv1a64(words[size_t(i)]) % uint64_t(spec.vocab);
        Rng row(spec.seed, idx);  // frozen table row, regenerated on demand
        for (int64_t j = 0; j < spec.width; ++j) out.tokens.data()[i * spec.width + j] = S(row.normal());
        out.mask.data()[i] = S(1);
    }
    return out;
}

// Trainable positionwise embedder (two linears, no hidden activation, so an
// identity-initialized square pair is an exact passthrough).
template <typename S>
Tensor<S> condition_embedder_forward(const Tensor<S>& raw, const Mlp<S>& embedder) {
    if (raw.size(-1) != embedder.w1.size(0))
        fail(ErrorKind::shape, "condition width " + shape_str(raw.shape()) + " does not match embedder " +
                                   shape_str(embedder.w1.shape()));
    return embedder.forward(raw);
}

// ---------------------------------------------------------------------------
// Batch construction
// ---------------------------------------------------------------------------

struct EncoderConfig {
    StubSpec t5;
    StubSpec llm;
    TemplateSpec tmpl = default_llm_template();
    std::string separator = ". ";
};

// The t5 path encodes p_sl; the llm path encodes the templated p_star.
// Masked rows are zeroed after the embedder, and the embedder pass is on the
// tape, so its weights train.
template <typename S>
CondBatch<S> build_condition_batch(const std::vector<PromptSet>& prompts, const DitModel<S>& model,
                                   const EncoderConfig& enc) {
    if (prompts.empty()) fail(ErrorKind::usage, "build_condition_batch: empty prompt list");
    if (enc.t5.width != model.cfg.d_t5 || (model.has_llm() && enc.llm.width != model.cfg.d_llm))
        fail(ErrorKind::config, "encoder widths do not match model config");
    int64_t b = int64_t(prompts.size());

    auto stack = [&](const StubSpec& spec, bool use_star) {
        Tensor<S> tokens = Tensor<S>::zeros({b, spec.length, spec.width});
        Tensor<S> mask = Tensor<S>::zeros({b, spec.length});
        for (int64_t i = 0; i < b; ++i) {
            const std::string& text = use_star ? prompts[size_t(i)].p_star : prompts[size_t(i)].p_sl;
            EncodedText<S> e = encode_stub<S>(text, spec);
            std::copy(e.tokens.data(), e.tokens.data() + e.tokens.numel(),
                      tokens.data() + i * spec.length * spec.width);
            std::copy(e.mask.data(), e.mask.data() + spec.length, mask.data() + i * spec.length);
        }
        return std::make_pair(tokens, mask);
    };

    CondBatch<S> cond;
    auto [raw5, mask5] = stack(enc.t5, false);
    cond.c_t5 = mul_mask_rows(condition_embedder_forward(raw5, model.t5_embedder), mask5);
    cond.mask_t5 = mask5;
    if (model.has_llm()) {
        auto [rawl, maskl] = stack(enc.llm, true);
        cond.c_llm = mul_mask_rows(condition_embedder_forward(rawl, *model.llm_embedder), maskl);
        cond.mask_llm = maskl;
    }
    return cond;
}

// ---------------------------------------------------------------------------
// LLM branch injection
// ---------------------------------------------------------------------------

// Adds the gated llm cross-attention sub-layer to every block. Q and output
// projections copy the t5 sub-layer; K/V copy when widths match and are
// otherwise fresh at 1/sqrt(fan_in). The gate starts at zero, so the model
// is output-equivalent to the input model bitwise.
template <typename S>
DitModel<S> inject_llm_branch(const DitModel<S>& model, Rng& rng) {
    if (model.has_llm()) fail(ErrorKind::state, "llm branch already present");
    DitModel<S> out = model.clone();
    out.cfg.llm_branch = true;
    int64_t d = out.cfg.hidden;
    for (auto& blk : out.blocks) {
        Attention<S> llm;
        llm.wq = blk.cross_t5.wq.clone();
        llm.bq = blk.cross_t5.bq.clone();
        llm.wo = blk.cross_t5.wo.clone();
        llm.bo = blk.cross_t5.bo.clone();
        if (out.cfg.d_llm == out.cfg.d_t5) {
            llm.wk = blk.cross_t5.wk.clone();
            llm.bk = blk.cross_t5.bk.clone();
            llm.wv = blk.cross_t5.wv.clone();
            llm.bv = blk.cross_t5.bv.clone();
        } else {
            llm.wk = detail::init_weight<S>({out.cfg.d_llm, d}, out.cfg.d_llm, rng);
            llm.bk = detail::init_zeros<S>({d});
            llm.wv = detail::init_weight<S>({out.cfg.d_llm, d}, out.cfg.d_llm, rng);
            llm.bv = detail::init_zeros<S>({d});
        }
        blk.cross_llm = std::move(llm);
        blk.gate = detail::init_zeros<S>({1});

        // Grow the modulation linear from 12d to 14d columns; the new llm
        // gamma/beta columns copy the t5 gamma/beta columns.
        int64_t m_old = modulation_width(d, false);
        int64_t m_new = modulation_width(d, true);
        Tensor<S> w = detail::init_zeros<S>({d, m_new});
        Tensor<S> bvec = detail::init_zeros<S>({m_new});
        for (int64_t i = 0; i < d; ++i) {
            for (int64_t j = 0; j < m_old; ++j) w.data()[i * m_new + j] = blk.mod_w.data()[i * m_old + j];
            for (int64_t j = 0; j < 2 * d; ++j)
                w.data()[i * m_new + kModCrossLlm * d + j] = blk.mod_w.data()[i * m_old + kModCrossT5 * d + j];
        }
        for (int64_t j = 0; j < m_old; ++j) bvec.data()[j] = blk.mod_b.data()[j];
        for (int64_t j = 0; j < 2 * d; ++j)
            bvec.data()[kModCrossLlm * d + j] = blk.mod_b.data()[kModCrossT5 * d + j];
        blk.mod_w = std::move(w);
        blk.mod_b = std::move(bvec);
    }
    out.llm_embedder = detail::init_mlp<S>(out.cfg.d_llm, out.cfg.d_llm, out.cfg.d_llm, MlpAct::none, rng);
    out.null_llm = detail::init_weight<S>({out.cfg.d_llm}, out.cfg.d_llm, rng);
    return out;
}

}  // namespace grow
