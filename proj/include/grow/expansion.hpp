#pragma once

#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "grow/dit.hpp"

namespace grow {

// ---------------------------------------------------------------------------
// Expansion specs and plans
// ---------------------------------------------------------------------------

enum class StackVariant { insert, prefix, suffix };

inline const char* variant_name(StackVariant v) {
    switch (v) {
        case StackVariant::insert: return "insert";
        case StackVariant::prefix: return "prefix";
        case StackVariant::suffix: return "suffix";
    }
    return "?";
}

// insert holds k = x/y in lowest terms; prefix/suffix hold an explicit count.
struct ExpansionSpec {
    StackVariant variant = StackVariant::insert;
    int64_t x = 1, y = 1;
    int64_t count = 0;

    // "insert:k=1", "insert:k=1/2", "insert:k=0.5", "prefix:P=2", "suffix:P=2"
    static ExpansionSpec parse(const std::string& text);
};

inline ExpansionSpec ExpansionSpec::parse(const std::string& text) {
    auto colon = text.find(':');
    if (colon == std::string::npos)
        fail(ErrorKind::usage, "expansion spec '" + text + "': expected variant:key=value");
    std::string var = text.substr(0, colon);
    std::string rest = text.substr(colon + 1);
    auto eq = rest.find('=');
    if (eq == std::string::npos)
        fail(ErrorKind::usage, "expansion spec '" + text + "': expected key=value after variant");
    std::string key = rest.substr(0, eq);
    std::string val = rest.substr(eq + 1);

    ExpansionSpec spec;
    if (var == "insert") {
        spec.variant = StackVariant::insert;
        if (key != "k") fail(ErrorKind::usage, "insert spec needs k=..., got '" + key + "'");
        int64_t x = 0, y = 1;
        auto slash = val.find('/');
        auto dot = val.find('.');
        try {
            if (slash != std::string::npos) {
                x = std::stoll(val.substr(0, slash));
                y = std::stoll(val.substr(slash + 1));
            } else if (dot != std::string::npos) {
                std::string frac = val.substr(dot + 1);
                x = std::stoll(val.substr(0, dot).empty() ? "0" : val.substr(0, dot));
                y = 1;
                for (char c : frac) {
                    if (c < '0' || c > '9') fail(ErrorKind::usage, "bad decimal k '" + val + "'");
                    x = x * 10 + (c - '0');
                    y *= 10;
                }
            } else {
                x = std::stoll(val);
            }
        } catch (const std::exception&) {
            fail(ErrorKind::usage, "cannot parse k value '" + val + "'");
        }
        if (x < 1 || y < 1) fail(ErrorKind::usage, "insert spec needs k > 0, got '" + val + "'");
        int64_t g = std::gcd(x, y);
        spec.x = x / g;
        spec.y = y / g;
    } else if (var == "prefix" || var == "suffix") {
        spec.variant = var == "prefix" ? StackVariant::prefix : StackVariant::suffix;
        if (key != "P" && key != "p") fail(ErrorKind::usage, var + " spec needs P=..., got '" + key + "'");
        try {
            spec.count = std::stoll(val);
        } catch (const std::exception&) {
            fail(ErrorKind::usage, "cannot parse P value '" + val + "'");
        }
        if (spec.count < 1) fail(ErrorKind::usage, var + " spec needs P >= 1");
    } else {
        fail(ErrorKind::usage, "unknown expansion variant '" + var + "'");
    }
    return spec;
}

struct PlanEntry {
    int64_t position;  // slot in the new stack
    int64_t source;    // original block index this slot holds or copies
    bool is_new;
};

struct ExpansionPlan {
    StackVariant variant;
    int64_t old_blocks = 0;  // N
    int64_t new_blocks = 0;  // P
    int64_t x = 0, y = 0;    // insert only
    std::vector<PlanEntry> entries;
    std::vector<std::string> zero_targets;

    std::string report() const;
};

inline std::vector<std::string> zero_target_names(bool llm_branch) {
    std::vector<std::string> v{"spatial.out", "temporal.out", "cross_t5.out", "ffn.out"};
    if (llm_branch) {
        v.push_back("cross_llm.out");
        v.push_back("gate");
    }
    return v;
}

// Placement arithmetic: insert partitions the N originals into groups of
// M = y and appends x duplicates of each group's last block; prefix/suffix
// put all P copies of the first/last original at one end.
inline ExpansionPlan plan_expansion(int64_t n_blocks, const ExpansionSpec& spec, bool llm_branch = false) {
    if (n_blocks < 1) fail(ErrorKind::usage, "plan_expansion: N must be >= 1");
    ExpansionPlan plan;
    plan.variant = spec.variant;
    plan.old_blocks = n_blocks;
    plan.zero_targets = zero_target_names(llm_branch);

    int64_t pos = 0;
    if (spec.variant == StackVariant::insert) {
        if (n_blocks % spec.y != 0)
            fail(ErrorKind::usage, "invalid insert expansion: N must be divisible by M = " +
                                       std::to_string(spec.y) + " (N = " + std::to_string(n_blocks) +
                                       ", k = " + std::to_string(spec.x) + "/" + std::to_string(spec.y) + ")");
        plan.x = spec.x;
        plan.y = spec.y;
        plan.new_blocks = spec.x * n_blocks / spec.y;
        for (int64_t g = 0; g < n_blocks / spec.y; ++g) {
            for (int64_t j = 0; j < spec.y; ++j)
                plan.entries.push_back({pos++, g * spec.y + j, false});
            for (int64_t j = 0; j < spec.x; ++j)
                plan.entries.push_back({pos++, g * spec.y + spec.y - 1, true});
        }
    } else if (spec.variant == StackVariant::prefix) {
        plan.new_blocks = spec.count;
        for (int64_t j = 0; j < spec.count; ++j) plan.entries.push_back({pos++, 0, true});
        for (int64_t i = 0; i < n_blocks; ++i) plan.entries.push_back({pos++, i, false});
    } else {
        plan.new_blocks = spec.count;
        for (int64_t i = 0; i < n_blocks; ++i) plan.entries.push_back({pos++, i, false});
        for (int64_t j = 0; j < spec.count; ++j) plan.entries.push_back({pos++, n_blocks - 1, true});
    }
    return plan;
}

inline std::string ExpansionPlan::report() const {
    std::ostringstream os;
    os << "plan variant=" << variant_name(variant);
    if (variant == StackVariant::insert) os << " k=" << x << "/" << y << " M=" << y;
    os << " N=" << old_blocks << " P=" << new_blocks << " total=" << old_blocks + new_blocks << "\n";
    std::string zeroed;
    for (size_t i = 0; i < zero_targets.size(); ++i) {
        if (i) zeroed += ",";
        zeroed += zero_targets[i];
    }
    for (const auto& e : entries) {
        os << e.position << " " << (e.is_new ? "new" : "original") << " " << e.source << " "
           << (e.is_new ? zeroed : "-") << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Applying a plan
// ---------------------------------------------------------------------------

// Zero the designated last linear of every residual sub-layer; the gate of
// an llm branch resets to 0 as well. The modulation linear is untouched.
template <typename S>
void zero_init_block(TransformerBlock<S>& blk) {
    auto zero = [](Tensor<S>& t) { std::fill(t.values().begin(), t.values().end(), S(0)); };
    zero(blk.spatial.wo);
    zero(blk.spatial.bo);
    zero(blk.temporal.wo);
    zero(blk.temporal.bo);
    zero(blk.cross_t5.wo);
    zero(blk.cross_t5.bo);
    zero(blk.ffn.w2);
    zero(blk.ffn.b2);
    if (blk.cross_llm) {
        zero(blk.cross_llm->wo);
        zero(blk.cross_llm->bo);
        zero(blk.gate);
    }
}

template <typename S>
DitModel<S> expand_model(const DitModel<S>& model, const ExpansionPlan& plan) {
    if (plan.old_blocks != model.cfg.blocks)
        fail(ErrorKind::state, "plan built for N = " + std::to_string(plan.old_blocks) + " but model has N = " +
                                   std::to_string(model.cfg.blocks));
    DitModel<S> out = model.clone();
    out.blocks.clear();
    out.blocks.reserve(plan.entries.size());
    for (const auto& e : plan.entries) {
        const TransformerBlock<S>& src = model.blocks[size_t(e.source)];
        TransformerBlock<S> blk;
        blk.spatial = detail::clone_attention(src.spatial);
        blk.temporal = detail::clone_attention(src.temporal);
        blk.cross_t5 = detail::clone_attention(src.cross_t5);
        if (src.cross_llm) {
            blk.cross_llm = detail::clone_attention(*src.cross_llm);
            blk.gate = src.gate.clone();
        }
        blk.ffn = detail::clone_mlp(src.ffn);
        blk.mod_w = src.mod_w.clone();
        blk.mod_b = src.mod_b.clone();
        if (e.is_new) zero_init_block(blk);
        out.blocks.push_back(std::move(blk));
    }
    out.cfg.blocks = int64_t(out.blocks.size());
    return out;
}

// ---------------------------------------------------------------------------
// Verification and accounting
// ---------------------------------------------------------------------------

// Max elementwise |base - expanded| of model_forward over random probes.
// A faithful expansion or injection returns exactly 0.0.
template <typename S>
double verify_identity(const DitModel<S>& base, const DitModel<S>& expanded, int n_probes, Rng rng) {
    if (!base.cfg.same_extents(expanded.cfg))
        fail(ErrorKind::state, "verify_identity: models differ beyond block count / llm branch");
    autograd::NoGradGuard ng;
    const ModelConfig& cfg = base.cfg;
    const int64_t b = 2, l5 = 8, lllm = 8;
    double worst = 0.0;
    bool want_llm = base.has_llm() || expanded.has_llm();
    for (int p = 0; p < n_probes; ++p) {
        Tensor<S> z = tensor_randn<S>({b, cfg.channels, cfg.frames, cfg.height, cfg.width}, rng);
        std::vector<int64_t> ts(static_cast<size_t>(b));
        for (auto& t : ts) t = int64_t(rng.uniform_int(1000));
        CondBatch<S> cond;
        cond.c_t5 = tensor_randn<S>({b, l5, cfg.d_t5}, rng);
        cond.mask_t5 = Tensor<S>::full({b, l5}, S(1));
        Tensor<S> cllm, mllm;
        if (want_llm) {
            cllm = tensor_randn<S>({b, lllm, cfg.d_llm}, rng);
            mllm = Tensor<S>::full({b, lllm}, S(1));
        }
        auto run = [&](const DitModel<S>& m) {
            CondBatch<S> c = cond;
            if (m.has_llm() && want_llm) {
                c.c_llm = cllm;
                c.mask_llm = mllm;
            }
            return model_forward(m, z, ts, c);
        };
        worst = std::max(worst, max_abs_diff(run(base), run(expanded)));
    }
    return worst;
}

struct ParamCounts {
    int64_t embedders = 0;
    int64_t blocks = 0;
    int64_t head = 0;
    int64_t total() const { return embedders + blocks + head; }
};

template <typename S>
ParamCounts count_parameter_groups(const DitModel<S>& model) {
    ParamCounts c;
    for (const auto& p : model.named_params()) {
        int64_t n = p.tensor.numel();
        if (p.name.rfind("blocks.", 0) == 0) c.blocks += n;
        else if (p.name.rfind("head.", 0) == 0) c.head += n;
        else c.embedders += n;
    }
    return c;
}

template <typename S>
int64_t count_parameters(const DitModel<S>& model) {
    return count_parameter_groups(model).total();
}

// Closed-form per-block parameter count, cross-checked against enumeration
// in the tests.
inline int64_t block_param_count_formula(const ModelConfig& cfg) {
    int64_t d = cfg.hidden;
    auto attn = [&](int64_t dkv) { return 2 * (d * d + d) + 2 * (dkv * d + d); };
    int64_t n = attn(d) * 2;  // spatial + temporal
    n += attn(cfg.d_t5);
    int64_t fd = cfg.ffn_mult * d;
    n += d * fd + fd + fd * d + d;
    int64_t m = modulation_width(d, cfg.llm_branch);
    n += d * m + m;
    if (cfg.llm_branch) n += attn(cfg.d_llm) + 1;
    return n;
}

}  // namespace grow
