#pragma once

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "grow/conditioning.hpp"
#include "grow/diffusion.hpp"
#include "grow/dit.hpp"
#include "grow/expansion.hpp"

namespace grow {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

// ---------------------------------------------------------------------------
// Identity checks
// ---------------------------------------------------------------------------

template <typename S>
CheckResult check_expansion_identity(const ModelConfig& cfg, const std::string& spec_text, int probes,
                                     uint64_t seed) {
    Rng rng(seed, 0x1D);
    DitModel<S> model = init_model<S>(cfg, rng);
    ExpansionSpec spec = ExpansionSpec::parse(spec_text);
    ExpansionPlan plan = plan_expansion(cfg.blocks, spec, cfg.llm_branch);
    DitModel<S> expanded = expand_model(model, plan);
    double diff = verify_identity(model, expanded, probes, rng.fork(1));
    std::ostringstream os;
    os << "max_abs_diff=" << diff;
    return {"expansion-identity/" + spec_text, diff == 0.0, os.str()};
}

template <typename S>
std::vector<CheckResult> check_injection_identity(const ModelConfig& base_cfg, int probes, uint64_t seed) {
    ModelConfig cfg = base_cfg;
    cfg.llm_branch = false;
    Rng rng(seed, 0x2D);
    DitModel<S> model = init_model<S>(cfg, rng);
    Rng inj_rng = rng.fork(7);
    DitModel<S> injected = inject_llm_branch(model, inj_rng);
    double diff = verify_identity(model, injected, probes, rng.fork(2));
    std::vector<CheckResult> out;
    {
        std::ostringstream os;
        os << "max_abs_diff=" << diff;
        out.push_back({"injection-identity", diff == 0.0, os.str()});
    }
    if (cfg.d_llm == cfg.d_t5) {
        bool equal = true;
        for (size_t i = 0; i < injected.blocks.size(); ++i) {
            const auto& t5 = injected.blocks[i].cross_t5;
            const auto& llm = *injected.blocks[i].cross_llm;
            equal = equal && bits_equal(t5.wk, llm.wk) && bits_equal(t5.bk, llm.bk) &&
                    bits_equal(t5.wv, llm.wv) && bits_equal(t5.bv, llm.bv) &&
                    bits_equal(t5.wq, llm.wq) && bits_equal(t5.wo, llm.wo);
        }
        out.push_back({"injection-weight-copy", equal,
                       equal ? "K/V/Q/out bit-equal to t5 sub-layer" : "copied weights differ"});
    }
    return out;
}

// ---------------------------------------------------------------------------
// CFG algebra
// ---------------------------------------------------------------------------

template <typename S>
std::vector<CheckResult> check_cfg_algebra(const ModelConfig& base_cfg, uint64_t seed) {
    ModelConfig cfg = base_cfg;
    cfg.llm_branch = true;
    Rng rng(seed, 0x3D);
    DitModel<S> model = init_model<S>(cfg, rng);
    for (size_t i = 0; i < model.blocks.size(); ++i)
        model.blocks[i].gate.data()[0] = S(i % 2 == 0 ? 0.4 : -0.7);

    const int64_t b = 2, l = 6;
    Tensor<S> z = tensor_randn<S>({b, cfg.channels, cfg.frames, cfg.height, cfg.width}, rng);
    std::vector<int64_t> ts{31, 700};
    CondBatch<S> cond;
    cond.c_t5 = tensor_randn<S>({b, l, cfg.d_t5}, rng);
    cond.mask_t5 = Tensor<S>::full({b, l}, S(1));
    cond.c_llm = tensor_randn<S>({b, l, cfg.d_llm}, rng);
    cond.mask_llm = Tensor<S>::full({b, l}, S(1));

    autograd::NoGradGuard ng;
    std::vector<CondFlags> none(size_t(b), CondFlags{false, false});
    std::vector<CondFlags> t5_only(size_t(b), CondFlags{true, false});
    Tensor<S> eps_u = model_forward(model, z, ts, apply_condition_flags(cond, none, model));
    Tensor<S> eps_t5 = model_forward(model, z, ts, apply_condition_flags(cond, t5_only, model));
    Tensor<S> eps_full = model_forward(model, z, ts, cond);

    std::vector<CheckResult> out;
    {
        Tensor<S> e = cfg_epsilon(model, z, ts, cond, GuidanceScales{1.0, 1.0});
        bool ok = bits_equal(e, eps_full);
        out.push_back({"cfg-telescoping-(1,1)", ok, ok ? "equals full pass bitwise" : "differs from full pass"});
    }
    {
        GuidanceScales sc{4.5, 0.0};
        Tensor<S> e = cfg_epsilon(model, z, ts, cond, sc);
        Tensor<S> single = detail::cfg_combine(eps_u, eps_t5, static_cast<const Tensor<S>*>(nullptr), sc);
        bool ok = bits_equal(e, single);
        out.push_back({"cfg-single-at-s_llm=0", ok,
                       ok ? "equals single-condition CFG bitwise" : "differs from single-condition CFG"});
    }
    {
        Tensor<S> e = cfg_epsilon(model, z, ts, cond, GuidanceScales{0.0, 0.0});
        bool ok = bits_equal(e, eps_u);
        out.push_back({"cfg-unconditional-(0,0)", ok, ok ? "equals unconditional pass bitwise" : "differs"});
    }
    {
        Tensor<S> e = cfg_epsilon(model, z, ts, cond, GuidanceScales{7.0, 12.5});
        bool ok = all_finite(e);
        out.push_back({"cfg-paper-scales-(7,12.5)", ok, ok ? "finite output" : "non-finite output"});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dropout statistics
// ---------------------------------------------------------------------------

inline CheckResult check_dropout_stats(const DropoutPolicy& policy, int64_t draws, uint64_t seed) {
    Rng rng(seed, 0x4D);
    std::vector<CondFlags> flags = sample_condition_mask(rng, policy, draws);
    int64_t n_llm_only = 0, n_all = 0;
    for (const auto& f : flags) {
        if (!f.use_t5 && !f.use_llm) ++n_all;
        else if (f.use_t5 && !f.use_llm) ++n_llm_only;
    }
    auto within = [&](int64_t count, double p) {
        double sigma = std::sqrt(double(draws) * p * (1.0 - p));
        return std::abs(double(count) - double(draws) * p) <= 3.0 * sigma;
    };
    bool ok = within(n_llm_only, policy.p_drop_llm) && within(n_all, policy.p_drop_all);
    std::ostringstream os;
    os << "drop-llm " << double(n_llm_only) / double(draws) << " vs " << policy.p_drop_llm
       << ", drop-all " << double(n_all) / double(draws) << " vs " << policy.p_drop_all;
    return {"dropout-statistics", ok, os.str()};
}

// ---------------------------------------------------------------------------
// Gradient fidelity (64-bit end to end)
// ---------------------------------------------------------------------------

struct GradCheckReport {
    bool pass = false;
    int64_t checked = 0;
    int64_t skipped = 0;
    double worst_rel = 0.0;
    std::string worst_param;
    std::vector<std::string> failed_params;
};

// Central finite differences (h=1e-3) against the tape for every trainable
// parameter. Elements where both gradients are below 1e-6 are skipped.
inline GradCheckReport gradient_fidelity_check(const ModelConfig& base_cfg, uint64_t seed,
                                               double tol = 1e-4, double h = 1e-4) {
    using S = double;
    ModelConfig cfg = base_cfg;
    cfg.llm_branch = true;
    Rng rng(seed, 0x5D);
    DitModel<S> model = init_model<S>(cfg, rng);

    // Wake every path up: noise on all parameters, nonzero gates.
    auto params = model.named_params();
    Rng noise = rng.fork(11);
    for (auto& p : params) {
        if (p.name.size() >= 5 && p.name.compare(p.name.size() - 5, 5, ".gate") == 0) {
            p.tensor.data()[0] = noise.uniform() < 0.5 ? 0.4 : -0.7;
        } else {
            for (int64_t i = 0; i < p.tensor.numel(); ++i)
                p.tensor.data()[i] += S(noise.normal() * 0.05);
        }
    }

    EncoderConfig enc;
    enc.t5 = StubSpec{6, cfg.d_t5, 97, 5};
    enc.llm = StubSpec{8, cfg.d_llm, 101, 7};

    const int64_t b = 3;
    Rng data_rng = rng.fork(13);
    Tensor<S> z0 = tensor_randn<S>({b, cfg.channels, cfg.frames, cfg.height, cfg.width}, data_rng);
    Tensor<S> eps = tensor_randn<S>(z0.shape(), data_rng);
    std::vector<int64_t> ts{3, 251, 902};
    std::vector<CondFlags> flags{{true, true}, {true, false}, {false, false}};
    std::vector<PromptSet> prompts;
    TemplateSpec tmpl = default_llm_template();
    prompts.push_back(make_prompt_set("square moving right", "A square drifts to the right.", tmpl));
    prompts.push_back(make_prompt_set("circle moving up", "A circle drifts upward slowly.", tmpl));
    prompts.push_back(make_prompt_set("spark moving left", "A fast spark crosses the frame.", tmpl));
    NoiseSchedule sched = NoiseSchedule::linear();

    auto loss_value = [&]() {
        autograd::NoGradGuard ng;
        CondBatch<S> cond = build_condition_batch(prompts, model, enc);
        return double(training_loss_fixed(model, z0, cond, sched, ts, eps, flags).item());
    };

    // Analytic pass.
    zero_grads(params);
    {
        CondBatch<S> cond = build_condition_batch(prompts, model, enc);
        Tensor<S> loss = training_loss_fixed(model, z0, cond, sched, ts, eps, flags);
        backward(loss);
    }

    GradCheckReport report;
    report.pass = true;
    for (auto& p : params) {
        const auto& grad = p.tensor.grad();
        bool param_failed = false;
        for (int64_t i = 0; i < p.tensor.numel(); ++i) {
            double analytic = grad.empty() ? 0.0 : double(grad[size_t(i)]);
            S orig = p.tensor.data()[i];
            p.tensor.data()[i] = orig + S(h);
            double fp = loss_value();
            p.tensor.data()[i] = orig - S(h);
            double fm = loss_value();
            p.tensor.data()[i] = orig;
            double fd = (fp - fm) / (2.0 * h);
            double mag = std::max(std::abs(analytic), std::abs(fd));
            if (mag <= 1e-6) {
                ++report.skipped;
                continue;
            }
            ++report.checked;
            double rel = std::abs(analytic - fd) / mag;
            if (rel > report.worst_rel) {
                report.worst_rel = rel;
                report.worst_param = p.name + "[" + std::to_string(i) + "]";
            }
            if (rel > tol) {
                report.pass = false;
                param_failed = true;
            }
        }
        if (param_failed) report.failed_params.push_back(p.name);
    }
    return report;
}

// ---------------------------------------------------------------------------
// The cmd_verify suite
// ---------------------------------------------------------------------------

template <typename S>
std::vector<CheckResult> run_verification(const ModelConfig& cfg, const DropoutPolicy& policy,
                                          int probes, uint64_t seed) {
    std::vector<CheckResult> results;
    for (const char* spec : {"insert:k=1", "insert:k=1/2", "insert:k=2", "prefix:P=2", "suffix:P=2"}) {
        ModelConfig c = cfg;
        ExpansionSpec s = ExpansionSpec::parse(spec);
        if (s.variant == StackVariant::insert && cfg.blocks % s.y != 0) continue;  // not applicable at this N
        results.push_back(check_expansion_identity<S>(c, spec, probes, seed));
    }
    for (auto& r : check_injection_identity<S>(cfg, probes, seed)) results.push_back(r);
    for (auto& r : check_cfg_algebra<S>(cfg, seed)) results.push_back(r);
    results.push_back(check_dropout_stats(policy, 100000, seed));
    {
        ModelConfig small;
        small.channels = 2;
        small.frames = 2;
        small.height = 2;
        small.width = 2;
        small.hidden = 8;
        small.heads = 2;
        small.blocks = 2;
        small.ffn_mult = 2;
        small.d_t5 = 6;
        small.d_llm = 5;
        GradCheckReport g = gradient_fidelity_check(small, seed);
        std::ostringstream os;
        os << "checked=" << g.checked << " skipped=" << g.skipped << " worst_rel=" << g.worst_rel
           << " at " << (g.worst_param.empty() ? "-" : g.worst_param);
        results.push_back({"gradient-fidelity", g.pass, os.str()});
    }
    return results;
}

}  // namespace grow
