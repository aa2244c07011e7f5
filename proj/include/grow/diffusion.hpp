#pragma once

#include <chrono>
#include <functional>
#include <vector>

#include "grow/conditioning.hpp"
#include "grow/dit.hpp"
#include "grow/optim.hpp"

namespace grow {

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

struct NoiseSchedule {
    int64_t steps = 0;
    std::vector<double> betas;
    std::vector<double> alpha_bars;  // cumulative product of (1 - beta)

    static NoiseSchedule linear(int64_t steps = 1000, double beta_start = 1e-4, double beta_end = 2e-2) {
        if (steps < 2) fail(ErrorKind::config, "noise schedule needs at least 2 steps");
        if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
            fail(ErrorKind::config, "noise schedule requires 0 < beta_start <= beta_end < 1");
        NoiseSchedule s;
        s.steps = steps;
        s.betas.resize(size_t(steps));
        s.alpha_bars.resize(size_t(steps));
        double ab = 1.0;
        for (int64_t t = 0; t < steps; ++t) {
            double beta = beta_start + (beta_end - beta_start) * double(t) / double(steps - 1);
            s.betas[size_t(t)] = beta;
            ab *= (1.0 - beta);
            s.alpha_bars[size_t(t)] = ab;
        }
        return s;
    }

    void check_t(int64_t t) const {
        if (t < 0 || t >= steps)
            fail(ErrorKind::usage, "timestep " + std::to_string(t) + " out of range [0, " +
                                       std::to_string(steps) + ")");
    }
};

// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps, per sample.
template <typename S>
Tensor<S> q_sample(const Tensor<S>& z0, const std::vector<int64_t>& ts, const Tensor<S>& eps,
                   const NoiseSchedule& sched) {
    if (z0.shape() != eps.shape())
        fail(ErrorKind::shape, "q_sample: " + shape_str(z0.shape()) + " vs " + shape_str(eps.shape()));
    int64_t b = z0.size(0);
    if (int64_t(ts.size()) != b) fail(ErrorKind::shape, "q_sample: timestep count != batch");
    int64_t inner = z0.numel() / b;
    Tensor<S> out = Tensor<S>::zeros(z0.shape());
    for (int64_t i = 0; i < b; ++i) {
        sched.check_t(ts[size_t(i)]);
        double ab = sched.alpha_bars[size_t(ts[size_t(i)])];
        double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
        for (int64_t j = 0; j < inner; ++j)
            out.data()[i * inner + j] =
                S(sa * double(z0.data()[i * inner + j]) + sb * double(eps.data()[i * inner + j]));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Condition dropout
// ---------------------------------------------------------------------------

struct DropoutPolicy {
    double p_drop_llm = 0.01;
    double p_drop_all = 0.001;

    void validate() const {
        if (p_drop_llm < 0 || p_drop_llm > 1 || p_drop_all < 0 || p_drop_all > 1 ||
            p_drop_llm + p_drop_all > 1.0)
            fail(ErrorKind::config, "dropout policy probabilities out of range");
    }
};

struct CondFlags {
    bool use_t5 = true;
    bool use_llm = true;
};

// With prob p_drop_all both conditions drop; otherwise with prob p_drop_llm
// only the llm condition drops.
inline std::vector<CondFlags> sample_condition_mask(Rng& rng, const DropoutPolicy& policy, int64_t batch) {
    policy.validate();
    std::vector<CondFlags> flags(static_cast<size_t>(batch));
    for (auto& f : flags) {
        if (rng.uniform() < policy.p_drop_all) {
            f = {false, false};
        } else if (rng.uniform() < policy.p_drop_llm) {
            f = {true, false};
        } else {
            f = {true, true};
        }
    }
    return flags;
}

// Dropped conditions are replaced by the model's learned null embedding,
// broadcast over positions, with a fully-valid mask. The CFG passes use the
// same code path with constant flags.
template <typename S>
CondBatch<S> apply_condition_flags(const CondBatch<S>& cond, const std::vector<CondFlags>& flags,
                                   const DitModel<S>& model) {
    int64_t b = cond.batch();
    if (int64_t(flags.size()) != b) fail(ErrorKind::shape, "condition flags count != batch");
    auto substitute = [&](const Tensor<S>& c, const Tensor<S>& mask, const Tensor<S>& null_vec,
                          auto use_of) {
        std::vector<uint8_t> keep(static_cast<size_t>(b));
        for (int64_t i = 0; i < b; ++i) keep[size_t(i)] = use_of(flags[size_t(i)]) ? 1 : 0;
        Tensor<S> new_c = select_or_null(c, keep, null_vec);
        Tensor<S> new_mask = mask.clone();
        int64_t l = mask.size(1);
        for (int64_t i = 0; i < b; ++i)
            if (!keep[size_t(i)])
                for (int64_t j = 0; j < l; ++j) new_mask.data()[i * l + j] = S(1);
        return std::make_pair(new_c, new_mask);
    };
    CondBatch<S> out;
    auto [c5, m5] = substitute(cond.c_t5, cond.mask_t5, model.null_t5,
                               [](const CondFlags& f) { return f.use_t5; });
    out.c_t5 = c5;
    out.mask_t5 = m5;
    if (cond.c_llm && model.has_llm()) {
        auto [cl, ml] = substitute(*cond.c_llm, *cond.mask_llm, *model.null_llm,
                                   [](const CondFlags& f) { return f.use_llm; });
        out.c_llm = cl;
        out.mask_llm = ml;
    } else {
        out.c_llm = cond.c_llm;
        out.mask_llm = cond.mask_llm;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training objective
// ---------------------------------------------------------------------------

// Mean over batch and elements of (eps - eps_hat)^2.
template <typename S>
Tensor<S> noise_mse(const Tensor<S>& eps, const Tensor<S>& eps_hat) {
    Tensor<S> d = sub(eps, eps_hat);
    return mean_all(mul(d, d));
}

// Deterministic core: the caller supplies the timesteps, noise, and dropout
// flags. Training continuity probes rely on replaying identical draws.
template <typename S>
Tensor<S> training_loss_fixed(const DitModel<S>& model, const Tensor<S>& z0, const CondBatch<S>& cond,
                              const NoiseSchedule& sched, const std::vector<int64_t>& ts,
                              const Tensor<S>& eps, const std::vector<CondFlags>& flags) {
    Tensor<S> z_t = q_sample(z0, ts, eps, sched);
    CondBatch<S> dropped = apply_condition_flags(cond, flags, model);
    Tensor<S> eps_hat = model_forward(model, z_t, ts, dropped);
    return noise_mse(eps, eps_hat);
}

// Per-sample timestep and dropout draws.
template <typename S>
Tensor<S> training_loss(const DitModel<S>& model, const Tensor<S>& z0, const CondBatch<S>& cond,
                        const NoiseSchedule& sched, Rng& rng, const DropoutPolicy& policy) {
    int64_t b = z0.size(0);
    std::vector<int64_t> ts(static_cast<size_t>(b));
    for (auto& t : ts) t = int64_t(rng.uniform_int(uint64_t(sched.steps)));
    Tensor<S> eps = tensor_randn<S>(z0.shape(), rng);
    std::vector<CondFlags> flags = sample_condition_mask(rng, policy, b);
    return training_loss_fixed(model, z0, cond, sched, ts, eps, flags);
}

// ---------------------------------------------------------------------------
// Classifier-free guidance for two conditions
// ---------------------------------------------------------------------------

struct GuidanceScales {
    double s_t5 = 7.0;
    double s_llm = 12.5;

    void validate() const {
        if (!std::isfinite(s_t5) || !std::isfinite(s_llm) || s_t5 < 0 || s_llm < 0)
            fail(ErrorKind::config, "guidance scales must be finite and non-negative");
    }
};

namespace detail {

// eps_u + s5 (eps_t5 - eps_u) + sl (eps_full - eps_t5), collected into
// (1-s5) u + (s5-sl) t5 + sl full so the cancellations at scale 0 and 1 are
// exact in floating point.
template <typename S>
Tensor<S> cfg_combine(const Tensor<S>& u, const Tensor<S>& t5, const Tensor<S>* full,
                      const GuidanceScales& sc) {
    double c_u = 1.0 - sc.s_t5;
    double c_t = full ? sc.s_t5 - sc.s_llm : sc.s_t5;
    double c_f = sc.s_llm;
    Tensor<S> out = Tensor<S>::zeros(u.shape());
    for (int64_t i = 0; i < u.numel(); ++i) {
        double v = c_u * double(u.data()[i]) + c_t * double(t5.data()[i]);
        if (full) v += c_f * double(full->data()[i]);
        out.data()[i] = S(v);
    }
    return out;
}

}  // namespace detail

// Exactly three forward passes: unconditional (both nulls), t5-only
// (llm null), and fully conditioned. A model without the llm branch
// degenerates to single-condition guidance with s_t5.
template <typename S>
Tensor<S> cfg_epsilon(const DitModel<S>& model, const Tensor<S>& z_t, const std::vector<int64_t>& ts,
                      const CondBatch<S>& cond, const GuidanceScales& scales) {
    scales.validate();
    autograd::NoGradGuard ng;
    int64_t b = z_t.size(0);
    std::vector<CondFlags> none(size_t(b), CondFlags{false, false});
    std::vector<CondFlags> t5_only(size_t(b), CondFlags{true, false});
    Tensor<S> eps_u = model_forward(model, z_t, ts, apply_condition_flags(cond, none, model));
    Tensor<S> eps_t5 = model_forward(model, z_t, ts, apply_condition_flags(cond, t5_only, model));
    if (!model.has_llm() || !cond.c_llm)
        return detail::cfg_combine(eps_u, eps_t5, static_cast<const Tensor<S>*>(nullptr), scales);
    Tensor<S> eps_full = model_forward(model, z_t, ts, cond);
    return detail::cfg_combine(eps_u, eps_t5, &eps_full, scales);
}

// ---------------------------------------------------------------------------
// DDIM sampler (eta = 0, deterministic)
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> ddim_sample(const DitModel<S>& model, int64_t batch, const CondBatch<S>& cond,
                      const GuidanceScales& scales, int64_t n_steps, Rng& rng,
                      const NoiseSchedule& sched) {
    if (n_steps < 1) fail(ErrorKind::usage, "ddim_sample: n_steps must be >= 1");
    if (n_steps > sched.steps) fail(ErrorKind::usage, "ddim_sample: n_steps exceeds schedule length");
    autograd::NoGradGuard ng;
    const ModelConfig& cfg = model.cfg;
    Tensor<S> z = tensor_randn<S>({batch, cfg.channels, cfg.frames, cfg.height, cfg.width}, rng);

    std::vector<int64_t> taus(static_cast<size_t>(n_steps));
    for (int64_t i = 0; i < n_steps; ++i)
        taus[size_t(i)] = n_steps == 1 ? sched.steps - 1 : (sched.steps - 1) * i / (n_steps - 1);

    for (int64_t i = n_steps - 1; i >= 0; --i) {
        int64_t t = taus[size_t(i)];
        double ab = sched.alpha_bars[size_t(t)];
        double ab_prev = i > 0 ? sched.alpha_bars[size_t(taus[size_t(i - 1)])] : 1.0;
        std::vector<int64_t> ts(size_t(batch), t);
        Tensor<S> eps = cfg_epsilon(model, z, ts, cond, scales);
        double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
        double pa = std::sqrt(ab_prev), pb = std::sqrt(1.0 - ab_prev);
        for (int64_t j = 0; j < z.numel(); ++j) {
            double e = double(eps.data()[j]);
            double z0 = (double(z.data()[j]) - sb * e) / sa;
            z.data()[j] = S(pa * z0 + pb * e);
        }
    }
    return z;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

template <typename S>
struct TrainExample {
    std::vector<S> latent;  // C*T*H*W values
    PromptSet prompts;
};

struct TrainOptions {
    int64_t steps = 2000;
    int64_t batch = 8;
    AdamConfig adam;
    DropoutPolicy dropout;
    std::vector<std::string> freeze_prefixes;  // parameter-name prefixes to exclude
};

struct StepMetric {
    int64_t step = 0;
    double loss = 0.0;
    double wall_ms = 0.0;
};

template <typename S>
std::vector<StepMetric> train_loop(DitModel<S>& model, const std::vector<TrainExample<S>>& data,
                                   const EncoderConfig& enc, const NoiseSchedule& sched,
                                   const TrainOptions& opt, AdamState<S>& adam_state, Rng& rng,
                                   const std::function<void(const StepMetric&)>& on_step = {}) {
    if (opt.steps < 1) fail(ErrorKind::usage, "train_loop: steps must be >= 1");
    if (opt.batch < 1) fail(ErrorKind::usage, "train_loop: batch must be >= 1");
    if (data.empty()) fail(ErrorKind::usage, "train_loop: empty dataset");
    opt.dropout.validate();

    std::vector<NamedParam<S>> params;
    for (auto& p : model.named_params()) {
        bool frozen = false;
        for (const auto& prefix : opt.freeze_prefixes)
            if (!prefix.empty() && p.name.rfind(prefix, 0) == 0) frozen = true;
        if (!frozen) params.push_back(p);
    }

    const ModelConfig& cfg = model.cfg;
    int64_t inner = cfg.channels * cfg.tokens();
    std::vector<StepMetric> metrics;
    metrics.reserve(size_t(opt.steps));

    for (int64_t step = 1; step <= opt.steps; ++step) {
        auto t0 = std::chrono::steady_clock::now();

        Tensor<S> z0 = Tensor<S>::zeros({opt.batch, cfg.channels, cfg.frames, cfg.height, cfg.width});
        std::vector<PromptSet> prompts(size_t(opt.batch));
        for (int64_t i = 0; i < opt.batch; ++i) {
            const auto& ex = data[size_t(rng.uniform_int(uint64_t(data.size())))];
            std::copy(ex.latent.begin(), ex.latent.end(), z0.data() + i * inner);
            prompts[size_t(i)] = ex.prompts;
        }

        CondBatch<S> cond = build_condition_batch(prompts, model, enc);
        Tensor<S> loss = training_loss(model, z0, cond, sched, rng, opt.dropout);
        double loss_v = double(loss.item());
        if (!std::isfinite(loss_v))
            fail(ErrorKind::numeric, "non-finite loss at step " + std::to_string(step));
        backward(loss);
        adam_step(params, adam_state, opt.adam);
        zero_grads(params);

        double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        StepMetric m{step, loss_v, ms};
        metrics.push_back(m);
        if (on_step) on_step(m);
    }
    return metrics;
}

}  // namespace grow
