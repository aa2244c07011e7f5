#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "grow/ops.hpp"
#include "grow/tensor.hpp"

namespace grow {

template <typename S>
struct NamedParam {
    std::string name;
    Tensor<S> tensor;
};

template <typename S>
struct AdamState {
    std::vector<std::vector<S>> m, v;
    int64_t step = 0;

    template <typename P>
    void init_like(const std::vector<P>& params) {
        m.clear();
        v.clear();
        for (const auto& p : params) {
            m.emplace_back(size_t(p.tensor.numel()), S(0));
            v.emplace_back(size_t(p.tensor.numel()), S(0));
        }
        step = 0;
    }

    bool matches(const std::vector<NamedParam<S>>& params) const {
        if (m.size() != params.size() || v.size() != params.size()) return false;
        for (size_t i = 0; i < params.size(); ++i)
            if (int64_t(m[i].size()) != params[i].tensor.numel()) return false;
        return true;
    }
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// One Adam update over all parameters; moments carried in `state`.
// Parameters with empty grad are treated as zero-gradient.
template <typename S>
void adam_step(std::vector<NamedParam<S>>& params, AdamState<S>& state, const AdamConfig& cfg) {
    if (!state.matches(params)) state.init_like(params);
    state.step += 1;
    double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step));
    double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step));
    for (size_t p = 0; p < params.size(); ++p) {
        Tensor<S>& t = params[p].tensor;
        const auto& grad = t.grad();
        auto& m = state.m[p];
        auto& v = state.v[p];
        S* w = t.data();
        for (int64_t i = 0; i < t.numel(); ++i) {
            double g = grad.empty() ? 0.0 : double(grad[size_t(i)]);
            if (!std::isfinite(g))
                fail(ErrorKind::numeric, "adam_step: non-finite gradient in parameter '" + params[p].name + "'");
            double mi = cfg.beta1 * double(m[size_t(i)]) + (1.0 - cfg.beta1) * g;
            double vi = cfg.beta2 * double(v[size_t(i)]) + (1.0 - cfg.beta2) * g * g;
            m[size_t(i)] = S(mi);
            v[size_t(i)] = S(vi);
            double update = cfg.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
            w[i] = S(double(w[i]) - update);
        }
    }
}

template <typename S>
void zero_grads(std::vector<NamedParam<S>>& params) {
    for (auto& p : params) p.tensor.zero_grad();
}

// Central-difference gradient of a scalar-valued function. The evaluation
// runs on whatever scalar type the caller instantiates; gradient checks use
// double end to end.
template <typename S, typename F>
Tensor<S> finite_diff_grad(F&& f, const Tensor<S>& x, double h) {
    if (h <= 0.0) fail(ErrorKind::usage, "finite_diff_grad: step h must be positive");
    Tensor<S> probe = x.clone();
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) {
        S orig = probe.data()[i];
        probe.data()[i] = S(double(orig) + h);
        double fp = f(probe);
        probe.data()[i] = S(double(orig) - h);
        double fm = f(probe);
        probe.data()[i] = orig;
        out.data()[i] = S((fp - fm) / (2.0 * h));
    }
    return out;
}

}  // namespace grow
