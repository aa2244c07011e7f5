#pragma once

// Naive 64-bit reference implementations, independent of the library's
// kernels; used only by tests.

#include <cmath>
#include <vector>

#include "grow/tensor.hpp"

namespace oracle {

// (m,k) x (k,n) triple loop in double.
template <typename S>
grow::Tensor<S> matmul(const grow::Tensor<S>& a, const grow::Tensor<S>& b) {
    int64_t m = a.size(0), k = a.size(1), n = b.size(1);
    grow::Tensor<S> out = grow::Tensor<S>::zeros({m, n});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int64_t kk = 0; kk < k; ++kk)
                acc += double(a.data()[i * k + kk]) * double(b.data()[kk * n + j]);
            out.data()[i * n + j] = S(acc);
        }
    return out;
}

template <typename S>
std::vector<double> softmax_row(const S* x, int64_t n) {
    std::vector<double> e(static_cast<size_t>(n));
    double sum = 0.0;
    for (int64_t j = 0; j < n; ++j) {
        e[size_t(j)] = std::exp(double(x[j]));
        sum += e[size_t(j)];
    }
    for (auto& v : e) v /= sum;
    return e;
}

// Explicit per-head, per-query attention loop.
template <typename S>
grow::Tensor<S> attention(const grow::Tensor<S>& q, const grow::Tensor<S>& k, const grow::Tensor<S>& v) {
    int64_t b = q.size(0), h = q.size(1), lq = q.size(2), d = q.size(3), lk = k.size(2);
    grow::Tensor<S> out = grow::Tensor<S>::zeros(q.shape());
    double inv = 1.0 / std::sqrt(double(d));
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t hi = 0; hi < h; ++hi)
            for (int64_t qi = 0; qi < lq; ++qi) {
                std::vector<double> logits(size_t(lk), 0.0);
                for (int64_t ki = 0; ki < lk; ++ki) {
                    double dot = 0.0;
                    for (int64_t di = 0; di < d; ++di)
                        dot += double(q.data()[((bi * h + hi) * lq + qi) * d + di]) *
                               double(k.data()[((bi * h + hi) * lk + ki) * d + di]);
                    logits[size_t(ki)] = dot * inv;
                }
                double mx = logits[0];
                for (double l : logits) mx = std::max(mx, l);
                double sum = 0.0;
                std::vector<double> w(static_cast<size_t>(lk));
                for (int64_t ki = 0; ki < lk; ++ki) {
                    w[size_t(ki)] = std::exp(logits[size_t(ki)] - mx);
                    sum += w[size_t(ki)];
                }
                for (int64_t di = 0; di < d; ++di) {
                    double acc = 0.0;
                    for (int64_t ki = 0; ki < lk; ++ki)
                        acc += w[size_t(ki)] / sum * double(v.data()[((bi * h + hi) * lk + ki) * d + di]);
                    out.data()[((bi * h + hi) * lq + qi) * d + di] = S(acc);
                }
            }
    return out;
}

inline double rel_err(double a, double b) {
    double m = std::max(std::abs(a), std::abs(b));
    return m == 0.0 ? 0.0 : std::abs(a - b) / m;
}

template <typename S>
double max_rel_err(const grow::Tensor<S>& a, const grow::Tensor<S>& b) {
    double worst = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i)
        worst = std::max(worst, rel_err(double(a.data()[i]), double(b.data()[i])));
    return worst;
}

}  // namespace oracle
