#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "grow/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace grow {

// ---------------------------------------------------------------------------
// Matmul kernels. Storage is S, accumulation is always 64-bit; results are
// rounded to S at store. Parallel variants keep a fixed per-element reduction
// order, so outputs are bitwise identical to the sequential loop.
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
void mm_nn(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for if (m * n * k > 65536)
    for (int64_t i = 0; i < m; ++i) {
        static thread_local std::vector<double> acc;
        acc.assign(size_t(n), 0.0);
        const S* arow = a + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
            double av = double(arow[kk]);
            const S* brow = b + kk * n;
            for (int64_t j = 0; j < n; ++j) acc[size_t(j)] += av * double(brow[j]);
        }
        S* crow = c + i * n;
        for (int64_t j = 0; j < n; ++j) crow[j] = S(acc[size_t(j)]);
    }
}

// c(m,k) = a(m,n) * b(k,n)^T
template <typename S>
void mm_nt(const S* a, const S* b, double* c, int64_t m, int64_t n, int64_t k) {
#pragma omp parallel for if (m * n * k > 65536)
    for (int64_t i = 0; i < m; ++i) {
        const S* arow = a + i * n;
        double* crow = c + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
            const S* brow = b + kk * n;
            double acc = 0.0;
            for (int64_t j = 0; j < n; ++j) acc += double(arow[j]) * double(brow[j]);
            crow[kk] = acc;
        }
    }
}

// grad(m,k) += a(m,n) * b(k,n)^T, rounding each 64-bit dot at accumulation
template <typename S>
void mm_nt_acc(const S* a, const S* b, S* grad, int64_t m, int64_t n, int64_t k) {
#pragma omp parallel for if (m * n * k > 65536)
    for (int64_t i = 0; i < m; ++i) {
        const S* arow = a + i * n;
        S* grow_ = grad + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
            const S* brow = b + kk * n;
            double acc = 0.0;
            for (int64_t j = 0; j < n; ++j) acc += double(arow[j]) * double(brow[j]);
            grow_[kk] += S(acc);
        }
    }
}

// grad(k,n) += a(m,k)^T * g(m,n), 64-bit dot per element
template <typename S>
void mm_tn_acc(const S* a, const S* g, S* grad, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for if (m * n * k > 65536)
    for (int64_t kk = 0; kk < k; ++kk) {
        S* grow_ = grad + kk * n;
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int64_t i = 0; i < m; ++i) acc += double(a[i * k + kk]) * double(g[i * n + j]);
            grow_[j] += S(acc);
        }
    }
}

// c(k,n) = a(m,k)^T * g(m,n)
template <typename S>
void mm_tn(const S* a, const S* g, double* c, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for if (m * n * k > 65536)
    for (int64_t kk = 0; kk < k; ++kk) {
        double* crow = c + kk * n;
        for (int64_t i = 0; i < m; ++i) {
            double av = double(a[i * k + kk]);
            const S* grow_ = g + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * double(grow_[j]);
        }
    }
}

template <typename S>
void add_into(std::vector<S>& dst, const std::vector<double>& src) {
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += S(src[i]);
}

inline Shape transposed_shape(const Shape& s, int ax1, int ax2) {
    Shape out = s;
    std::swap(out[size_t(ax1)], out[size_t(ax2)]);
    return out;
}

template <typename S>
std::vector<S> transpose_values(const Shape& shape, const S* src, int ax1, int ax2) {
    int r = int(shape.size());
    if (ax1 > ax2) std::swap(ax1, ax2);
    int64_t n = shape_numel(shape);
    std::vector<S> out(static_cast<size_t>(n));

    // Collapse to (outer, A, mid, B, inner) around the swapped axes.
    int64_t outer = 1, mid = 1, inner = 1;
    for (int i = 0; i < ax1; ++i) outer *= shape[size_t(i)];
    for (int i = ax1 + 1; i < ax2; ++i) mid *= shape[size_t(i)];
    for (int i = ax2 + 1; i < r; ++i) inner *= shape[size_t(i)];
    int64_t ea = shape[size_t(ax1)], eb = shape[size_t(ax2)];

    for (int64_t o = 0; o < outer; ++o)
        for (int64_t a = 0; a < ea; ++a)
            for (int64_t m = 0; m < mid; ++m)
                for (int64_t b = 0; b < eb; ++b) {
                    const S* s = src + (((o * ea + a) * mid + m) * eb + b) * inner;
                    S* d = out.data() + (((o * eb + b) * mid + m) * ea + a) * inner;
                    if (inner == 1) *d = *s;
                    else std::copy(s, s + inner, d);
                }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        fail(ErrorKind::shape, "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<S> out(size_t(a.numel()));
    for (int64_t i = 0; i < a.numel(); ++i) out[size_t(i)] = a.data()[i] + b.data()[i];
    auto an = a.node(), bn = b.node();
    return make_op<S>(a.shape(), std::move(out), {an, bn}, [an, bn](TensorNode<S>& self) {
        if (an->requires_grad) {
            auto& g = an->grad_buf();
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->grad_buf();
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        fail(ErrorKind::shape, "sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<S> out(size_t(a.numel()));
    for (int64_t i = 0; i < a.numel(); ++i) out[size_t(i)] = a.data()[i] - b.data()[i];
    auto an = a.node(), bn = b.node();
    return make_op<S>(a.shape(), std::move(out), {an, bn}, [an, bn](TensorNode<S>& self) {
        if (an->requires_grad) {
            auto& g = an->grad_buf();
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->grad_buf();
            for (size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        fail(ErrorKind::shape, "mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<S> out(size_t(a.numel()));
    for (int64_t i = 0; i < a.numel(); ++i) out[size_t(i)] = a.data()[i] * b.data()[i];
    auto an = a.node(), bn = b.node();
    return make_op<S>(a.shape(), std::move(out), {an, bn}, [an, bn](TensorNode<S>& self) {
        if (an->requires_grad) {
            auto& g = an->grad_buf();
            const S* bv = bn->data->data();
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->grad_buf();
            const S* av = an->data->data();
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
        }
    });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, double c) {
    std::vector<S> out(size_t(a.numel()));
    for (int64_t i = 0; i < a.numel(); ++i) out[size_t(i)] = S(double(a.data()[i]) * c);
    auto an = a.node();
    return make_op<S>(a.shape(), std::move(out), {an}, [an, c](TensorNode<S>& self) {
        auto& g = an->grad_buf();
        for (size_t i = 0; i < g.size(); ++i) g[i] += S(double(self.grad[i]) * c);
    });
}

// ---------------------------------------------------------------------------
// Matmul: a is (..., m, k); b is (k, n), shared across batches, or (..., k, n)
// with identical leading extents.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rank() < 2 || b.rank() < 2)
        fail(ErrorKind::shape, "matmul: rank-1 operand " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    int64_t m = a.size(-2), k = a.size(-1);
    int64_t kb = b.size(-2), n = b.size(-1);
    if (k != kb)
        fail(ErrorKind::shape,
             "matmul: inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    bool shared_b = b.rank() == 2;
    Shape lead(a.shape().begin(), a.shape().end() - 2);
    if (!shared_b) {
        Shape blead(b.shape().begin(), b.shape().end() - 2);
        if (blead != lead)
            fail(ErrorKind::shape,
                 "matmul: batch extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    int64_t batches = shape_numel(lead);
    Shape oshape = lead;
    oshape.push_back(m);
    oshape.push_back(n);

    std::vector<S> out(size_t(batches * m * n));
    for (int64_t bt = 0; bt < batches; ++bt)
        detail::mm_nn(a.data() + bt * m * k, b.data() + (shared_b ? 0 : bt * k * n),
                      out.data() + bt * m * n, m, k, n);

    auto an = a.node(), bn = b.node();
    return make_op<S>(std::move(oshape), std::move(out), {an, bn},
                      [an, bn, m, k, n, batches, shared_b](TensorNode<S>& self) {
        if (an->requires_grad) {
            auto& ga = an->grad_buf();
            for (int64_t bt = 0; bt < batches; ++bt)
                detail::mm_nt_acc(self.grad.data() + bt * m * n,
                                  bn->data->data() + (shared_b ? 0 : bt * k * n),
                                  ga.data() + bt * m * k, m, n, k);
        }
        if (bn->requires_grad) {
            auto& gb = bn->grad_buf();
            if (shared_b) {
                // one 64-bit accumulator across all batches
                std::vector<double> buf(size_t(k * n), 0.0);
                for (int64_t bt = 0; bt < batches; ++bt)
                    detail::mm_tn(an->data->data() + bt * m * k, self.grad.data() + bt * m * n,
                                  buf.data(), m, k, n);
                for (int64_t i = 0; i < k * n; ++i) gb[size_t(i)] += S(buf[size_t(i)]);
            } else {
                for (int64_t bt = 0; bt < batches; ++bt)
                    detail::mm_tn_acc(an->data->data() + bt * m * k, self.grad.data() + bt * m * n,
                                      gb.data() + bt * k * n, m, k, n);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        fail(ErrorKind::shape, "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes numel");
    for (int64_t e : shape)
        if (e < 1) fail(ErrorKind::shape, "reshape: non-positive extent in " + shape_str(shape));
    // Metadata-only: shares the buffer.
    auto an = a.node();
    Tensor<S> out = Tensor<S>::wrap(std::make_shared<TensorNode<S>>());
    out.node()->shape = std::move(shape);
    out.node()->data = an->data;
    out.node()->order = autograd::next_order();
    if (autograd::grad_enabled && an->requires_grad) {
        out.node()->requires_grad = true;
        out.node()->parents = {an};
        out.node()->backward_fn = [an](TensorNode<S>& self) {
            auto& g = an->grad_buf();
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        };
    }
    return out;
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a, int ax1, int ax2) {
    int r = a.rank();
    if (ax1 < 0) ax1 += r;
    if (ax2 < 0) ax2 += r;
    if (ax1 < 0 || ax1 >= r || ax2 < 0 || ax2 >= r)
        fail(ErrorKind::shape, "transpose: axis out of range for " + shape_str(a.shape()));
    Shape oshape = detail::transposed_shape(a.shape(), ax1, ax2);
    std::vector<S> out = detail::transpose_values(a.shape(), a.data(), ax1, ax2);
    auto an = a.node();
    Shape ashape = a.shape();
    return make_op<S>(std::move(oshape), std::move(out), {an},
                      [an, ax1, ax2](TensorNode<S>& self) {
        std::vector<S> gt = detail::transpose_values(self.shape, self.grad.data(), ax1, ax2);
        auto& g = an->grad_buf();
        for (size_t i = 0; i < g.size(); ++i) g[i] += gt[i];
    });
}

template <typename S>
Tensor<S> slice_lastdim(const Tensor<S>& a, int64_t off, int64_t len) {
    int64_t d = a.size(-1);
    if (off < 0 || len < 1 || off + len > d)
        fail(ErrorKind::shape, "slice_lastdim: bad range on " + shape_str(a.shape()));
    int64_t rows = a.numel() / d;
    Shape oshape = a.shape();
    oshape.back() = len;
    std::vector<S> out(size_t(rows * len));
    for (int64_t r = 0; r < rows; ++r)
        std::copy(a.data() + r * d + off, a.data() + r * d + off + len, out.begin() + r * len);
    auto an = a.node();
    return make_op<S>(std::move(oshape), std::move(out), {an},
                      [an, off, len, d, rows](TensorNode<S>& self) {
        auto& g = an->grad_buf();
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < len; ++j) g[size_t(r * d + off + j)] += self.grad[size_t(r * len + j)];
    });
}

// ---------------------------------------------------------------------------
// Normalization and activations
// ---------------------------------------------------------------------------

// Plain last-axis normalization; any affine is applied externally.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& a, double eps) {
    int64_t d = a.size(-1);
    int64_t rows = a.numel() / d;
    std::vector<S> out(size_t(a.numel()));
    auto rstd = std::make_shared<std::vector<double>>(size_t(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const S* x = a.data() + r * d;
        double mean = 0.0;
        for (int64_t j = 0; j < d; ++j) mean += double(x[j]);
        mean /= double(d);
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            double c = double(x[j]) - mean;
            var += c * c;
        }
        var /= double(d);
        double denom = var + eps;
        if (denom <= 0.0) fail(ErrorKind::numeric, "layer_norm: division by zero (variance + eps == 0)");
        double rs = 1.0 / std::sqrt(denom);
        (*rstd)[size_t(r)] = rs;
        for (int64_t j = 0; j < d; ++j) out[size_t(r * d + j)] = S((double(x[j]) - mean) * rs);
    }
    auto an = a.node();
    auto saved = std::make_shared<std::vector<S>>(out);
    return make_op<S>(a.shape(), std::move(out), {an}, [an, d, rows, rstd, saved](TensorNode<S>& self) {
        auto& g = an->grad_buf();
        for (int64_t r = 0; r < rows; ++r) {
            const S* y = saved->data() + r * d;
            const S* gy = self.grad.data() + r * d;
            double gmean = 0.0, gymean = 0.0;
            for (int64_t j = 0; j < d; ++j) {
                gmean += double(gy[j]);
                gymean += double(gy[j]) * double(y[j]);
            }
            gmean /= double(d);
            gymean /= double(d);
            double rs = (*rstd)[size_t(r)];
            for (int64_t j = 0; j < d; ++j)
                g[size_t(r * d + j)] += S(rs * (double(gy[j]) - gmean - double(y[j]) * gymean));
        }
    });
}

// Stable softmax over the last axis; NaN inputs propagate.
template <typename S>
Tensor<S> softmax_lastdim(const Tensor<S>& a) {
    int64_t d = a.size(-1);
    int64_t rows = a.numel() / d;
    std::vector<S> out(size_t(a.numel()));
    for (int64_t r = 0; r < rows; ++r) {
        const S* x = a.data() + r * d;
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < d; ++j) mx = std::max(mx, double(x[j]));
        double sum = 0.0;
        static thread_local std::vector<double> e;
        e.assign(static_cast<size_t>(d), 0.0);
        for (int64_t j = 0; j < d; ++j) {
            e[size_t(j)] = std::exp(double(x[j]) - mx);
            sum += e[size_t(j)];
        }
        for (int64_t j = 0; j < d; ++j) out[size_t(r * d + j)] = S(e[size_t(j)] / sum);
    }
    auto an = a.node();
    auto saved = std::make_shared<std::vector<S>>(out);
    return make_op<S>(a.shape(), std::move(out), {an}, [an, d, rows, saved](TensorNode<S>& self) {
        auto& g = an->grad_buf();
        for (int64_t r = 0; r < rows; ++r) {
            const S* y = saved->data() + r * d;
            const S* gy = self.grad.data() + r * d;
            double dot = 0.0;
            for (int64_t j = 0; j < d; ++j) dot += double(gy[j]) * double(y[j]);
            for (int64_t j = 0; j < d; ++j)
                g[size_t(r * d + j)] += S(double(y[j]) * (double(gy[j]) - dot));
        }
    });
}

template <typename S>
Tensor<S> gelu(const Tensor<S>& a) {
    std::vector<S> out(size_t(a.numel()));
    for (int64_t i = 0; i < a.numel(); ++i) {
        double x = double(a.data()[i]);
        out[size_t(i)] = S(0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244)));
    }
    auto an = a.node();
    return make_op<S>(a.shape(), std::move(out), {an}, [an](TensorNode<S>& self) {
        auto& g = an->grad_buf();
        const S* xv = an->data->data();
        for (size_t i = 0; i < g.size(); ++i) {
            double x = double(xv[i]);
            double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
            double pdf = std::exp(-0.5 * x * x) * 0.3989422804014326779;
            g[i] += S(double(self.grad[i]) * (cdf + x * pdf));
        }
    });
}

template <typename S>
Tensor<S> tanh_op(const Tensor<S>& a) {
    std::vector<S> out(size_t(a.numel()));
    for (int64_t i = 0; i < a.numel(); ++i) out[size_t(i)] = S(std::tanh(double(a.data()[i])));
    auto an = a.node();
    auto saved = std::make_shared<std::vector<S>>(out);
    return make_op<S>(a.shape(), std::move(out), {an}, [an, saved](TensorNode<S>& self) {
        auto& g = an->grad_buf();
        for (size_t i = 0; i < g.size(); ++i) {
            double y = double((*saved)[i]);
            g[i] += S(double(self.grad[i]) * (1.0 - y * y));
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum_all(const Tensor<S>& a) {
    double acc = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) acc += double(a.data()[i]);
    auto an = a.node();
    return make_op<S>({1}, {S(acc)}, {an}, [an](TensorNode<S>& self) {
        auto& g = an->grad_buf();
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
    });
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& a) {
    return scale(sum_all(a), 1.0 / double(a.numel()));
}

// ---------------------------------------------------------------------------
// Affine / broadcast ops
// ---------------------------------------------------------------------------

// y = x W + b over the last axis; x is (..., d_in).
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
    if (w.rank() != 2)
        fail(ErrorKind::shape, "linear: weight must be rank-2, got " + shape_str(w.shape()));
    int64_t din = x.size(-1);
    if (din != w.size(0))
        fail(ErrorKind::shape, "linear: " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
    int64_t dout = w.size(1);
    bool has_bias = b.defined();
    if (has_bias && b.numel() != dout)
        fail(ErrorKind::shape, "linear: bias " + shape_str(b.shape()) + " vs d_out " + std::to_string(dout));
    int64_t rows = x.numel() / din;
    Shape oshape = x.shape();
    oshape.back() = dout;

    std::vector<S> out(size_t(rows * dout));
    detail::mm_nn(x.data(), w.data(), out.data(), rows, din, dout);
    if (has_bias) {
        const S* bv = b.data();
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < dout; ++j) out[size_t(r * dout + j)] += bv[j];
    }

    auto xn = x.node(), wn = w.node();
    auto bn = has_bias ? b.node() : nullptr;
    std::vector<std::shared_ptr<TensorNode<S>>> parents{xn, wn};
    if (bn) parents.push_back(bn);
    return make_op<S>(std::move(oshape), std::move(out), std::move(parents),
                      [xn, wn, bn, rows, din, dout](TensorNode<S>& self) {
        if (xn->requires_grad)
            detail::mm_nt_acc(self.grad.data(), wn->data->data(), xn->grad_buf().data(), rows, dout, din);
        if (wn->requires_grad) {
            std::vector<double> buf(size_t(din * dout), 0.0);
            detail::mm_tn(xn->data->data(), self.grad.data(), buf.data(), rows, din, dout);
            detail::add_into(wn->grad_buf(), buf);
        }
        if (bn && bn->requires_grad) {
            auto& g = bn->grad_buf();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < dout; ++j) g[size_t(j)] += self.grad[size_t(r * dout + j)];
        }
    });
}

template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w) {
    return linear(x, w, Tensor<S>());
}

// Per-sample modulation: x is (B, ..., d); gamma/beta are (B, d), broadcast
// over the middle axes.
template <typename S>
Tensor<S> affine_rows(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta) {
    int64_t d = x.size(-1);
    int64_t bsz = x.size(0);
    if (gamma.shape() != Shape{bsz, d} || beta.shape() != Shape{bsz, d})
        fail(ErrorKind::shape, "affine_rows: modulation " + shape_str(gamma.shape()) + " vs x " + shape_str(x.shape()));
    int64_t inner = x.numel() / (bsz * d);
    std::vector<S> out(size_t(x.numel()));
    for (int64_t b = 0; b < bsz; ++b) {
        const S* gm = gamma.data() + b * d;
        const S* bt = beta.data() + b * d;
        for (int64_t r = 0; r < inner; ++r) {
            const S* xv = x.data() + (b * inner + r) * d;
            S* ov = out.data() + (b * inner + r) * d;
            for (int64_t j = 0; j < d; ++j) ov[j] = xv[j] * gm[j] + bt[j];
        }
    }
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return make_op<S>(x.shape(), std::move(out), {xn, gn, bn},
                      [xn, gn, bn, bsz, inner, d](TensorNode<S>& self) {
        if (xn->requires_grad) {
            auto& g = xn->grad_buf();
            for (int64_t b = 0; b < bsz; ++b) {
                const S* gm = gn->data->data() + b * d;
                for (int64_t r = 0; r < inner; ++r)
                    for (int64_t j = 0; j < d; ++j) {
                        size_t i = size_t((b * inner + r) * d + j);
                        g[i] += self.grad[i] * gm[j];
                    }
            }
        }
        if (gn->requires_grad) {
            auto& g = gn->grad_buf();
            const S* xv = xn->data->data();
            for (int64_t b = 0; b < bsz; ++b)
                for (int64_t r = 0; r < inner; ++r)
                    for (int64_t j = 0; j < d; ++j) {
                        size_t i = size_t((b * inner + r) * d + j);
                        g[size_t(b * d + j)] += self.grad[i] * xv[i];
                    }
        }
        if (bn->requires_grad) {
            auto& g = bn->grad_buf();
            for (int64_t b = 0; b < bsz; ++b)
                for (int64_t r = 0; r < inner; ++r)
                    for (int64_t j = 0; j < d; ++j)
                        g[size_t(b * d + j)] += self.grad[size_t((b * inner + r) * d + j)];
        }
    });
}

// y = x * alpha_b per sample; the pre-residual gain.
template <typename S>
Tensor<S> gain_rows(const Tensor<S>& x, const Tensor<S>& alpha) {
    int64_t d = x.size(-1);
    int64_t bsz = x.size(0);
    if (alpha.shape() != Shape{bsz, d})
        fail(ErrorKind::shape, "gain_rows: gain " + shape_str(alpha.shape()) + " vs x " + shape_str(x.shape()));
    int64_t inner = x.numel() / (bsz * d);
    std::vector<S> out(size_t(x.numel()));
    for (int64_t b = 0; b < bsz; ++b) {
        const S* av = alpha.data() + b * d;
        for (int64_t r = 0; r < inner; ++r) {
            const S* xv = x.data() + (b * inner + r) * d;
            S* ov = out.data() + (b * inner + r) * d;
            for (int64_t j = 0; j < d; ++j) ov[j] = xv[j] * av[j];
        }
    }
    auto xn = x.node(), an = alpha.node();
    return make_op<S>(x.shape(), std::move(out), {xn, an},
                      [xn, an, bsz, inner, d](TensorNode<S>& self) {
        if (xn->requires_grad) {
            auto& g = xn->grad_buf();
            for (int64_t b = 0; b < bsz; ++b) {
                const S* av = an->data->data() + b * d;
                for (int64_t r = 0; r < inner; ++r)
                    for (int64_t j = 0; j < d; ++j) {
                        size_t i = size_t((b * inner + r) * d + j);
                        g[i] += self.grad[i] * av[j];
                    }
            }
        }
        if (an->requires_grad) {
            auto& g = an->grad_buf();
            const S* xv = xn->data->data();
            for (int64_t b = 0; b < bsz; ++b)
                for (int64_t r = 0; r < inner; ++r)
                    for (int64_t j = 0; j < d; ++j) {
                        size_t i = size_t((b * inner + r) * d + j);
                        g[size_t(b * d + j)] += self.grad[i] * xv[i];
                    }
        }
    });
}

// y = x * s for a scalar parameter s (the tanh-gate path).
template <typename S>
Tensor<S> scale_by(const Tensor<S>& x, const Tensor<S>& s) {
    if (s.numel() != 1) fail(ErrorKind::shape, "scale_by: gain must be scalar, got " + shape_str(s.shape()));
    S sv = s.data()[0];
    std::vector<S> out(size_t(x.numel()));
    for (int64_t i = 0; i < x.numel(); ++i) out[size_t(i)] = x.data()[i] * sv;
    auto xn = x.node(), sn = s.node();
    return make_op<S>(x.shape(), std::move(out), {xn, sn}, [xn, sn](TensorNode<S>& self) {
        if (xn->requires_grad) {
            auto& g = xn->grad_buf();
            S sv2 = (*sn->data)[0];
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * sv2;
        }
        if (sn->requires_grad) {
            double acc = 0.0;
            const S* xv = xn->data->data();
            for (size_t i = 0; i < self.grad.size(); ++i) acc += double(self.grad[i]) * double(xv[i]);
            sn->grad_buf()[0] += S(acc);
        }
    });
}

// y = x + r with r (L, d) broadcast over the leading batch axis.
template <typename S>
Tensor<S> add_rows(const Tensor<S>& x, const Tensor<S>& r) {
    int64_t inner = r.numel();
    if (x.numel() % inner != 0 || x.rank() < 2)
        fail(ErrorKind::shape, "add_rows: " + shape_str(x.shape()) + " vs " + shape_str(r.shape()));
    int64_t reps = x.numel() / inner;
    std::vector<S> out(size_t(x.numel()));
    for (int64_t b = 0; b < reps; ++b)
        for (int64_t i = 0; i < inner; ++i)
            out[size_t(b * inner + i)] = x.data()[b * inner + i] + r.data()[i];
    auto xn = x.node(), rn = r.node();
    return make_op<S>(x.shape(), std::move(out), {xn, rn}, [xn, rn, reps, inner](TensorNode<S>& self) {
        if (xn->requires_grad) {
            auto& g = xn->grad_buf();
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (rn->requires_grad) {
            auto& g = rn->grad_buf();
            for (int64_t b = 0; b < reps; ++b)
                for (int64_t i = 0; i < inner; ++i) g[size_t(i)] += self.grad[size_t(b * inner + i)];
        }
    });
}

// scores (B, h, Lq, Lk) + bias (B, Lk); the additive attention mask.
template <typename S>
Tensor<S> add_key_bias(const Tensor<S>& scores, const Tensor<S>& bias) {
    if (scores.rank() != 4 || bias.rank() != 2 || scores.size(0) != bias.size(0) ||
        scores.size(3) != bias.size(1))
        fail(ErrorKind::shape, "add_key_bias: " + shape_str(scores.shape()) + " vs " + shape_str(bias.shape()));
    int64_t bsz = scores.size(0), h = scores.size(1), lq = scores.size(2), lk = scores.size(3);
    std::vector<S> out(size_t(scores.numel()));
    for (int64_t b = 0; b < bsz; ++b) {
        const S* bv = bias.data() + b * lk;
        for (int64_t r = 0; r < h * lq; ++r) {
            const S* sv = scores.data() + (b * h * lq + r) * lk;
            S* ov = out.data() + (b * h * lq + r) * lk;
            for (int64_t j = 0; j < lk; ++j) ov[j] = sv[j] + bv[j];
        }
    }
    auto sn = scores.node(), bn = bias.node();
    return make_op<S>(scores.shape(), std::move(out), {sn, bn},
                      [sn, bn, bsz, h, lq, lk](TensorNode<S>& self) {
        if (sn->requires_grad) {
            auto& g = sn->grad_buf();
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->grad_buf();
            for (int64_t b = 0; b < bsz; ++b)
                for (int64_t r = 0; r < h * lq; ++r)
                    for (int64_t j = 0; j < lk; ++j)
                        g[size_t(b * lk + j)] += self.grad[size_t((b * h * lq + r) * lk + j)];
        }
    });
}

// x (B, L, d) zeroed where mask (B, L) is zero.
template <typename S>
Tensor<S> mul_mask_rows(const Tensor<S>& x, const Tensor<S>& mask) {
    if (x.rank() != 3 || mask.rank() != 2 || x.size(0) != mask.size(0) || x.size(1) != mask.size(1))
        fail(ErrorKind::shape, "mul_mask_rows: " + shape_str(x.shape()) + " vs " + shape_str(mask.shape()));
    int64_t rows = mask.numel(), d = x.size(-1);
    std::vector<S> out(size_t(x.numel()));
    for (int64_t r = 0; r < rows; ++r) {
        S m = mask.data()[r];
        for (int64_t j = 0; j < d; ++j) out[size_t(r * d + j)] = x.data()[r * d + j] * m;
    }
    auto xn = x.node(), mn = mask.node();
    return make_op<S>(x.shape(), std::move(out), {xn, mn}, [xn, mn, rows, d](TensorNode<S>& self) {
        if (xn->requires_grad) {
            auto& g = xn->grad_buf();
            for (int64_t r = 0; r < rows; ++r) {
                S m = (*mn->data)[size_t(r)];
                for (int64_t j = 0; j < d; ++j) g[size_t(r * d + j)] += self.grad[size_t(r * d + j)] * m;
            }
        }
        if (mn->requires_grad) {
            auto& g = mn->grad_buf();
            const S* xv = xn->data->data();
            for (int64_t r = 0; r < rows; ++r) {
                double acc = 0.0;
                for (int64_t j = 0; j < d; ++j)
                    acc += double(self.grad[size_t(r * d + j)]) * double(xv[r * d + j]);
                g[size_t(r)] += S(acc);
            }
        }
    });
}

// Per-sample condition replacement: rows of dropped samples become the
// learned null vector, and gradients route there.
template <typename S>
Tensor<S> select_or_null(const Tensor<S>& cond, const std::vector<uint8_t>& keep, const Tensor<S>& null_vec) {
    if (cond.rank() != 3) fail(ErrorKind::shape, "select_or_null: conditions must be (B, L, d)");
    int64_t bsz = cond.size(0), l = cond.size(1), d = cond.size(2);
    if (int64_t(keep.size()) != bsz) fail(ErrorKind::shape, "select_or_null: flag count != batch");
    if (null_vec.numel() != d)
        fail(ErrorKind::shape, "select_or_null: null width " + shape_str(null_vec.shape()) + " vs d " + std::to_string(d));
    std::vector<S> out(size_t(cond.numel()));
    for (int64_t b = 0; b < bsz; ++b) {
        if (keep[size_t(b)]) {
            std::copy(cond.data() + b * l * d, cond.data() + (b + 1) * l * d, out.begin() + b * l * d);
        } else {
            for (int64_t r = 0; r < l; ++r)
                std::copy(null_vec.data(), null_vec.data() + d, out.begin() + (b * l + r) * d);
        }
    }
    auto cn = cond.node(), nn = null_vec.node();
    auto flags = std::make_shared<std::vector<uint8_t>>(keep);
    return make_op<S>(cond.shape(), std::move(out), {cn, nn},
                      [cn, nn, flags, bsz, l, d](TensorNode<S>& self) {
        for (int64_t b = 0; b < bsz; ++b) {
            if ((*flags)[size_t(b)]) {
                if (cn->requires_grad) {
                    auto& g = cn->grad_buf();
                    for (int64_t i = 0; i < l * d; ++i)
                        g[size_t(b * l * d + i)] += self.grad[size_t(b * l * d + i)];
                }
            } else if (nn->requires_grad) {
                auto& g = nn->grad_buf();
                for (int64_t r = 0; r < l; ++r)
                    for (int64_t j = 0; j < d; ++j)
                        g[size_t(j)] += self.grad[size_t((b * l + r) * d + j)];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

// softmax(q k^T / sqrt(d) + mask) v with q (B,h,Lq,d), k/v (B,h,Lk,d) and an
// optional additive key bias (B, Lk).
template <typename S>
Tensor<S> scaled_dot_product_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                                       const Tensor<S>* key_bias = nullptr) {
    if (q.rank() != 4 || k.rank() != 4 || v.rank() != 4)
        fail(ErrorKind::shape, "attention: operands must be rank-4");
    if (q.size(-1) != k.size(-1))
        fail(ErrorKind::shape,
             "attention: query/key depth mismatch: " + shape_str(q.shape()) + " vs " + shape_str(k.shape()));
    if (k.shape() != v.shape())
        fail(ErrorKind::shape,
             "attention: key/value mismatch: " + shape_str(k.shape()) + " vs " + shape_str(v.shape()));
    int64_t dh = q.size(-1);
    Tensor<S> scores = scale(matmul(q, transpose(k, 2, 3)), 1.0 / std::sqrt(double(dh)));
    if (key_bias && key_bias->defined()) scores = add_key_bias(scores, *key_bias);
    return matmul(softmax_lastdim(scores), v);
}

}  // namespace grow
