#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "grow/error.hpp"
#include "grow/rng.hpp"

namespace grow {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

namespace autograd {

inline thread_local bool grad_enabled = true;

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_enabled) { grad_enabled = false; }
    ~NoGradGuard() { grad_enabled = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline uint64_t next_order() {
    static std::atomic<uint64_t> counter{1};
    return counter.fetch_add(1);
}

}  // namespace autograd

// One tape node per produced tensor. Creation order doubles as the tape
// order: parents are always created before children, so walking reachable
// nodes by descending `order` visits the tape in reverse topological order
// exactly once.
template <typename S>
struct TensorNode {
    Shape shape;
    std::shared_ptr<std::vector<S>> data;
    std::vector<S> grad;  // empty until touched by backward
    bool requires_grad = false;
    uint64_t order = 0;
    std::vector<std::shared_ptr<TensorNode<S>>> parents;
    std::function<void(TensorNode<S>&)> backward_fn;  // pulls this->grad into parents

    int64_t numel() const { return shape_numel(shape); }

    std::vector<S>& grad_buf() {
        if (grad.empty()) grad.assign(size_t(numel()), S(0));
        return grad;
    }
};

// Dense row-major tensor with shared storage. Copies are shallow (shared
// values); clone() deep-copies. Reshape shares the buffer, so it is
// metadata-only; transposes materialize.
template <typename S>
class Tensor {
public:
    using Node = TensorNode<S>;

    Tensor() = default;

    static Tensor zeros(Shape shape) {
        return Tensor(std::move(shape), {});
    }

    static Tensor full(Shape shape, S v) {
        Tensor t(std::move(shape), {});
        for (S& x : *t.node_->data) x = v;
        return t;
    }

    static Tensor from(Shape shape, std::vector<S> values) {
        Tensor t(std::move(shape), std::move(values));
        return t;
    }

    static Tensor scalar(S v) { return from({1}, {v}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t numel() const { return node_->numel(); }
    int rank() const { return int(node_->shape.size()); }

    int64_t size(int axis) const {
        int r = rank();
        if (axis < 0) axis += r;
        if (axis < 0 || axis >= r) fail(ErrorKind::shape, "axis out of range for " + shape_str(shape()));
        return node_->shape[size_t(axis)];
    }

    S* data() { return node_->data->data(); }
    const S* data() const { return node_->data->data(); }
    std::vector<S>& values() { return *node_->data; }
    const std::vector<S>& values() const { return *node_->data; }

    S item() const {
        if (numel() != 1) fail(ErrorKind::shape, "item() on non-scalar tensor " + shape_str(shape()));
        return (*node_->data)[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        node_->requires_grad = v;
        return *this;
    }

    const std::vector<S>& grad() const { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    // Same storage, fresh untracked node.
    Tensor detach() const {
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = node_->shape;
        t.node_->data = node_->data;
        t.node_->order = autograd::next_order();
        return t;
    }

    Tensor clone() const {
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = node_->shape;
        t.node_->data = std::make_shared<std::vector<S>>(*node_->data);
        t.node_->requires_grad = node_->requires_grad;
        t.node_->order = autograd::next_order();
        return t;
    }

    std::shared_ptr<Node> node() const { return node_; }

    static Tensor wrap(std::shared_ptr<Node> n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

private:
    Tensor(Shape shape, std::vector<S> values) {
        if (shape.empty()) fail(ErrorKind::shape, "rank-0 unsupported");
        for (int64_t e : shape)
            if (e < 1) fail(ErrorKind::shape, "non-positive extent in " + shape_str(shape));
        int64_t n = shape_numel(shape);
        if (!values.empty() && int64_t(values.size()) != n)
            fail(ErrorKind::shape, "value count does not match " + shape_str(shape));
        if (values.empty()) values.assign(size_t(n), S(0));
        node_ = std::make_shared<Node>();
        node_->shape = std::move(shape);
        node_->data = std::make_shared<std::vector<S>>(std::move(values));
        node_->order = autograd::next_order();
    }

    std::shared_ptr<Node> node_;
};

// Core of op construction: result is tracked only when grad mode is on and
// some parent participates in a gradient path.
template <typename S>
Tensor<S> make_op(Shape shape, std::vector<S> values,
                  std::vector<std::shared_ptr<TensorNode<S>>> parents,
                  std::function<void(TensorNode<S>&)> backward_fn) {
    Tensor<S> out = Tensor<S>::from(std::move(shape), std::move(values));
    bool track = autograd::grad_enabled;
    if (track) {
        bool any = false;
        for (const auto& p : parents)
            if (p && p->requires_grad) any = true;
        track = any;
    }
    if (track) {
        out.node()->requires_grad = true;
        out.node()->parents = std::move(parents);
        out.node()->backward_fn = std::move(backward_fn);
    }
    return out;
}

// Reverse pass from a scalar loss. Interior grads are reset per call;
// leaf grads (parameters) accumulate across calls until zero_grad.
template <typename S>
void backward(const Tensor<S>& loss) {
    if (loss.numel() != 1) fail(ErrorKind::shape, "backward requires a scalar loss, got " + shape_str(loss.shape()));
    if (!loss.requires_grad())
        fail(ErrorKind::state, "backward: loss is not connected to any tracked tensor");

    // Collect reachable nodes iteratively.
    std::vector<TensorNode<S>*> nodes;
    std::unordered_set<TensorNode<S>*> seen;
    std::vector<TensorNode<S>*> stack{loss.node().get()};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        TensorNode<S>* n = stack.back();
        stack.pop_back();
        nodes.push_back(n);
        for (const auto& p : n->parents) {
            if (p && p->requires_grad && !seen.count(p.get())) {
                seen.insert(p.get());
                stack.push_back(p.get());
            }
        }
    }
    std::sort(nodes.begin(), nodes.end(),
              [](const TensorNode<S>* a, const TensorNode<S>* b) { return a->order > b->order; });

    for (TensorNode<S>* n : nodes)
        if (n->backward_fn) n->grad.assign(size_t(n->numel()), S(0));

    loss.node()->grad_buf()[0] += S(1);
    for (TensorNode<S>* n : nodes)
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
}

// Gaussian-filled tensor from the deterministic generator.
template <typename S>
Tensor<S> tensor_randn(Shape shape, Rng& rng, double stddev = 1.0) {
    if (shape.empty()) fail(ErrorKind::shape, "rank-0 unsupported");
    if (stddev < 0) fail(ErrorKind::shape, "tensor_randn: negative stddev");
    Tensor<S> t = Tensor<S>::zeros(std::move(shape));
    for (S& x : t.values()) x = S(rng.normal() * stddev);
    return t;
}

template <typename S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        fail(ErrorKind::shape, "max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    double m = 0.0;
    const S* pa = a.data();
    const S* pb = b.data();
    for (int64_t i = 0; i < a.numel(); ++i) {
        double d = std::abs(double(pa[i]) - double(pb[i]));
        if (d > m) m = d;
    }
    return m;
}

// Bit-pattern equality; catches negative-zero substitutions that compare
// equal numerically.
template <typename S>
bool bits_equal(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.data(), b.data(), size_t(a.numel()) * sizeof(S)) == 0;
}

template <typename S>
bool all_finite(const Tensor<S>& t) {
    for (int64_t i = 0; i < t.numel(); ++i)
        if (!std::isfinite(double(t.data()[i]))) return false;
    return true;
}

}  // namespace grow
