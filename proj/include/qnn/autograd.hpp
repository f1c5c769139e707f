#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "qnn/tensor.hpp"

namespace qnn {

// Reverse-mode tape. Graphs are built define-by-run: every op computes its
// value eagerly (exactly once) and records a closure that scatters the
// upstream gradient to its parents. backward() walks the tape in reverse
// topological order, visiting each node once.
struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool grad_ready = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;  // reads this->grad, accumulates into parents

    Tensor& ensure_grad() {
        if (!grad_ready) {
            grad = Tensor(value.shape(), 0);
            grad_ready = true;
        }
        return grad;
    }
};

using NodePtr = std::shared_ptr<Node>;

class Var {
public:
    Var() = default;

    explicit Var(Tensor value, bool requires_grad = false) {
        node_ = std::make_shared<Node>();
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }

    static Var make(Tensor value, const char* op, bool requires_grad,
                    std::vector<NodePtr> parents, std::function<void(Node&)> backprop) {
        check_finite(value, op);
        Var v;
        v.node_ = std::make_shared<Node>();
        v.node_->value = std::move(value);
        v.node_->op = op;
        v.node_->requires_grad = requires_grad;
        v.node_->parents = std::move(parents);
        v.node_->backprop = std::move(backprop);
        return v;
    }

    bool valid() const { return node_ != nullptr; }
    const Tensor& value() const { return check(), node_->value; }
    const Tensor& grad() const { return check(), node_->grad; }
    bool requires_grad() const { return check(), node_->requires_grad; }
    NodePtr node() const { return node_; }

    void zero_grad() {
        check();
        node_->grad_ready = false;
        node_->grad = Tensor();
    }

private:
    void check() const {
        if (!node_) throw StateError("Var used before forward pass assigned it a value");
    }
    NodePtr node_;
};

inline bool any_requires_grad(const std::vector<NodePtr>& parents) {
    for (const auto& p : parents)
        if (p->requires_grad) return true;
    return false;
}

// Reverse topological order from the loss; each node exactly once.
inline void backward(const Var& loss) {
    if (!loss.valid()) throw StateError("backward called before forward");
    if (loss.value().size() != 1)
        throw ShapeError("backward needs a scalar loss, got " + shape_str(loss.value().shape()));

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node* p = n->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    // Interior gradients start fresh on every call; leaf grads accumulate.
    for (Node* n : order)
        if (n->backprop) {
            n->grad_ready = false;
            n->grad = Tensor();
        }

    loss.node()->ensure_grad().fill(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop && n->grad_ready) n->backprop(*n);
    }
}

// ---- basic ops ----

inline Var add(const Var& a, const Var& b) {
    auto pa = a.node(), pb = b.node();
    return Var::make(a.value() + b.value(), "add", pa->requires_grad || pb->requires_grad,
                     {pa, pb}, [pa, pb](Node& n) {
                         if (pa->requires_grad) add_inplace(pa->ensure_grad(), n.grad);
                         if (pb->requires_grad) add_inplace(pb->ensure_grad(), n.grad);
                     });
}

inline Var sub(const Var& a, const Var& b) {
    auto pa = a.node(), pb = b.node();
    return Var::make(a.value() - b.value(), "sub", pa->requires_grad || pb->requires_grad,
                     {pa, pb}, [pa, pb](Node& n) {
                         if (pa->requires_grad) add_inplace(pa->ensure_grad(), n.grad);
                         if (pb->requires_grad) axpy(pb->ensure_grad(), real(-1), n.grad);
                     });
}

inline Var mul(const Var& a, const Var& b) {
    auto pa = a.node(), pb = b.node();
    return Var::make(a.value() * b.value(), "mul", pa->requires_grad || pb->requires_grad,
                     {pa, pb}, [pa, pb](Node& n) {
                         if (pa->requires_grad) {
                             Tensor& g = pa->ensure_grad();
                             for (std::size_t i = 0; i < g.size(); ++i)
                                 g[i] += n.grad[i] * pb->value[i];
                         }
                         if (pb->requires_grad) {
                             Tensor& g = pb->ensure_grad();
                             for (std::size_t i = 0; i < g.size(); ++i)
                                 g[i] += n.grad[i] * pa->value[i];
                         }
                     });
}

inline Var scale(const Var& a, real s) {
    auto pa = a.node();
    return Var::make(a.value() * s, "scale", pa->requires_grad, {pa}, [pa, s](Node& n) {
        if (pa->requires_grad) axpy(pa->ensure_grad(), s, n.grad);
    });
}

inline Var matmul(const Var& a, const Var& b) {
    auto pa = a.node(), pb = b.node();
    return Var::make(matmul(a.value(), b.value()), "matmul",
                     pa->requires_grad || pb->requires_grad, {pa, pb}, [pa, pb](Node& n) {
                         if (pa->requires_grad)
                             add_inplace(pa->ensure_grad(), matmul(n.grad, transpose(pb->value)));
                         if (pb->requires_grad)
                             add_inplace(pb->ensure_grad(), matmul(transpose(pa->value), n.grad));
                     });
}

inline Var relu(const Var& a) {
    auto pa = a.node();
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i], real(0));
    return Var::make(std::move(out), "relu", pa->requires_grad, {pa}, [pa](Node& n) {
        if (!pa->requires_grad) return;
        Tensor& g = pa->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (pa->value[i] > 0) g[i] += n.grad[i];
    });
}

inline Var sum(const Var& a) {
    auto pa = a.node();
    return Var::make(Tensor::scalar(sum(a.value())), "sum", pa->requires_grad, {pa},
                     [pa](Node& n) {
                         if (!pa->requires_grad) return;
                         Tensor& g = pa->ensure_grad();
                         const real u = n.grad[0];
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += u;
                     });
}

inline Var reshape(const Var& a, Shape s) {
    auto pa = a.node();
    return Var::make(a.value().reshaped(s), "reshape", pa->requires_grad, {pa}, [pa](Node& n) {
        if (pa->requires_grad) add_inplace(pa->ensure_grad(), n.grad.reshaped(pa->value.shape()));
    });
}

// sum(weights * a): handy for turning any op output into a scalar probe
inline Var weighted_sum(const Var& a, const Tensor& weights) {
    auto pa = a.node();
    check_same_shape(a.value(), weights, "weighted_sum");
    real acc = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) acc += weights[i] * a.value()[i];
    return Var::make(Tensor::scalar(acc), "weighted_sum", pa->requires_grad, {pa},
                     [pa, weights](Node& n) {
                         if (!pa->requires_grad) return;
                         Tensor& g = pa->ensure_grad();
                         const real u = n.grad[0];
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += u * weights[i];
                     });
}

}  // namespace qnn
