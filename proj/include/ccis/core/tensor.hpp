#pragma once

#include <algorithm>
#include <atomic>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "ccis/core/array.hpp"

namespace ccis {

namespace detail {
inline std::atomic<uint64_t>& tensor_id_counter() {
    static std::atomic<uint64_t> c{0};
    return c;
}
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

// Disables graph recording in the current thread for its lifetime. Used by the
// sampler and evaluation paths so long loops do not retain activation graphs.
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev; }
};

inline bool grad_enabled() { return detail::grad_mode(); }

// Reverse-mode autodiff handle. A Tensor owns a node in a dynamically built
// tape; ops create fresh nodes whose backward closures scatter into parents.
// Nodes are ordered by creation id, so backward is a reverse sweep over the
// reachable subgraph.
template <class S>
class Tensor {
  public:
    struct Node {
        Array<S> value;
        Array<S> grad;  // allocated on first accumulation
        bool needs = false;
        bool leaf = false;
        uint64_t id = 0;
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backward;  // reads this->grad, writes parents' grads
    };

    Tensor() = default;

    static Tensor leaf(Array<S> value, bool trainable) {
        Tensor t;
        t.n_ = std::make_shared<Node>();
        t.n_->value = std::move(value);
        t.n_->needs = trainable;
        t.n_->leaf = true;
        t.n_->id = detail::tensor_id_counter()++;
        return t;
    }

    static Tensor constant(Array<S> value) { return leaf(std::move(value), false); }

    static Tensor op(Array<S> value, std::vector<Tensor> parents, std::function<void(Node&)> backward) {
        Tensor t;
        t.n_ = std::make_shared<Node>();
        t.n_->value = std::move(value);
        t.n_->id = detail::tensor_id_counter()++;
        if (grad_enabled()) {
            bool needs = false;
            for (auto& p : parents) needs = needs || (p.n_ && p.n_->needs);
            if (needs) {
                t.n_->needs = true;
                t.n_->parents.reserve(parents.size());
                for (auto& p : parents) t.n_->parents.push_back(p.n_);
                t.n_->backward = std::move(backward);
            }
        }
        return t;
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Array<S>& val() const { return n_->value; }
    Array<S>& val() { return n_->value; }
    const Shape& shape() const { return n_->value.shape; }
    int64_t numel() const { return n_->value.numel(); }
    bool needs_grad() const { return n_ && n_->needs; }
    uint64_t id() const { return n_->id; }
    Node* node() const { return n_.get(); }

    // Gradient buffer, zero-initialized on first use.
    Array<S>& grad() {
        if (n_->grad.empty()) n_->grad = Array<S>::zeros(n_->value.shape);
        return n_->grad;
    }
    const Array<S>& grad_value() const { return n_->grad; }
    bool has_grad() const { return !n_->grad.empty(); }
    void zero_grad() {
        if (!n_->grad.empty()) std::fill(n_->grad.v.begin(), n_->grad.v.end(), S(0));
    }

    Tensor detach() const { return constant(n_->value); }

    // Leaves only: toggles participation in gradient computation.
    void set_trainable(bool t) { n_->needs = t; }

    // Backpropagate from this (scalar) tensor: seed grad 1, then run backward
    // closures in reverse creation order over the reachable needs-grad set.
    void backward() {
        if (numel() != 1) throw ShapeError("backward() requires a scalar output");
        if (!n_->needs) return;
        grad().v[0] = S(1);

        std::vector<Node*> order;
        std::unordered_set<Node*> seen;
        std::vector<Node*> stack{n_.get()};
        seen.insert(n_.get());
        while (!stack.empty()) {
            Node* cur = stack.back();
            stack.pop_back();
            order.push_back(cur);
            for (auto& p : cur->parents) {
                if (p->needs && !seen.count(p.get())) {
                    seen.insert(p.get());
                    stack.push_back(p.get());
                }
            }
        }
        std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->id > b->id; });
        for (Node* node : order) {
            if (node->backward && !node->grad.empty()) node->backward(*node);
        }
    }

  private:
    std::shared_ptr<Node> n_;
};

// Accumulation helper used inside backward closures.
template <class S>
Array<S>& grad_buf(std::shared_ptr<typename Tensor<S>::Node>& n) {
    if (n->grad.empty()) n->grad = Array<S>::zeros(n->value.shape);
    return n->grad;
}

}  // namespace ccis
