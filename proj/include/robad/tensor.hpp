#pragma once

// Dense float64 tensor with an eagerly recorded reverse-mode graph.
//
// A Tensor is a cheap handle onto a shared node. Operations in ops.hpp
// create new nodes and, when any input requires a gradient and recording is
// enabled, link the output to its inputs together with a closure computing
// the vector-Jacobian product. backward() orders the reachable nodes
// topologically, runs every closure exactly once and then drops the graph so
// intermediate buffers are released.

#include "errors.hpp"

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace robad {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape &shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i)
            os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape &shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad; // empty until first accumulation
    bool requires_grad = false;
    bool leaf = true;
    const char *op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node &)> backward_fn;

    std::vector<double> &grad_buffer() {
        if (grad.empty())
            grad.assign(data.size(), 0.0);
        return grad;
    }
};

inline bool &grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

} // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
  public:
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard &) = delete;
    NoGradGuard &operator=(const NoGradGuard &) = delete;

  private:
    bool prev_;
};

class Tensor {
  public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        if (shape.empty())
            throw DimensionError("tensor shape must have at least one dimension");
        for (auto d : shape)
            if (d == 0)
                throw DimensionError("tensor dimension of size 0 in " + shape_str(shape));
        if (shape_numel(shape) != data.size())
            throw DimensionError("shape " + shape_str(shape) + " does not match " +
                                 std::to_string(data.size()) + " values");
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }
    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
    }
    static Tensor vector(std::vector<double> values, bool requires_grad = false) {
        Shape s{values.size()};
        return Tensor(std::move(s), std::move(values), requires_grad);
    }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                         bool requires_grad = false) {
        return Tensor({rows, cols}, std::move(values), requires_grad);
    }
    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor({1}, {v}, requires_grad);
    }

    bool defined() const noexcept { return static_cast<bool>(node_); }

    const Shape &shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }
    std::size_t rows() const { return rank() == 1 ? 1 : node_->shape[0]; }
    std::size_t cols() const { return node_->shape.back(); }

    std::span<const double> data() const { return node_->data; }
    /// Direct write access; only valid on leaves (parameters, inputs).
    std::span<double> mutable_data() { return node_->data; }
    double item() const {
        if (numel() != 1)
            throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }
    double at(std::size_t i) const { return node_->data.at(i); }
    double at(std::size_t r, std::size_t c) const { return node_->data.at(r * cols() + c); }

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    /// Gradient buffer; zeros when nothing has been accumulated yet.
    std::span<const double> grad() const { return node_->grad_buffer(); }
    void zero_grad() { node_->grad.clear(); }

    /// Deep copy of the values as a fresh leaf.
    Tensor clone(bool requires_grad) const {
        return Tensor(shape(), node_->data, requires_grad);
    }
    Tensor detach() const { return clone(false); }

    detail::Node *node() const { return node_.get(); }
    const std::shared_ptr<detail::Node> &node_ptr() const { return node_; }

    /// Wraps a freshly computed result; used by the op implementations.
    static Tensor from_node(std::shared_ptr<detail::Node> n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

  private:
    std::shared_ptr<detail::Node> node_;
};

namespace detail {

/// Creates an op output and records its inputs when any of them is tracked.
inline Tensor make_result(const char *op, Shape shape, std::vector<double> data,
                          std::initializer_list<Tensor> inputs,
                          std::function<void(Node &)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->op = op;
    n->leaf = false;
    if (grad_enabled()) {
        bool any = false;
        for (const auto &t : inputs)
            any = any || t.requires_grad();
        if (any) {
            n->requires_grad = true;
            for (const auto &t : inputs)
                n->parents.push_back(t.node_ptr());
            n->backward_fn = std::move(backward_fn);
        }
    }
    return Tensor::from_node(std::move(n));
}

/// Reachable tracked nodes, each listed after every node it consumes.
inline std::vector<Node *> topological_order(Node *root) {
    std::vector<Node *> order;
    std::unordered_set<Node *> seen;
    std::vector<std::pair<Node *, std::size_t>> stack{{root, 0}};
    seen.insert(root);
    while (!stack.empty()) {
        auto &[node, next] = stack.back();
        if (next < node->parents.size()) {
            Node *p = node->parents[next++].get();
            if (p->requires_grad && !seen.contains(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

} // namespace detail

/// Accumulates dloss/dtheta into every tracked leaf reachable from `loss`,
/// then releases the recorded graph.
inline void backward(const Tensor &loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ContractError("backward() needs a scalar loss, got shape " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    if (!loss.requires_grad())
        throw ContractError("backward() on a loss that does not depend on any tracked tensor");
    auto *root = loss.node();
    auto order = detail::topological_order(root);
    root->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        auto *n = *it;
        n->grad_buffer();
        if (n->backward_fn)
            n->backward_fn(*n);
    }
    for (auto *n : order) {
        if (!n->leaf) {
            n->parents.clear();
            n->backward_fn = nullptr;
            if (n != root)
                n->grad.clear();
        }
    }
}

} // namespace robad
