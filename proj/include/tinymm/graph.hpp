#pragma once

#include <deque>
#include <functional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tinymm/tensor.hpp"

namespace tinymm {

class Graph;

// Handle into a Graph's tape. Cheap to copy; valid for the graph's lifetime.
class Var {
public:
    Var() = default;
    Var(Graph* g, int idx) : g_(g), idx_(idx) {}

    Graph* graph() const { return g_; }
    int idx() const { return idx_; }
    bool valid() const { return g_ != nullptr; }

    const Tensor& value() const;
    const Tensor& grad() const;

private:
    Graph* g_ = nullptr;
    int idx_ = -1;
};

// Per-sample reverse-mode tape. Nodes are appended in evaluation order, so
// creation order is already a topological order and backward is a single
// reverse sweep. One graph is built, differentiated and discarded per sample;
// Parameters are only read during forward/backward, so independent graphs can
// run on separate threads. add_param_grads() is the serialized fold step.
class Graph {
public:
    struct Node {
        Tensor value;
        Tensor grad; // allocated lazily the first time something flows in
        bool needs_grad = false;
        Parameter* param = nullptr;
        std::function<void(Graph&, Node&)> backprop;
    };

    Var constant(Tensor t) {
        nodes_.push_back(Node{std::move(t), Tensor(), false, nullptr, nullptr});
        return Var(this, static_cast<int>(nodes_.size()) - 1);
    }

    // Binds a Parameter as a leaf. The same Parameter always maps to the same
    // node within one graph, so tied weights accumulate into one adjoint.
    Var leaf(Parameter& p) {
        auto it = param_index_.find(&p);
        if (it != param_index_.end()) return Var(this, it->second);
        nodes_.push_back(Node{p.value, Tensor(), p.trainable, &p, nullptr});
        int idx = static_cast<int>(nodes_.size()) - 1;
        param_index_.emplace(&p, idx);
        param_leaves_.push_back(idx);
        return Var(this, idx);
    }

    Var make_op(std::vector<int> parents, Tensor value,
                std::function<void(Graph&, Node&)> backprop) {
        bool needs = false;
        for (int p : parents) needs = needs || nodes_[static_cast<size_t>(p)].needs_grad;
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs;
        if (needs) n.backprop = std::move(backprop);
        nodes_.push_back(std::move(n));
        return Var(this, static_cast<int>(nodes_.size()) - 1);
    }

    Node& node(int idx) { return nodes_[static_cast<size_t>(idx)]; }
    const Node& node(int idx) const { return nodes_[static_cast<size_t>(idx)]; }
    size_t size() const { return nodes_.size(); }

    bool wants_grad(int idx) const { return nodes_[static_cast<size_t>(idx)].needs_grad; }

    // Gradient accumulator for a node; allocates zeros on first touch.
    Tensor& grad_acc(int idx) {
        Node& n = nodes_[static_cast<size_t>(idx)];
        if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape());
        return n.grad;
    }

    void backward(Var loss) {
        if (loss.graph() != this) throw ContractError("backward: loss from another graph");
        Node& top = node(loss.idx());
        if (top.value.numel() != 1) {
            throw ContractError("backward requires a scalar loss, got shape " +
                                shape_str(top.value.shape()));
        }
        top.grad = Tensor::full(top.value.shape(), 1.0);
        for (int i = loss.idx(); i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (!n.needs_grad || n.grad.empty() || !n.backprop) continue;
            n.backprop(*this, n);
        }
        // Contract: every trainable Parameter in the graph ends up with
        // gradient storage, even if the loss did not touch it.
        for (int idx : param_leaves_) {
            Node& n = nodes_[static_cast<size_t>(idx)];
            if (n.needs_grad && n.grad.empty()) n.grad = Tensor::zeros(n.value.shape());
        }
    }

    // Folds leaf adjoints into their Parameters, in leaf creation order.
    // Callers serialize this step (per-sample graphs, sample-index order).
    void add_param_grads() {
        for (int idx : param_leaves_) {
            Node& n = nodes_[static_cast<size_t>(idx)];
            if (!n.param || !n.param->trainable) continue;
            n.param->ensure_grad();
            if (!n.grad.empty()) n.param->grad += n.grad;
        }
    }

private:
    std::deque<Node> nodes_;
    std::unordered_map<const Parameter*, int> param_index_;
    std::vector<int> param_leaves_;
};

inline const Tensor& Var::value() const { return g_->node(idx_).value; }
inline const Tensor& Var::grad() const { return g_->node(idx_).grad; }

} // namespace tinymm
