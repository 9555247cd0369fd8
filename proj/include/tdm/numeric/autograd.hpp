#pragma once

#include "tdm/numeric/tensor.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace tdm {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of the reverse-mode graph. Leaves hold parameters or constants;
/// interior nodes own a closure that pushes `grad` into their inputs.
struct Node {
    Tensor value;
    Tensor grad;  // empty until something accumulates into it
    std::vector<NodePtr> inputs;
    std::function<void(Node&)> backward_fn;
    std::string op = "leaf";
    bool requires_grad = false;
    bool backward_done = false;

    bool has_grad() const { return grad.size() != 0; }
    Tensor& grad_buffer();
    void accumulate(const Tensor& g);
    void accumulate(const Tensor::Array& g);
    void accumulate(Tensor::Array&& g);
};

/// Handle to a graph node. Copies share the node.
class Var {
public:
    Var() = default;
    explicit Var(NodePtr node) : node_(std::move(node)) {}

    const Tensor& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    Index dim(Index axis) const { return node_->value.dim(axis); }
    Index rank() const { return node_->value.rank(); }
    Index size() const { return node_->value.size(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool defined() const { return static_cast<bool>(node_); }

    /// Accumulated gradient; zeros of the value's shape when nothing has flowed in.
    Tensor grad() const;
    void zero_grad() const { node_->grad = Tensor(); }

    /// Overwrite a leaf's value in place (optimizer steps, finite differences).
    Tensor& mutable_value() const { return node_->value; }

    const NodePtr& node() const { return node_; }

private:
    NodePtr node_;
};

Var constant(Tensor value);
Var parameter(Tensor value);

/// Whether new ops record backward closures on this thread.
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Build an interior node. When gradients are disabled or no input requires
/// them, the result is a constant and the closure is dropped.
Var make_op(std::string op, Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn);

/// While alive, piecewise ops on this thread (relu, clamp, max pooling, argmin
/// selections) fold each branch decision into a running digest. Two forwards
/// with equal digests took the same linear piece everywhere.
void trace_branch(std::uint64_t decision);

class BranchTrace {
public:
    BranchTrace();
    ~BranchTrace();
    BranchTrace(const BranchTrace&) = delete;
    BranchTrace& operator=(const BranchTrace&) = delete;

    std::uint64_t digest() const { return digest_; }
    void reset() { digest_ = 0; }

private:
    friend void trace_branch(std::uint64_t decision);
    std::uint64_t digest_ = 0;
    BranchTrace* previous_;
};

bool tracing_branches();
void trace_branch(std::uint64_t decision);

/// Reverse-mode sweep from a scalar root. Fails on a non-scalar root and on a
/// second call for the same root unless reset_backward() ran in between.
void backward(const Var& root);

/// Clears every interior gradient reachable from root and re-arms backward().
/// Leaf gradients are left alone; use Var::zero_grad for those.
void reset_backward(const Var& root);

}  // namespace tdm
