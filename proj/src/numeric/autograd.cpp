#include "tdm/numeric/autograd.hpp"

#include <stdexcept>
#include <unordered_set>

namespace tdm {
namespace {

thread_local bool g_grad_enabled = true;

std::vector<Node*> topological_order(Node* root) {
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;  // inputs before consumers
}

}  // namespace

Tensor& Node::grad_buffer() {
    if (!has_grad()) grad = Tensor::zeros(value.shape());
    return grad;
}

void Node::accumulate(const Tensor& g) {
    if (g.shape() != value.shape()) {
        throw ShapeError("gradient " + shape_str(g.shape()) + " does not match value " + shape_str(value.shape()) +
                         " in op " + op);
    }
    accumulate(g.array());
}

void Node::accumulate(const Tensor::Array& g) {
    if (!has_grad()) {
        grad = Tensor(value.shape(), g);
    } else {
        grad.array() += g;
    }
}

void Node::accumulate(Tensor::Array&& g) {
    if (!has_grad()) {
        grad = Tensor(value.shape(), std::move(g));
    } else {
        grad.array() += g;
    }
}

Tensor Var::grad() const {
    if (node_->has_grad()) return node_->grad;
    return Tensor::zeros(node_->value.shape());
}

Var constant(Tensor value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->op = "constant";
    return Var(std::move(node));
}

Var parameter(Tensor value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->op = "parameter";
    node->requires_grad = true;
    return Var(std::move(node));
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var make_op(std::string op, Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->op = std::move(op);
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    if (needs) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (auto& in : inputs) node->inputs.push_back(in.node());
        node->backward_fn = std::move(backward_fn);
    }
    return Var(std::move(node));
}

void backward(const Var& root) {
    if (!root.defined()) throw std::invalid_argument("backward on an undefined variable");
    Node* r = root.node().get();
    if (r->value.size() != 1) {
        throw std::invalid_argument("backward requires a scalar root, got shape " + shape_str(r->value.shape()));
    }
    if (r->backward_done) {
        throw std::logic_error("backward already ran for this root; call reset_backward first");
    }
    if (!r->requires_grad) {
        r->backward_done = true;
        return;
    }
    const auto order = topological_order(r);
    r->grad = Tensor::ones(r->value.shape());
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward_fn && node->has_grad()) node->backward_fn(*node);
    }
    r->backward_done = true;
}

void reset_backward(const Var& root) {
    Node* r = root.node().get();
    if (r->requires_grad) {
        for (Node* node : topological_order(r)) {
            if (!node->inputs.empty()) node->grad = Tensor();
        }
    }
    r->grad = Tensor();
    r->backward_done = false;
}

namespace {
thread_local BranchTrace* active_trace = nullptr;
}

BranchTrace::BranchTrace() : previous_(active_trace) { active_trace = this; }
BranchTrace::~BranchTrace() { active_trace = previous_; }

bool tracing_branches() { return active_trace != nullptr; }

void trace_branch(std::uint64_t decision) {
    if (!active_trace) return;
    auto& h = active_trace->digest_;
    h ^= decision + 0x9E3779B97F4A7C15ull + (h << 6) + (h >> 2);
}

}  // namespace tdm
