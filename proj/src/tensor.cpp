#include "usis/tensor.hpp"

#include <algorithm>
#include <unordered_set>

#include "usis/error.hpp"

namespace usis {

namespace {
thread_local bool g_grad_enabled = true;
} // namespace

std::int64_t shape_numel(const Shape& shape)
{
    std::int64_t n = 1;
    for (auto d : shape) {
        if (d < 0) {
            throw ShapeError("negative dimension in " + shape_str(shape));
        }
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape)
{
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        s += std::to_string(shape[i]);
        if (i + 1 < shape.size()) {
            s += ", ";
        }
    }
    return s + ")";
}

std::vector<double>& detail::Node::ensure_grad()
{
    if (grad.size() != value.size()) {
        grad.assign(value.size(), 0.0);
    }
    return grad;
}

Tensor Tensor::zeros(Shape shape)
{
    return full(std::move(shape), 0.0);
}

Tensor Tensor::full(Shape shape, double value)
{
    const auto n = shape_numel(shape);
    return from_vector(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value));
}

Tensor Tensor::from_vector(Shape shape, std::vector<double> values)
{
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
        throw ShapeError("Tensor: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value)
{
    return from_vector({}, {value});
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values)
{
    auto t = from_vector(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
}

const Shape& Tensor::shape() const
{
    return node_->shape;
}

std::int64_t Tensor::dim(int axis) const
{
    const int r = rank();
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
    }
    return node_->shape[static_cast<std::size_t>(a)];
}

std::int64_t Tensor::numel() const
{
    return static_cast<std::int64_t>(node_->value.size());
}

std::span<const double> Tensor::values() const
{
    return node_->value;
}

std::span<double> Tensor::mutable_values()
{
    return node_->value;
}

std::span<const double> Tensor::grad() const
{
    return node_->grad;
}

std::span<double> Tensor::mutable_grad()
{
    return node_->ensure_grad();
}

void Tensor::zero_grad()
{
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

bool Tensor::requires_grad() const
{
    return node_ && node_->requires_grad;
}

void Tensor::set_requires_grad(bool flag)
{
    node_->requires_grad = flag;
}

double Tensor::item() const
{
    if (numel() != 1) {
        throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->value[0];
}

void Tensor::backward() const
{
    if (numel() != 1) {
        throw ShapeError("backward() needs a single-element tensor, got " + shape_str(shape()));
    }
    if (!node_->requires_grad) {
        return;
    }
    // Iterative post-order DFS gives a topological order.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            detail::Node* child = node->inputs[next++].get();
            if (child != nullptr && child->requires_grad && visited.insert(child).second) {
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    node_->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* node = *it;
        if (node->backward && !node->grad.empty()) {
            node->backward(*node);
        }
    }
    // Release the tape of interior nodes; leaves keep their gradients.
    for (detail::Node* node : order) {
        if (node->backward) {
            node->backward = nullptr;
            node->inputs.clear();
            node->grad.clear();
            node->grad.shrink_to_fit();
        }
    }
}

Tensor Tensor::detach() const
{
    return from_vector(shape(), node_->value);
}

Tensor Tensor::make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                           std::function<void(detail::Node&)> backward)
{
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    if (static_cast<std::int64_t>(node->value.size()) != shape_numel(node->shape)) {
        throw ShapeError("op produced " + std::to_string(node->value.size()) + " values for shape " +
                         shape_str(node->shape));
    }
    const bool any = g_grad_enabled && std::any_of(inputs.begin(), inputs.end(),
                                                   [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (auto& t : inputs) {
            node->inputs.push_back(t.node_);
        }
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

bool grad_enabled()
{
    return g_grad_enabled;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled)
{
    g_grad_enabled = false;
}

NoGradGuard::~NoGradGuard()
{
    g_grad_enabled = previous_;
}

} // namespace usis
