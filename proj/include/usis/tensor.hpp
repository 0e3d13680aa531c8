// tensor.hpp
//
// Dense double-precision tensor with tape-based reverse-mode autodiff.
// A Tensor is a cheap handle to a shared node; ops in ops.hpp record their
// backward closures when any input requires a gradient and grad mode is on.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace usis {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    std::vector<double>& ensure_grad();
};

} // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from_vector(Shape shape, std::vector<double> values);
    static Tensor scalar(double value);
    /// Leaf that accumulates gradients.
    static Tensor parameter(Shape shape, std::vector<double> values);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    int rank() const { return static_cast<int>(shape().size()); }
    /// Negative axes count from the end.
    std::int64_t dim(int axis) const;
    std::int64_t numel() const;

    std::span<const double> values() const;
    std::span<double> mutable_values();
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    bool requires_grad() const;
    void set_requires_grad(bool flag);

    double item() const;
    double at(std::int64_t flat_index) const { return values()[static_cast<std::size_t>(flat_index)]; }

    /// Backpropagates from a single-element tensor. Intermediate nodes release
    /// their tape afterwards; leaf gradients accumulate.
    void backward() const;

    /// Same values, no history.
    Tensor detach() const;

    const std::shared_ptr<detail::Node>& node() const { return node_; }

    /// Builds an op result; records `backward` only when grad mode is on and
    /// some input requires a gradient.
    static Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                              std::function<void(detail::Node&)> backward);

private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

    std::shared_ptr<detail::Node> node_;
};

bool grad_enabled();

/// Disables tape recording for the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

} // namespace usis
