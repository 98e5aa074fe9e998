#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace capsdemm {

// When enabled, every op verifies its output for NaN/Inf and throws.
// Off by default; meant for debugging diverging training runs and tests.
inline bool& debug_checks() {
    static bool enabled = false;
    return enabled;
}

namespace detail {

inline std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

}  // namespace detail

template <class T>
struct TensorNode {
    std::vector<int> shape;
    std::vector<T> value;
    std::vector<T> grad;  // same length as value when requires_grad
    bool requires_grad = false;
};

// Shared-ownership handle to a dense row-major array. Copies alias the same
// storage; ops return fresh tensors.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() : node_(std::make_shared<TensorNode<T>>()) {}

    explicit Tensor(std::vector<int> shape, T fill = T(0))
        : node_(std::make_shared<TensorNode<T>>()) {
        node_->shape = std::move(shape);
        node_->value.assign(detail::shape_numel(node_->shape), fill);
    }

    Tensor(std::vector<int> shape, std::vector<T> values)
        : node_(std::make_shared<TensorNode<T>>()) {
        node_->shape = std::move(shape);
        if (detail::shape_numel(node_->shape) != values.size())
            throw std::invalid_argument("tensor data length does not match shape");
        node_->value = std::move(values);
    }

    static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

    const std::vector<int>& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    std::size_t numel() const { return node_->value.size(); }

    std::vector<T>& values() { return node_->value; }
    const std::vector<T>& values() const { return node_->value; }

    T item() const {
        if (numel() != 1) throw std::invalid_argument("item() requires a one-element tensor");
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }

    void set_requires_grad(bool on) {
        node_->requires_grad = on;
        if (on)
            node_->grad.assign(node_->value.size(), T(0));
        else
            node_->grad.clear();
    }

    std::vector<T>& grad() {
        if (!node_->requires_grad) throw std::logic_error("tensor has no gradient storage");
        return node_->grad;
    }
    const std::vector<T>& grad() const {
        if (!node_->requires_grad) throw std::logic_error("tensor has no gradient storage");
        return node_->grad;
    }

    void zero_grad() {
        if (node_->requires_grad) node_->grad.assign(node_->value.size(), T(0));
    }

    // Deep copy of values (gradient state is not cloned).
    Tensor clone() const {
        Tensor out(node_->shape, node_->value);
        return out;
    }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

private:
    std::shared_ptr<TensorNode<T>> node_;
};

template <class T>
inline void check_finite(const Tensor<T>& t, const char* op_name) {
    if (!debug_checks()) return;
    for (T v : t.values())
        if (!std::isfinite(static_cast<double>(v)))
            throw std::runtime_error(std::string("non-finite value produced by ") + op_name);
}

// Records backward rules in execution order. The most recently constructed
// tape is the active one; ops append to it whenever an input tracks
// gradients. Destruction restores the previously active tape (LIFO).
template <class T>
class Tape {
public:
    Tape() : prev_(active_ptr()) { active_ptr() = this; }
    ~Tape() { active_ptr() = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_ptr(); }

    void record(std::function<void()> backward_rule) {
        ops_.push_back(std::move(backward_rule));
    }

    std::size_t size() const { return ops_.size(); }

    // Seeds d(loss)/d(loss) = 1 and replays every recorded rule once, in
    // reverse execution order, accumulating into parameter gradients.
    void backward(Tensor<T>& loss) {
        if (loss.numel() != 1)
            throw std::invalid_argument("backward requires a scalar loss");
        if (!loss.requires_grad())
            throw std::invalid_argument("loss does not depend on any tracked tensor");
        loss.grad()[0] = T(1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }

private:
    static Tape*& active_ptr() {
        thread_local Tape* active = nullptr;
        return active;
    }

    std::vector<std::function<void()>> ops_;
    Tape* prev_ = nullptr;
};

namespace detail {

// True when a tape is active and at least one input is tracked; the op then
// marks its output and records a backward rule.
template <class T>
inline bool track(std::initializer_list<const Tensor<T>*> inputs) {
    if (!Tape<T>::active()) return false;
    for (const Tensor<T>* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

}  // namespace detail

}  // namespace capsdemm
