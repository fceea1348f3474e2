// Dense tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a shared handle to a row-major buffer. Operations that see an
// input with requires_grad() (while grad mode is on) attach a GradFn to their
// result; backward() orders the reachable graph topologically and replays the
// recorded backward closures in reverse.

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace atlas_istn {

class shape_error : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class numeric_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// Gradient recording is on by default; NoGradGuard disables it for the
// current thread (inference, atlas updates, frozen sub-networks).
inline bool& grad_mode_enabled() {
    thread_local bool enabled = true;
    return enabled;
}

class NoGradGuard {
public:
    NoGradGuard() : prev_(grad_mode_enabled()) { grad_mode_enabled() = false; }
    ~NoGradGuard() { grad_mode_enabled() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

namespace detail {

template <class T>
struct TensorImpl;

template <class T>
struct GradFn {
    const char* name = "";
    std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
    // Receives the gradient of the op's output and accumulates into inputs.
    std::function<void(std::span<const T>)> backward;
};

template <class T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until something accumulates into it
    bool requires_grad = false;
    std::shared_ptr<GradFn<T>> grad_fn;

    std::vector<T>& grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad;
    }
};

}  // namespace detail

template <class T>
class Tensor {
public:
    using value_type = T;
    using Impl = detail::TensorImpl<T>;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) : impl_(std::make_shared<Impl>()) {
        impl_->data.assign(numel_of(shape), fill);
        impl_->shape = std::move(shape);
    }

    Tensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<Impl>()) {
        if (values.size() != numel_of(shape))
            throw shape_error("tensor data length " + std::to_string(values.size()) +
                              " does not match shape " + shape_str(shape));
        impl_->shape = std::move(shape);
        impl_->data = std::move(values);
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
    static Tensor scalar(T v) { return Tensor(Shape{}, v); }

    static Tensor from_impl(std::shared_ptr<Impl> impl) {
        Tensor t;
        t.impl_ = std::move(impl);
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t size(std::size_t d) const { return impl_->shape.at(d); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<const T> data() const { return impl_->data; }
    // Direct writes bypass the tape; only meaningful on leaves.
    std::span<T> mutable_data() { return impl_->data; }
    T at(std::size_t i) const { return impl_->data.at(i); }

    T item() const {
        if (numel() != 1) throw shape_error("item() on tensor of shape " + shape_str(shape()));
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool on) {
        if (impl_->grad_fn) throw std::logic_error("set_requires_grad on a non-leaf tensor");
        impl_->requires_grad = on;
        return *this;
    }
    bool is_leaf() const { return !impl_->grad_fn; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const T> grad() const { return impl_->grad; }
    std::span<T> mutable_grad() { return impl_->grad_buffer(); }
    void zero_grad() { impl_->grad.clear(); }

    // Copy of the values with no history.
    Tensor detach() const { return Tensor(shape(), impl_->data); }

    // Deep copy preserving requires_grad for leaves (used to clone parameters).
    Tensor clone() const {
        Tensor t(shape(), impl_->data);
        t.impl_->requires_grad = impl_->requires_grad && is_leaf();
        return t;
    }

    const std::shared_ptr<Impl>& impl() const { return impl_; }

private:
    std::shared_ptr<Impl> impl_;
};

template <class T>
void check_finite(std::span<const T> values, const char* op) {
    for (T v : values)
        if (!std::isfinite(v)) throw numeric_error(std::string(op) + ": non-finite value in output");
}

// Wraps the output of an op. `backward` is only stored when grad mode is on
// and at least one input participates in differentiation.
template <class T, class Backward>
Tensor<T> make_result(const char* name, Shape shape, std::vector<T> values,
                      std::initializer_list<const Tensor<T>*> inputs, Backward&& backward) {
    check_finite<T>(values, name);
    Tensor<T> out(std::move(shape), std::move(values));
    if (!grad_mode_enabled()) return out;
    bool any = false;
    for (const Tensor<T>* in : inputs) any = any || in->requires_grad();
    if (!any) return out;
    auto fn = std::make_shared<detail::GradFn<T>>();
    fn->name = name;
    for (const Tensor<T>* in : inputs) fn->inputs.push_back(in->impl());
    fn->backward = std::forward<Backward>(backward);
    out.impl()->requires_grad = true;
    out.impl()->grad_fn = std::move(fn);
    return out;
}

template <class T>
Tensor<T> make_result_n(const char* name, Shape shape, std::vector<T> values,
                        const std::vector<Tensor<T>>& inputs,
                        std::function<void(std::span<const T>)> backward) {
    check_finite<T>(values, name);
    Tensor<T> out(std::move(shape), std::move(values));
    if (!grad_mode_enabled()) return out;
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return out;
    auto fn = std::make_shared<detail::GradFn<T>>();
    fn->name = name;
    for (const auto& in : inputs) fn->inputs.push_back(in.impl());
    fn->backward = std::move(backward);
    out.impl()->requires_grad = true;
    out.impl()->grad_fn = std::move(fn);
    return out;
}

// Topologically ordered record of everything the root depends on. Inputs are
// visited in argument order, so the order is a pure function of the graph.
template <class T>
class Tape {
public:
    using Impl = detail::TensorImpl<T>;

    explicit Tape(const Tensor<T>& root) {
        std::unordered_set<const Impl*> seen;
        struct Frame {
            Impl* node;
            std::size_t next;
        };
        std::vector<Frame> stack{{root.impl().get(), 0}};
        seen.insert(root.impl().get());
        while (!stack.empty()) {
            Frame& f = stack.back();
            const auto& fn = f.node->grad_fn;
            if (fn && f.next < fn->inputs.size()) {
                Impl* child = fn->inputs[f.next++].get();
                if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
                continue;
            }
            order_.push_back(f.node);
            stack.pop_back();
        }
    }

    std::size_t size() const { return order_.size(); }
    const std::vector<Impl*>& nodes() const { return order_; }

    // Seeds d(root)/d(root) = 1 and walks the tape in reverse. Gradients of
    // intermediate nodes are released once consumed; leaves accumulate.
    void backward() {
        if (order_.empty()) return;
        Impl* root = order_.back();
        if (root->data.size() != 1)
            throw shape_error("backward() requires a scalar root, got " + shape_str(root->shape));
        if (!root->requires_grad) return;
        auto& g = root->grad_buffer();
        g[0] += T(1);
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            Impl* node = *it;
            if (!node->grad_fn) continue;
            if (!node->grad.empty()) node->grad_fn->backward(node->grad);
            node->grad.clear();
            node->grad.shrink_to_fit();
        }
    }

private:
    std::vector<Impl*> order_;
};

template <class T>
void backward(const Tensor<T>& root) {
    Tape<T>(root).backward();
}

// Accumulates `g` into the gradient of `impl` if it takes part in
// differentiation.
template <class T>
inline T* grad_target(const std::shared_ptr<detail::TensorImpl<T>>& impl) {
    return impl->requires_grad ? impl->grad_buffer().data() : nullptr;
}

}  // namespace atlas_istn
