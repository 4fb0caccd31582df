#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "dsfer/errors.hpp"

namespace dsfer {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until backward touches this node
    bool requires_grad = false;

    // Tape links, populated only while autograd recording is enabled and
    // at least one input requires grad.
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(TensorImpl&)> backward_fn;

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

// Thread-local recording switch; see NoGradGuard.
bool& autograd_enabled();

}  // namespace detail

// Value-semantic handle over a shared buffer. Outputs of ops are treated
// as immutable; leaf tensors (parameters, gradcheck points) may be
// updated in place through mutable_values().
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
    std::int64_t numel() const { return impl_->numel(); }

    const std::vector<double>& values() const { return impl_->data; }
    std::vector<double>& mutable_values() { return impl_->data; }
    double item() const;

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return !impl_->grad.empty(); }
    const std::vector<double>& grad() const;
    void zero_grad();

    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
// requires_grad tensor reachable through the recorded tape; repeated
// calls keep accumulating until buffers are zeroed.
void backward(const Tensor& loss);

// Disables tape recording for its scope (evaluation / inference paths).
struct NoGradGuard {
    NoGradGuard() : prev_(detail::autograd_enabled()) { detail::autograd_enabled() = false; }
    ~NoGradGuard() { detail::autograd_enabled() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Named map of trainable tensors with deterministic (insertion) order.
// Every entry has requires_grad set; `decay` marks parameters subject to
// weight decay (conv kernels and projections, not biases or BN affine).
class ParameterStore {
public:
    Tensor add(const std::string& name, Tensor t, bool decay);
    const Tensor& get(const std::string& name) const;
    bool has(const std::string& name) const { return index_.count(name) > 0; }
    bool decays(const std::string& name) const;

    const std::vector<std::string>& names() const { return names_; }
    size_t size() const { return names_.size(); }
    std::int64_t total_elements() const;
    void zero_grad();

private:
    std::vector<std::string> names_;
    std::vector<Tensor> tensors_;
    std::vector<bool> decay_;
    std::unordered_map<std::string, size_t> index_;
};

// Same book-keeping for non-trainable state (BN running statistics).
class BufferStore {
public:
    Tensor add(const std::string& name, Tensor t);
    const Tensor& get(const std::string& name) const;
    bool has(const std::string& name) const { return index_.count(name) > 0; }
    const std::vector<std::string>& names() const { return names_; }
    size_t size() const { return names_.size(); }

private:
    std::vector<std::string> names_;
    std::vector<Tensor> tensors_;
    std::unordered_map<std::string, size_t> index_;
};

}  // namespace dsfer
