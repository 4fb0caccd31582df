#include "dsfer/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace dsfer {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

namespace detail {

bool& autograd_enabled() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->data.assign(static_cast<size_t>(shape_numel(shape)), value);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
        throw ConfigError("tensor: shape " + shape_str(shape) + " does not match data length " +
                          std::to_string(data.size()));
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

double Tensor::item() const {
    if (numel() != 1) {
        throw ConfigError("tensor: item() on non-scalar of shape " + shape_str(shape()));
    }
    return impl_->data[0];
}

const std::vector<double>& Tensor::grad() const {
    impl_->ensure_grad();
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ConfigError("backward: loss must be a scalar, got shape " +
                          (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    detail::TensorImpl* root = loss.impl().get();
    if (!root->requires_grad) return;

    // Iterative DFS post-order over requires_grad nodes; reversed it is a
    // topological order, so each node's grad is complete before its own
    // backward_fn runs.
    std::vector<detail::TensorImpl*> topo;
    std::unordered_set<detail::TensorImpl*> seen;
    struct Frame {
        detail::TensorImpl* node;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({root, 0});
    seen.insert(root);
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            detail::TensorImpl* p = f.node->parents[f.next_parent++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            topo.push_back(f.node);
            stack.pop_back();
        }
    }

    for (detail::TensorImpl* node : topo) node->ensure_grad();
    root->grad[0] += 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
}

Tensor ParameterStore::add(const std::string& name, Tensor t, bool decay) {
    if (index_.count(name)) {
        throw ConfigError("parameter store: duplicate name '" + name + "'");
    }
    t.set_requires_grad(true);
    index_[name] = names_.size();
    names_.push_back(name);
    tensors_.push_back(t);
    decay_.push_back(decay);
    return t;
}

const Tensor& ParameterStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("parameter store: unknown name '" + name + "'");
    return tensors_[it->second];
}

bool ParameterStore::decays(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("parameter store: unknown name '" + name + "'");
    return decay_[it->second];
}

std::int64_t ParameterStore::total_elements() const {
    std::int64_t n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
}

void ParameterStore::zero_grad() {
    for (auto& t : tensors_) t.zero_grad();
}

Tensor BufferStore::add(const std::string& name, Tensor t) {
    if (index_.count(name)) {
        throw ConfigError("buffer store: duplicate name '" + name + "'");
    }
    index_[name] = names_.size();
    names_.push_back(name);
    tensors_.push_back(t);
    return t;
}

const Tensor& BufferStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("buffer store: unknown name '" + name + "'");
    return tensors_[it->second];
}

}  // namespace dsfer
