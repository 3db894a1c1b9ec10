#include "vmixer/tensor.hpp"

namespace vmixer {

namespace {
bool g_grad_enabled = true;

std::shared_ptr<detail::TensorImpl> new_impl(Shape shape, std::vector<float> data) {
    auto impl = std::make_shared<detail::TensorImpl>();
    int64_t n = shape_numel(shape);
    if (n != static_cast<int64_t>(data.size()))
        throw DataError("tensor data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
    for (int64_t e : shape)
        if (e <= 0) throw DataError("tensor shape " + shape_str(shape) + " has non-positive extent");
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    return impl;
}
} // namespace

Tensor make_tensor(Shape shape, std::vector<float> data) {
    return Tensor(new_impl(std::move(shape), std::move(data)));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    int64_t n = shape_numel(shape);
    Tensor t = make_tensor(std::move(shape), std::vector<float>(static_cast<size_t>(n), 0.0f));
    t.set_requires_grad(requires_grad);
    return t;
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    int64_t n = shape_numel(shape);
    Tensor t = make_tensor(std::move(shape), std::vector<float>(static_cast<size_t>(n), value));
    t.set_requires_grad(requires_grad);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data, bool requires_grad) {
    Tensor t = make_tensor(std::move(shape), std::move(data));
    t.set_requires_grad(requires_grad);
    return t;
}

Tensor Tensor::scalar(double value) {
    Tensor t = make_tensor({1}, {static_cast<float>(value)});
    t.impl_->exact_scalar = value;
    return t;
}

Tensor Tensor::randn(Shape shape, Rng& rng, double mean, double stddev) {
    int64_t n = shape_numel(shape);
    std::vector<float> data(static_cast<size_t>(n));
    for (auto& v : data) v = static_cast<float>(rng.normal(mean, stddev));
    return make_tensor(std::move(shape), std::move(data));
}

Tensor Tensor::trunc_normal(Shape shape, Rng& rng, double stddev) {
    int64_t n = shape_numel(shape);
    std::vector<float> data(static_cast<size_t>(n));
    for (auto& v : data) v = static_cast<float>(rng.trunc_normal(0.0, stddev));
    return make_tensor(std::move(shape), std::move(data));
}

Tensor Tensor::rand_uniform(Shape shape, Rng& rng, double lo, double hi) {
    int64_t n = shape_numel(shape);
    std::vector<float> data(static_cast<size_t>(n));
    for (auto& v : data) v = static_cast<float>(rng.uniform(lo, hi));
    return make_tensor(std::move(shape), std::move(data));
}

std::span<const float> Tensor::grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
    return impl_->grad;
}

std::span<float> Tensor::grad_mutable() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
    return impl_->grad;
}

void Tensor::zero_grad() {
    impl_->grad.assign(impl_->data.size(), 0.0f);
}

float Tensor::item() const {
    if (numel() != 1)
        throw DataError("item() on tensor of shape " + shape_str(impl_->shape));
    return impl_->data[0];
}

double Tensor::item_f64() const {
    if (numel() != 1)
        throw DataError("item_f64() on tensor of shape " + shape_str(impl_->shape));
    if (impl_->exact_scalar) return *impl_->exact_scalar;
    return static_cast<double>(impl_->data[0]);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

} // namespace vmixer
