#pragma once

#include <memory>
#include <optional>
#include <span>

#include "vmixer/common.hpp"

namespace vmixer {

namespace detail {
struct TensorImpl {
    Shape shape;
    std::vector<float> data;
    bool requires_grad = false;
    std::vector<float> grad; // allocated lazily, same length as data
    // Reductions that produce a single element keep their 64-bit result here;
    // finite-difference checks read it to avoid the f32 quantization of data[0].
    std::optional<double> exact_scalar;
};
} // namespace detail

// Dense N-dimensional array of f32 values in row-major layout. Value data is
// treated as immutable once an op has produced it; the only sanctioned
// mutations are gradient accumulation during backward and in-place parameter
// updates by the optimizer.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<float> data, bool requires_grad = false);
    static Tensor scalar(double value);
    // Standard normal / truncated normal / uniform fills, consuming rng.
    static Tensor randn(Shape shape, Rng& rng, double mean = 0.0, double stddev = 1.0);
    static Tensor trunc_normal(Shape shape, Rng& rng, double stddev);
    static Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int64_t extent(int axis) const { return impl_->shape[static_cast<size_t>(axis)]; }
    int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

    std::span<const float> data() const { return impl_->data; }
    // In-place access; see class comment for when mutation is legitimate.
    std::span<float> mutable_data() { return impl_->data; }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool value) {
        impl_->requires_grad = value;
        return *this;
    }

    // Gradient values; materializes zeros on first access.
    std::span<const float> grad() const;
    std::span<float> grad_mutable();
    void zero_grad();

    // Value of a single-element tensor.
    float item() const;
    // Same, read at 64-bit fidelity when the producing op kept one.
    double item_f64() const;

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;

    friend Tensor make_tensor(Shape shape, std::vector<float> data);
};

// Internal: wrap freshly computed op output.
Tensor make_tensor(Shape shape, std::vector<float> data);

// Reverse-mode recording is active unless suspended; ops consult this before
// pushing tape entries.
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

} // namespace vmixer
