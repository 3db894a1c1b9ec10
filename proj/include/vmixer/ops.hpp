#pragma once

#include <array>
#include <functional>

#include "vmixer/tensor.hpp"

namespace vmixer {

enum class Elementwise { Add, Sub, Mul };

// Pointwise op over two tensors. Shapes must be equal, or b must broadcast
// against a's trailing dimensions (each right-aligned extent equal or 1).
Tensor elementwise(const Tensor& a, const Tensor& b, Elementwise op);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double value);
Tensor mul_scalar(const Tensor& a, double value);

// Batched contraction [..,m,k] x [..,k,n] -> [..,m,n]. Batch dims must match,
// except that a rank-2 operand is applied across the other side's batches.
// Inner products accumulate in f64.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor permute(const Tensor& t, const std::vector<int>& perm);
Tensor reshape(const Tensor& t, Shape new_shape);
Tensor permute_reshape(const Tensor& t, const std::vector<int>& perm, Shape new_shape);

// Cyclic roll along the given axes; shifts may be negative.
Tensor roll(const Tensor& t, const std::vector<int64_t>& shifts, const std::vector<int>& axes);

// Max-subtracted softmax along one axis. Non-finite input is rejected.
Tensor softmax(const Tensor& t, int axis);

// Normalizes slices along `axis` to zero mean / unit variance (eps inside the
// square root), then applies the per-position affine gamma/beta.
Tensor layer_norm(const Tensor& t, const Tensor& gamma, const Tensor& beta, int axis,
                  float eps = 1e-5f);

// Exact Gaussian-CDF form x * Phi(x).
Tensor gelu(const Tensor& t);

// t: [B,Cin,H,W,D], kernel: [Cout,Cin,kh,kw,kd]. Output extent per axis is
// floor((in + 2p - k)/s) + 1.
Tensor conv3d(const Tensor& t, const Tensor& kernel, const std::array<int64_t, 3>& stride,
              const std::array<int64_t, 3>& padding);

// t: [B,Cin,H,W,D], kernel: [Cin,Cout,kh,kw,kd]. Output extent per axis is
// (in - 1)*s + k - 2p. With matching stride/padding this is the adjoint of
// conv3d under the inner product, sharing the same kernel storage.
Tensor conv3d_transpose(const Tensor& t, const Tensor& kernel,
                        const std::array<int64_t, 3>& stride,
                        const std::array<int64_t, 3>& padding = {0, 0, 0});

// Full reduction to a single-element tensor, accumulated in f64.
Tensor sum(const Tensor& t);

// Records a differentiable op with a caller-supplied backward. The closure
// reads output.grad() and accumulates into the inputs' grads. Used by modules
// that fuse forward/backward pairs (losses, bias-table gathers).
Tensor record_custom_op(const std::vector<Tensor>& inputs, Tensor output,
                        std::function<void()> backward_fn);

// True when recording is active and any input requires grad.
bool tape_would_record(const std::vector<Tensor>& inputs);

// Number of ops currently recorded.
size_t tape_size();
void tape_clear();

// Reverse pass from a scalar loss. Seeds the loss gradient with one, zeroes
// the gradients of every leaf reachable from the tape, runs each recorded
// op's backward exactly once in reverse order, then clears the tape.
void backward(const Tensor& loss);

} // namespace vmixer
