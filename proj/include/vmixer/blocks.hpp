#pragma once

#include <array>
#include <unordered_map>

#include "vmixer/ops.hpp"

namespace vmixer {

// Non-overlapping 3D attention window geometry. A zero shift means regular
// windows; nonzero shifts cycle the volume before partitioning.
struct WindowSpec {
    std::array<int64_t, 3> window{4, 4, 4};
    std::array<int64_t, 3> shift{0, 0, 0};

    int64_t tokens() const { return window[0] * window[1] * window[2]; }
    bool shifted() const { return shift[0] || shift[1] || shift[2]; }
};

enum class Init { Zeros, Ones, TruncNormal };

// Ordered, uniquely named parameter store. Creation order and the seed fully
// determine every initial value, which makes builds reproducible and gives
// checkpoints a stable layout.
class ParamRegistry {
public:
    explicit ParamRegistry(uint64_t seed) : rng_(seed) {}

    Tensor create(const std::string& name, Shape shape, Init init);
    Tensor& at(const std::string& name);
    const Tensor* find(const std::string& name) const;

    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
    int64_t total_elements() const;
    void zero_grad_all();

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
    std::unordered_map<std::string, size_t> index_;
    Rng rng_;
};

// One windowed multi-head self-attention sub-layer with its feed-forward,
// both pre-norm residual branches.
struct AttentionLayerParams {
    Tensor ln1_gamma, ln1_beta;
    Tensor wq, bq, wk, bk, wv, bv;
    Tensor proj_w, proj_b;
    Tensor bias_table; // [heads, (2wh-1)(2ww-1)(2wd-1)]; undefined when disabled
    Tensor ln2_gamma, ln2_beta;
    Tensor mlp_fc1_w, mlp_fc1_b, mlp_fc2_w, mlp_fc2_b;
};

struct LvsaParams {
    int64_t head_count = 4;
    WindowSpec spec; // shift applies to the second sub-layer
    AttentionLayerParams regular, shifted;
};

// One volumetric mixer layer: token mixing across the M = H*W*D positions,
// then channel mixing across N channels. Each mixing MLP is two linear
// layers with a GELU between.
struct MixerLayerParams {
    Tensor ln1_gamma, ln1_beta;
    Tensor tok_fc1_w, tok_fc1_b, tok_fc2_w, tok_fc2_b;
    Tensor ln2_gamma, ln2_beta;
    Tensor ch_fc1_w, ch_fc1_b, ch_fc2_w, ch_fc2_b;
};

struct GvmParams {
    int64_t tokens = 0; // M the token-mixing weights are bound to
    std::array<MixerLayerParams, 2> layers;
};

struct StemParams {
    std::array<Tensor, 4> conv_w, conv_b, norm_gamma, norm_beta;
};

struct ConvParams {
    Tensor weight, bias;
};

AttentionLayerParams make_attention_layer(ParamRegistry& reg, const std::string& prefix,
                                          int64_t channels, int64_t heads,
                                          const WindowSpec& spec, bool rel_pos_bias);
LvsaParams make_lvsa_block(ParamRegistry& reg, const std::string& prefix, int64_t channels,
                           int64_t heads, const WindowSpec& spec, bool rel_pos_bias);
GvmParams make_gvm_block(ParamRegistry& reg, const std::string& prefix, int64_t tokens,
                         int64_t channels);
StemParams make_stem(ParamRegistry& reg, const std::string& prefix, int64_t in_channels,
                     int64_t out_channels);
ConvParams make_conv(ParamRegistry& reg, const std::string& prefix, Shape kernel_shape,
                     bool transposed);

// Clamps the window to the volume extents and disables the shift along axes
// with a single window. Extents must divide evenly; violations name the axis.
WindowSpec resolve_window(const WindowSpec& requested, const std::array<int64_t, 3>& dims);

// [B,C,H,W,D] -> [B*nw, wh*ww*wd, C]; each row group is one window's voxels
// in raster order.
Tensor window_partition(const Tensor& t, const WindowSpec& spec);

// Exact inverse of window_partition for the given volume dims.
Tensor window_reverse(const Tensor& windows, const WindowSpec& spec,
                      const std::array<int64_t, 3>& volume_dims);

// Additive attention mask [nw, T, T] for shifted windows: token pairs whose
// voxels wrapped differently under the cyclic shift get -1e9, others 0.
Tensor build_shift_mask(const std::array<int64_t, 3>& volume_dims, const WindowSpec& spec);

// Two attention sub-layers (regular then shifted windows), each followed by
// its feed-forward, all as pre-norm residuals. Shape preserved.
Tensor lvsa_block_forward(const Tensor& t, const LvsaParams& params);

Tensor gvm_layer_forward(const Tensor& t, const MixerLayerParams& params, int64_t bound_tokens);

// Exactly two mixer layers.
Tensor gvm_block_forward(const Tensor& t, const GvmParams& params);

// Four k=3 p=1 convs with strides (2,2,1),(2,2,2),(1,1,1),(1,1,1), each
// followed by GELU and layer norm; composite reduction (4,4,2).
Tensor stem_forward(const Tensor& x, const StemParams& params);

// k=3 s=2 p=1 conv; halves spatial dims, doubles channels.
Tensor downsample(const Tensor& t, const ConvParams& params);

// k=2 s=2 transposed conv; doubles spatial dims, halves channels.
Tensor upsample(const Tensor& t, const ConvParams& params);

// Transposed conv with stride (4,4,2) mapping stem-resolution features to
// class logits at full input resolution.
Tensor patch_expand(const Tensor& t, const ConvParams& params);

// 1x1x1 conv head.
Tensor conv1x1(const Tensor& t, const ConvParams& params);

} // namespace vmixer
