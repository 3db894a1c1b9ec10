#include "vmixer/blocks.hpp"

#include <cmath>

namespace vmixer {

Tensor ParamRegistry::create(const std::string& name, Shape shape, Init init) {
    if (index_.count(name)) throw DataError("parameter name already registered: " + name);
    Tensor t;
    switch (init) {
        case Init::Zeros: t = Tensor::zeros(shape); break;
        case Init::Ones: t = Tensor::full(shape, 1.0f); break;
        case Init::TruncNormal: t = Tensor::trunc_normal(shape, rng_, 0.02); break;
    }
    t.set_requires_grad(true);
    index_[name] = entries_.size();
    entries_.emplace_back(name, t);
    return t;
}

Tensor& ParamRegistry::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError("unknown parameter: " + name);
    return entries_[it->second].second;
}

const Tensor* ParamRegistry::find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &entries_[it->second].second;
}

int64_t ParamRegistry::total_elements() const {
    int64_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
}

void ParamRegistry::zero_grad_all() {
    for (auto& [name, t] : entries_) t.zero_grad();
}

namespace {

// [B,C,H,W,D] -> [B,H*W*D,C]
Tensor to_tokens(const Tensor& x) {
    const Shape& s = x.shape();
    return permute_reshape(x, {0, 2, 3, 4, 1}, {s[0], s[2] * s[3] * s[4], s[1]});
}

// [B,M,C] -> [B,C,H,W,D]
Tensor from_tokens(const Tensor& t, const std::array<int64_t, 3>& dims) {
    const Shape& s = t.shape();
    Tensor vol = reshape(t, {s[0], dims[0], dims[1], dims[2], s[2]});
    return permute(vol, {0, 4, 1, 2, 3});
}

Tensor linear(const Tensor& t, const Tensor& w, const Tensor& b) {
    return add(matmul(t, w), b);
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    return add(x, reshape(bias, {bias.numel(), 1, 1, 1}));
}

// Gathers the per-head relative-position bias [heads,T,T] from the
// (2wh-1)(2ww-1)(2wd-1) table; differentiable w.r.t. the table.
Tensor rel_pos_bias(const Tensor& table, const WindowSpec& spec) {
    const auto [wh, ww, wd] = spec.window;
    const int64_t T = spec.tokens();
    const int64_t heads = table.extent(0);
    const int64_t span = table.extent(1);

    std::vector<int64_t> flat(static_cast<size_t>(T * T));
    for (int64_t i = 0; i < T; ++i) {
        const int64_t ih = i / (ww * wd), iw = (i / wd) % ww, id = i % wd;
        for (int64_t j = 0; j < T; ++j) {
            const int64_t jh = j / (ww * wd), jw = (j / wd) % ww, jd = j % wd;
            const int64_t dh = ih - jh + wh - 1;
            const int64_t dw = iw - jw + ww - 1;
            const int64_t dd = id - jd + wd - 1;
            flat[static_cast<size_t>(i * T + j)] = (dh * (2 * ww - 1) + dw) * (2 * wd - 1) + dd;
        }
    }

    std::vector<float> out(static_cast<size_t>(heads * T * T));
    const auto tv = table.data();
    for (int64_t h = 0; h < heads; ++h)
        for (int64_t q = 0; q < T * T; ++q)
            out[static_cast<size_t>(h * T * T + q)] =
                tv[static_cast<size_t>(h * span + flat[static_cast<size_t>(q)])];
    Tensor result = make_tensor({heads, T, T}, std::move(out));

    Tensor ttab = table, tout = result;
    return record_custom_op({table}, result, [ttab, tout, flat, heads, T, span]() mutable {
        const auto g = tout.grad();
        auto gt = ttab.grad_mutable();
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t q = 0; q < T * T; ++q)
                gt[static_cast<size_t>(h * span + flat[static_cast<size_t>(q)])] +=
                    g[static_cast<size_t>(h * T * T + q)];
    });
}

// Windowed multi-head self-attention branch on [B,C,H,W,D]; mask may be
// undefined. Returns the same shape.
Tensor window_msa(const Tensor& x, const AttentionLayerParams& p, const WindowSpec& spec,
                  int64_t heads, const Tensor& mask) {
    const Shape& s = x.shape();
    const int64_t B = s[0], C = s[1];
    const std::array<int64_t, 3> dims{s[2], s[3], s[4]};
    const int64_t T = spec.tokens();
    const int64_t head_dim = C / heads;

    Tensor win = window_partition(x, spec); // [B*nw, T, C]
    const int64_t nw = win.extent(0) / B;
    Tensor tokens = reshape(win, {B, nw, T, C});
    Tensor normed = layer_norm(tokens, p.ln1_gamma, p.ln1_beta, 3);

    auto split_heads = [&](const Tensor& t) {
        return permute(reshape(t, {B, nw, T, heads, head_dim}), {0, 1, 3, 2, 4});
    };
    Tensor q = split_heads(linear(normed, p.wq, p.bq));
    Tensor k = split_heads(linear(normed, p.wk, p.bk));
    Tensor v = split_heads(linear(normed, p.wv, p.bv));

    Tensor scores = mul_scalar(matmul(q, permute(k, {0, 1, 2, 4, 3})),
                               1.0 / std::sqrt(static_cast<double>(head_dim)));
    if (p.bias_table.defined()) scores = add(scores, rel_pos_bias(p.bias_table, spec));
    if (mask.defined()) scores = add(scores, reshape(mask, {nw, 1, T, T}));
    Tensor attn = softmax(scores, 4);

    Tensor ctx = permute(matmul(attn, v), {0, 1, 3, 2, 4}); // [B,nw,T,heads,hd]
    Tensor merged = reshape(ctx, {B, nw, T, C});
    Tensor projected = linear(merged, p.proj_w, p.proj_b);
    return window_reverse(reshape(projected, {B * nw, T, C}), spec, dims);
}

// Pre-norm feed-forward branch applied per voxel token.
Tensor token_mlp(const Tensor& x, const AttentionLayerParams& p) {
    const Shape& s = x.shape();
    Tensor t = to_tokens(x);
    Tensor h = layer_norm(t, p.ln2_gamma, p.ln2_beta, 2);
    h = linear(gelu(linear(h, p.mlp_fc1_w, p.mlp_fc1_b)), p.mlp_fc2_w, p.mlp_fc2_b);
    return from_tokens(h, {s[2], s[3], s[4]});
}

Tensor attention_sublayer(const Tensor& x, const AttentionLayerParams& p, const WindowSpec& spec,
                          int64_t heads, bool shifted) {
    Tensor out;
    if (shifted && spec.shifted()) {
        const auto& sh = spec.shift;
        Tensor rolled = roll(x, {-sh[0], -sh[1], -sh[2]}, {2, 3, 4});
        Tensor mask = build_shift_mask({x.extent(2), x.extent(3), x.extent(4)}, spec);
        Tensor branch = window_msa(rolled, p, spec, heads, mask);
        out = add(x, roll(branch, {sh[0], sh[1], sh[2]}, {2, 3, 4}));
    } else {
        out = add(x, window_msa(x, p, spec, heads, Tensor()));
    }
    return add(out, token_mlp(out, p));
}

} // namespace

AttentionLayerParams make_attention_layer(ParamRegistry& reg, const std::string& prefix,
                                          int64_t channels, int64_t heads, const WindowSpec& spec,
                                          bool rel_pos_bias) {
    if (channels % heads != 0)
        throw DataError(prefix + ": channels " + std::to_string(channels) +
                        " not divisible by head count " + std::to_string(heads));
    AttentionLayerParams p;
    p.ln1_gamma = reg.create(prefix + ".ln1.gamma", {channels}, Init::Ones);
    p.ln1_beta = reg.create(prefix + ".ln1.beta", {channels}, Init::Zeros);
    p.wq = reg.create(prefix + ".q.weight", {channels, channels}, Init::TruncNormal);
    p.bq = reg.create(prefix + ".q.bias", {channels}, Init::Zeros);
    p.wk = reg.create(prefix + ".k.weight", {channels, channels}, Init::TruncNormal);
    p.bk = reg.create(prefix + ".k.bias", {channels}, Init::Zeros);
    p.wv = reg.create(prefix + ".v.weight", {channels, channels}, Init::TruncNormal);
    p.bv = reg.create(prefix + ".v.bias", {channels}, Init::Zeros);
    p.proj_w = reg.create(prefix + ".proj.weight", {channels, channels}, Init::TruncNormal);
    p.proj_b = reg.create(prefix + ".proj.bias", {channels}, Init::Zeros);
    if (rel_pos_bias) {
        const auto [wh, ww, wd] = spec.window;
        const int64_t span = (2 * wh - 1) * (2 * ww - 1) * (2 * wd - 1);
        p.bias_table = reg.create(prefix + ".bias_table", {heads, span}, Init::TruncNormal);
    }
    p.ln2_gamma = reg.create(prefix + ".ln2.gamma", {channels}, Init::Ones);
    p.ln2_beta = reg.create(prefix + ".ln2.beta", {channels}, Init::Zeros);
    const int64_t hidden = 4 * channels;
    p.mlp_fc1_w = reg.create(prefix + ".mlp.fc1.weight", {channels, hidden}, Init::TruncNormal);
    p.mlp_fc1_b = reg.create(prefix + ".mlp.fc1.bias", {hidden}, Init::Zeros);
    p.mlp_fc2_w = reg.create(prefix + ".mlp.fc2.weight", {hidden, channels}, Init::TruncNormal);
    p.mlp_fc2_b = reg.create(prefix + ".mlp.fc2.bias", {channels}, Init::Zeros);
    return p;
}

LvsaParams make_lvsa_block(ParamRegistry& reg, const std::string& prefix, int64_t channels,
                           int64_t heads, const WindowSpec& spec, bool rel_pos_bias) {
    LvsaParams p;
    p.head_count = heads;
    p.spec = spec;
    p.regular = make_attention_layer(reg, prefix + ".reg", channels, heads, spec, rel_pos_bias);
    p.shifted = make_attention_layer(reg, prefix + ".shift", channels, heads, spec, rel_pos_bias);
    return p;
}

GvmParams make_gvm_block(ParamRegistry& reg, const std::string& prefix, int64_t tokens,
                         int64_t channels) {
    GvmParams p;
    p.tokens = tokens;
    const int64_t tok_hidden = 2 * tokens;
    const int64_t ch_hidden = 4 * channels;
    for (int i = 0; i < 2; ++i) {
        const std::string lp = prefix + ".mix" + std::to_string(i);
        auto& l = p.layers[static_cast<size_t>(i)];
        l.ln1_gamma = reg.create(lp + ".ln1.gamma", {channels}, Init::Ones);
        l.ln1_beta = reg.create(lp + ".ln1.beta", {channels}, Init::Zeros);
        l.tok_fc1_w = reg.create(lp + ".tok.fc1.weight", {tokens, tok_hidden}, Init::TruncNormal);
        l.tok_fc1_b = reg.create(lp + ".tok.fc1.bias", {tok_hidden}, Init::Zeros);
        l.tok_fc2_w = reg.create(lp + ".tok.fc2.weight", {tok_hidden, tokens}, Init::TruncNormal);
        l.tok_fc2_b = reg.create(lp + ".tok.fc2.bias", {tokens}, Init::Zeros);
        l.ln2_gamma = reg.create(lp + ".ln2.gamma", {channels}, Init::Ones);
        l.ln2_beta = reg.create(lp + ".ln2.beta", {channels}, Init::Zeros);
        l.ch_fc1_w = reg.create(lp + ".ch.fc1.weight", {channels, ch_hidden}, Init::TruncNormal);
        l.ch_fc1_b = reg.create(lp + ".ch.fc1.bias", {ch_hidden}, Init::Zeros);
        l.ch_fc2_w = reg.create(lp + ".ch.fc2.weight", {ch_hidden, channels}, Init::TruncNormal);
        l.ch_fc2_b = reg.create(lp + ".ch.fc2.bias", {channels}, Init::Zeros);
    }
    return p;
}

StemParams make_stem(ParamRegistry& reg, const std::string& prefix, int64_t in_channels,
                     int64_t out_channels) {
    if (out_channels % 2 != 0)
        throw DataError("stem: base channel count must be even, got " +
                        std::to_string(out_channels));
    StemParams p;
    const int64_t mid = out_channels / 2;
    const std::array<int64_t, 4> cin{in_channels, mid, out_channels, out_channels};
    const std::array<int64_t, 4> cout{mid, out_channels, out_channels, out_channels};
    for (int i = 0; i < 4; ++i) {
        const std::string cp = prefix + ".conv" + std::to_string(i);
        p.conv_w[static_cast<size_t>(i)] =
            reg.create(cp + ".weight", {cout[static_cast<size_t>(i)], cin[static_cast<size_t>(i)], 3, 3, 3},
                       Init::TruncNormal);
        p.conv_b[static_cast<size_t>(i)] =
            reg.create(cp + ".bias", {cout[static_cast<size_t>(i)]}, Init::Zeros);
        p.norm_gamma[static_cast<size_t>(i)] =
            reg.create(prefix + ".norm" + std::to_string(i) + ".gamma",
                       {cout[static_cast<size_t>(i)]}, Init::Ones);
        p.norm_beta[static_cast<size_t>(i)] =
            reg.create(prefix + ".norm" + std::to_string(i) + ".beta",
                       {cout[static_cast<size_t>(i)]}, Init::Zeros);
    }
    return p;
}

ConvParams make_conv(ParamRegistry& reg, const std::string& prefix, Shape kernel_shape,
                     bool transposed) {
    ConvParams p;
    // Kernel layout is [Cout,Cin,...] for convs and [Cin,Cout,...] transposed.
    const int64_t bias_len = transposed ? kernel_shape[1] : kernel_shape[0];
    p.weight = reg.create(prefix + ".weight", std::move(kernel_shape), Init::TruncNormal);
    p.bias = reg.create(prefix + ".bias", {bias_len}, Init::Zeros);
    return p;
}

WindowSpec resolve_window(const WindowSpec& requested, const std::array<int64_t, 3>& dims) {
    WindowSpec spec;
    for (int a = 0; a < 3; ++a) {
        const auto ai = static_cast<size_t>(a);
        int64_t w = std::min(requested.window[ai], dims[ai]);
        if (dims[ai] % w != 0)
            throw DataError("window " + std::to_string(w) + " does not divide extent " +
                            std::to_string(dims[ai]) + " along axis " + std::to_string(a));
        spec.window[ai] = w;
        int64_t shift = requested.shift[ai];
        if (w < requested.window[ai]) {
            shift = w / 2; // clamped window, requested shift no longer applies
        } else if (shift >= w) {
            throw DataError("shift " + std::to_string(shift) + " must be smaller than window " +
                            std::to_string(w) + " along axis " + std::to_string(a));
        }
        // A single window along an axis leaves nothing to shift across.
        spec.shift[ai] = (w == dims[ai]) ? 0 : shift;
    }
    return spec;
}

Tensor window_partition(const Tensor& t, const WindowSpec& spec) {
    if (t.rank() != 5)
        throw DataError("window_partition: expected [B,C,H,W,D], got " + shape_str(t.shape()));
    const Shape& s = t.shape();
    const auto [wh, ww, wd] = spec.window;
    for (int a = 0; a < 3; ++a)
        if (s[static_cast<size_t>(2 + a)] % spec.window[static_cast<size_t>(a)] != 0)
            throw DataError("window_partition: extent " +
                            std::to_string(s[static_cast<size_t>(2 + a)]) +
                            " not divisible by window " +
                            std::to_string(spec.window[static_cast<size_t>(a)]) + " along axis " +
                            std::to_string(a));
    const int64_t B = s[0], C = s[1];
    const int64_t nh = s[2] / wh, nw = s[3] / ww, nd = s[4] / wd;
    Tensor split = reshape(t, {B, C, nh, wh, nw, ww, nd, wd});
    Tensor ordered = permute(split, {0, 2, 4, 6, 3, 5, 7, 1});
    return reshape(ordered, {B * nh * nw * nd, wh * ww * wd, C});
}

Tensor window_reverse(const Tensor& windows, const WindowSpec& spec,
                      const std::array<int64_t, 3>& volume_dims) {
    const auto [wh, ww, wd] = spec.window;
    const auto [H, W, D] = volume_dims;
    if (H % wh || W % ww || D % wd)
        throw DataError("window_reverse: volume dims not divisible by window");
    const int64_t nh = H / wh, nw = W / ww, nd = D / wd;
    const int64_t count = nh * nw * nd;
    if (windows.rank() != 3 || windows.extent(1) != wh * ww * wd ||
        windows.extent(0) % count != 0)
        throw DataError("window_reverse: window tensor " + shape_str(windows.shape()) +
                        " inconsistent with volume " + shape_str({H, W, D}));
    const int64_t B = windows.extent(0) / count;
    const int64_t C = windows.extent(2);
    Tensor split = reshape(windows, {B, nh, nw, nd, wh, ww, wd, C});
    Tensor ordered = permute(split, {0, 7, 1, 4, 2, 5, 3, 6});
    return reshape(ordered, {B, C, H, W, D});
}

Tensor build_shift_mask(const std::array<int64_t, 3>& volume_dims, const WindowSpec& spec) {
    if (!spec.shifted())
        throw DataError("build_shift_mask: shift must be nonzero along at least one axis");
    const auto [wh, ww, wd] = spec.window;
    const auto [H, W, D] = volume_dims;
    const int64_t nh = H / wh, nw = W / ww, nd = D / wd;
    const int64_t count = nh * nw * nd;
    const int64_t T = spec.tokens();

    // Region label per token: whether its pre-shift source wrapped around,
    // separately per axis. Pairs with different labels are suppressed.
    std::vector<float> mask(static_cast<size_t>(count * T * T), 0.0f);
    std::vector<int> region(static_cast<size_t>(T));
    int64_t win = 0;
    for (int64_t bh = 0; bh < nh; ++bh)
        for (int64_t bw = 0; bw < nw; ++bw)
            for (int64_t bd = 0; bd < nd; ++bd, ++win) {
                int64_t tok = 0;
                for (int64_t ih = 0; ih < wh; ++ih)
                    for (int64_t iw = 0; iw < ww; ++iw)
                        for (int64_t id = 0; id < wd; ++id, ++tok) {
                            const bool wrap_h = bh * wh + ih + spec.shift[0] >= H;
                            const bool wrap_w = bw * ww + iw + spec.shift[1] >= W;
                            const bool wrap_d = bd * wd + id + spec.shift[2] >= D;
                            region[static_cast<size_t>(tok)] =
                                (wrap_h ? 4 : 0) + (wrap_w ? 2 : 0) + (wrap_d ? 1 : 0);
                        }
                for (int64_t i = 0; i < T; ++i)
                    for (int64_t j = 0; j < T; ++j)
                        if (region[static_cast<size_t>(i)] != region[static_cast<size_t>(j)])
                            mask[static_cast<size_t>((win * T + i) * T + j)] = -1e9f;
            }
    return make_tensor({count, T, T}, std::move(mask));
}

Tensor lvsa_block_forward(const Tensor& t, const LvsaParams& params) {
    Tensor x = attention_sublayer(t, params.regular, params.spec, params.head_count, false);
    return attention_sublayer(x, params.shifted, params.spec, params.head_count, true);
}

Tensor gvm_layer_forward(const Tensor& t, const MixerLayerParams& params, int64_t bound_tokens) {
    const Shape& s = t.shape();
    const int64_t M = s[2] * s[3] * s[4];
    if (M != bound_tokens)
        throw DataError("mixer: volume " + shape_str(t.shape()) + " has " + std::to_string(M) +
                        " tokens but weights are bound to " + std::to_string(bound_tokens));
    Tensor f = to_tokens(t); // [B,M,N]

    Tensor h = layer_norm(f, params.ln1_gamma, params.ln1_beta, 2);
    Tensor ht = permute(h, {0, 2, 1}); // [B,N,M]
    Tensor mixed = linear(gelu(linear(ht, params.tok_fc1_w, params.tok_fc1_b)), params.tok_fc2_w,
                          params.tok_fc2_b);
    Tensor f1 = add(f, permute(mixed, {0, 2, 1}));

    Tensor h2 = layer_norm(f1, params.ln2_gamma, params.ln2_beta, 2);
    Tensor refined = linear(gelu(linear(h2, params.ch_fc1_w, params.ch_fc1_b)), params.ch_fc2_w,
                            params.ch_fc2_b);
    Tensor f2 = add(f1, refined);
    return from_tokens(f2, {s[2], s[3], s[4]});
}

Tensor gvm_block_forward(const Tensor& t, const GvmParams& params) {
    Tensor x = gvm_layer_forward(t, params.layers[0], params.tokens);
    return gvm_layer_forward(x, params.layers[1], params.tokens);
}

Tensor stem_forward(const Tensor& x, const StemParams& params) {
    const Shape& s = x.shape();
    if (s[2] % 4 != 0 || s[3] % 4 != 0)
        throw DataError("stem: H and W must be divisible by 4, got " + shape_str(x.shape()));
    if (s[4] % 2 != 0)
        throw DataError("stem: D must be divisible by 2, got " + shape_str(x.shape()));
    static constexpr std::array<std::array<int64_t, 3>, 4> strides{
        {{2, 2, 1}, {2, 2, 2}, {1, 1, 1}, {1, 1, 1}}};
    Tensor t = x;
    for (int i = 0; i < 4; ++i) {
        const auto ai = static_cast<size_t>(i);
        t = conv3d(t, params.conv_w[ai], strides[ai], {1, 1, 1});
        t = add_channel_bias(t, params.conv_b[ai]);
        t = gelu(t);
        t = layer_norm(t, params.norm_gamma[ai], params.norm_beta[ai], 1);
    }
    return t;
}

Tensor downsample(const Tensor& t, const ConvParams& params) {
    for (int a = 2; a < 5; ++a)
        if (t.extent(a) % 2 != 0)
            throw DataError("downsample: extent " + std::to_string(t.extent(a)) +
                            " along axis " + std::to_string(a - 2) + " is odd");
    return add_channel_bias(conv3d(t, params.weight, {2, 2, 2}, {1, 1, 1}), params.bias);
}

Tensor upsample(const Tensor& t, const ConvParams& params) {
    return add_channel_bias(conv3d_transpose(t, params.weight, {2, 2, 2}), params.bias);
}

Tensor patch_expand(const Tensor& t, const ConvParams& params) {
    return add_channel_bias(conv3d_transpose(t, params.weight, {4, 4, 2}), params.bias);
}

Tensor conv1x1(const Tensor& t, const ConvParams& params) {
    return add_channel_bias(conv3d(t, params.weight, {1, 1, 1}, {0, 0, 0}), params.bias);
}

} // namespace vmixer
