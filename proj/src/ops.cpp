#include "vmixer/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

namespace vmixer {

namespace {

using RowMatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapF = Eigen::Map<RowMatF>;
using CMapF = Eigen::Map<const RowMatF>;

struct TapeEntry {
    std::shared_ptr<detail::TensorImpl> output;
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    std::function<void()> backward_fn;
};

std::vector<TapeEntry>& tape() {
    static std::vector<TapeEntry> entries;
    return entries;
}

bool any_requires_grad(const std::vector<Tensor>& inputs) {
    for (const auto& t : inputs)
        if (t.requires_grad()) return true;
    return false;
}

// Marks the output as grad-carrying and stores the backward closure.
void record(const std::vector<Tensor>& inputs, Tensor& output, std::function<void()> backward_fn) {
    output.set_requires_grad(true);
    TapeEntry entry;
    entry.output = output.impl();
    entry.inputs.reserve(inputs.size());
    for (const auto& t : inputs) entry.inputs.push_back(t.impl());
    entry.backward_fn = std::move(backward_fn);
    tape().push_back(std::move(entry));
}

int normalize_axis(int axis, int rank, const char* op) {
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank)
        throw DataError(std::string(op) + ": axis out of range for rank " + std::to_string(rank));
    return axis;
}

// Decomposes a shape around `axis` into outer * ext * inner.
struct AxisSplit {
    int64_t outer, ext, inner;
};
AxisSplit split_axis(const Shape& shape, int axis) {
    AxisSplit s{1, shape[static_cast<size_t>(axis)], 1};
    for (int d = 0; d < axis; ++d) s.outer *= shape[static_cast<size_t>(d)];
    for (size_t d = static_cast<size_t>(axis) + 1; d < shape.size(); ++d) s.inner *= shape[d];
    return s;
}

// Effective per-output-axis strides into b for trailing-dim broadcasting.
// Zero stride on broadcast axes.
std::vector<int64_t> broadcast_strides(const Shape& a, const Shape& b, const char* op) {
    const int ra = static_cast<int>(a.size());
    const int rb = static_cast<int>(b.size());
    if (rb > ra)
        throw DataError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    auto bstr = row_major_strides(b);
    std::vector<int64_t> eff(static_cast<size_t>(ra), 0);
    for (int i = 0; i < rb; ++i) {
        int64_t be = b[static_cast<size_t>(rb - 1 - i)];
        int64_t ae = a[static_cast<size_t>(ra - 1 - i)];
        if (be == ae)
            eff[static_cast<size_t>(ra - 1 - i)] = bstr[static_cast<size_t>(rb - 1 - i)];
        else if (be != 1)
            throw DataError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                            shape_str(b));
    }
    return eff;
}

// Walks output coordinates in row-major order, yielding the mapped index of a
// second tensor given effective strides (zero = broadcast/dropped axis).
template <typename Fn>
void strided_walk(const Shape& shape, const std::vector<int64_t>& eff_strides, Fn&& fn) {
    const int64_t n = shape_numel(shape);
    const int r = static_cast<int>(shape.size());
    std::vector<int64_t> coord(static_cast<size_t>(r), 0);
    int64_t mapped = 0;
    for (int64_t i = 0; i < n; ++i) {
        fn(i, mapped);
        for (int d = r - 1; d >= 0; --d) {
            ++coord[static_cast<size_t>(d)];
            mapped += eff_strides[static_cast<size_t>(d)];
            if (coord[static_cast<size_t>(d)] < shape[static_cast<size_t>(d)]) break;
            coord[static_cast<size_t>(d)] = 0;
            mapped -= eff_strides[static_cast<size_t>(d)] * shape[static_cast<size_t>(d)];
        }
    }
}

} // namespace

Tensor elementwise(const Tensor& a, const Tensor& b, Elementwise op) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    const bool same = as == bs;
    std::vector<int64_t> eff;
    if (!same) eff = broadcast_strides(as, bs, "elementwise");

    const auto av = a.data();
    const auto bv = b.data();
    std::vector<float> out(av.size());
    auto apply = [op](float x, float y) {
        switch (op) {
            case Elementwise::Add: return x + y;
            case Elementwise::Sub: return x - y;
            default: return x * y;
        }
    };
    if (same) {
        for (size_t i = 0; i < out.size(); ++i) out[i] = apply(av[i], bv[i]);
    } else {
        strided_walk(as, eff, [&](int64_t i, int64_t j) {
            out[static_cast<size_t>(i)] = apply(av[static_cast<size_t>(i)], bv[static_cast<size_t>(j)]);
        });
    }
    Tensor result = make_tensor(as, std::move(out));

    if (a.numel() == 1 && b.numel() == 1) {
        double ea = a.item_f64(), eb = b.item_f64();
        double v = op == Elementwise::Add ? ea + eb : op == Elementwise::Sub ? ea - eb : ea * eb;
        result.impl()->exact_scalar = v;
    }

    if (grad_enabled() && (a.requires_grad() || b.requires_grad())) {
        Tensor ta = a, tb = b, tout = result;
        record({a, b}, result, [ta, tb, tout, op, same, eff]() mutable {
            const auto g = tout.grad();
            if (ta.requires_grad()) {
                auto ga = ta.grad_mutable();
                if (op == Elementwise::Mul) {
                    const auto bv2 = tb.data();
                    if (same) {
                        for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv2[i];
                    } else {
                        strided_walk(ta.shape(), eff, [&](int64_t i, int64_t j) {
                            ga[static_cast<size_t>(i)] +=
                                g[static_cast<size_t>(i)] * bv2[static_cast<size_t>(j)];
                        });
                    }
                } else {
                    for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
                }
            }
            if (tb.requires_grad()) {
                auto gb = tb.grad_mutable();
                const float sign = op == Elementwise::Sub ? -1.0f : 1.0f;
                if (op == Elementwise::Mul) {
                    const auto av2 = ta.data();
                    if (same) {
                        for (size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av2[i];
                    } else {
                        strided_walk(ta.shape(), eff, [&](int64_t i, int64_t j) {
                            gb[static_cast<size_t>(j)] +=
                                g[static_cast<size_t>(i)] * av2[static_cast<size_t>(i)];
                        });
                    }
                } else if (same) {
                    for (size_t i = 0; i < gb.size(); ++i) gb[i] += sign * g[i];
                } else {
                    strided_walk(ta.shape(), eff, [&](int64_t i, int64_t j) {
                        gb[static_cast<size_t>(j)] += sign * g[static_cast<size_t>(i)];
                    });
                }
            }
        });
    }
    return result;
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(a, b, Elementwise::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(a, b, Elementwise::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(a, b, Elementwise::Mul); }

Tensor add_scalar(const Tensor& a, double value) { return add(a, Tensor::scalar(value)); }
Tensor mul_scalar(const Tensor& a, double value) { return mul(a, Tensor::scalar(value)); }

Tensor matmul(const Tensor& a, const Tensor& b) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (as.size() < 2 || bs.size() < 2)
        throw DataError("matmul: operands must have rank >= 2, got " + shape_str(as) + " and " +
                        shape_str(bs));
    const int64_t m = as[as.size() - 2], k = as[as.size() - 1];
    const int64_t kb = bs[bs.size() - 2], n = bs[bs.size() - 1];
    if (k != kb)
        throw DataError("matmul: inner dimension mismatch " + shape_str(as) + " x " + shape_str(bs));
    Shape abatch(as.begin(), as.end() - 2);
    Shape bbatch(bs.begin(), bs.end() - 2);
    const bool b_shared = bbatch.empty() && !abatch.empty();
    const bool a_shared = abatch.empty() && !bbatch.empty();
    if (!b_shared && !a_shared && abatch != bbatch)
        throw DataError("matmul: batch dimensions differ " + shape_str(as) + " x " + shape_str(bs));

    const Shape& batch_shape = a_shared ? bbatch : abatch;
    const int64_t batches = shape_numel(batch_shape);
    Shape out_shape = batch_shape;
    out_shape.push_back(m);
    out_shape.push_back(n);

    std::vector<float> out(static_cast<size_t>(batches * m * n));
    const float* ap = a.data().data();
    const float* bp = b.data().data();
    float* cp = out.data();
    parallel_for(batches, [&](int64_t lo, int64_t hi) {
        for (int64_t q = lo; q < hi; ++q) {
            CMapF A(ap + (a_shared ? 0 : q * m * k), m, k);
            CMapF B(bp + (b_shared ? 0 : q * k * n), k, n);
            MapF C(cp + q * m * n, m, n);
            C = (A.cast<double>() * B.cast<double>()).cast<float>();
        }
    });
    Tensor result = make_tensor(std::move(out_shape), std::move(out));

    if (grad_enabled() && (a.requires_grad() || b.requires_grad())) {
        Tensor ta = a, tb = b, tout = result;
        record({a, b}, result, [ta, tb, tout, m, k, n, batches, a_shared, b_shared]() mutable {
            const float* gp = tout.grad().data();
            const float* ap2 = ta.data().data();
            const float* bp2 = tb.data().data();
            if (ta.requires_grad()) {
                float* gap = ta.grad_mutable().data();
                if (a_shared) {
                    RowMatD acc = RowMatD::Zero(m, k);
                    for (int64_t q = 0; q < batches; ++q) {
                        CMapF G(gp + q * m * n, m, n);
                        CMapF B(bp2 + q * k * n, k, n);
                        acc += G.cast<double>() * B.cast<double>().transpose();
                    }
                    MapF(gap, m, k) += acc.cast<float>();
                } else {
                    for (int64_t q = 0; q < batches; ++q) {
                        CMapF G(gp + q * m * n, m, n);
                        CMapF B(bp2 + (b_shared ? 0 : q * k * n), k, n);
                        MapF(gap + q * m * k, m, k) +=
                            (G.cast<double>() * B.cast<double>().transpose()).cast<float>();
                    }
                }
            }
            if (tb.requires_grad()) {
                float* gbp = tb.grad_mutable().data();
                if (b_shared) {
                    RowMatD acc = RowMatD::Zero(k, n);
                    for (int64_t q = 0; q < batches; ++q) {
                        CMapF A(ap2 + q * m * k, m, k);
                        CMapF G(gp + q * m * n, m, n);
                        acc += A.cast<double>().transpose() * G.cast<double>();
                    }
                    MapF(gbp, k, n) += acc.cast<float>();
                } else {
                    for (int64_t q = 0; q < batches; ++q) {
                        CMapF A(ap2 + (a_shared ? 0 : q * m * k), m, k);
                        CMapF G(gp + q * m * n, m, n);
                        MapF(gbp + q * k * n, k, n) +=
                            (A.cast<double>().transpose() * G.cast<double>()).cast<float>();
                    }
                }
            }
        });
    }
    return result;
}

Tensor permute(const Tensor& t, const std::vector<int>& perm) {
    const Shape& in_shape = t.shape();
    const int r = t.rank();
    if (static_cast<int>(perm.size()) != r)
        throw DataError("permute: permutation size " + std::to_string(perm.size()) +
                        " does not match rank " + std::to_string(r));
    std::vector<bool> seen(static_cast<size_t>(r), false);
    for (int p : perm) {
        if (p < 0 || p >= r || seen[static_cast<size_t>(p)])
            throw DataError("permute: invalid permutation");
        seen[static_cast<size_t>(p)] = true;
    }

    Shape out_shape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<size_t>(i)] = in_shape[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    auto in_strides = row_major_strides(in_shape);
    std::vector<int64_t> eff(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) eff[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];

    const auto iv = t.data();
    std::vector<float> out(iv.size());
    strided_walk(out_shape, eff, [&](int64_t o, int64_t i) {
        out[static_cast<size_t>(o)] = iv[static_cast<size_t>(i)];
    });
    Tensor result = make_tensor(out_shape, std::move(out));

    if (grad_enabled() && t.requires_grad()) {
        Tensor tin = t, tout = result;
        record({t}, result, [tin, tout, out_shape, eff]() mutable {
            const auto g = tout.grad();
            auto gi = tin.grad_mutable();
            strided_walk(out_shape, eff, [&](int64_t o, int64_t i) {
                gi[static_cast<size_t>(i)] += g[static_cast<size_t>(o)];
            });
        });
    }
    return result;
}

Tensor reshape(const Tensor& t, Shape new_shape) {
    if (shape_numel(new_shape) != t.numel())
        throw DataError("reshape: element count mismatch " + shape_str(t.shape()) + " -> " +
                        shape_str(new_shape));
    std::vector<float> out(t.data().begin(), t.data().end());
    Tensor result = make_tensor(std::move(new_shape), std::move(out));
    if (grad_enabled() && t.requires_grad()) {
        Tensor tin = t, tout = result;
        record({t}, result, [tin, tout]() mutable {
            const auto g = tout.grad();
            auto gi = tin.grad_mutable();
            for (size_t i = 0; i < gi.size(); ++i) gi[i] += g[i];
        });
    }
    return result;
}

Tensor permute_reshape(const Tensor& t, const std::vector<int>& perm, Shape new_shape) {
    return reshape(permute(t, perm), std::move(new_shape));
}

Tensor roll(const Tensor& t, const std::vector<int64_t>& shifts, const std::vector<int>& axes) {
    if (shifts.size() != axes.size())
        throw DataError("roll: shifts/axes size mismatch");
    const Shape& shape = t.shape();
    const int r = t.rank();
    // Normalized per-axis shift; out[c] = in[c - shift mod ext].
    std::vector<int64_t> shift(static_cast<size_t>(r), 0);
    for (size_t i = 0; i < axes.size(); ++i) {
        int ax = normalize_axis(axes[i], r, "roll");
        int64_t ext = shape[static_cast<size_t>(ax)];
        shift[static_cast<size_t>(ax)] = ((shifts[i] % ext) + ext) % ext;
    }
    auto strides = row_major_strides(shape);
    const auto iv = t.data();
    std::vector<float> out(iv.size());
    std::vector<int64_t> coord(static_cast<size_t>(r), 0);
    const int64_t n = t.numel();
    for (int64_t o = 0; o < n; ++o) {
        int64_t src = 0;
        for (int d = 0; d < r; ++d) {
            int64_t ext = shape[static_cast<size_t>(d)];
            int64_t c = coord[static_cast<size_t>(d)] - shift[static_cast<size_t>(d)];
            if (c < 0) c += ext;
            src += c * strides[static_cast<size_t>(d)];
        }
        out[static_cast<size_t>(o)] = iv[static_cast<size_t>(src)];
        for (int d = r - 1; d >= 0; --d) {
            if (++coord[static_cast<size_t>(d)] < shape[static_cast<size_t>(d)]) break;
            coord[static_cast<size_t>(d)] = 0;
        }
    }
    Tensor result = make_tensor(shape, std::move(out));
    if (grad_enabled() && t.requires_grad()) {
        Tensor tin = t, tout = result;
        std::vector<int64_t> neg(shift.size());
        for (size_t i = 0; i < shift.size(); ++i) neg[i] = -shift[i];
        std::vector<int> all_axes(static_cast<size_t>(r));
        for (int i = 0; i < r; ++i) all_axes[static_cast<size_t>(i)] = i;
        record({t}, result, [tin, tout, neg, all_axes]() mutable {
            NoGradGuard ng;
            Tensor grad_in = roll(make_tensor(tout.shape(), {tout.grad().begin(), tout.grad().end()}),
                                  neg, all_axes);
            auto gi = tin.grad_mutable();
            const auto gv = grad_in.data();
            for (size_t i = 0; i < gi.size(); ++i) gi[i] += gv[i];
        });
    }
    return result;
}

Tensor softmax(const Tensor& t, int axis) {
    const int ax = normalize_axis(axis, t.rank(), "softmax");
    const auto iv = t.data();
    for (float v : iv)
        if (!std::isfinite(v)) throw NumericError("softmax: non-finite input value");

    const auto sp = split_axis(t.shape(), ax);
    std::vector<float> out(iv.size());
    for (int64_t o = 0; o < sp.outer; ++o) {
        for (int64_t in = 0; in < sp.inner; ++in) {
            const int64_t base = o * sp.ext * sp.inner + in;
            float mx = iv[static_cast<size_t>(base)];
            for (int64_t j = 1; j < sp.ext; ++j)
                mx = std::max(mx, iv[static_cast<size_t>(base + j * sp.inner)]);
            double denom = 0.0;
            for (int64_t j = 0; j < sp.ext; ++j) {
                double e = std::exp(static_cast<double>(iv[static_cast<size_t>(base + j * sp.inner)]) - mx);
                out[static_cast<size_t>(base + j * sp.inner)] = static_cast<float>(e);
                denom += e;
            }
            for (int64_t j = 0; j < sp.ext; ++j) {
                auto& v = out[static_cast<size_t>(base + j * sp.inner)];
                v = static_cast<float>(v / denom);
            }
        }
    }
    Tensor result = make_tensor(t.shape(), std::move(out));

    if (grad_enabled() && t.requires_grad()) {
        Tensor tin = t, tout = result;
        record({t}, result, [tin, tout, sp]() mutable {
            const auto g = tout.grad();
            const auto p = tout.data();
            auto gi = tin.grad_mutable();
            for (int64_t o = 0; o < sp.outer; ++o) {
                for (int64_t in = 0; in < sp.inner; ++in) {
                    const int64_t base = o * sp.ext * sp.inner + in;
                    double dot = 0.0;
                    for (int64_t j = 0; j < sp.ext; ++j) {
                        const auto idx = static_cast<size_t>(base + j * sp.inner);
                        dot += static_cast<double>(g[idx]) * p[idx];
                    }
                    for (int64_t j = 0; j < sp.ext; ++j) {
                        const auto idx = static_cast<size_t>(base + j * sp.inner);
                        gi[idx] += static_cast<float>(p[idx] * (g[idx] - dot));
                    }
                }
            }
        });
    }
    return result;
}

Tensor layer_norm(const Tensor& t, const Tensor& gamma, const Tensor& beta, int axis, float eps) {
    const int ax = normalize_axis(axis, t.rank(), "layer_norm");
    const int64_t ext = t.extent(ax);
    if (gamma.numel() != ext || beta.numel() != ext)
        throw DataError("layer_norm: gamma/beta length " + std::to_string(gamma.numel()) + "/" +
                        std::to_string(beta.numel()) + " does not match axis extent " +
                        std::to_string(ext));
    const auto sp = split_axis(t.shape(), ax);
    const auto iv = t.data();
    const auto gv = gamma.data();
    const auto bv = beta.data();
    std::vector<float> out(iv.size());
    for (int64_t o = 0; o < sp.outer; ++o) {
        for (int64_t in = 0; in < sp.inner; ++in) {
            const int64_t base = o * sp.ext * sp.inner + in;
            double mean = 0.0, sq = 0.0;
            for (int64_t j = 0; j < sp.ext; ++j) {
                double v = iv[static_cast<size_t>(base + j * sp.inner)];
                mean += v;
                sq += v * v;
            }
            mean /= static_cast<double>(sp.ext);
            double var = sq / static_cast<double>(sp.ext) - mean * mean;
            if (var < 0.0) var = 0.0;
            const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
            for (int64_t j = 0; j < sp.ext; ++j) {
                const auto idx = static_cast<size_t>(base + j * sp.inner);
                const double xhat = (static_cast<double>(iv[idx]) - mean) * inv;
                out[idx] = static_cast<float>(xhat * gv[static_cast<size_t>(j)] +
                                              bv[static_cast<size_t>(j)]);
            }
        }
    }
    Tensor result = make_tensor(t.shape(), std::move(out));

    if (grad_enabled() && (t.requires_grad() || gamma.requires_grad() || beta.requires_grad())) {
        Tensor tin = t, tg = gamma, tb = beta, tout = result;
        record({t, gamma, beta}, result, [tin, tg, tb, tout, sp, eps]() mutable {
            const auto g = tout.grad();
            const auto iv2 = tin.data();
            const auto gv2 = tg.data();
            std::vector<double> dgamma(static_cast<size_t>(sp.ext), 0.0);
            std::vector<double> dbeta(static_cast<size_t>(sp.ext), 0.0);
            const bool need_dx = tin.requires_grad();
            std::span<float> gi;
            if (need_dx) gi = tin.grad_mutable();
            for (int64_t o = 0; o < sp.outer; ++o) {
                for (int64_t in = 0; in < sp.inner; ++in) {
                    const int64_t base = o * sp.ext * sp.inner + in;
                    double mean = 0.0, sq = 0.0;
                    for (int64_t j = 0; j < sp.ext; ++j) {
                        double v = iv2[static_cast<size_t>(base + j * sp.inner)];
                        mean += v;
                        sq += v * v;
                    }
                    mean /= static_cast<double>(sp.ext);
                    double var = sq / static_cast<double>(sp.ext) - mean * mean;
                    if (var < 0.0) var = 0.0;
                    const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
                    double m1 = 0.0, m2 = 0.0;
                    for (int64_t j = 0; j < sp.ext; ++j) {
                        const auto idx = static_cast<size_t>(base + j * sp.inner);
                        const double xhat = (static_cast<double>(iv2[idx]) - mean) * inv;
                        const double gy = static_cast<double>(g[idx]) * gv2[static_cast<size_t>(j)];
                        dgamma[static_cast<size_t>(j)] += static_cast<double>(g[idx]) * xhat;
                        dbeta[static_cast<size_t>(j)] += g[idx];
                        m1 += gy;
                        m2 += gy * xhat;
                    }
                    if (need_dx) {
                        m1 /= static_cast<double>(sp.ext);
                        m2 /= static_cast<double>(sp.ext);
                        for (int64_t j = 0; j < sp.ext; ++j) {
                            const auto idx = static_cast<size_t>(base + j * sp.inner);
                            const double xhat = (static_cast<double>(iv2[idx]) - mean) * inv;
                            const double gy = static_cast<double>(g[idx]) * gv2[static_cast<size_t>(j)];
                            gi[idx] += static_cast<float>((gy - m1 - xhat * m2) * inv);
                        }
                    }
                }
            }
            if (tg.requires_grad()) {
                auto gg = tg.grad_mutable();
                for (int64_t j = 0; j < sp.ext; ++j)
                    gg[static_cast<size_t>(j)] += static_cast<float>(dgamma[static_cast<size_t>(j)]);
            }
            if (tb.requires_grad()) {
                auto gb = tb.grad_mutable();
                for (int64_t j = 0; j < sp.ext; ++j)
                    gb[static_cast<size_t>(j)] += static_cast<float>(dbeta[static_cast<size_t>(j)]);
            }
        });
    }
    return result;
}

namespace {
inline double gauss_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }
inline double gauss_pdf(double x) {
    return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}
} // namespace

Tensor gelu(const Tensor& t) {
    const auto iv = t.data();
    std::vector<float> out(iv.size());
    for (size_t i = 0; i < out.size(); ++i) {
        const double x = iv[i];
        out[i] = static_cast<float>(x * gauss_cdf(x));
    }
    Tensor result = make_tensor(t.shape(), std::move(out));
    if (grad_enabled() && t.requires_grad()) {
        Tensor tin = t, tout = result;
        record({t}, result, [tin, tout]() mutable {
            const auto g = tout.grad();
            const auto iv2 = tin.data();
            auto gi = tin.grad_mutable();
            for (size_t i = 0; i < gi.size(); ++i) {
                const double x = iv2[i];
                gi[i] += static_cast<float>(g[i] * (gauss_cdf(x) + x * gauss_pdf(x)));
            }
        });
    }
    return result;
}

namespace {

struct ConvDims {
    int64_t B, Cin, Cout;
    std::array<int64_t, 3> in, k, out, s, p;
};

ConvDims conv_dims(const Tensor& t, const Tensor& kernel, const std::array<int64_t, 3>& stride,
                   const std::array<int64_t, 3>& padding, bool transposed) {
    if (t.rank() != 5 || kernel.rank() != 5)
        throw DataError("conv3d: expected rank-5 input and kernel, got " + shape_str(t.shape()) +
                        " and " + shape_str(kernel.shape()));
    ConvDims d;
    d.B = t.extent(0);
    d.in = {t.extent(2), t.extent(3), t.extent(4)};
    d.s = stride;
    d.p = padding;
    d.k = {kernel.extent(2), kernel.extent(3), kernel.extent(4)};
    if (transposed) {
        d.Cin = kernel.extent(0);
        d.Cout = kernel.extent(1);
    } else {
        d.Cout = kernel.extent(0);
        d.Cin = kernel.extent(1);
    }
    if (t.extent(1) != d.Cin)
        throw DataError("conv3d: input channels " + std::to_string(t.extent(1)) +
                        " do not match kernel " + shape_str(kernel.shape()));
    for (int a = 0; a < 3; ++a) {
        if (d.s[static_cast<size_t>(a)] < 1) throw DataError("conv3d: stride must be positive");
        int64_t o;
        bool valid;
        if (transposed) {
            o = (d.in[static_cast<size_t>(a)] - 1) * d.s[static_cast<size_t>(a)] +
                d.k[static_cast<size_t>(a)] - 2 * d.p[static_cast<size_t>(a)];
            valid = o > 0;
        } else {
            const int64_t padded = d.in[static_cast<size_t>(a)] + 2 * d.p[static_cast<size_t>(a)];
            o = (padded - d.k[static_cast<size_t>(a)]) / d.s[static_cast<size_t>(a)] + 1;
            valid = padded >= d.k[static_cast<size_t>(a)] && o > 0;
        }
        if (!valid)
            throw DataError("conv3d: output extent non-positive along axis " + std::to_string(a) +
                            " for input " + shape_str(t.shape()) + ", kernel " +
                            shape_str(kernel.shape()));
        d.out[static_cast<size_t>(a)] = o;
    }
    return d;
}

} // namespace

Tensor conv3d(const Tensor& t, const Tensor& kernel, const std::array<int64_t, 3>& stride,
              const std::array<int64_t, 3>& padding) {
    const ConvDims d = conv_dims(t, kernel, stride, padding, false);
    const auto [H, W, D] = d.in;
    const auto [kh, kw, kd] = d.k;
    const auto [Ho, Wo, Do] = d.out;
    const auto [sh, sw, sd] = d.s;
    const auto [ph, pw, pd] = d.p;

    const float* x = t.data().data();
    const float* kp = kernel.data().data();
    std::vector<float> out(static_cast<size_t>(d.B * d.Cout * Ho * Wo * Do));
    float* y = out.data();

    parallel_for(d.B * d.Cout, [&](int64_t lo_idx, int64_t hi_idx) {
        for (int64_t bc = lo_idx; bc < hi_idx; ++bc) {
            const int64_t b = bc / d.Cout, co = bc % d.Cout;
            for (int64_t ho = 0; ho < Ho; ++ho)
                for (int64_t wo = 0; wo < Wo; ++wo)
                    for (int64_t dd = 0; dd < Do; ++dd) {
                        double acc = 0.0;
                        for (int64_t ci = 0; ci < d.Cin; ++ci) {
                            const float* xp = x + ((b * d.Cin + ci) * H) * W * D;
                            const float* kk = kp + ((co * d.Cin + ci) * kh) * kw * kd;
                            for (int64_t i = 0; i < kh; ++i) {
                                const int64_t h = ho * sh - ph + i;
                                if (h < 0 || h >= H) continue;
                                for (int64_t j = 0; j < kw; ++j) {
                                    const int64_t w = wo * sw - pw + j;
                                    if (w < 0 || w >= W) continue;
                                    for (int64_t l = 0; l < kd; ++l) {
                                        const int64_t dz = dd * sd - pd + l;
                                        if (dz < 0 || dz >= D) continue;
                                        acc += static_cast<double>(xp[(h * W + w) * D + dz]) *
                                               kk[(i * kw + j) * kd + l];
                                    }
                                }
                            }
                        }
                        y[(((b * d.Cout + co) * Ho + ho) * Wo + wo) * Do + dd] =
                            static_cast<float>(acc);
                    }
        }
    });
    Tensor result = make_tensor({d.B, d.Cout, Ho, Wo, Do}, std::move(out));

    if (grad_enabled() && (t.requires_grad() || kernel.requires_grad())) {
        Tensor tin = t, tk = kernel, tout = result;
        record({t, kernel}, result, [tin, tk, tout, d]() mutable {
            const auto [H, W, D] = d.in;
            const auto [kh, kw, kd] = d.k;
            const auto [Ho, Wo, Do] = d.out;
            const auto [sh, sw, sd] = d.s;
            const auto [ph, pw, pd] = d.p;
            const float* g = tout.grad().data();
            const float* x = tin.data().data();
            const float* kp = tk.data().data();
            if (tin.requires_grad()) {
                float* gx = tin.grad_mutable().data();
                parallel_for(d.B * d.Cin, [&](int64_t lo_idx, int64_t hi_idx) {
                    for (int64_t bc = lo_idx; bc < hi_idx; ++bc) {
                        const int64_t b = bc / d.Cin, ci = bc % d.Cin;
                        for (int64_t h = 0; h < H; ++h)
                            for (int64_t w = 0; w < W; ++w)
                                for (int64_t dz = 0; dz < D; ++dz) {
                                    double acc = 0.0;
                                    for (int64_t co = 0; co < d.Cout; ++co) {
                                        const float* gp = g + ((b * d.Cout + co) * Ho) * Wo * Do;
                                        const float* kk = kp + ((co * d.Cin + ci) * kh) * kw * kd;
                                        for (int64_t i = 0; i < kh; ++i) {
                                            const int64_t num_h = h + ph - i;
                                            if (num_h < 0 || num_h % sh) continue;
                                            const int64_t ho = num_h / sh;
                                            if (ho >= Ho) continue;
                                            for (int64_t j = 0; j < kw; ++j) {
                                                const int64_t num_w = w + pw - j;
                                                if (num_w < 0 || num_w % sw) continue;
                                                const int64_t wo = num_w / sw;
                                                if (wo >= Wo) continue;
                                                for (int64_t l = 0; l < kd; ++l) {
                                                    const int64_t num_d = dz + pd - l;
                                                    if (num_d < 0 || num_d % sd) continue;
                                                    const int64_t dd = num_d / sd;
                                                    if (dd >= Do) continue;
                                                    acc += static_cast<double>(
                                                               gp[(ho * Wo + wo) * Do + dd]) *
                                                           kk[(i * kw + j) * kd + l];
                                                }
                                            }
                                        }
                                    }
                                    gx[((bc * H + h) * W + w) * D + dz] += static_cast<float>(acc);
                                }
                    }
                });
            }
            if (tk.requires_grad()) {
                float* gk = tk.grad_mutable().data();
                parallel_for(d.Cout * d.Cin, [&](int64_t lo_idx, int64_t hi_idx) {
                    for (int64_t cc = lo_idx; cc < hi_idx; ++cc) {
                        const int64_t co = cc / d.Cin, ci = cc % d.Cin;
                        for (int64_t i = 0; i < kh; ++i)
                            for (int64_t j = 0; j < kw; ++j)
                                for (int64_t l = 0; l < kd; ++l) {
                                    double acc = 0.0;
                                    for (int64_t b = 0; b < d.B; ++b) {
                                        const float* gp = g + ((b * d.Cout + co) * Ho) * Wo * Do;
                                        const float* xp = x + ((b * d.Cin + ci) * H) * W * D;
                                        for (int64_t ho = 0; ho < Ho; ++ho) {
                                            const int64_t h = ho * sh - ph + i;
                                            if (h < 0 || h >= H) continue;
                                            for (int64_t wo = 0; wo < Wo; ++wo) {
                                                const int64_t w = wo * sw - pw + j;
                                                if (w < 0 || w >= W) continue;
                                                for (int64_t dd = 0; dd < Do; ++dd) {
                                                    const int64_t dz = dd * sd - pd + l;
                                                    if (dz < 0 || dz >= D) continue;
                                                    acc += static_cast<double>(
                                                               gp[(ho * Wo + wo) * Do + dd]) *
                                                           xp[(h * W + w) * D + dz];
                                                }
                                            }
                                        }
                                    }
                                    gk[(cc * kh + i) * kw * kd + j * kd + l] +=
                                        static_cast<float>(acc);
                                }
                    }
                });
            }
        });
    }
    return result;
}

Tensor conv3d_transpose(const Tensor& t, const Tensor& kernel,
                        const std::array<int64_t, 3>& stride,
                        const std::array<int64_t, 3>& padding) {
    const ConvDims d = conv_dims(t, kernel, stride, padding, true);
    const auto [H, W, D] = d.in;
    const auto [kh, kw, kd] = d.k;
    const auto [Ho, Wo, Do] = d.out;
    const auto [sh, sw, sd] = d.s;
    const auto [ph, pw, pd] = d.p;

    const float* x = t.data().data();
    const float* kp = kernel.data().data();
    std::vector<float> out(static_cast<size_t>(d.B * d.Cout * Ho * Wo * Do));
    float* y = out.data();

    parallel_for(d.B * d.Cout, [&](int64_t lo_idx, int64_t hi_idx) {
        for (int64_t bc = lo_idx; bc < hi_idx; ++bc) {
            const int64_t b = bc / d.Cout, co = bc % d.Cout;
            for (int64_t ho = 0; ho < Ho; ++ho)
                for (int64_t wo = 0; wo < Wo; ++wo)
                    for (int64_t dd = 0; dd < Do; ++dd) {
                        double acc = 0.0;
                        for (int64_t ci = 0; ci < d.Cin; ++ci) {
                            const float* xp = x + ((b * d.Cin + ci) * H) * W * D;
                            const float* kk = kp + ((ci * d.Cout + co) * kh) * kw * kd;
                            for (int64_t i = 0; i < kh; ++i) {
                                const int64_t num_h = ho + ph - i;
                                if (num_h < 0 || num_h % sh) continue;
                                const int64_t h = num_h / sh;
                                if (h >= H) continue;
                                for (int64_t j = 0; j < kw; ++j) {
                                    const int64_t num_w = wo + pw - j;
                                    if (num_w < 0 || num_w % sw) continue;
                                    const int64_t w = num_w / sw;
                                    if (w >= W) continue;
                                    for (int64_t l = 0; l < kd; ++l) {
                                        const int64_t num_d = dd + pd - l;
                                        if (num_d < 0 || num_d % sd) continue;
                                        const int64_t dz = num_d / sd;
                                        if (dz >= D) continue;
                                        acc += static_cast<double>(xp[(h * W + w) * D + dz]) *
                                               kk[(i * kw + j) * kd + l];
                                    }
                                }
                            }
                        }
                        y[(((b * d.Cout + co) * Ho + ho) * Wo + wo) * Do + dd] =
                            static_cast<float>(acc);
                    }
        }
    });
    Tensor result = make_tensor({d.B, d.Cout, Ho, Wo, Do}, std::move(out));

    if (grad_enabled() && (t.requires_grad() || kernel.requires_grad())) {
        Tensor tin = t, tk = kernel, tout = result;
        record({t, kernel}, result, [tin, tk, tout, d]() mutable {
            const auto [H, W, D] = d.in;
            const auto [kh, kw, kd] = d.k;
            const auto [Ho, Wo, Do] = d.out;
            const auto [sh, sw, sd] = d.s;
            const auto [ph, pw, pd] = d.p;
            const float* g = tout.grad().data();
            const float* x = tin.data().data();
            const float* kp = tk.data().data();
            if (tin.requires_grad()) {
                float* gx = tin.grad_mutable().data();
                parallel_for(d.B * d.Cin, [&](int64_t lo_idx, int64_t hi_idx) {
                    for (int64_t bc = lo_idx; bc < hi_idx; ++bc) {
                        const int64_t b = bc / d.Cin, ci = bc % d.Cin;
                        for (int64_t h = 0; h < H; ++h)
                            for (int64_t w = 0; w < W; ++w)
                                for (int64_t dz = 0; dz < D; ++dz) {
                                    double acc = 0.0;
                                    for (int64_t co = 0; co < d.Cout; ++co) {
                                        const float* gp = g + ((b * d.Cout + co) * Ho) * Wo * Do;
                                        const float* kk = kp + ((ci * d.Cout + co) * kh) * kw * kd;
                                        for (int64_t i = 0; i < kh; ++i) {
                                            const int64_t ho = h * sh - ph + i;
                                            if (ho < 0 || ho >= Ho) continue;
                                            for (int64_t j = 0; j < kw; ++j) {
                                                const int64_t wo = w * sw - pw + j;
                                                if (wo < 0 || wo >= Wo) continue;
                                                for (int64_t l = 0; l < kd; ++l) {
                                                    const int64_t dd = dz * sd - pd + l;
                                                    if (dd < 0 || dd >= Do) continue;
                                                    acc += static_cast<double>(
                                                               gp[(ho * Wo + wo) * Do + dd]) *
                                                           kk[(i * kw + j) * kd + l];
                                                }
                                            }
                                        }
                                    }
                                    gx[((bc * H + h) * W + w) * D + dz] += static_cast<float>(acc);
                                }
                    }
                });
            }
            if (tk.requires_grad()) {
                float* gk = tk.grad_mutable().data();
                parallel_for(d.Cin * d.Cout, [&](int64_t lo_idx, int64_t hi_idx) {
                    for (int64_t cc = lo_idx; cc < hi_idx; ++cc) {
                        const int64_t ci = cc / d.Cout, co = cc % d.Cout;
                        for (int64_t i = 0; i < kh; ++i)
                            for (int64_t j = 0; j < kw; ++j)
                                for (int64_t l = 0; l < kd; ++l) {
                                    double acc = 0.0;
                                    for (int64_t b = 0; b < d.B; ++b) {
                                        const float* gp = g + ((b * d.Cout + co) * Ho) * Wo * Do;
                                        const float* xp = x + ((b * d.Cin + ci) * H) * W * D;
                                        for (int64_t h = 0; h < H; ++h) {
                                            const int64_t ho = h * sh - ph + i;
                                            if (ho < 0 || ho >= Ho) continue;
                                            for (int64_t w = 0; w < W; ++w) {
                                                const int64_t wo = w * sw - pw + j;
                                                if (wo < 0 || wo >= Wo) continue;
                                                for (int64_t dz = 0; dz < D; ++dz) {
                                                    const int64_t dd = dz * sd - pd + l;
                                                    if (dd < 0 || dd >= Do) continue;
                                                    acc += static_cast<double>(
                                                               gp[(ho * Wo + wo) * Do + dd]) *
                                                           xp[(h * W + w) * D + dz];
                                                }
                                            }
                                        }
                                    }
                                    gk[(cc * kh + i) * kw * kd + j * kd + l] +=
                                        static_cast<float>(acc);
                                }
                    }
                });
            }
        });
    }
    return result;
}

Tensor sum(const Tensor& t) {
    const auto iv = t.data();
    double acc = 0.0;
    for (float v : iv) acc += v;
    Tensor result = make_tensor({1}, {static_cast<float>(acc)});
    result.impl()->exact_scalar = acc;
    if (grad_enabled() && t.requires_grad()) {
        Tensor tin = t, tout = result;
        record({t}, result, [tin, tout]() mutable {
            const float g = tout.grad()[0];
            auto gi = tin.grad_mutable();
            for (auto& v : gi) v += g;
        });
    }
    return result;
}

Tensor record_custom_op(const std::vector<Tensor>& inputs, Tensor output,
                        std::function<void()> backward_fn) {
    if (grad_enabled() && any_requires_grad(inputs))
        record(inputs, output, std::move(backward_fn));
    return output;
}

bool tape_would_record(const std::vector<Tensor>& inputs) {
    return grad_enabled() && any_requires_grad(inputs);
}

size_t tape_size() { return tape().size(); }

void tape_clear() { tape().clear(); }

void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        tape().clear();
        throw DataError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    auto& entries = tape();

    // Leaves are tape inputs that no tape entry produced; their gradients
    // start from zero so the post-state is exactly dLoss/dParam.
    std::unordered_set<detail::TensorImpl*> produced;
    produced.reserve(entries.size());
    for (const auto& e : entries) produced.insert(e.output.get());
    std::unordered_set<detail::TensorImpl*> zeroed;
    for (const auto& e : entries)
        for (const auto& in : e.inputs)
            if (in->requires_grad && !produced.count(in.get()) && zeroed.insert(in.get()).second)
                in->grad.assign(in->data.size(), 0.0f);

    loss.impl()->grad.assign(1, 1.0f);
    for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
        if (it->output->grad.empty()) continue; // not reachable from the loss
        it->backward_fn();
    }
    entries.clear();
}

} // namespace vmixer
