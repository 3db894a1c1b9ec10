#include "vmixer/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace vmixer {

double finite_diff_gradcheck(const std::function<Tensor()>& graph_fn,
                             const std::function<double()>& value_fn, std::span<Tensor> params,
                             const GradcheckOptions& opts) {
    if (opts.eps <= 0.0) throw DataError("gradcheck: eps must be positive");

    for (auto& p : params) p.zero_grad();
    tape_clear();
    Tensor loss = graph_fn();
    backward(loss);

    std::vector<std::vector<float>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());

    Rng rng(opts.seed);
    double max_rel = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi];
        const int64_t n = p.numel();
        std::vector<int64_t> coords;
        if (n <= opts.max_coords_per_param) {
            coords.resize(static_cast<size_t>(n));
            std::iota(coords.begin(), coords.end(), 0);
        } else if (opts.prefer_large_grads) {
            coords.resize(static_cast<size_t>(n));
            std::iota(coords.begin(), coords.end(), 0);
            const auto& a = analytic[pi];
            std::stable_sort(coords.begin(), coords.end(), [&a](int64_t x, int64_t y) {
                return std::abs(a[static_cast<size_t>(x)]) > std::abs(a[static_cast<size_t>(y)]);
            });
            coords.resize(static_cast<size_t>(opts.max_coords_per_param));
        } else {
            for (int i = 0; i < opts.max_coords_per_param; ++i)
                coords.push_back(rng.uniform_int(0, n - 1));
        }

        auto data = p.mutable_data();
        for (int64_t c : coords) {
            const size_t ci = static_cast<size_t>(c);
            const float orig = data[ci];

            double loss_plus, loss_minus, actual_step;
            {
                NoGradGuard ng;
                data[ci] = static_cast<float>(static_cast<double>(orig) + opts.eps);
                const double xp = data[ci];
                loss_plus = value_fn();
                data[ci] = static_cast<float>(static_cast<double>(orig) - opts.eps);
                const double xm = data[ci];
                loss_minus = value_fn();
                data[ci] = orig;
                actual_step = xp - xm;
            }
            const double numeric = (loss_plus - loss_minus) / actual_step;
            const double a = analytic[pi][ci];
            const double rel =
                std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

double finite_diff_gradcheck(const std::function<Tensor()>& f, std::span<Tensor> params,
                             const GradcheckOptions& opts) {
    return finite_diff_gradcheck(f, [&f]() { return f().item_f64(); }, params, opts);
}

double central_difference(const std::function<double(double)>& f, double x, double eps) {
    return (f(x + eps) - f(x - eps)) / (2.0 * eps);
}

} // namespace vmixer
