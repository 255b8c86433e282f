#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <vector>

namespace c3po {

struct NelderMeadOptions {
    double reflection = 1.0;
    double expansion = 2.0;
    double contraction = 0.5;
    double shrink = 0.5;
    double diameter_tol = 1e-8;
    int max_iter = 2000;
};

struct NelderMeadResult {
    std::vector<double> x;
    double fx = 0.0;
    int iterations = 0;
    bool converged = false;
};

/// Minimises f starting from an axis-aligned simplex around x0.
inline NelderMeadResult nelder_mead(const std::function<double(const std::vector<double> &)> &f,
                                    const std::vector<double> &x0, const std::vector<double> &step,
                                    const NelderMeadOptions &opt = {}) {
    const std::size_t n = x0.size();
    std::vector<std::vector<double>> x(n + 1, x0);
    for (std::size_t i = 0; i < n; ++i) x[i + 1][i] += step[i];
    std::vector<double> fx(n + 1);
    for (std::size_t i = 0; i <= n; ++i) fx[i] = f(x[i]);

    std::vector<std::size_t> order(n + 1);
    auto affine = [n](const std::vector<double> &a, const std::vector<double> &b, double t) {
        std::vector<double> out(n);
        for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + t * (b[i] - a[i]);
        return out;
    };

    NelderMeadResult res;
    int iter = 0;
    for (; iter < opt.max_iter; ++iter) {
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return fx[a] < fx[b]; });
        {
            std::vector<std::vector<double>> xs(n + 1);
            std::vector<double> fs(n + 1);
            for (std::size_t i = 0; i <= n; ++i) {
                xs[i] = std::move(x[order[i]]);
                fs[i] = fx[order[i]];
            }
            x = std::move(xs);
            fx = std::move(fs);
        }

        double diameter = 0.0;
        for (std::size_t i = 1; i <= n; ++i) {
            double d2 = 0.0;
            for (std::size_t j = 0; j < n; ++j) d2 += (x[i][j] - x[0][j]) * (x[i][j] - x[0][j]);
            diameter = std::max(diameter, std::sqrt(d2));
        }
        if (diameter < opt.diameter_tol) {
            res.converged = true;
            break;
        }

        std::vector<double> centroid(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) centroid[j] += x[i][j] / static_cast<double>(n);
        }

        const auto xr = affine(centroid, x[n], -opt.reflection);
        const double fr = f(xr);
        if (fr < fx[0]) {
            const auto xe = affine(centroid, xr, opt.expansion);
            const double fe = f(xe);
            if (fe < fr) {
                x[n] = xe;
                fx[n] = fe;
            } else {
                x[n] = xr;
                fx[n] = fr;
            }
        } else if (fr < fx[n - 1]) {
            x[n] = xr;
            fx[n] = fr;
        } else {
            const bool outside = fr < fx[n];
            const auto xc = outside ? affine(centroid, xr, opt.contraction) : affine(centroid, x[n], opt.contraction);
            const double fc = f(xc);
            if (fc < std::min(fr, fx[n])) {
                x[n] = xc;
                fx[n] = fc;
            } else {
                for (std::size_t i = 1; i <= n; ++i) {
                    x[i] = affine(x[0], x[i], opt.shrink);
                    fx[i] = f(x[i]);
                }
            }
        }
    }

    const auto best = static_cast<std::size_t>(std::min_element(fx.begin(), fx.end()) - fx.begin());
    res.x = x[best];
    res.fx = fx[best];
    res.iterations = iter;
    return res;
}

}  // namespace c3po
