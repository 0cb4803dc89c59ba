#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "ctta/errors.hpp"

namespace ctta {

using ScalarFn = std::function<double(const std::vector<double>&)>;
using GradFn = std::function<std::vector<double>(const std::vector<double>&)>;

// Central differences, one probe pair per coordinate.
inline std::vector<double> finite_diff_grad(const ScalarFn& f, std::vector<double> point, double eps = 1e-5) {
    std::vector<double> g(point.size());
    for (std::size_t i = 0; i < point.size(); ++i) {
        const double saved = point[i];
        point[i] = saved + eps;
        const double hi = f(point);
        point[i] = saved - eps;
        const double lo = f(point);
        point[i] = saved;
        g[i] = (hi - lo) / (2.0 * eps);
    }
    return g;
}

// Hessian-vector product by differencing the gradient along the normalized
// direction, then restoring the magnitude of v.
inline std::vector<double> hvp_fd(const GradFn& grad_fn, const std::vector<double>& point,
                                  const std::vector<double>& v, double eps = 1e-5) {
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm == 0.0) throw ZeroVectorError("hvp_fd: direction has zero norm");

    std::vector<double> hi_pt(point), lo_pt(point);
    for (std::size_t i = 0; i < point.size(); ++i) {
        const double step = eps * v[i] / norm;
        hi_pt[i] += step;
        lo_pt[i] -= step;
    }
    const std::vector<double> ghi = grad_fn(hi_pt);
    const std::vector<double> glo = grad_fn(lo_pt);
    std::vector<double> out(point.size());
    for (std::size_t i = 0; i < point.size(); ++i) out[i] = (ghi[i] - glo[i]) * norm / (2.0 * eps);
    return out;
}

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, rel_err(a[i], b[i]));
    return worst;
}

}  // namespace ctta
