#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "ctta/errors.hpp"

namespace ctta {

// Dense 64-bit float array in row-major order. Scalars have an empty shape.
struct Value {
    std::vector<std::int64_t> shape;
    std::vector<double> data;

    Value() = default;
    Value(std::vector<std::int64_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {}

    static Value zeros(std::vector<std::int64_t> s) {
        std::size_t n = 1;
        for (auto d : s) n *= static_cast<std::size_t>(d);
        return Value(std::move(s), std::vector<double>(n, 0.0));
    }

    static Value scalar(double x) { return Value({}, {x}); }

    std::size_t numel() const { return data.size(); }
    bool is_scalar() const { return data.size() == 1 && shape.empty(); }

    std::int64_t rows() const { return shape.size() == 2 ? shape[0] : (shape.empty() ? 1 : shape[0]); }
    std::int64_t cols() const { return shape.size() == 2 ? shape[1] : 1; }

    double& at(std::int64_t r, std::int64_t c) { return data[static_cast<std::size_t>(r * shape[1] + c)]; }
    double at(std::int64_t r, std::int64_t c) const { return data[static_cast<std::size_t>(r * shape[1] + c)]; }

    bool same_shape(const Value& o) const { return shape == o.shape; }
};

inline Value make_matrix(std::int64_t rows, std::int64_t cols) { return Value::zeros({rows, cols}); }

inline Value make_vector(std::int64_t n) { return Value::zeros({n}); }

inline bool all_finite(const std::vector<double>& v) {
    for (double x : v) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

inline void require_finite(const Value& v, const char* what) {
    if (!all_finite(v.data)) throw NonFiniteError(std::string("non-finite values in ") + what);
}

}  // namespace ctta
