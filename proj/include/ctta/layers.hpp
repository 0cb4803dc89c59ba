#pragma once

#include <cmath>
#include <vector>

#include "ctta/errors.hpp"
#include "ctta/graph.hpp"
#include "ctta/tensor.hpp"

namespace ctta {

struct BatchNormState {
    std::vector<double> gamma, beta, running_mean, running_var;
    double momentum = 0.1;
    double epsilon = 1e-5;
    BnMode mode = BnMode::RunningStats;
};

// Standalone BN over a B×F batch. TrainStats normalizes by batch moments and
// blends them into the running statistics; BatchStats normalizes by batch
// moments and overwrites the running statistics; RunningStats is pure.
inline Value batchnorm_forward(BatchNormState& state, const Value& x) {
    if (x.shape.size() != 2) throw ShapeMismatchError("batchnorm_forward: expected a 2-d batch");
    const std::int64_t rows = x.shape[0], f = x.shape[1];
    const auto fs = static_cast<std::size_t>(f);
    if (state.gamma.size() != fs || state.beta.size() != fs || state.running_mean.size() != fs ||
        state.running_var.size() != fs)
        throw ShapeMismatchError("batchnorm_forward: state width mismatch");
    if (state.epsilon <= 0.0) throw InvalidSpecError("batchnorm_forward: epsilon must be positive");
    for (double v : state.running_var)
        if (v < 0.0) throw InvalidSpecError("batchnorm_forward: negative running variance");

    std::vector<double> mean(fs), var(fs);
    if (state.mode == BnMode::RunningStats) {
        mean = state.running_mean;
        var = state.running_var;
    } else {
        if (rows < 2) throw BatchTooSmallError("batchnorm_forward: batch statistics need at least 2 rows");
        for (std::int64_t c = 0; c < f; ++c) {
            double m = 0.0;
            for (std::int64_t r = 0; r < rows; ++r) m += x.at(r, c);
            m /= static_cast<double>(rows);
            double v = 0.0;
            for (std::int64_t r = 0; r < rows; ++r) {
                const double d = x.at(r, c) - m;
                v += d * d;
            }
            v /= static_cast<double>(rows);  // biased
            mean[static_cast<std::size_t>(c)] = m;
            var[static_cast<std::size_t>(c)] = v;
        }
        if (state.mode == BnMode::TrainStats) {
            for (std::size_t c = 0; c < fs; ++c) {
                state.running_mean[c] = (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mean[c];
                state.running_var[c] = (1.0 - state.momentum) * state.running_var[c] + state.momentum * var[c];
            }
        } else {
            state.running_mean = mean;
            state.running_var = var;
        }
    }

    Value out = make_matrix(rows, f);
    for (std::int64_t c = 0; c < f; ++c) {
        const auto cc = static_cast<std::size_t>(c);
        const double inv = 1.0 / std::sqrt(var[cc] + state.epsilon);
        for (std::int64_t r = 0; r < rows; ++r)
            out.at(r, c) = state.gamma[cc] * (x.at(r, c) - mean[cc]) * inv + state.beta[cc];
    }
    require_finite(out, "batchnorm_forward output");
    return out;
}

}  // namespace ctta
