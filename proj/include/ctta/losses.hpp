#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "ctta/errors.hpp"
#include "ctta/graph.hpp"
#include "ctta/tensor.hpp"

namespace ctta {

inline NodeId cross_entropy_node(Graph& g, NodeId logits, std::vector<int> labels) {
    return g.nll_loss(g.log_softmax(logits), std::move(labels));
}

inline NodeId entropy_node(Graph& g, NodeId logits) { return g.entropy_mean(logits); }

// Graph-free evaluation twins of the loss nodes, used for trace recording
// and oracle arithmetic.

inline std::vector<double> row_log_softmax(const double* row, std::int64_t cols) {
    double mx = row[0];
    for (std::int64_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    double se = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) se += std::exp(row[c] - mx);
    const double lse = mx + std::log(se);
    std::vector<double> out(static_cast<std::size_t>(cols));
    for (std::int64_t c = 0; c < cols; ++c) out[static_cast<std::size_t>(c)] = row[c] - lse;
    return out;
}

inline double entropy_of_logits(const Value& logits) {
    if (logits.shape.size() != 2) throw ShapeMismatchError("entropy_of_logits: expected a 2-d batch");
    const std::int64_t rows = logits.shape[0], cols = logits.shape[1];
    double total = 0.0;
    for (std::int64_t r = 0; r < rows; ++r) {
        const auto lp = row_log_softmax(logits.data.data() + r * cols, cols);
        double h = 0.0;
        for (double v : lp) h -= std::exp(v) * v;
        total += h;
    }
    return total / static_cast<double>(rows);
}

inline double cross_entropy_of_logits(const Value& logits, const std::vector<int>& labels) {
    if (logits.shape.size() != 2) throw ShapeMismatchError("cross_entropy_of_logits: expected a 2-d batch");
    const std::int64_t rows = logits.shape[0], cols = logits.shape[1];
    if (static_cast<std::int64_t>(labels.size()) != rows)
        throw ShapeMismatchError("cross_entropy_of_logits: one label per row required");
    double total = 0.0;
    for (std::int64_t r = 0; r < rows; ++r) {
        const int y = labels[static_cast<std::size_t>(r)];
        if (y < 0 || y >= cols) throw LabelOutOfRangeError("cross_entropy_of_logits: label outside class range");
        total -= row_log_softmax(logits.data.data() + r * cols, cols)[static_cast<std::size_t>(y)];
    }
    return total / static_cast<double>(rows);
}

// Ties break toward the lowest index.
inline std::vector<int> argmax_rows(const Value& logits) {
    if (logits.shape.size() != 2) throw ShapeMismatchError("argmax_rows: expected a 2-d batch");
    const std::int64_t rows = logits.shape[0], cols = logits.shape[1];
    std::vector<int> out(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        int best = 0;
        double bv = logits.at(r, 0);
        for (std::int64_t c = 1; c < cols; ++c) {
            if (logits.at(r, c) > bv) {
                bv = logits.at(r, c);
                best = static_cast<int>(c);
            }
        }
        out[static_cast<std::size_t>(r)] = best;
    }
    return out;
}

}  // namespace ctta
