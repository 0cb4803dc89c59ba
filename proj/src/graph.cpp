#include "ctta/graph.hpp"

#include <algorithm>
#include <cmath>

#include "ctta/errors.hpp"

namespace ctta {

namespace {

std::string op_tag(OpKind k) {
    switch (k) {
        case OpKind::Param: return "param";
        case OpKind::Input: return "input";
        case OpKind::MatMul: return "matmul";
        case OpKind::AddRow: return "add_row";
        case OpKind::Add: return "add";
        case OpKind::Mul: return "mul";
        case OpKind::Scale: return "scale";
        case OpKind::Relu: return "relu";
        case OpKind::LogSoftmax: return "log_softmax";
        case OpKind::BatchNorm: return "batch_norm";
        case OpKind::SumAll: return "sum_all";
        case OpKind::MeanAll: return "mean_all";
        case OpKind::NllLoss: return "nll_loss";
        case OpKind::EntropyMean: return "entropy_mean";
    }
    return "?";
}

void require_2d(const Value& v, const char* what) {
    if (v.shape.size() != 2) throw ShapeMismatchError(std::string(what) + ": expected a 2-d array");
}

}  // namespace

NodeId Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    const auto id = static_cast<NodeId>(nodes_.size() - 1);
    compute(static_cast<std::size_t>(id));
    check_finite(static_cast<std::size_t>(id));
    return id;
}

NodeId Graph::param(Value v) {
    require_finite(v, "param leaf");
    Node n;
    n.kind = OpKind::Param;
    n.out = std::move(v);
    nodes_.push_back(std::move(n));
    const auto id = static_cast<NodeId>(nodes_.size() - 1);
    params_.push_back(id);
    return id;
}

NodeId Graph::input(Value v) {
    require_finite(v, "input leaf");
    Node n;
    n.kind = OpKind::Input;
    n.out = std::move(v);
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

void Graph::bind_param(NodeId id, Value v) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.kind != OpKind::Param) throw InvalidSpecError("bind_param: node is not a parameter leaf");
    if (n.out.shape != v.shape) throw ShapeMismatchError("bind_param: shape changed");
    require_finite(v, "param leaf");
    n.out = std::move(v);
}

void Graph::bind_input(NodeId id, Value v) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.kind != OpKind::Input) throw InvalidSpecError("bind_input: node is not an input leaf");
    if (n.out.shape != v.shape) throw ShapeMismatchError("bind_input: shape changed");
    require_finite(v, "input leaf");
    n.out = std::move(v);
}

NodeId Graph::matmul(NodeId a, NodeId b) {
    const Value& va = value(a);
    const Value& vb = value(b);
    require_2d(va, "matmul lhs");
    require_2d(vb, "matmul rhs");
    if (va.shape[1] != vb.shape[0])
        throw ShapeMismatchError("matmul: inner dimensions differ (" + std::to_string(va.shape[1]) + " vs " +
                                 std::to_string(vb.shape[0]) + ")");
    Node n;
    n.kind = OpKind::MatMul;
    n.in0 = a;
    n.in1 = b;
    return push(std::move(n));
}

NodeId Graph::add_row(NodeId a, NodeId bias) {
    const Value& va = value(a);
    const Value& vb = value(bias);
    require_2d(va, "add_row lhs");
    if (vb.shape.size() != 1 || vb.shape[0] != va.shape[1]) throw ShapeMismatchError("add_row: bias width mismatch");
    Node n;
    n.kind = OpKind::AddRow;
    n.in0 = a;
    n.in1 = bias;
    return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
    if (!value(a).same_shape(value(b))) throw ShapeMismatchError("add: shape mismatch");
    Node n;
    n.kind = OpKind::Add;
    n.in0 = a;
    n.in1 = b;
    return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
    if (!value(a).same_shape(value(b))) throw ShapeMismatchError("mul: shape mismatch");
    Node n;
    n.kind = OpKind::Mul;
    n.in0 = a;
    n.in1 = b;
    return push(std::move(n));
}

NodeId Graph::scale(NodeId a, double c) {
    Node n;
    n.kind = OpKind::Scale;
    n.in0 = a;
    n.scalar = c;
    return push(std::move(n));
}

NodeId Graph::relu(NodeId a) {
    Node n;
    n.kind = OpKind::Relu;
    n.in0 = a;
    return push(std::move(n));
}

NodeId Graph::log_softmax(NodeId a) {
    require_2d(value(a), "log_softmax");
    Node n;
    n.kind = OpKind::LogSoftmax;
    n.in0 = a;
    return push(std::move(n));
}

NodeId Graph::batch_norm(NodeId x, NodeId gamma, NodeId beta, BnMode mode, const std::vector<double>& running_mean,
                         const std::vector<double>& running_var, double epsilon) {
    const Value& vx = value(x);
    require_2d(vx, "batch_norm");
    const auto f = static_cast<std::size_t>(vx.shape[1]);
    if (value(gamma).numel() != f || value(beta).numel() != f)
        throw ShapeMismatchError("batch_norm: affine width mismatch");
    if (running_mean.size() != f || running_var.size() != f)
        throw ShapeMismatchError("batch_norm: running stats width mismatch");
    if (mode != BnMode::RunningStats && vx.shape[0] < 2)
        throw BatchTooSmallError("batch_norm: batch statistics need at least 2 rows");
    Node n;
    n.kind = OpKind::BatchNorm;
    n.in0 = x;
    n.in1 = gamma;
    n.in2 = beta;
    n.bn_mode = mode;
    n.bn_eps = epsilon;
    n.bn_run_mean = running_mean;
    n.bn_run_var = running_var;
    return push(std::move(n));
}

NodeId Graph::sum_all(NodeId a) {
    Node n;
    n.kind = OpKind::SumAll;
    n.in0 = a;
    return push(std::move(n));
}

NodeId Graph::mean_all(NodeId a) {
    Node n;
    n.kind = OpKind::MeanAll;
    n.in0 = a;
    return push(std::move(n));
}

NodeId Graph::nll_loss(NodeId log_probs, std::vector<int> labels) {
    const Value& v = value(log_probs);
    require_2d(v, "nll_loss");
    if (static_cast<std::int64_t>(labels.size()) != v.shape[0])
        throw ShapeMismatchError("nll_loss: one label per row required");
    for (int y : labels) {
        if (y < 0 || y >= v.shape[1])
            throw LabelOutOfRangeError("nll_loss: label " + std::to_string(y) + " outside [0, " +
                                       std::to_string(v.shape[1]) + ")");
    }
    Node n;
    n.kind = OpKind::NllLoss;
    n.in0 = log_probs;
    n.labels = std::move(labels);
    return push(std::move(n));
}

NodeId Graph::entropy_mean(NodeId logits) {
    require_2d(value(logits), "entropy_mean");
    Node n;
    n.kind = OpKind::EntropyMean;
    n.in0 = logits;
    return push(std::move(n));
}

const std::vector<double>& Graph::bn_mean(NodeId bn_node) const {
    return nodes_[static_cast<std::size_t>(bn_node)].bn_use_mean;
}

const std::vector<double>& Graph::bn_var(NodeId bn_node) const {
    return nodes_[static_cast<std::size_t>(bn_node)].bn_use_var;
}

void Graph::compute(std::size_t i) {
    Node& n = nodes_[i];
    const auto in0 = [&]() -> const Value& { return nodes_[static_cast<std::size_t>(n.in0)].out; };
    const auto in1 = [&]() -> const Value& { return nodes_[static_cast<std::size_t>(n.in1)].out; };
    const auto in2 = [&]() -> const Value& { return nodes_[static_cast<std::size_t>(n.in2)].out; };

    switch (n.kind) {
        case OpKind::Param:
        case OpKind::Input:
            return;
        case OpKind::MatMul: {
            const Value& a = in0();
            const Value& b = in1();
            const std::int64_t m = a.shape[0], k = a.shape[1], p = b.shape[1];
            Value out = make_matrix(m, p);
            for (std::int64_t r = 0; r < m; ++r) {
                const double* arow = a.data.data() + r * k;
                double* orow = out.data.data() + r * p;
                for (std::int64_t kk = 0; kk < k; ++kk) {
                    const double av = arow[kk];
                    const double* brow = b.data.data() + kk * p;
                    for (std::int64_t c = 0; c < p; ++c) orow[c] += av * brow[c];
                }
            }
            n.out = std::move(out);
            return;
        }
        case OpKind::AddRow: {
            const Value& a = in0();
            const Value& b = in1();
            Value out = a;
            const std::int64_t f = a.shape[1];
            for (std::int64_t r = 0; r < a.shape[0]; ++r)
                for (std::int64_t c = 0; c < f; ++c) out.data[static_cast<std::size_t>(r * f + c)] += b.data[static_cast<std::size_t>(c)];
            n.out = std::move(out);
            return;
        }
        case OpKind::Add: {
            Value out = in0();
            const Value& b = in1();
            for (std::size_t j = 0; j < out.data.size(); ++j) out.data[j] += b.data[j];
            n.out = std::move(out);
            return;
        }
        case OpKind::Mul: {
            Value out = in0();
            const Value& b = in1();
            for (std::size_t j = 0; j < out.data.size(); ++j) out.data[j] *= b.data[j];
            n.out = std::move(out);
            return;
        }
        case OpKind::Scale: {
            Value out = in0();
            for (double& x : out.data) x *= n.scalar;
            n.out = std::move(out);
            return;
        }
        case OpKind::Relu: {
            Value out = in0();
            for (double& x : out.data) x = x > 0.0 ? x : 0.0;
            n.out = std::move(out);
            return;
        }
        case OpKind::LogSoftmax: {
            const Value& a = in0();
            Value out = a;
            const std::int64_t rows = a.shape[0], cols = a.shape[1];
            for (std::int64_t r = 0; r < rows; ++r) {
                double* row = out.data.data() + r * cols;
                double mx = row[0];
                for (std::int64_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
                double se = 0.0;
                for (std::int64_t c = 0; c < cols; ++c) se += std::exp(row[c] - mx);
                const double lse = mx + std::log(se);
                for (std::int64_t c = 0; c < cols; ++c) row[c] -= lse;
            }
            n.out = std::move(out);
            return;
        }
        case OpKind::BatchNorm: {
            const Value& x = in0();
            const Value& gamma = in1();
            const Value& beta = in2();
            const std::int64_t rows = x.shape[0], f = x.shape[1];
            if (n.bn_mode == BnMode::RunningStats) {
                n.bn_use_mean = n.bn_run_mean;
                n.bn_use_var = n.bn_run_var;
            } else {
                n.bn_use_mean.assign(static_cast<std::size_t>(f), 0.0);
                n.bn_use_var.assign(static_cast<std::size_t>(f), 0.0);
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t c = 0; c < f; ++c) n.bn_use_mean[static_cast<std::size_t>(c)] += x.at(r, c);
                for (auto& m : n.bn_use_mean) m /= static_cast<double>(rows);
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t c = 0; c < f; ++c) {
                        const double d = x.at(r, c) - n.bn_use_mean[static_cast<std::size_t>(c)];
                        n.bn_use_var[static_cast<std::size_t>(c)] += d * d;
                    }
                for (auto& v : n.bn_use_var) v /= static_cast<double>(rows);  // biased
            }
            Value out = make_matrix(rows, f);
            for (std::int64_t c = 0; c < f; ++c) {
                const double inv = 1.0 / std::sqrt(n.bn_use_var[static_cast<std::size_t>(c)] + n.bn_eps);
                const double g = gamma.data[static_cast<std::size_t>(c)];
                const double b = beta.data[static_cast<std::size_t>(c)];
                const double mu = n.bn_use_mean[static_cast<std::size_t>(c)];
                for (std::int64_t r = 0; r < rows; ++r) out.at(r, c) = g * (x.at(r, c) - mu) * inv + b;
            }
            n.out = std::move(out);
            return;
        }
        case OpKind::SumAll: {
            double s = 0.0;
            for (double x : in0().data) s += x;
            n.out = Value::scalar(s);
            return;
        }
        case OpKind::MeanAll: {
            double s = 0.0;
            const Value& a = in0();
            for (double x : a.data) s += x;
            n.out = Value::scalar(s / static_cast<double>(a.numel()));
            return;
        }
        case OpKind::NllLoss: {
            const Value& lp = in0();
            const std::int64_t rows = lp.shape[0];
            double s = 0.0;
            for (std::int64_t r = 0; r < rows; ++r) s -= lp.at(r, n.labels[static_cast<std::size_t>(r)]);
            n.out = Value::scalar(s / static_cast<double>(rows));
            return;
        }
        case OpKind::EntropyMean: {
            const Value& z = in0();
            const std::int64_t rows = z.shape[0], cols = z.shape[1];
            double total = 0.0;
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* row = z.data.data() + r * cols;
                double mx = row[0];
                for (std::int64_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
                double se = 0.0;
                for (std::int64_t c = 0; c < cols; ++c) se += std::exp(row[c] - mx);
                const double lse = mx + std::log(se);
                double h = 0.0;
                for (std::int64_t c = 0; c < cols; ++c) {
                    const double lpv = row[c] - lse;
                    h -= std::exp(lpv) * lpv;
                }
                total += h;
            }
            n.out = Value::scalar(total / static_cast<double>(rows));
            return;
        }
    }
}

void Graph::check_finite(std::size_t i) const {
    const Node& n = nodes_[i];
    if (!all_finite(n.out.data))
        throw NonFiniteError("non-finite output at op " + std::to_string(i) + " (" + op_tag(n.kind) + ")");
}

const Value& Graph::forward(NodeId root) {
    for (std::size_t i = 0; i <= static_cast<std::size_t>(root); ++i) {
        compute(i);
        check_finite(i);
    }
    return value(root);
}

GradientVector Graph::backward(NodeId root) {
    const Value& rv = value(root);
    if (rv.numel() != 1) throw NonScalarRootError("backward: root is not a scalar");

    std::vector<Value> grads(nodes_.size());
    std::vector<bool> live(nodes_.size(), false);
    grads[static_cast<std::size_t>(root)] = Value(rv.shape, std::vector<double>(1, 1.0));
    live[static_cast<std::size_t>(root)] = true;

    auto reach = [&](NodeId id) -> Value& {
        auto& g = grads[static_cast<std::size_t>(id)];
        if (!live[static_cast<std::size_t>(id)]) {
            g = Value::zeros(nodes_[static_cast<std::size_t>(id)].out.shape);
            live[static_cast<std::size_t>(id)] = true;
        }
        return g;
    };

    for (std::int64_t i = root; i >= 0; --i) {
        const auto ui = static_cast<std::size_t>(i);
        if (!live[ui]) continue;
        const Node& n = nodes_[ui];
        const Value& g = grads[ui];
        switch (n.kind) {
            case OpKind::Param:
            case OpKind::Input:
                break;
            case OpKind::MatMul: {
                const Value& a = nodes_[static_cast<std::size_t>(n.in0)].out;
                const Value& b = nodes_[static_cast<std::size_t>(n.in1)].out;
                Value& ga = reach(n.in0);
                Value& gb = reach(n.in1);
                const std::int64_t m = a.shape[0], k = a.shape[1], p = b.shape[1];
                // dA += dC * B^T
                for (std::int64_t r = 0; r < m; ++r) {
                    const double* grow = g.data.data() + r * p;
                    double* garow = ga.data.data() + r * k;
                    for (std::int64_t kk = 0; kk < k; ++kk) {
                        const double* brow = b.data.data() + kk * p;
                        double acc = 0.0;
                        for (std::int64_t c = 0; c < p; ++c) acc += grow[c] * brow[c];
                        garow[kk] += acc;
                    }
                }
                // dB += A^T * dC
                for (std::int64_t r = 0; r < m; ++r) {
                    const double* arow = a.data.data() + r * k;
                    const double* grow = g.data.data() + r * p;
                    for (std::int64_t kk = 0; kk < k; ++kk) {
                        const double av = arow[kk];
                        double* gbrow = gb.data.data() + kk * p;
                        for (std::int64_t c = 0; c < p; ++c) gbrow[c] += av * grow[c];
                    }
                }
                break;
            }
            case OpKind::AddRow: {
                Value& ga = reach(n.in0);
                Value& gb = reach(n.in1);
                const std::int64_t rows = g.shape[0], f = g.shape[1];
                for (std::size_t j = 0; j < g.data.size(); ++j) ga.data[j] += g.data[j];
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t c = 0; c < f; ++c) gb.data[static_cast<std::size_t>(c)] += g.at(r, c);
                break;
            }
            case OpKind::Add: {
                Value& ga = reach(n.in0);
                Value& gb = reach(n.in1);
                for (std::size_t j = 0; j < g.data.size(); ++j) {
                    ga.data[j] += g.data[j];
                    gb.data[j] += g.data[j];
                }
                break;
            }
            case OpKind::Mul: {
                const Value& a = nodes_[static_cast<std::size_t>(n.in0)].out;
                const Value& b = nodes_[static_cast<std::size_t>(n.in1)].out;
                Value& ga = reach(n.in0);
                Value& gb = reach(n.in1);
                for (std::size_t j = 0; j < g.data.size(); ++j) {
                    ga.data[j] += g.data[j] * b.data[j];
                    gb.data[j] += g.data[j] * a.data[j];
                }
                break;
            }
            case OpKind::Scale: {
                Value& ga = reach(n.in0);
                for (std::size_t j = 0; j < g.data.size(); ++j) ga.data[j] += g.data[j] * n.scalar;
                break;
            }
            case OpKind::Relu: {
                const Value& a = nodes_[static_cast<std::size_t>(n.in0)].out;
                Value& ga = reach(n.in0);
                for (std::size_t j = 0; j < g.data.size(); ++j)
                    if (a.data[j] > 0.0) ga.data[j] += g.data[j];
                break;
            }
            case OpKind::LogSoftmax: {
                const Value& a = nodes_[static_cast<std::size_t>(n.in0)].out;
                const Value& y = n.out;
                Value& ga = reach(n.in0);
                const std::int64_t rows = a.shape[0], cols = a.shape[1];
                for (std::int64_t r = 0; r < rows; ++r) {
                    double gsum = 0.0;
                    for (std::int64_t c = 0; c < cols; ++c) gsum += g.at(r, c);
                    for (std::int64_t c = 0; c < cols; ++c) ga.at(r, c) += g.at(r, c) - std::exp(y.at(r, c)) * gsum;
                }
                break;
            }
            case OpKind::BatchNorm: {
                const Value& x = nodes_[static_cast<std::size_t>(n.in0)].out;
                const Value& gamma = nodes_[static_cast<std::size_t>(n.in1)].out;
                Value& gx = reach(n.in0);
                Value& ggamma = reach(n.in1);
                Value& gbeta = reach(n.in2);
                const std::int64_t rows = x.shape[0], f = x.shape[1];
                const double invn = 1.0 / static_cast<double>(rows);
                for (std::int64_t c = 0; c < f; ++c) {
                    const auto cc = static_cast<std::size_t>(c);
                    const double inv = 1.0 / std::sqrt(n.bn_use_var[cc] + n.bn_eps);
                    const double mu = n.bn_use_mean[cc];
                    double sum_dy = 0.0, sum_dy_xhat = 0.0;
                    for (std::int64_t r = 0; r < rows; ++r) {
                        const double xhat = (x.at(r, c) - mu) * inv;
                        const double dy = g.at(r, c);
                        sum_dy += dy;
                        sum_dy_xhat += dy * xhat;
                        ggamma.data[cc] += dy * xhat;
                        gbeta.data[cc] += dy;
                    }
                    const double gch = gamma.data[cc] * inv;
                    if (n.bn_mode == BnMode::RunningStats) {
                        // stats are constants, plain affine
                        for (std::int64_t r = 0; r < rows; ++r) gx.at(r, c) += gch * g.at(r, c);
                    } else {
                        for (std::int64_t r = 0; r < rows; ++r) {
                            const double xhat = (x.at(r, c) - mu) * inv;
                            gx.at(r, c) += gch * (g.at(r, c) - invn * sum_dy - xhat * invn * sum_dy_xhat);
                        }
                    }
                }
                break;
            }
            case OpKind::SumAll: {
                Value& ga = reach(n.in0);
                const double gv = g.data[0];
                for (double& x : ga.data) x += gv;
                break;
            }
            case OpKind::MeanAll: {
                Value& ga = reach(n.in0);
                const double gv = g.data[0] / static_cast<double>(ga.numel());
                for (double& x : ga.data) x += gv;
                break;
            }
            case OpKind::NllLoss: {
                Value& ga = reach(n.in0);
                const std::int64_t rows = ga.shape[0];
                const double gv = g.data[0] / static_cast<double>(rows);
                for (std::int64_t r = 0; r < rows; ++r) ga.at(r, n.labels[static_cast<std::size_t>(r)]) -= gv;
                break;
            }
            case OpKind::EntropyMean: {
                const Value& z = nodes_[static_cast<std::size_t>(n.in0)].out;
                Value& ga = reach(n.in0);
                const std::int64_t rows = z.shape[0], cols = z.shape[1];
                const double gv = g.data[0] / static_cast<double>(rows);
                for (std::int64_t r = 0; r < rows; ++r) {
                    const double* row = z.data.data() + r * cols;
                    double mx = row[0];
                    for (std::int64_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
                    double se = 0.0;
                    for (std::int64_t c = 0; c < cols; ++c) se += std::exp(row[c] - mx);
                    const double lse = mx + std::log(se);
                    double h = 0.0;
                    for (std::int64_t c = 0; c < cols; ++c) {
                        const double lpv = row[c] - lse;
                        h -= std::exp(lpv) * lpv;
                    }
                    // dH/dz_c = -p_c (log p_c + H)
                    for (std::int64_t c = 0; c < cols; ++c) {
                        const double lpv = row[c] - lse;
                        ga.at(r, c) += gv * (-std::exp(lpv) * (lpv + h));
                    }
                }
                break;
            }
        }
    }

    GradientVector out;
    out.parts.reserve(params_.size());
    for (NodeId pid : params_) {
        const auto pi = static_cast<std::size_t>(pid);
        if (!live[pi]) grads[pi] = Value::zeros(nodes_[pi].out.shape);
        if (!all_finite(grads[pi].data)) throw NonFiniteError("non-finite gradient for parameter leaf");
        out.parts.push_back(std::move(grads[pi]));
    }
    return out;
}

}  // namespace ctta
