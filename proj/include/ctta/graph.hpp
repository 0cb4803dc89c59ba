#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ctta/tensor.hpp"

namespace ctta {

using NodeId = std::int32_t;

enum class BnMode { TrainStats, RunningStats, BatchStats };

enum class OpKind : std::uint8_t {
    Param,
    Input,
    MatMul,
    AddRow,
    Add,
    Mul,
    Scale,
    Relu,
    LogSoftmax,
    BatchNorm,
    SumAll,
    MeanAll,
    NllLoss,
    EntropyMean,
};

// Gradient w.r.t. every parameter leaf, in leaf creation order.
struct GradientVector {
    std::vector<Value> parts;

    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& p : parts) n += p.numel();
        return n;
    }

    std::vector<double> flat() const {
        std::vector<double> out;
        out.reserve(total_size());
        for (const auto& p : parts) out.insert(out.end(), p.data.begin(), p.data.end());
        return out;
    }
};

// Recorded forward computation over dense arrays. Ops evaluate eagerly at
// build time; forward() recomputes every node so leaves may be rebound and
// the same graph replayed. backward() yields exact reverse-mode gradients
// for all parameter leaves.
class Graph {
   public:
    NodeId param(Value v);
    NodeId input(Value v);

    NodeId matmul(NodeId a, NodeId b);
    NodeId add_row(NodeId a, NodeId bias);  // broadcast bias over rows
    NodeId add(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);  // elementwise
    NodeId scale(NodeId a, double c);
    NodeId relu(NodeId a);
    NodeId log_softmax(NodeId a);  // row-wise, log-sum-exp stabilized
    NodeId batch_norm(NodeId x, NodeId gamma, NodeId beta, BnMode mode, const std::vector<double>& running_mean,
                      const std::vector<double>& running_var, double epsilon);
    NodeId sum_all(NodeId a);
    NodeId mean_all(NodeId a);
    NodeId nll_loss(NodeId log_probs, std::vector<int> labels);  // mean over batch of -log_probs[label]
    NodeId entropy_mean(NodeId logits);  // mean over rows of softmax entropy

    const Value& value(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].out; }

    // Batch moments the BatchNorm node normalized with (batch stats under
    // TrainStats/BatchStats, stored stats under RunningStats).
    const std::vector<double>& bn_mean(NodeId bn_node) const;
    const std::vector<double>& bn_var(NodeId bn_node) const;

    void bind_param(NodeId id, Value v);   // shape-preserving rebind
    void bind_input(NodeId id, Value v);

    const Value& forward(NodeId root);     // recompute nodes 0..root
    GradientVector backward(NodeId root);  // root must be scalar

    std::size_t num_params() const { return params_.size(); }
    const std::vector<NodeId>& param_ids() const { return params_; }

   private:
    struct Node {
        OpKind kind;
        NodeId in0 = -1, in1 = -1, in2 = -1;
        Value out;
        double scalar = 0.0;               // Scale
        std::vector<int> labels;           // NllLoss
        BnMode bn_mode = BnMode::BatchStats;
        double bn_eps = 0.0;
        std::vector<double> bn_run_mean, bn_run_var;  // RunningStats constants
        std::vector<double> bn_use_mean, bn_use_var;  // moments used to normalize
    };

    NodeId push(Node n);
    void compute(std::size_t i);
    void check_finite(std::size_t i) const;

    std::vector<Node> nodes_;
    std::vector<NodeId> params_;
};

}  // namespace ctta
