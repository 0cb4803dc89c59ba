#pragma once

#include <cstdint>
#include <vector>

#include "ctta/graph.hpp"
#include "ctta/tensor.hpp"

namespace ctta {

enum class Paradigm { Cascade, Parallel };

// Rotation indices {0°, 90°, 180°, 270°} predicted by the parallel paradigm's
// auxiliary head.
inline constexpr std::int64_t kSslClasses = 4;

struct ArchSpec {
    Paradigm paradigm = Paradigm::Cascade;
    std::int64_t input_dim = 16;
    std::vector<std::int64_t> phi_widths = {64, 64};  // dense+BN+relu blocks
    std::int64_t num_classes = 5;
    std::int64_t aux_hidden = 64;
    double bn_momentum = 0.1;
    double bn_epsilon = 1e-5;

    std::int64_t feature_dim() const { return phi_widths.back(); }
    std::int64_t aux_input_dim() const { return paradigm == Paradigm::Cascade ? num_classes : feature_dim(); }
    std::int64_t aux_classes() const { return paradigm == Paradigm::Cascade ? num_classes : kSslClasses; }

    bool operator==(const ArchSpec&) const = default;
};

void validate(const ArchSpec& arch);  // throws InvalidSpecError

enum class ParamRole : std::uint8_t {
    PhiW,
    PhiB,
    PhiGamma,
    PhiBeta,
    ThetaMW,
    ThetaMB,
    ThetaAW1,
    ThetaAB1,
    ThetaAW2,
    ThetaAB2,
};

struct ParamRange {
    std::size_t begin = 0, end = 0;
    std::size_t size() const { return end - begin; }
    bool contains(std::size_t i) const { return i >= begin && i < end; }
};

struct LeafInfo {
    ParamRole role;
    int block;  // φ block index, -1 for the heads
    std::size_t offset;
    std::vector<std::int64_t> shape;
    std::size_t size;
};

// Canonical flat parameter order: per φ block [W, b, γ, β], then θ_m [W, b],
// then θ_a [W1, b1, W2, b2]. Everything indexing parameters (gradients,
// masks, checkpoints) uses this order.
struct Layout {
    std::vector<LeafInfo> leaves;
    std::size_t total = 0;
    ParamRange phi, theta_m, theta_a;
    std::vector<std::size_t> bn_affine;  // flat indices of all φ γ/β entries
};

Layout make_layout(const ArchSpec& arch);

struct BnStats {
    std::vector<double> mean, var;
};

struct Model {
    ArchSpec arch;
    std::vector<double> params;  // canonical flat order
    std::vector<BnStats> bn;     // running statistics, one per φ block
};

Model init_model(const ArchSpec& arch, std::uint64_t seed);

// One recorded forward pass. Cascade: aux head reads the main logits, so a
// loss on aux_logits reaches θ_m and φ. Parallel: the aux head reads features
// of its own input leaf x_aux, so such a loss bypasses θ_m entirely.
struct ModelGraph {
    Graph g;
    NodeId x = -1;
    NodeId x_aux = -1;  // parallel paradigm only
    NodeId features = -1;
    NodeId main_logits = -1;
    NodeId aux_logits = -1;
    std::vector<NodeId> params;   // canonical leaf order
    std::vector<NodeId> bn_main;  // main-path BN node per φ block
};

// aux_rows sizes the parallel SSL input leaf (defaults to main_rows);
// ignored for cascade models.
ModelGraph build_model_graph(const Model& m, std::int64_t main_rows, BnMode mode, std::int64_t aux_rows = -1);

std::vector<double> flat_params(const Graph& g);
void bind_flat_params(Graph& g, const std::vector<double>& flat);

// Pulls the moments each main-path BN node normalized with back into the
// model: TrainStats blends them into the running statistics, BatchStats
// overwrites, RunningStats leaves them alone.
void refresh_bn_stats(Model& m, const ModelGraph& mg, BnMode mode);

struct ForwardResult {
    Value main_logits, aux_logits;
};

ForwardResult model_forward(Model& m, const Value& x, BnMode mode, bool update_stats);
ForwardResult model_forward(const Model& m, const Value& x, BnMode mode);  // never mutates state

}  // namespace ctta
