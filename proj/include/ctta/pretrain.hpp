#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ctta/checkpoint.hpp"
#include "ctta/data.hpp"
#include "ctta/model.hpp"
#include "ctta/optim.hpp"

namespace ctta {

enum class MetaMode { Exact, FirstOrder };
enum class LrDecay { Constant, Linear };
enum class PretrainMethod { Meta, Mtl, Erm, Ttt, TttMeta };

const char* pretrain_method_name(PretrainMethod m);
PretrainMethod pretrain_method_from_name(std::string_view name);

struct PretrainConfig {
    double alpha = 1e-3;   // inner-loop rate; also the MTL step rate
    double beta = 1e-3;    // outer-loop rate; also the ERM/TTT base rate
    double lambda = 1.0;   // entropy balancing coefficient
    std::int64_t epochs = 30;
    std::int64_t batch_size = 32;
    OptimKind optimizer = OptimKind::SgdNesterov;
    double momentum = 0.9;
    LrDecay lr_decay = LrDecay::Linear;
    MetaMode meta_mode = MetaMode::Exact;
    double split_ratio = 0.5;
    // Domain-randomization pool. Rotation is held out of the default so test
    // streams contain one transform family never seen in pre-training, and
    // severities stop at 3 while test streams reach 5.
    std::vector<TransformKind> kinds = {TransformKind::GaussNoise, TransformKind::Scale, TransformKind::Shift,
                                        TransformKind::FeatureMask};
    std::vector<int> severities = {1, 2, 3};
    std::uint64_t seed = 0;
};

struct EpochStats {
    double ce_loss = 0.0;
    double ent_loss = 0.0;
    double holdout_acc = 0.0;
};

struct PretrainReport {
    std::vector<EpochStats> epochs;
};

std::string report_csv(const PretrainReport& r);
std::string report_json(const PretrainReport& r);

struct PretrainResult {
    Checkpoint checkpoint;
    PretrainReport report;
};

struct EvalResult {
    double accuracy = 0.0;
    double ce = 0.0;
    double entropy = 0.0;
};

// Frozen forward with stored statistics; never mutates the model.
EvalResult frozen_eval(const Model& m, const Value& x, const std::vector<int>& y);

struct InnerStepResult {
    std::vector<double> params_prime;  // full flat vector, θ_a block untouched
    std::vector<double> inner_grad;    // entropy gradient at the pre-update point
    double inner_loss = 0.0;
};

// One entropy SGD step on ψ = (φ, θ_m) with θ_a fixed, batch-statistic
// normalization. update_stats additionally blends the forward's batch
// moments into the running statistics.
InnerStepResult inner_step(Model& m, const Value& trn_x, double alpha, bool update_stats);

// Gradient of L_CE(ψ′; val) + λ·L_ENT(ψ′, θ_a; val) with ψ′ from one inner
// step on trn, taken w.r.t. the pre-update parameters {ψ, θ_a}. Exact mode
// subtracts α·H·g assembled from a Hessian-vector product of the inner loss
// at the pre-update point; FirstOrder drops that term. Pure: no parameter or
// statistic mutation.
std::vector<double> meta_gradient(const Model& m, const MetaBatch& mb, const PretrainConfig& cfg);

// The composed objective L_Meta as a plain function of the flat parameter
// vector, inner step replayed inside every call. Finite differences of this
// are the oracle the exact meta-gradient is checked against.
std::function<double(const std::vector<double>&)> composed_meta_objective(const Model& m, const MetaBatch& mb,
                                                                          const PretrainConfig& cfg);

// meta_gradient, then one optimizer step on {ψ, θ_a} at rate β·lr_scale,
// then a running-statistics update from the inner forward's batch moments.
void outer_step(Model& m, const MetaBatch& mb, const PretrainConfig& cfg, Optimizer& opt, double lr_scale = 1.0);

PretrainResult meta_pretrain(const SourceData& data, const ArchSpec& arch, const PretrainConfig& cfg);
PretrainResult mtl_pretrain(const SourceData& data, const ArchSpec& arch, const PretrainConfig& cfg);
PretrainResult baseline_pretrain(PretrainMethod method, const SourceData& data, const ArchSpec& arch,
                                 const PretrainConfig& cfg);

// Dispatches on method; Meta/Mtl/Erm require a cascade architecture, the TTT
// variants a parallel one.
PretrainResult pretrain(PretrainMethod method, const SourceData& data, const ArchSpec& arch,
                        const PretrainConfig& cfg);

std::string pretrain_config_json(const ArchSpec& arch, const PretrainConfig& cfg);

// Inverse of pretrain_config_json for hand-written configs: absent fields
// keep their defaults, unknown keys are ignored, bad ones are named.
std::pair<ArchSpec, PretrainConfig> parse_pretrain_config(const std::string& json_text);

struct Theorem1Result {
    double residual_at_psi = 0.0;        // asserted by the verification suite
    double residual_at_psi_prime = 0.0;  // reported only
};

// Checks the one-step decomposition: the exact ψ-gradient of the meta loss
// against (I − α·H)·(∇L_CE(ψ′) + λ·∇L_ENT(ψ′)), each side assembled from
// independent forward/backward passes. H is the inner-entropy Hessian over ψ,
// evaluated at ψ for the first residual and at ψ′ for the second.
Theorem1Result theorem1_check(const Model& m, const MetaBatch& mb, const PretrainConfig& cfg);

}  // namespace ctta
