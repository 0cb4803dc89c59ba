#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "ctta/checkpoint.hpp"
#include "ctta/data.hpp"
#include "ctta/model.hpp"
#include "ctta/optim.hpp"

namespace ctta {

// OursNoAux is the ablation that keeps the Ours parameter mask but minimizes
// entropy on the main logits instead of going through the auxiliary head.
enum class AdaptMethod { Ours, OursNoAux, Tent, AdaBn, Erm, Ttt };

const char* adapt_method_name(AdaptMethod m);
AdaptMethod adapt_method_from_name(std::string_view name);

struct AdaptConfig {
    AdaptMethod method = AdaptMethod::Ours;
    double online_lr = 1e-3;
    std::int64_t steps_per_batch = 1;  // ignored for Erm and AdaBn, which never step
    OptimKind optimizer = OptimKind::SgdNesterov;
    double momentum = 0.9;
    // Diagnostic alternative to the default adapt-then-predict ordering.
    bool predict_before_adapt = false;
    std::uint64_t seed = 0;
};

// Flat-parameter indices each method may update at test time. Ours and its
// no-aux ablation: BN affine of φ plus all of θ_m. Tent: BN affine of φ.
// Ttt: all of φ. AdaBn and Erm: nothing. θ_a is never adapted.
std::vector<std::size_t> trainable_mask(const ArchSpec& arch, AdaptMethod method);

struct BatchRecord {
    std::int64_t domain = 0;
    std::int64_t batch = 0;
    std::vector<int> predictions;
    std::int64_t n_correct = -1;  // -1 until a labeled join fills it in
    double entropy_main = 0.0;
    double entropy_aux = 0.0;
    double loss = 0.0;  // final gradient step's objective, pre-update; 0 when no step runs
};

struct AdaptTrace {
    std::vector<BatchRecord> records;    // one per batch, stream order
    std::vector<Checkpoint> snapshots;   // one per domain, taken after its last batch
};

// Everything a continual run owns: the evolving model plus optimizer state,
// which persists across batches and domains but never across runs.
struct AdaptState {
    Model model;
    Optimizer opt;
    std::vector<std::size_t> mask;
    AdaptConfig cfg;
};

AdaptState make_adapt_state(const Checkpoint& ckpt, const AdaptConfig& cfg);

// One online batch: method-specific gradient steps restricted to the mask,
// then a prediction forward on the same batch that also re-estimates the
// stored BN statistics (Erm predicts with stored statistics and touches
// nothing). Returns argmax main-logit predictions.
std::vector<int> adapt_batch(AdaptState& st, const Value& batch);
std::vector<int> adapt_batch(AdaptState& st, const Value& batch, BatchRecord& rec);

// The label-free view run_continual consumes; predictions are joined to
// labels afterwards, so adaptation has no access path to them.
struct UnlabeledDomain {
    Transform transform;
    std::vector<Value> batches;
};

std::vector<UnlabeledDomain> strip_labels(const DomainStream& stream);

AdaptTrace run_continual(const Checkpoint& ckpt, const std::vector<UnlabeledDomain>& stream,
                         const AdaptConfig& cfg);

// Convenience wrapper: strips labels, runs, then scores n_correct.
AdaptTrace run_continual(const Checkpoint& ckpt, const DomainStream& stream, const AdaptConfig& cfg);

// Fills n_correct on every record from the stream's labels.
void score_trace(AdaptTrace& trace, const DomainStream& stream);

// Frozen accuracy of a snapshot on a labeled holdout. BatchStats mode is the
// diagnostic alternative; neither mode mutates the checkpoint.
double evaluate(const Checkpoint& ckpt, const Dataset& holdout, BnMode eval_bn_mode = BnMode::RunningStats);

std::string trace_csv(const AdaptTrace& trace);
std::string trace_json(const AdaptTrace& trace);

}  // namespace ctta
