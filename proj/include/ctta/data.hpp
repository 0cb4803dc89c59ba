#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ctta/rng.hpp"
#include "ctta/tensor.hpp"

namespace ctta {

struct Dataset {
    Value x;  // N×F
    std::vector<int> y;

    std::int64_t size() const { return x.shape.empty() ? 0 : x.shape[0]; }
};

struct SourceSpec {
    std::int64_t num_classes = 5;
    std::int64_t feature_dim = 16;
    std::vector<std::vector<double>> centers;  // K×F; empty derives them from the seed
    double center_radius = 2.0;
    double stddev = 0.6;
    std::int64_t n_train = 5000;
    std::int64_t n_holdout = 1000;
    std::uint64_t seed = 0;
};

struct SourceData {
    Dataset train, holdout;
};

// Class centers for a spec that did not pin them: unit directions at
// center_radius, redrawn while any pair is closer than 60° apart.
std::vector<std::vector<double>> default_centers(const SourceSpec& spec);

SourceData gen_source(const SourceSpec& spec);

enum class TransformKind { GaussNoise, Rotation, Scale, Shift, FeatureMask };

inline constexpr TransformKind kAllKinds[] = {TransformKind::GaussNoise, TransformKind::Rotation,
                                              TransformKind::Scale, TransformKind::Shift, TransformKind::FeatureMask};
inline constexpr int kMaxSeverity = 5;

const char* kind_name(TransformKind k);
TransformKind kind_from_name(const std::string& name);

double transform_magnitude(TransformKind kind, int severity);

struct Transform {
    TransformKind kind = TransformKind::GaussNoise;
    int severity = 1;
    std::uint64_t seed = 0;  // fixes FeatureMask coordinates
};

// Covariate shift only: labels ride along unchanged. GaussNoise draws from
// the caller's rng; FeatureMask coordinates come from the transform's own
// seed so one domain masks consistently across batches.
Value apply_transform(const Value& x, const Transform& t, Rng& rng);

Transform sample_transform(const std::vector<TransformKind>& kinds, const std::vector<int>& severities, Rng& rng);

struct MetaBatch {
    Value trn_x;
    std::vector<int> trn_y;
    Value val_x;
    std::vector<int> val_y;
    Transform transform;
};

// First ⌊ratio·B⌋ rows become trn, the rest val.
MetaBatch split_meta_batch(const Value& x, const std::vector<int>& y, double ratio);

enum class StreamSetup { Instantaneous, Gradual };

struct Domain {
    Transform transform;
    std::vector<Value> batches;
    std::vector<std::vector<int>> labels;  // offline evaluation only; adaptation never sees these
    Dataset holdout;
};

struct StreamConfig {
    StreamSetup setup = StreamSetup::Instantaneous;
    std::vector<TransformKind> kinds = {kAllKinds[0], kAllKinds[1], kAllKinds[2], kAllKinds[3], kAllKinds[4]};
    int severity = kMaxSeverity;  // instantaneous domains only; gradual sweeps 1..5..1 regardless
    std::int64_t batch_size = 32;
    std::int64_t batches_per_domain = 20;
    std::int64_t holdout_size = 512;
    std::uint64_t seed = 0;
};

struct DomainStream {
    StreamSetup setup = StreamSetup::Instantaneous;
    std::int64_t batch_size = 0;
    std::vector<Domain> domains;
};

// Instantaneous: one severity-5 domain per kind. Gradual: severities
// 1,2,3,4,5,4,3,2,1 per kind, so 9·|kinds| domains. Batches are fresh
// transformed draws from the source distribution; every domain carries its
// own transformed holdout.
DomainStream build_stream(const SourceSpec& source, const StreamConfig& cfg);

// Rows replicated under the four planar rotations of coordinates (0,1),
// grouped by rotation index; label = rotation index. Quarter turns are exact
// coordinate swaps.
std::pair<Value, std::vector<int>> ssl_transform_labels(const Value& x);

std::string stream_manifest(const SourceSpec& source, const StreamConfig& cfg);
std::pair<SourceSpec, StreamConfig> parse_stream_manifest(const std::string& json_text);
std::string holdout_csv(const Domain& d);

// Hand-written config form of SourceSpec: absent fields keep their defaults.
std::string source_spec_json(const SourceSpec& s);
SourceSpec parse_source_spec(const std::string& json_text);

}  // namespace ctta
