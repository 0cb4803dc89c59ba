#include "ctta/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "ctta/errors.hpp"

namespace ctta {

namespace {

using json = nlohmann::json;

constexpr double kPi = 3.14159265358979323846;

void validate(const SourceSpec& s) {
    if (s.num_classes < 2) throw InvalidSpecError("source: need at least 2 classes");
    if (s.feature_dim < 2) throw InvalidSpecError("source: need at least 2 features");
    if (s.stddev <= 0.0) throw InvalidSpecError("source: within-class stddev must be positive");
    if (s.center_radius <= 0.0) throw InvalidSpecError("source: center radius must be positive");
    if (s.n_train < 1 || s.n_holdout < 1) throw InvalidSpecError("source: sample counts must be positive");
    if (!s.centers.empty()) {
        if (static_cast<std::int64_t>(s.centers.size()) != s.num_classes)
            throw InvalidSpecError("source: one center per class required");
        for (const auto& c : s.centers)
            if (static_cast<std::int64_t>(c.size()) != s.feature_dim)
                throw InvalidSpecError("source: center dimension mismatch");
    }
}

Dataset draw_balanced(const SourceSpec& s, const std::vector<std::vector<double>>& centers, std::int64_t n,
                      Rng& rng) {
    Dataset d;
    d.x = Value::zeros({n, s.feature_dim});
    d.y.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const int k = static_cast<int>(i % s.num_classes);
        d.y[static_cast<std::size_t>(i)] = k;
        for (std::int64_t f = 0; f < s.feature_dim; ++f)
            d.x.at(i, f) = centers[static_cast<std::size_t>(k)][static_cast<std::size_t>(f)] + s.stddev * rng.normal();
    }
    return d;
}

// Exact quarter-turn of coordinates (0,1).
void quarter_rotate(double& a, double& b, int quarters) {
    for (int q = 0; q < quarters; ++q) {
        const double na = -b;
        b = a;
        a = na;
    }
}

}  // namespace

std::vector<std::vector<double>> default_centers(const SourceSpec& spec) {
    Rng rng(mix_seed(spec.seed, 0xC3));
    const std::size_t f = static_cast<std::size_t>(spec.feature_dim);
    // Plane components form a regular K-gon in coordinates (0,1), the pair the
    // Rotation transform mixes, so increasing rotation severity walks each
    // class toward its neighbor. The rest of each direction is a seed-random
    // tail, redrawn while any pair of centers sits closer than 60 degrees.
    const double plane = f > 2 ? 0.75 : 1.0;
    const double tail = std::sqrt(1.0 - plane * plane);
    const double offset = rng.uniform(0.0, 2.0 * kPi);
    std::vector<std::vector<double>> centers;
    for (std::int64_t k = 0; k < spec.num_classes; ++k) {
        const double angle = offset + 2.0 * kPi * static_cast<double>(k) / static_cast<double>(spec.num_classes);
        std::vector<double> dir(f);
        for (int attempt = 0; attempt < 200; ++attempt) {
            dir[0] = plane * std::cos(angle);
            dir[1] = plane * std::sin(angle);
            double norm = 0.0;
            for (std::size_t i = 2; i < f; ++i) {
                dir[i] = rng.normal();
                norm += dir[i] * dir[i];
            }
            if (norm > 0.0) {
                const double rescale = tail / std::sqrt(norm);
                for (std::size_t i = 2; i < f; ++i) dir[i] *= rescale;
            }
            bool separated = true;
            for (const auto& c : centers) {
                double dot = 0.0;
                for (std::size_t i = 0; i < f; ++i) dot += dir[i] * c[i] / spec.center_radius;
                if (dot > 0.5) {
                    separated = false;
                    break;
                }
            }
            if (separated) break;
        }
        for (auto& v : dir) v *= spec.center_radius;
        centers.push_back(std::move(dir));
    }
    return centers;
}

SourceData gen_source(const SourceSpec& spec) {
    validate(spec);
    const auto centers = spec.centers.empty() ? default_centers(spec) : spec.centers;
    Rng rng(mix_seed(spec.seed, 0xDA));
    SourceData out;
    out.train = draw_balanced(spec, centers, spec.n_train, rng);
    out.holdout = draw_balanced(spec, centers, spec.n_holdout, rng);
    return out;
}

const char* kind_name(TransformKind k) {
    switch (k) {
        case TransformKind::GaussNoise: return "gauss_noise";
        case TransformKind::Rotation: return "rotation";
        case TransformKind::Scale: return "scale";
        case TransformKind::Shift: return "shift";
        case TransformKind::FeatureMask: return "feature_mask";
    }
    return "?";
}

TransformKind kind_from_name(const std::string& name) {
    for (TransformKind k : kAllKinds)
        if (name == kind_name(k)) return k;
    throw InvalidConfigError("unknown transform kind: " + name);
}

double transform_magnitude(TransformKind kind, int severity) {
    if (severity < 1 || severity > kMaxSeverity) throw InvalidSpecError("severity outside 1..5");
    // Calibrated against a fitted source model on the default SourceSpec:
    // holdout error at severity 5 is several times the severity-1 error and
    // non-decreasing per step for every kind.
    static constexpr double kNoise[] = {0.2, 0.4, 0.6, 1.0, 1.75};
    static constexpr double kAngleDeg[] = {15, 30, 45, 60, 90};
    static constexpr double kScale[] = {1.25, 1.6, 2.1, 2.8, 3.8};
    static constexpr double kShift[] = {0.5, 1.0, 1.8, 2.8, 5.0};
    static constexpr double kMaskFrac[] = {0.1, 0.2, 0.3, 0.5, 0.7};
    const int i = severity - 1;
    switch (kind) {
        case TransformKind::GaussNoise: return kNoise[i];
        case TransformKind::Rotation: return kAngleDeg[i];
        case TransformKind::Scale: return kScale[i];
        case TransformKind::Shift: return kShift[i];
        case TransformKind::FeatureMask: return kMaskFrac[i];
    }
    return 0.0;
}

Value apply_transform(const Value& x, const Transform& t, Rng& rng) {
    if (x.shape.size() != 2) throw ShapeMismatchError("apply_transform: expected a 2-d batch");
    const std::int64_t rows = x.shape[0], f = x.shape[1];
    if (f < 2) throw ShapeMismatchError("apply_transform: need at least 2 features");
    const double mag = transform_magnitude(t.kind, t.severity);
    Value out = x;
    switch (t.kind) {
        case TransformKind::GaussNoise:
            for (auto& v : out.data) v += mag * rng.normal();
            break;
        case TransformKind::Rotation: {
            const double th = mag * kPi / 180.0;
            const double c = std::cos(th), s = std::sin(th);
            for (std::int64_t r = 0; r < rows; ++r) {
                const double a = out.at(r, 0), b = out.at(r, 1);
                out.at(r, 0) = c * a - s * b;
                out.at(r, 1) = s * a + c * b;
            }
            break;
        }
        case TransformKind::Scale:
            for (auto& v : out.data) v *= mag;
            break;
        case TransformKind::Shift: {
            const double d = mag / std::sqrt(static_cast<double>(f));
            for (auto& v : out.data) v += d;
            break;
        }
        case TransformKind::FeatureMask: {
            const auto m =
                std::max<std::int64_t>(1, static_cast<std::int64_t>(std::llround(mag * static_cast<double>(f))));
            std::vector<std::int64_t> coords(static_cast<std::size_t>(f));
            std::iota(coords.begin(), coords.end(), 0);
            Rng mask_rng(t.seed);
            mask_rng.shuffle(coords);
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t r = 0; r < rows; ++r) out.at(r, coords[static_cast<std::size_t>(i)]) = 0.0;
            break;
        }
    }
    return out;
}

Transform sample_transform(const std::vector<TransformKind>& kinds, const std::vector<int>& severities, Rng& rng) {
    if (kinds.empty() || severities.empty()) throw EmptyPoolError("sample_transform: empty pool");
    Transform t;
    t.kind = kinds[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(kinds.size())))];
    t.severity = severities[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(severities.size())))];
    t.seed = rng.next_u64();
    return t;
}

MetaBatch split_meta_batch(const Value& x, const std::vector<int>& y, double ratio) {
    if (x.shape.size() != 2) throw ShapeMismatchError("split_meta_batch: expected a 2-d batch");
    const std::int64_t rows = x.shape[0], f = x.shape[1];
    if (static_cast<std::int64_t>(y.size()) != rows) throw ShapeMismatchError("split_meta_batch: label count mismatch");
    if (rows < 4) throw BatchTooSmallError("split_meta_batch: need at least 4 rows");
    if (ratio <= 0.0 || ratio >= 1.0) throw InvalidConfigError("split_meta_batch: ratio outside (0, 1)");
    const auto n_trn = static_cast<std::int64_t>(std::floor(ratio * static_cast<double>(rows)));
    if (n_trn < 1 || n_trn >= rows) throw InvalidConfigError("split_meta_batch: split leaves an empty side");

    MetaBatch mb;
    mb.trn_x = Value::zeros({n_trn, f});
    mb.val_x = Value::zeros({rows - n_trn, f});
    std::copy(x.data.begin(), x.data.begin() + n_trn * f, mb.trn_x.data.begin());
    std::copy(x.data.begin() + n_trn * f, x.data.end(), mb.val_x.data.begin());
    mb.trn_y.assign(y.begin(), y.begin() + n_trn);
    mb.val_y.assign(y.begin() + n_trn, y.end());
    return mb;
}

DomainStream build_stream(const SourceSpec& source, const StreamConfig& cfg) {
    validate(source);
    if (cfg.kinds.empty()) throw InvalidConfigError("stream: empty transform kind list");
    if (cfg.batch_size < 2) throw InvalidConfigError("stream: batch size must be at least 2");
    if (cfg.batches_per_domain < 1) throw InvalidConfigError("stream: need at least one batch per domain");
    if (cfg.holdout_size < 1) throw InvalidConfigError("stream: holdout size must be positive");
    if (cfg.severity < 1 || cfg.severity > kMaxSeverity)
        throw InvalidConfigError("stream: severity outside 1..5");

    std::vector<std::pair<TransformKind, int>> plan;
    if (cfg.setup == StreamSetup::Instantaneous) {
        for (TransformKind k : cfg.kinds) plan.emplace_back(k, cfg.severity);
    } else {
        static constexpr int kGradual[] = {1, 2, 3, 4, 5, 4, 3, 2, 1};
        for (TransformKind k : cfg.kinds)
            for (int s : kGradual) plan.emplace_back(k, s);
    }

    const auto centers = source.centers.empty() ? default_centers(source) : source.centers;
    SourceSpec drawing = source;
    drawing.centers = centers;

    DomainStream stream;
    stream.setup = cfg.setup;
    stream.batch_size = cfg.batch_size;
    stream.domains.reserve(plan.size());
    for (std::size_t d = 0; d < plan.size(); ++d) {
        const std::uint64_t domain_seed = mix_seed(cfg.seed, d);
        Rng rng(domain_seed);
        Domain dom;
        dom.transform = Transform{plan[d].first, plan[d].second, mix_seed(domain_seed, 1)};
        for (std::int64_t b = 0; b < cfg.batches_per_domain; ++b) {
            Dataset clean = draw_balanced(drawing, centers, cfg.batch_size, rng);
            dom.batches.push_back(apply_transform(clean.x, dom.transform, rng));
            dom.labels.push_back(std::move(clean.y));
        }
        Dataset clean_holdout = draw_balanced(drawing, centers, cfg.holdout_size, rng);
        dom.holdout.x = apply_transform(clean_holdout.x, dom.transform, rng);
        dom.holdout.y = std::move(clean_holdout.y);
        stream.domains.push_back(std::move(dom));
    }
    return stream;
}

std::pair<Value, std::vector<int>> ssl_transform_labels(const Value& x) {
    if (x.shape.size() != 2 || x.shape[1] < 2) throw ShapeMismatchError("ssl_transform_labels: need a 2-d batch with at least 2 features");
    const std::int64_t rows = x.shape[0], f = x.shape[1];
    Value out = Value::zeros({rows * 4, f});
    std::vector<int> labels(static_cast<std::size_t>(rows * 4));
    for (int rot = 0; rot < 4; ++rot) {
        for (std::int64_t r = 0; r < rows; ++r) {
            const std::int64_t o = rot * rows + r;
            for (std::int64_t c = 0; c < f; ++c) out.at(o, c) = x.at(r, c);
            quarter_rotate(out.at(o, 0), out.at(o, 1), rot);
            labels[static_cast<std::size_t>(o)] = rot;
        }
    }
    return {std::move(out), std::move(labels)};
}

namespace {

json source_to_json(const SourceSpec& s) {
    return json{{"num_classes", s.num_classes}, {"feature_dim", s.feature_dim}, {"centers", s.centers},
                {"center_radius", s.center_radius}, {"stddev", s.stddev},       {"n_train", s.n_train},
                {"n_holdout", s.n_holdout},        {"seed", s.seed}};
}

SourceSpec source_from_json(const json& j) {
    SourceSpec s;
    s.num_classes = j.at("num_classes").get<std::int64_t>();
    s.feature_dim = j.at("feature_dim").get<std::int64_t>();
    s.centers = j.at("centers").get<std::vector<std::vector<double>>>();
    s.center_radius = j.at("center_radius").get<double>();
    s.stddev = j.at("stddev").get<double>();
    s.n_train = j.at("n_train").get<std::int64_t>();
    s.n_holdout = j.at("n_holdout").get<std::int64_t>();
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
}

}  // namespace

std::string stream_manifest(const SourceSpec& source, const StreamConfig& cfg) {
    json kinds = json::array();
    for (TransformKind k : cfg.kinds) kinds.push_back(kind_name(k));
    const json j{{"setup", cfg.setup == StreamSetup::Instantaneous ? "instantaneous" : "gradual"},
                 {"kinds", kinds},
                 {"severity", cfg.severity},
                 {"batch_size", cfg.batch_size},
                 {"batches_per_domain", cfg.batches_per_domain},
                 {"holdout_size", cfg.holdout_size},
                 {"seed", cfg.seed},
                 {"source", source_to_json(source)}};
    return j.dump(2);
}

std::pair<SourceSpec, StreamConfig> parse_stream_manifest(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw InvalidConfigError(std::string("stream manifest is not valid JSON: ") + e.what());
    }
    try {
        StreamConfig cfg;
        const std::string setup = j.at("setup").get<std::string>();
        if (setup == "instantaneous")
            cfg.setup = StreamSetup::Instantaneous;
        else if (setup == "gradual")
            cfg.setup = StreamSetup::Gradual;
        else
            throw InvalidConfigError("stream manifest: unknown setup tag: " + setup);
        cfg.kinds.clear();
        for (const auto& name : j.at("kinds")) cfg.kinds.push_back(kind_from_name(name.get<std::string>()));
        cfg.severity = j.at("severity").get<int>();
        cfg.batch_size = j.at("batch_size").get<std::int64_t>();
        cfg.batches_per_domain = j.at("batches_per_domain").get<std::int64_t>();
        cfg.holdout_size = j.at("holdout_size").get<std::int64_t>();
        cfg.seed = j.at("seed").get<std::uint64_t>();
        return {source_from_json(j.at("source")), cfg};
    } catch (const json::exception& e) {
        throw InvalidConfigError(std::string("stream manifest field missing or mistyped: ") + e.what());
    }
}

std::string source_spec_json(const SourceSpec& s) { return source_to_json(s).dump(2); }

SourceSpec parse_source_spec(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw InvalidConfigError(std::string("source spec is not valid JSON: ") + e.what());
    }
    SourceSpec s;
    auto read = [&j](const char* key, auto& into) {
        if (!j.contains(key)) return;
        try {
            into = j.at(key).get<std::decay_t<decltype(into)>>();
        } catch (const json::exception& e) {
            throw InvalidConfigError(std::string("source spec field '") + key + "': " + e.what());
        }
    };
    read("num_classes", s.num_classes);
    read("feature_dim", s.feature_dim);
    read("centers", s.centers);
    read("center_radius", s.center_radius);
    read("stddev", s.stddev);
    read("n_train", s.n_train);
    read("n_holdout", s.n_holdout);
    read("seed", s.seed);
    return s;
}

std::string holdout_csv(const Domain& d) {
    std::ostringstream out;
    const std::int64_t f = d.holdout.x.shape[1];
    for (std::int64_t c = 0; c < f; ++c) out << 'f' << c << ',';
    out << "label\n";
    out.precision(17);
    for (std::int64_t r = 0; r < d.holdout.size(); ++r) {
        for (std::int64_t c = 0; c < f; ++c) out << d.holdout.x.at(r, c) << ',';
        out << d.holdout.y[static_cast<std::size_t>(r)] << '\n';
    }
    return out.str();
}

}  // namespace ctta
