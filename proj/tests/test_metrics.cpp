#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctta/adapt.hpp"
#include "ctta/data.hpp"
#include "ctta/errors.hpp"
#include "ctta/metrics.hpp"
#include "ctta/model.hpp"
#include "ctta/pretrain.hpp"
#include "ctta/rng.hpp"

using namespace ctta;

namespace {

BatchRecord record(std::int64_t domain, std::int64_t batch, std::int64_t correct, std::int64_t total,
                   double entropy = 0.5) {
    BatchRecord r;
    r.domain = domain;
    r.batch = batch;
    r.predictions.assign(static_cast<std::size_t>(total), 0);
    r.n_correct = correct;
    r.entropy_main = entropy;
    return r;
}

Checkpoint raw_checkpoint(std::uint64_t seed) { return Checkpoint{init_model(ArchSpec{}, seed), "erm", seed, 0}; }

DomainStream tiny_stream(std::uint64_t seed, int severity = 5) {
    SourceSpec source;
    source.n_train = 128;
    source.n_holdout = 64;
    source.seed = seed;
    StreamConfig cfg;
    cfg.kinds = {TransformKind::GaussNoise, TransformKind::Scale, TransformKind::Shift};
    cfg.severity = severity;
    cfg.batch_size = 8;
    cfg.batches_per_domain = 3;
    cfg.holdout_size = 32;
    cfg.seed = seed;
    return build_stream(source, cfg);
}

AccuracyMatrix hand_matrix(std::int64_t n) {
    AccuracyMatrix m;
    m.n = n;
    m.r.assign(static_cast<std::size_t>(n),
               std::vector<double>(static_cast<std::size_t>(n), std::numeric_limits<double>::quiet_NaN()));
    m.solo.assign(static_cast<std::size_t>(n), std::numeric_limits<double>::quiet_NaN());
    return m;
}

}  // namespace

TEST_CASE("online error averages domains unweighted") {
    AdaptTrace trace;
    trace.records.push_back(record(0, 0, 8, 10));
    trace.records.push_back(record(0, 1, 8, 10));
    trace.records.push_back(record(1, 0, 6, 10));
    trace.records.push_back(record(1, 1, 6, 10));
    const OnlineError e = online_error_breakdown(trace);
    CHECK(e.per_domain[0] == doctest::Approx(0.2).epsilon(1e-15));
    CHECK(e.per_domain[1] == doctest::Approx(0.4).epsilon(1e-15));
    CHECK(e.mean_over_domains == doctest::Approx(0.3).epsilon(1e-15));
    CHECK(online_error(trace) == e.mean_over_domains);
}

TEST_CASE("online error ignores domain size imbalance") {
    AdaptTrace trace;
    for (std::int64_t b = 0; b < 10; ++b) trace.records.push_back(record(0, b, 10, 10));
    trace.records.push_back(record(1, 0, 0, 10));
    const OnlineError e = online_error_breakdown(trace);
    CHECK(e.mean_over_domains == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(e.batch_weighted == doctest::Approx(10.0 / 110.0).epsilon(1e-12));
}

TEST_CASE("online error is invariant to batch granularity") {
    AdaptTrace coarse, fine;
    coarse.records.push_back(record(0, 0, 12, 20));
    fine.records.push_back(record(0, 0, 5, 10));
    fine.records.push_back(record(0, 1, 7, 10));
    CHECK(online_error(coarse) == online_error(fine));
}

TEST_CASE("all-correct traces have zero error") {
    AdaptTrace trace;
    trace.records.push_back(record(0, 0, 10, 10));
    CHECK(online_error(trace) == 0.0);
}

TEST_CASE("online error rejects bad traces") {
    CHECK_THROWS_AS(online_error(AdaptTrace{}), EmptyTraceError);
    AdaptTrace unscored;
    unscored.records.push_back(record(0, 0, 5, 10));
    unscored.records[0].n_correct = -1;
    CHECK_THROWS_AS(online_error(unscored), InvalidConfigError);
}

TEST_CASE("average accuracy and forward transfer match independent arithmetic") {
    Rng rng(99);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::int64_t n = 2 + static_cast<std::int64_t>(rng.uniform_int(31));
        AccuracyMatrix m = hand_matrix(n);
        for (std::int64_t i = 0; i < n; ++i) {
            m.r[static_cast<std::size_t>(i)][static_cast<std::size_t>(n - 1)] = rng.uniform();
            m.r[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)] = rng.uniform();
            m.solo[static_cast<std::size_t>(i)] = rng.uniform();
        }

        double a_ref = 0.0;
        for (std::int64_t i = n - 1; i >= 0; --i)
            a_ref += m.r[static_cast<std::size_t>(i)][static_cast<std::size_t>(n - 1)];
        a_ref /= static_cast<double>(n);

        double f_ref = 0.0;
        for (std::int64_t t = n - 1; t >= 1; --t)
            f_ref += m.r[static_cast<std::size_t>(t)][static_cast<std::size_t>(t)] -
                     m.solo[static_cast<std::size_t>(t)];
        f_ref /= static_cast<double>(n - 1);

        CHECK(std::abs(average_accuracy(m) - a_ref) < 1e-12);
        CHECK(std::abs(forward_transfer(m) - f_ref) < 1e-12);
    }
}

TEST_CASE("average accuracy worked examples") {
    AccuracyMatrix two = hand_matrix(2);
    two.r[0][1] = 0.8;
    two.r[1][1] = 0.6;
    CHECK(average_accuracy(two) == doctest::Approx(0.7).epsilon(1e-15));

    AccuracyMatrix ones = hand_matrix(3);
    for (auto& row : ones.r) row[2] = 1.0;
    CHECK(average_accuracy(ones) == 1.0);

    AccuracyMatrix four = hand_matrix(4);
    const double col[] = {0.9, 0.5, 0.7, 0.3};
    for (std::size_t i = 0; i < 4; ++i) four.r[i][3] = col[i];
    CHECK(average_accuracy(four) == doctest::Approx(0.6).epsilon(1e-15));

    four.r[2][3] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(average_accuracy(four), IncompleteMatrixError);
}

TEST_CASE("forward transfer worked examples") {
    AccuracyMatrix m = hand_matrix(3);
    m.r[1][1] = 0.8;
    m.r[2][2] = 0.6;
    m.solo[1] = 0.7;
    m.solo[2] = 0.7;
    CHECK(forward_transfer(m) == doctest::Approx(0.0).epsilon(1e-15));

    AccuracyMatrix two = hand_matrix(2);
    two.r[1][1] = 0.9;
    two.solo[1] = 0.6;
    CHECK(forward_transfer(two) == doctest::Approx(0.3).epsilon(1e-15));

    AccuracyMatrix identical = hand_matrix(4);
    for (std::size_t t = 1; t < 4; ++t) identical.r[t][t] = identical.solo[t] = 0.42;
    CHECK(forward_transfer(identical) == 0.0);

    AccuracyMatrix holes = hand_matrix(3);
    holes.r[1][1] = 0.8;
    holes.solo[1] = 0.7;
    CHECK_THROWS_AS(forward_transfer(holes), IncompleteMatrixError);
    CHECK_THROWS_AS(forward_transfer(hand_matrix(1)), IncompleteMatrixError);
}

TEST_CASE("erm accuracy matrices are constant across columns with exactly zero transfer") {
    const DomainStream stream = tiny_stream(21);
    const Checkpoint ckpt = raw_checkpoint(21);
    AdaptConfig cfg;
    cfg.method = AdaptMethod::Erm;
    const AccuracyMatrix m = accuracy_matrix(ckpt, stream, cfg);

    REQUIRE(m.n == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(m.r[i][i] == m.r[i][2]);
        CHECK(m.r[i][2] >= 0.0);
        CHECK(m.r[i][2] <= 1.0);
    }
    CHECK(std::isnan(m.solo[0]));
    CHECK(forward_transfer(m) == 0.0);
    CHECK_NOTHROW(average_accuracy(m));
}

TEST_CASE("adaptive accuracy matrices fill the upper triangle only") {
    const DomainStream stream = tiny_stream(22);
    const AccuracyMatrix m = accuracy_matrix(raw_checkpoint(22), stream, AdaptConfig{});

    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            const bool filled = j >= i;
            CHECK(std::isfinite(m.r[i][j]) == filled);
            if (filled) {
                CHECK(m.r[i][j] >= 0.0);
                CHECK(m.r[i][j] <= 1.0);
            }
        }
    CHECK(std::isnan(m.solo[0]));
    for (std::size_t t = 1; t < 3; ++t) CHECK(std::isfinite(m.solo[t]));
}

TEST_CASE("online diagonal reading matches the trace tallies") {
    const DomainStream stream = tiny_stream(23);
    const Checkpoint ckpt = raw_checkpoint(23);
    AdaptConfig cfg;
    cfg.method = AdaptMethod::Erm;

    const AccuracyMatrix m = accuracy_matrix(ckpt, stream, cfg, /*online_diagonal=*/true);
    const OnlineError e = online_error_breakdown(run_continual(ckpt, stream, cfg));
    for (std::size_t t = 0; t < 3; ++t)
        CHECK(m.r[t][t] == doctest::Approx(1.0 - e.per_domain[t]).epsilon(1e-15));
}

TEST_CASE("entropy error curve tracks cumulative state") {
    AdaptTrace trace;
    trace.records.push_back(record(0, 0, 10, 10, 0.7));
    trace.records.push_back(record(0, 1, 5, 10, 0.7));
    const auto curve = entropy_error_curve(trace);
    REQUIRE(curve.size() == 2);
    CHECK(curve[0].samples_adapted == 10);
    CHECK(curve[1].samples_adapted == 20);
    CHECK(curve[0].mean_entropy == 0.7);
    CHECK(curve[0].running_error == 0.0);
    CHECK(curve[1].running_error == doctest::Approx(0.25).epsilon(1e-15));
    CHECK_THROWS_AS(entropy_error_curve(AdaptTrace{}), EmptyTraceError);
}

TEST_CASE("flat curves for a constant-confidence constant-correct trace") {
    AdaptTrace trace;
    for (std::int64_t b = 0; b < 5; ++b) trace.records.push_back(record(0, b, 10, 10, 0.3));
    for (const CurvePoint& p : entropy_error_curve(trace)) {
        CHECK(p.mean_entropy == 0.3);
        CHECK(p.running_error == 0.0);
    }
}

TEST_CASE("erm entropy rises with severity") {
    SourceSpec source;
    source.n_train = 1024;
    source.n_holdout = 256;
    source.seed = 24;
    const SourceData data = gen_source(source);
    PretrainConfig pcfg;
    // An underfit model can grow more confident under corruption (Scale
    // inflates its logits); the severity trend needs a fitted one, and it
    // holds pooled over the full kind set, not per kind.
    pcfg.seed = 24;
    const Checkpoint ckpt = baseline_pretrain(PretrainMethod::Erm, data, ArchSpec{}, pcfg).checkpoint;

    AdaptConfig cfg;
    cfg.method = AdaptMethod::Erm;
    std::vector<std::pair<int, AdaptTrace>> tagged;
    for (int severity : {1, 5}) {
        StreamConfig sc;
        sc.severity = severity;
        sc.batch_size = 16;
        sc.batches_per_domain = 4;
        sc.holdout_size = 32;
        sc.seed = 24;
        tagged.emplace_back(severity, run_continual(ckpt, build_stream(source, sc), cfg));
    }

    const auto table = severity_entropy_table(tagged);
    REQUIRE(table.size() == 2);
    CHECK(table[1].mean_entropy > table[0].mean_entropy);
    CHECK(table[1].error >= table[0].error);
    CHECK_THROWS_AS(severity_entropy_table({}), EmptyTraceError);
}

TEST_CASE("metric reports serialize to json and csv") {
    const DomainStream stream = tiny_stream(25);
    const Checkpoint ckpt = raw_checkpoint(25);
    AdaptConfig cfg;
    cfg.method = AdaptMethod::Erm;

    MethodReport report;
    report.method = adapt_method_name(cfg.method);
    report.online = online_error_breakdown(run_continual(ckpt, stream, cfg));
    report.matrix = accuracy_matrix(ckpt, stream, cfg);
    report.average_acc = average_accuracy(report.matrix);
    report.forward = forward_transfer(report.matrix);

    const nlohmann::json j = nlohmann::json::parse(metrics_json(report));
    CHECK(j.at("schema_version").get<int>() == 1);
    CHECK(j.at("method").get<std::string>() == "erm");
    CHECK(j.at("per_domain_errors").size() == 3);
    CHECK(j.at("matrix").size() == 3);
    CHECK(j.at("matrix")[1][0].is_null());
    CHECK(j.at("solo")[0].is_null());
    CHECK(j.at("E").get<double>() == report.online.mean_over_domains);

    const std::string csv = metrics_csv(report);
    CHECK(csv.rfind("metric,domain,value\n", 0) == 0);
    CHECK(csv.find("average_accuracy,,") != std::string::npos);
    CHECK(csv.find("solo_accuracy,1,") != std::string::npos);
    std::size_t lines = 0;
    for (char c : csv) lines += c == '\n';
    CHECK(lines == 1 + 4 + 3 + 6 + 2);
}
