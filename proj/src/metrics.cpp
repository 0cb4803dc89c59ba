#include "ctta/metrics.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include <json.hpp>

#include "ctta/errors.hpp"

namespace ctta {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

struct DomainTally {
    std::int64_t correct = 0;
    std::int64_t total = 0;
};

std::map<std::int64_t, DomainTally> tally(const AdaptTrace& trace) {
    if (trace.records.empty()) throw EmptyTraceError("metrics: empty trace");
    std::map<std::int64_t, DomainTally> by_domain;
    for (const BatchRecord& rec : trace.records) {
        if (rec.n_correct < 0) throw InvalidConfigError("metrics: trace has unscored records");
        DomainTally& t = by_domain[rec.domain];
        t.correct += rec.n_correct;
        t.total += static_cast<std::int64_t>(rec.predictions.size());
    }
    return by_domain;
}

double domain_online_accuracy(const AdaptTrace& trace, std::int64_t domain) {
    std::int64_t correct = 0, total = 0;
    for (const BatchRecord& rec : trace.records) {
        if (rec.domain != domain) continue;
        if (rec.n_correct < 0) throw InvalidConfigError("metrics: trace has unscored records");
        correct += rec.n_correct;
        total += static_cast<std::int64_t>(rec.predictions.size());
    }
    if (total == 0) throw EmptyTraceError("metrics: no records for the requested domain");
    return static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace

OnlineError online_error_breakdown(const AdaptTrace& trace) {
    const auto by_domain = tally(trace);
    OnlineError out;
    std::int64_t correct = 0, total = 0;
    for (const auto& [domain, t] : by_domain) {
        out.per_domain.push_back(1.0 - static_cast<double>(t.correct) / static_cast<double>(t.total));
        correct += t.correct;
        total += t.total;
    }
    for (double e : out.per_domain) out.mean_over_domains += e;
    out.mean_over_domains /= static_cast<double>(out.per_domain.size());
    out.batch_weighted = 1.0 - static_cast<double>(correct) / static_cast<double>(total);
    return out;
}

double online_error(const AdaptTrace& trace) { return online_error_breakdown(trace).mean_over_domains; }

AccuracyMatrix accuracy_matrix(const Checkpoint& pretrained, const DomainStream& stream, const AdaptConfig& cfg,
                               bool online_diagonal) {
    const std::int64_t n = static_cast<std::int64_t>(stream.domains.size());
    if (n == 0) throw EmptyTraceError("accuracy_matrix: empty stream");

    AccuracyMatrix m;
    m.n = n;
    m.r.assign(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(n), kNan));
    m.solo.assign(static_cast<std::size_t>(n), kNan);

    const AdaptTrace trace = run_continual(pretrained, stream, cfg);
    for (std::int64_t i = 0; i < n; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        for (std::int64_t j = i; j < n; ++j)
            m.r[ui][static_cast<std::size_t>(j)] =
                evaluate(trace.snapshots[static_cast<std::size_t>(j)], stream.domains[ui].holdout);
        if (online_diagonal) m.r[ui][ui] = domain_online_accuracy(trace, i);
    }

    for (std::int64_t t = 1; t < n; ++t) {
        const auto ut = static_cast<std::size_t>(t);
        DomainStream single;
        single.setup = stream.setup;
        single.batch_size = stream.batch_size;
        single.domains.push_back(stream.domains[ut]);
        const AdaptTrace solo_trace = run_continual(pretrained, single, cfg);
        m.solo[ut] = online_diagonal ? domain_online_accuracy(solo_trace, 0)
                                     : evaluate(solo_trace.snapshots.back(), stream.domains[ut].holdout);
    }
    return m;
}

double average_accuracy(const AccuracyMatrix& m) {
    if (m.n < 1) throw IncompleteMatrixError("average_accuracy: empty matrix");
    double sum = 0.0;
    for (std::int64_t t = 0; t < m.n; ++t) {
        const double v = m.r[static_cast<std::size_t>(t)][static_cast<std::size_t>(m.n - 1)];
        if (!std::isfinite(v)) throw IncompleteMatrixError("average_accuracy: final column has holes");
        sum += v;
    }
    return sum / static_cast<double>(m.n);
}

double forward_transfer(const AccuracyMatrix& m) {
    if (m.n < 2) throw IncompleteMatrixError("forward_transfer: needs at least two domains");
    double sum = 0.0;
    for (std::int64_t t = 1; t < m.n; ++t) {
        const auto ut = static_cast<std::size_t>(t);
        const double diag = m.r[ut][ut];
        const double solo = m.solo[ut];
        if (!std::isfinite(diag) || !std::isfinite(solo))
            throw IncompleteMatrixError("forward_transfer: diagonal or solo entries missing");
        sum += diag - solo;
    }
    return sum / static_cast<double>(m.n - 1);
}

std::vector<CurvePoint> entropy_error_curve(const AdaptTrace& trace) {
    if (trace.records.empty()) throw EmptyTraceError("entropy_error_curve: empty trace");
    std::vector<CurvePoint> curve;
    curve.reserve(trace.records.size());
    std::int64_t correct = 0, total = 0;
    for (const BatchRecord& rec : trace.records) {
        if (rec.n_correct < 0) throw InvalidConfigError("entropy_error_curve: trace has unscored records");
        correct += rec.n_correct;
        total += static_cast<std::int64_t>(rec.predictions.size());
        curve.push_back({total, rec.entropy_main, 1.0 - static_cast<double>(correct) / static_cast<double>(total)});
    }
    return curve;
}

std::vector<SeverityPoint> severity_entropy_table(const std::vector<std::pair<int, AdaptTrace>>& tagged) {
    if (tagged.empty()) throw EmptyTraceError("severity_entropy_table: no traces");
    std::vector<SeverityPoint> table;
    for (const auto& [severity, trace] : tagged) {
        if (trace.records.empty()) throw EmptyTraceError("severity_entropy_table: empty trace");
        double entropy = 0.0;
        for (const BatchRecord& rec : trace.records) entropy += rec.entropy_main;
        entropy /= static_cast<double>(trace.records.size());
        table.push_back({severity, entropy, online_error(trace)});
    }
    return table;
}

std::string metrics_json(const MethodReport& report) {
    nlohmann::json matrix = nlohmann::json::array();
    for (const auto& row : report.matrix.r) matrix.push_back(row);  // NaN serializes as null
    const nlohmann::json j{{"schema_version", 1},
                           {"method", report.method},
                           {"E", report.online.mean_over_domains},
                           {"E_batch_weighted", report.online.batch_weighted},
                           {"A", report.average_acc},
                           {"F", report.forward},
                           {"per_domain_errors", report.online.per_domain},
                           {"matrix", matrix},
                           {"solo", report.matrix.solo}};
    return j.dump(2);
}

std::string metrics_csv(const MethodReport& report) {
    std::ostringstream out;
    out.precision(17);
    out << "metric,domain,value\n";
    out << "online_error_mean,," << report.online.mean_over_domains << '\n';
    out << "online_error_weighted,," << report.online.batch_weighted << '\n';
    out << "average_accuracy,," << report.average_acc << '\n';
    out << "forward_transfer,," << report.forward << '\n';
    for (std::size_t d = 0; d < report.online.per_domain.size(); ++d)
        out << "online_error," << d << ',' << report.online.per_domain[d] << '\n';
    for (std::int64_t d = 0; d < report.matrix.n; ++d) {
        const auto ud = static_cast<std::size_t>(d);
        out << "final_accuracy," << d << ',' << report.matrix.r[ud][static_cast<std::size_t>(report.matrix.n - 1)]
            << '\n';
        out << "diagonal_accuracy," << d << ',' << report.matrix.r[ud][ud] << '\n';
    }
    for (std::int64_t d = 1; d < report.matrix.n; ++d)
        out << "solo_accuracy," << d << ',' << report.matrix.solo[static_cast<std::size_t>(d)] << '\n';
    return out.str();
}

}  // namespace ctta
