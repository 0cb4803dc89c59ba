#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ctta/adapt.hpp"
#include "ctta/checkpoint.hpp"
#include "ctta/data.hpp"

namespace ctta {

// R[i][j] = frozen accuracy on domain i's holdout after adapting through
// domains 0..j. One continual pass fills the whole upper triangle j >= i;
// the lower triangle stays NaN.
struct AccuracyMatrix {
    std::int64_t n = 0;
    std::vector<std::vector<double>> r;
    std::vector<double> solo;  // solo[t] = accuracy on t after adapting a fresh copy on t alone; solo[0] unused
};

struct OnlineError {
    std::vector<double> per_domain;
    double mean_over_domains = 0.0;  // the headline number
    double batch_weighted = 0.0;     // secondary: weighted by sample count
};

OnlineError online_error_breakdown(const AdaptTrace& trace);
double online_error(const AdaptTrace& trace);

// One continual run fills the upper triangle; a fresh single-domain run
// per t >= 1 fills solo. online_diagonal replaces the
// frozen snapshot reading of R[t][t] and solo[t] with the online accuracy
// recorded while adapting through the domain.
AccuracyMatrix accuracy_matrix(const Checkpoint& pretrained, const DomainStream& stream, const AdaptConfig& cfg,
                               bool online_diagonal = false);

double average_accuracy(const AccuracyMatrix& m);
double forward_transfer(const AccuracyMatrix& m);

struct CurvePoint {
    std::int64_t samples_adapted = 0;
    double mean_entropy = 0.0;
    double running_error = 0.0;
};

// One row per record: cumulative adapted samples, the batch's mean
// main-logit entropy, and the running error up to and including it.
std::vector<CurvePoint> entropy_error_curve(const AdaptTrace& trace);

struct SeverityPoint {
    int severity = 0;
    double mean_entropy = 0.0;
    double error = 0.0;
};

std::vector<SeverityPoint> severity_entropy_table(const std::vector<std::pair<int, AdaptTrace>>& tagged);

struct MethodReport {
    std::string method;
    OnlineError online;
    AccuracyMatrix matrix;
    double average_acc = 0.0;
    double forward = 0.0;
};

std::string metrics_json(const MethodReport& report);
std::string metrics_csv(const MethodReport& report);

}  // namespace ctta
