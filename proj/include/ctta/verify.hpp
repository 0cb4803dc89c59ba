#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace ctta {

struct SuiteResult {
    std::string name;
    bool pass = false;
    double max_deviation = 0.0;
    std::string detail;
};

// Fixed-seed property suites shared by the CLI and the acceptance harness.
SuiteResult verify_gradcheck();  // reverse-mode vs finite differences, every loss, both paradigms
SuiteResult verify_theorem1();   // one-step meta-gradient decomposition residual
SuiteResult verify_metrics();    // matrix metrics vs independent arithmetic; exact zero transfer for erm
SuiteResult verify_bn();         // batch-statistic normalization invariants

SuiteResult run_suite(std::string_view name);
std::vector<SuiteResult> run_all_suites();

}  // namespace ctta
