#include "ctta/verify.hpp"

#include <doctest.h>

#include "ctta/errors.hpp"

using namespace ctta;

TEST_CASE("every verification suite passes") {
    for (const SuiteResult& r : run_all_suites()) {
        INFO(r.name, ": ", r.detail);
        CHECK(r.pass);
    }
}

TEST_CASE("suites are reachable by name") {
    const SuiteResult r = run_suite("bn");
    CHECK(r.name == "bn");
    CHECK(r.pass);
    CHECK_THROWS_AS(run_suite("nope"), InvalidConfigError);
}
