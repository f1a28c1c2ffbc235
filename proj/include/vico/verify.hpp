#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace vico::verify {

struct CheckResult {
    std::string name;
    bool pass = false;
    double measured = 0.0;   // worst observed error (or statistic)
    double tolerance = 0.0;  // threshold it was compared against
    std::string detail;
};

struct SuiteReport {
    std::string suite;
    std::vector<CheckResult> checks;
    double elapsed_seconds = 0.0;

    bool all_pass() const;
};

// Suites: schedule, flowmodel, tweedie, dps, decomposition, all.
const std::vector<std::string>& suite_names();

SuiteReport run_suite(const std::string& name);
// "all" expands to every suite in order.
std::vector<SuiteReport> run_suites(const std::string& name);

// One line per check: [PASS|FAIL] suite/name measured=... tol=...
void print_reports(const std::vector<SuiteReport>& reports, std::ostream& os);

}  // namespace vico::verify
