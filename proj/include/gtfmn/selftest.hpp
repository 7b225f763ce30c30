#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace gtfmn {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;  // filled on failure
};

// Embedded oracle suite: gradient cross-checks, illumination-map synthesis
// examples, pixel-shuffle round trip, metric and degradation oracles,
// optimizer sanity and serialization round trip.
std::vector<CheckResult> run_selftest();

// The zero-map synthesis check with an injectable epsilon; epsilon <= 0
// reproduces the division-by-zero failure the stabilizer exists to prevent.
bool check_map_synthesis_zero_map(double epsilon, std::string* detail = nullptr);

// Runs the suite, prints one line per check plus a summary. Returns 0 when
// everything passed, 3 otherwise.
int selftest_report(std::ostream& os);

} // namespace gtfmn
