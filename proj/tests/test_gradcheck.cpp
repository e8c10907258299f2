#include "doctest.h"
#include "support/gradcheck.hpp"

TEST_CASE("every differentiable op matches central finite differences") {
    auto results = qlst::testing::run_gradchecks(20240611, 20);
    CHECK(results.size() >= 13);
    for (const auto& r : results) {
        INFO(r.op << " worst relative error " << r.worst_rel_err);
        CHECK(r.cases == 20);
        CHECK(r.passed == r.cases);
    }
}
