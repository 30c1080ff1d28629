#include "doctest.h"
#include "mted/error.hpp"
#include "mted/gradsuite.hpp"

using namespace mted;

TEST_CASE("every gradient check passes its tolerance") {
  const auto entries = run_gradcheck_suite();
  CHECK(entries.size() == gradcheck_names().size());
  for (const auto& e : entries) {
    INFO(e.name << " worst " << e.result.worst_relative_error << " at " << e.result.worst_tensor);
    CHECK(e.passed);
    CHECK(e.result.elements_checked > 0);
  }
}

TEST_CASE("single op selection") {
  const auto one = run_gradcheck_suite("softmax");
  REQUIRE(one.size() == 1);
  CHECK(one[0].name == "softmax");
  CHECK(one[0].tolerance == kGradTolerance);
  CHECK(run_gradcheck_suite("bilinear_sample")[0].tolerance == kGradToleranceSampling);
  CHECK_THROWS_AS(run_gradcheck_suite("no_such_op"), UsageError);
}
