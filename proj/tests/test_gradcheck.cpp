// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>

#include "oracles.hpp"
#include "sevnet/gradcheck.hpp"

using namespace sevnet;

namespace {

struct SabotageGuard {
  explicit SabotageGuard(const std::string& op) { testing::set_sabotaged_op(op); }
  ~SabotageGuard() { testing::set_sabotaged_op(""); }
};

}  // namespace

TEST_CASE("finite differences agree with autodiff on a smooth composite") {
  std::mt19937_64 rng(1);
  const auto a = oracle::random_tensor({2, 3, 1, 2, 2}, rng, 1.0, true);
  const auto b = oracle::random_tensor({2, 3, 1, 2, 2}, rng, 1.0, true);
  const auto r = check_gradients(
      [](const std::vector<Tensor>& in) { return sigmoid(mul(in[0], add(in[0], in[1]))); },
      {a, b}, rng);
  CHECK(r.checked == 48);
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("coordinate cap limits the work per tensor") {
  std::mt19937_64 rng(2);
  const auto a = oracle::random_tensor({4, 5}, rng, 1.0, true);
  FiniteDiffOptions o;
  o.max_coords = 7;
  const auto r = check_gradients([](const std::vector<Tensor>& in) { return sum(mul(in[0], in[0])); },
                                 {a}, rng, o);
  CHECK(r.checked + r.skipped == 7);
}

TEST_CASE("the full tiny suite passes") {
  const auto report = run_gradcheck(7, GradCheckSize::tiny);
  CHECK(report.all_passed());
  CHECK(report.failed().empty());
  CHECK(report.results.size() == gradcheck_primitives().size() + gradcheck_blocks().size());
  for (const auto& r : report.results) {
    CHECK(r.cases == 20);
    CHECK(r.checked > 0);
    CHECK(r.max_rel_error < report.tolerance);
  }
  const auto text = report.to_text();
  for (const auto& name : gradcheck_primitives()) CHECK(text.find(name) != std::string::npos);
}

TEST_CASE("a sabotaged backward is flagged on exactly that primitive") {
  const auto& prims = gradcheck_primitives();
  for (const auto& op : prims) {
    CAPTURE(op);
    SabotageGuard guard(op);
    const auto report = run_gradcheck(7, GradCheckSize::tiny, 4);
    for (const auto& r : report.results) {
      if (r.block) continue;
      CAPTURE(r.name);
      CHECK(r.passed == (r.name != op));
    }
    CHECK_FALSE(report.all_passed());
  }
}

TEST_CASE("size names") {
  CHECK(parse_gradcheck_size("tiny") == GradCheckSize::tiny);
  CHECK(parse_gradcheck_size("default") == GradCheckSize::standard);
  CHECK_THROWS_AS(parse_gradcheck_size("huge"), std::invalid_argument);
}
