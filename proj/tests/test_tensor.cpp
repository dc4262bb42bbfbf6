#include "doctest.h"

#include <stdexcept>

#include "milscene/ops.hpp"
#include "milscene/tensor.hpp"

using namespace milscene;

TEST_CASE("tensor shape and data stay consistent") {
  auto t = make_tensor({2, 3}, 1.5);
  CHECK(t->size() == 6);
  CHECK(t->rank() == 2);
  CHECK(t->data[5] == 1.5);
  CHECK_THROWS_AS(make_tensor({2, 0}), std::invalid_argument);
  CHECK_THROWS_AS(make_tensor({2}, std::vector<double>{1.0, 2.0, 3.0}), std::invalid_argument);
}

TEST_CASE("backward requires a scalar root and accumulates additively") {
  auto x = make_param({3});
  x->data = {1.0, 2.0, 3.0};
  auto y = scale(x, 2.0);
  CHECK_THROWS_AS(backward(y), std::invalid_argument);

  auto s = add(x, x);           // 2x elementwise
  auto root = scale(reshape(s, {3}), 1.0);
  CHECK_THROWS_AS(backward(root), std::invalid_argument);  // still not scalar

  auto x2 = make_param({1});
  x2->data = {4.0};
  auto r = scale(x2, 3.0);
  backward(r);
  CHECK(x2->grad[0] == doctest::Approx(3.0));
  backward(scale(x2, 3.0));  // second sweep accumulates
  CHECK(x2->grad[0] == doctest::Approx(6.0));
}

TEST_CASE("a node reached through two paths gets both contributions") {
  auto x = make_param({1});
  x->data = {5.0};
  auto a = scale(x, 2.0);
  auto b = scale(x, 3.0);
  auto s = add(a, b);  // 5x
  backward(s);
  CHECK(x->grad[0] == doctest::Approx(5.0));
}

TEST_CASE("grad pause suspends graph construction") {
  auto x = make_param({2, 2}, 1.0);
  {
    GradPause off;
    auto y = scale(x, 2.0);
    CHECK(y->parents.empty());
    CHECK_FALSE(y->tracked());
  }
  auto y = scale(x, 2.0);
  CHECK(y->parents.size() == 1);
}

TEST_CASE("param set enforces unique names and keeps insertion order") {
  ParamSet ps;
  ps.add("b", make_tensor({2}));
  ps.add("a", make_tensor({3}));
  ps.add_buffer("rm", make_tensor({2}));
  CHECK_THROWS_AS(ps.add("a", make_tensor({1})), std::invalid_argument);
  CHECK_THROWS_AS(ps.add_buffer("b", make_tensor({1})), std::invalid_argument);
  REQUIRE(ps.names().size() == 2);
  CHECK(ps.names()[0] == "b");
  CHECK(ps.names()[1] == "a");
  CHECK(ps.total_params() == 5);
  CHECK(ps.find("rm") != nullptr);
  CHECK(ps.find("missing") == nullptr);
}

TEST_CASE("quantize_f32 rounds through float32 exactly once") {
  ParamSet ps;
  auto p = ps.add("w", make_tensor({1}, 0.1));
  ps.quantize_f32();
  const double once = p->data[0];
  CHECK(once == static_cast<double>(0.1f));
  ps.quantize_f32();
  CHECK(p->data[0] == once);
}
