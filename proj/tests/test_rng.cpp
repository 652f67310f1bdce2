#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mixrl/rng.hpp"

using namespace mixrl;

TEST_CASE("streams are deterministic and independent") {
  Rng a(42, Stream::mixing), b(42, Stream::mixing), c(42, Stream::replay);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  bool differs = false;
  Rng a2(42, Stream::mixing);
  for (int i = 0; i < 100; ++i)
    if (a2.next_u64() != c.next_u64()) differs = true;
  CHECK(differs);
}

TEST_CASE("uniform_int covers its range without escapes") {
  Rng rng(7, 0);
  std::vector<int> counts(5, 0);
  for (int i = 0; i < 50'000; ++i) {
    const int x = rng.uniform_int(5);
    REQUIRE(x >= 0);
    REQUIRE(x < 5);
    counts[static_cast<size_t>(x)] += 1;
  }
  for (int c : counts) CHECK(c > 9'000);
  CHECK_THROWS_AS(rng.uniform_int(0), std::invalid_argument);
}

TEST_CASE("normal has sane first moments") {
  Rng rng(11, 0);
  double sum = 0.0, sq = 0.0;
  const int n = 100'000;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    sum += x;
    sq += x * x;
  }
  CHECK(std::fabs(sum / n) < 0.02);
  CHECK(std::fabs(sq / n - 1.0) < 0.03);
}

TEST_CASE("gamma is positive and matches its mean") {
  Rng rng(13, 0);
  for (double shape : {0.2, 0.7, 1.0, 3.5}) {
    double sum = 0.0;
    const int n = 40'000;
    for (int i = 0; i < n; ++i) {
      const double x = rng.gamma(shape);
      REQUIRE(x >= 0.0);
      sum += x;
    }
    CHECK(sum / n == doctest::Approx(shape).epsilon(0.05));
  }
  CHECK_THROWS_AS(rng.gamma(0.0), std::invalid_argument);
}

TEST_CASE("beta stays inside the unit interval") {
  Rng rng(17, 0);
  for (int i = 0; i < 10'000; ++i) {
    const double x = rng.beta(0.2, 0.2);
    REQUIRE(x >= 0.0);
    REQUIRE(x <= 1.0);
  }
}
