#include <doctest.h>

#include <cmath>
#include <limits>
#include <set>

#include "moca/common.h"

using namespace moca;

TEST_CASE("rng streams are reproducible and seed-sensitive") {
  Rng a(7), b(7), c(8);
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next();
    CHECK(x == b.next());
    CHECK(x != c.next());
  }
}

TEST_CASE("integer draws stay inside the inclusive range") {
  Rng rng(1);
  std::set<std::size_t> seen;
  for (int i = 0; i < 2000; ++i) {
    const auto v = rng.integer(3, 6);
    CHECK(v >= 3);
    CHECK(v <= 6);
    seen.insert(v);
  }
  CHECK(seen.size() == 4);
}

TEST_CASE("sample_without_replacement returns distinct indices") {
  Rng rng(3);
  for (std::size_t k = 0; k <= 10; ++k) {
    const auto s = rng.sample_without_replacement(10, k);
    CHECK(s.size() == k);
    CHECK(std::set<std::size_t>(s.begin(), s.end()).size() == k);
    for (auto v : s) CHECK(v < 10);
  }
  CHECK_THROWS_AS(rng.sample_without_replacement(3, 4), ParameterError);
}

TEST_CASE("matrix products and transposes") {
  Matrix a(2, 3, {1, 2, 3, 4, 5, 6});
  Matrix b(3, 2, {7, 8, 9, 10, 11, 12});
  const Matrix c = a * b;
  CHECK(c == Matrix(2, 2, {58, 64, 139, 154}));
  CHECK(a.transposed().transposed() == a);
  CHECK(Matrix::identity(3).trace() == 3.0);
  CHECK_THROWS_AS(a * a, ParameterError);
  CHECK(max_abs_diff(a + a, 2.0 * a) == 0.0);
}

TEST_CASE("format_double round-trips") {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 0.0, 123456789.0}) {
    const auto s = format_double(v);
    CHECK(std::stod(s) == v);
  }
  CHECK(format_double(0.5) == "0.5");
}

TEST_CASE("little_endian conversion is an involution") {
  for (std::uint32_t v : {0u, 1u, 0x01020304u, 0xffffffffu}) CHECK(little_endian(little_endian(v)) == v);
}

TEST_CASE("parse errors carry their line") {
  ParseError e("file.cfg", 12, "bad");
  CHECK(e.line() == 12);
  CHECK(std::string(e.what()) == "file.cfg:12: bad");
}
