#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vector>
#include <cstdint>

#include "lrsa/kernels.hpp"
#include "lrsa/parallel.hpp"
#include "lrsa/reference_kernels.hpp"
#include "lrsa/rng.hpp"

// The production kernels parallelize only independent outputs with fixed
// per-output reduction order, so serial and OpenMP runs must agree bitwise,
// and the matmuls must agree bitwise with the naive reference loops too
// (identical addition order per output element).

using i64 = std::int64_t;

namespace {

std::vector<double> randvec(i64 n, std::uint64_t seed) {
  lrsa::Rng rng(seed);
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = rng.normal();
  return v;
}

struct ThreadCapRestore {
  ~ThreadCapRestore() { lrsa::set_max_threads(0); }
};

}  // namespace

TEST_CASE("matmul kernels: serial == omp == reference, bitwise") {
  ThreadCapRestore restore;
  for (auto [m, k, n] : {std::tuple<i64, i64, i64>{3, 4, 2},
                         {17, 31, 13},
                         {64, 64, 64},
                         {100, 7, 99}}) {
    auto a = randvec(m * k, 1000 + m);
    auto b_nn = randvec(k * n, 2000 + n);
    auto b_nt = randvec(n * k, 3000 + n);
    auto b_tn = randvec(m * n, 4000 + n);

    std::vector<double> ref(static_cast<std::size_t>(m * n));
    std::vector<double> serial(ref.size()), par(ref.size());
    lrsa::ref::mm_nn(a.data(), b_nn.data(), ref.data(), m, k, n);
    lrsa::set_max_threads(1);
    lrsa::kernels::mm_nn(a.data(), b_nn.data(), serial.data(), m, k, n, false);
    lrsa::set_max_threads(0);
    lrsa::kernels::mm_nn(a.data(), b_nn.data(), par.data(), m, k, n, false);
    CHECK(ref == serial);
    CHECK(serial == par);

    std::vector<double> ref2(static_cast<std::size_t>(m * n)), s2(ref2.size()), p2(ref2.size());
    lrsa::ref::mm_nt(a.data(), b_nt.data(), ref2.data(), m, k, n);
    lrsa::set_max_threads(1);
    lrsa::kernels::mm_nt(a.data(), b_nt.data(), s2.data(), m, k, n, false);
    lrsa::set_max_threads(0);
    lrsa::kernels::mm_nt(a.data(), b_nt.data(), p2.data(), m, k, n, false);
    CHECK(ref2 == s2);
    CHECK(s2 == p2);

    std::vector<double> ref3(static_cast<std::size_t>(k * n)), s3(ref3.size()), p3(ref3.size());
    lrsa::ref::mm_tn(a.data(), b_tn.data(), ref3.data(), m, k, n);
    lrsa::set_max_threads(1);
    lrsa::kernels::mm_tn(a.data(), b_tn.data(), s3.data(), m, k, n, false);
    lrsa::set_max_threads(0);
    lrsa::kernels::mm_tn(a.data(), b_tn.data(), p3.data(), m, k, n, false);
    CHECK(ref3 == s3);
    CHECK(s3 == p3);
  }
}

TEST_CASE("matmul kernels: accumulate adds terms in ascending k on top of existing values") {
  const i64 m = 6, k = 5, n = 4;
  auto a = randvec(m * k, 11);
  auto b = randvec(k * n, 12);
  std::vector<double> base = randvec(m * n, 13);
  std::vector<double> acc = base;
  lrsa::kernels::mm_nn(a.data(), b.data(), acc.data(), m, k, n, true);
  std::vector<double> expect = base;  // same accumulation order as the contract
  for (i64 i = 0; i < m; ++i)
    for (i64 p = 0; p < k; ++p)
      for (i64 j = 0; j < n; ++j)
        expect[static_cast<std::size_t>(i * n + j)] +=
            a[static_cast<std::size_t>(i * k + p)] * b[static_cast<std::size_t>(p * n + j)];
  CHECK(acc == expect);
}

TEST_CASE("softmax kernel: serial == omp bitwise, matches reference closely") {
  ThreadCapRestore restore;
  const i64 rows = 300, cols = 97;
  auto x = randvec(rows * cols, 77);
  std::vector<double> serial(x.size()), par(x.size()), ref(x.size());
  lrsa::set_max_threads(1);
  lrsa::kernels::softmax_rows(x.data(), serial.data(), rows, cols);
  lrsa::set_max_threads(0);
  lrsa::kernels::softmax_rows(x.data(), par.data(), rows, cols);
  lrsa::ref::softmax_rows(x.data(), ref.data(), rows, cols);
  CHECK(serial == par);
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(serial[i] == doctest::Approx(ref[i]).epsilon(1e-14));
}

TEST_CASE("rope kernel: serial == omp bitwise; inverse rotation undoes it") {
  ThreadCapRestore restore;
  const i64 rows = 500, d = 16;
  auto x = randvec(rows * d, 5);
  std::vector<i64> pos(static_cast<std::size_t>(rows));
  for (i64 i = 0; i < rows; ++i) pos[static_cast<std::size_t>(i)] = i;
  std::vector<double> serial(x.size()), par(x.size()), back(x.size());
  lrsa::set_max_threads(1);
  lrsa::kernels::rope_rows(x.data(), serial.data(), rows, d, pos.data(), 10000.0, +1);
  lrsa::set_max_threads(0);
  lrsa::kernels::rope_rows(x.data(), par.data(), rows, d, pos.data(), 10000.0, +1);
  CHECK(serial == par);
  lrsa::kernels::rope_rows(serial.data(), back.data(), rows, d, pos.data(), 10000.0, -1);
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(back[i] == doctest::Approx(x[i]).epsilon(1e-12));
}
