#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "lrsa/tensor.hpp"
#include "oracles.hpp"

using lrsa::backward;
using lrsa::i64;
using lrsa::Rng;
using lrsa::Tensor;

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

TEST_CASE("matmul: identity left factor") {
  auto a = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  auto b = Tensor<double>::from({2, 2}, {3, 4, 5, 6});
  auto c = lrsa::matmul(a, b);
  CHECK(c.data->size() == 4);
  for (i64 i = 0; i < 4; ++i) CHECK(c.at(i) == b.at(i));
}

TEST_CASE("matmul: 1x2 by 2x1") {
  auto a = Tensor<double>::from({1, 2}, {1, 2});
  auto b = Tensor<double>::from({2, 1}, {3, 4});
  auto c = lrsa::matmul(a, b);
  CHECK(c.shape == lrsa::Shape{1, 1});
  CHECK(c.at(0) == 11.0);
}

TEST_CASE("matmul: random 3x4 by 4x2 matches triple-loop oracle exactly") {
  Rng rng(101);
  auto a = oracles::randn({3, 4}, rng);
  auto b = oracles::randn({4, 2}, rng);
  auto c = lrsa::matmul(a, b);
  auto expect = oracles::matmul_loops(*a.data, *b.data, 3, 4, 2);
  for (i64 i = 0; i < c.numel(); ++i) CHECK(c.at(i) == expect[static_cast<std::size_t>(i)]);
}

TEST_CASE("matmul: shape mismatch names both shapes") {
  auto a = Tensor<double>::zeros({3, 4});
  auto b = Tensor<double>::zeros({5, 2});
  try {
    (void)lrsa::matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const lrsa::ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[3,4]") != std::string::npos);
    CHECK(msg.find("[5,2]") != std::string::npos);
  }
}

TEST_CASE("softmax: symmetric pair") {
  auto y = lrsa::softmax(Tensor<double>::from({2}, {0, 0}), 0);
  CHECK(y.at(0) == 0.5);
  CHECK(y.at(1) == 0.5);
}

TEST_CASE("softmax: -inf entry becomes exact zero") {
  auto y = lrsa::softmax(Tensor<double>::from({2}, {0, -kInf}), 0);
  CHECK(y.at(0) == 1.0);
  CHECK(y.at(1) == 0.0);
}

TEST_CASE("softmax: [0, 0.5] against direct evaluation") {
  auto y = lrsa::softmax(Tensor<double>::from({2}, {0, 0.5}), 0);
  auto expect = oracles::softmax_direct({0, 0.5});
  CHECK(y.at(0) == doctest::Approx(expect[0]).epsilon(1e-14));
  CHECK(y.at(1) == doctest::Approx(expect[1]).epsilon(1e-14));
  CHECK(y.at(0) == doctest::Approx(0.3775406687981454).epsilon(1e-12));
  CHECK(y.at(1) == doctest::Approx(0.6224593312018546).epsilon(1e-12));
}

TEST_CASE("softmax: fully masked slice raises DegenerateRowError") {
  auto x = Tensor<double>::from({2, 2}, {0, 1, -kInf, -kInf});
  CHECK_THROWS_AS((void)lrsa::softmax(x, 1), lrsa::DegenerateRowError);
}

TEST_CASE("softmax: slices nonnegative and sum to 1 within 1e-12") {
  Rng rng(5);
  auto x = oracles::randn({13, 9}, rng, false, 3.0);
  auto y = lrsa::softmax(x, 1);
  for (i64 r = 0; r < 13; ++r) {
    double s = 0.0;
    for (i64 c = 0; c < 9; ++c) {
      CHECK(y.at(r, c) >= 0.0);
      s += y.at(r, c);
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("reduce_std: constant row is exactly zero") {
  auto s = lrsa::reduce_std(Tensor<double>::from({3}, {5, 5, 5}), 0);
  CHECK(s.item() == 0.0);
}

TEST_CASE("reduce_std: two-point population std") {
  auto s = lrsa::reduce_std(Tensor<double>::from({2}, {0, 10}), 0);
  CHECK(s.item() == doctest::Approx(5.0).epsilon(1e-15));
}

TEST_CASE("reduce_std: [1,2,3,4] against direct formula") {
  auto s = lrsa::reduce_std(Tensor<double>::from({4}, {1, 2, 3, 4}), 0);
  CHECK(s.item() == doctest::Approx(oracles::population_std_direct({1, 2, 3, 4})).epsilon(1e-13));
  CHECK(s.item() == doctest::Approx(1.118033988749895).epsilon(1e-12));
}

TEST_CASE("reduce_std: nonnegative, zero iff constant") {
  Rng rng(6);
  auto x = oracles::randn({8, 5}, rng);
  auto s = lrsa::reduce_std(x, 1);
  for (i64 r = 0; r < 8; ++r) CHECK(s.at(r) > 0.0);
  auto c = Tensor<double>::from({2, 3}, {0.1, 0.1, 0.1, -2, -2, -2});
  auto sc = lrsa::reduce_std(c, 1);
  CHECK(sc.at(0) == 0.0);
  CHECK(sc.at(1) == 0.0);
}

TEST_CASE("reduce_minmax: examples and loop oracle") {
  auto [mn, mx] = lrsa::reduce_minmax(Tensor<double>::from({2, 2}, {1, 9, 3, 2}), 0);
  CHECK(mn.at(0) == 1.0);
  CHECK(mn.at(1) == 2.0);
  CHECK(mx.at(0) == 3.0);
  CHECK(mx.at(1) == 9.0);

  auto row = Tensor<double>::from({1, 3}, {4, -1, 7});
  auto [mn1, mx1] = lrsa::reduce_minmax(row, 0);
  for (i64 c = 0; c < 3; ++c) {
    CHECK(mn1.at(c) == row.at(0, c));
    CHECK(mx1.at(c) == row.at(0, c));
  }

  Rng rng(7);
  auto x = oracles::randn({8, 4}, rng);
  auto [mn2, mx2] = lrsa::reduce_minmax(x, 0);
  for (i64 c = 0; c < 4; ++c) {
    double lo = x.at(0, c), hi = x.at(0, c);
    for (i64 r = 1; r < 8; ++r) {
      lo = std::min(lo, x.at(r, c));
      hi = std::max(hi, x.at(r, c));
    }
    CHECK(mn2.at(c) == lo);
    CHECK(mx2.at(c) == hi);
  }
}

TEST_CASE("gather_rows: full selection is identity; single row; errors") {
  Rng rng(8);
  auto x = oracles::randn({4, 3}, rng);
  auto full = lrsa::gather_rows(x, {0, 1, 2, 3});
  for (i64 i = 0; i < x.numel(); ++i) CHECK(full.at(i) == x.at(i));

  auto col = Tensor<double>::from({3, 1}, {1, 2, 3});
  auto one = lrsa::gather_rows(col, {2});
  CHECK(one.shape == lrsa::Shape{1, 1});
  CHECK(one.at(0) == 3.0);

  CHECK_THROWS_AS((void)lrsa::gather_rows(x, {0, 4}), lrsa::IndexError);
  CHECK_THROWS_AS((void)lrsa::gather_rows(x, {2, 1}), lrsa::IndexError);
  CHECK_THROWS_AS((void)lrsa::gather_rows(x, {1, 1}), lrsa::IndexError);
}

TEST_CASE("gather_rows: backward matches central differences") {
  const double err = oracles::op_grad_check(
      {5, 2}, [](const Tensor<double>& x) { return lrsa::gather_rows(x, {0, 2, 4}); }, 9, 1e-6);
  CHECK(err < 1e-7);
}

TEST_CASE("backward: sum of 2x2 gives unit gradients") {
  auto w = Tensor<double>::from({2, 2}, {1, 2, 3, 4}, true);
  auto loss = lrsa::sum(w);
  backward(loss);
  for (i64 i = 0; i < 4; ++i) CHECK((*w.grad)[static_cast<std::size_t>(i)] == 1.0);
}

TEST_CASE("backward: d(w*w) = 2w") {
  auto w = Tensor<double>::from({1}, {1.5}, true);
  auto loss = lrsa::sum(lrsa::mul(w, w));
  backward(loss);
  CHECK((*w.grad)[0] == doctest::Approx(3.0).epsilon(1e-15));
}

TEST_CASE("backward: composite matmul -> softmax -> sum matches finite differences") {
  Rng rng(10);
  auto a = oracles::randn({3, 3}, rng, true);
  auto b = oracles::randn({3, 3}, rng);
  auto w = oracles::randn({3, 3}, rng);
  auto loss = lrsa::sum(lrsa::mul(lrsa::softmax(lrsa::matmul(a, b), 1), w));
  backward(loss);
  auto f = [&]() {
    lrsa::NoGradGuard ng;
    auto y = lrsa::softmax(lrsa::matmul(a.detached(), b), 1);
    double acc = 0.0;
    for (i64 i = 0; i < y.numel(); ++i) acc += y.at(i) * w.at(i);
    return acc;
  };
  auto fd = oracles::fd_grad(a, f, 1e-6);
  for (i64 i = 0; i < a.numel(); ++i)
    CHECK(oracles::rel_err((*a.grad)[static_cast<std::size_t>(i)], fd[static_cast<std::size_t>(i)],
                           1e-3) < 1e-6);
}

TEST_CASE("backward: non-scalar loss and repeated sweep are errors") {
  auto w = Tensor<double>::from({2}, {1, 2}, true);
  auto y = lrsa::mul(w, w);
  CHECK_THROWS_AS(backward(y), lrsa::AutogradError);
  auto loss = lrsa::sum(lrsa::mul(w, w));
  backward(loss);
  CHECK_THROWS_AS(backward(loss), lrsa::AutogradError);
  auto leaf = Tensor<double>::from({}, {3.0});
  CHECK_THROWS_AS(backward(leaf), lrsa::AutogradError);
}

TEST_CASE("gradients: finite differences across every differentiable op") {
  using T = Tensor<double>;
  CHECK(oracles::op_grad_check({4, 3}, [](const T& x) { return lrsa::softmax(x, 1); }, 21) < 1e-5);
  CHECK(oracles::op_grad_check({4, 3}, [](const T& x) { return lrsa::softmax(x, 0); }, 22) < 1e-5);
  CHECK(oracles::op_grad_check({6}, [](const T& x) { return lrsa::softmax(x, 0); }, 23) < 1e-5);
  CHECK(oracles::op_grad_check({4, 5}, [](const T& x) { return lrsa::reduce_std(x, 1); }, 24) <
        1e-5);
  CHECK(oracles::op_grad_check({4, 5}, [](const T& x) { return lrsa::reduce_std(x, 0); }, 25) <
        1e-5);
  CHECK(oracles::op_grad_check({3, 4}, [](const T& x) { return lrsa::slice_rows(x, 1, 3); }, 26) <
        1e-5);
  CHECK(oracles::op_grad_check({3, 4}, [](const T& x) { return lrsa::slice_cols(x, 1, 4); }, 27) <
        1e-5);
  CHECK(oracles::op_grad_check({4, 4}, [](const T& x) { return lrsa::scale(x, 2.5); }, 28) < 1e-5);
  Rng wr(29);
  auto other = oracles::randn({4, 4}, wr);
  CHECK(oracles::op_grad_check({4, 4}, [&](const T& x) { return lrsa::add(x, other); }, 30) < 1e-5);
  CHECK(oracles::op_grad_check({4, 4}, [&](const T& x) { return lrsa::mul(x, other); }, 31) < 1e-5);
  CHECK(oracles::op_grad_check({4, 4}, [&](const T& x) { return lrsa::silu_gate(x, other); }, 32) <
        1e-5);
  CHECK(oracles::op_grad_check({4, 4}, [&](const T& x) { return lrsa::silu_gate(other, x); }, 33) <
        1e-5);
  auto nw = oracles::randn({4}, wr);
  CHECK(oracles::op_grad_check({3, 4}, [&](const T& x) { return lrsa::rmsnorm(x, nw, 1e-6); }, 34) <
        1e-5);
  CHECK(oracles::op_grad_check(
            {5, 4}, [](const T& x) { return lrsa::rope(x, {0, 3, 7, 11, 20}, 10000.0); }, 35) <
        1e-5);
  std::vector<std::int32_t> ids{1, 0, 2, 1};
  CHECK(oracles::op_grad_check({3, 4}, [&](const T& x) { return lrsa::embed_rows(x, ids); }, 36) <
        1e-5);
  auto mm_other = oracles::randn({4, 3}, wr);
  CHECK(oracles::op_grad_check({3, 4}, [&](const T& x) { return lrsa::matmul(x, mm_other); }, 37) <
        1e-5);
  CHECK(oracles::op_grad_check({3, 4}, [&](const T& x) { return lrsa::matmul(mm_other, x); }, 38) <
        1e-5);
  auto nt_other = oracles::randn({5, 4}, wr);
  CHECK(oracles::op_grad_check({3, 4}, [&](const T& x) { return lrsa::matmul_nt(x, nt_other); },
                               39) < 1e-5);
  CHECK(oracles::op_grad_check({5, 4}, [&](const T& x) { return lrsa::matmul_nt(nt_other, x); },
                               40) < 1e-5);
  CHECK(oracles::op_grad_check(
            {2, 3}, [&](const T& x) { return lrsa::concat_rows<double>({x, mm_other.detached()}); },
            41) < 1e-5);
  CHECK(oracles::op_grad_check(
            {4, 2}, [&](const T& x) { return lrsa::concat_cols<double>({x, mm_other.detached()}); },
            42) < 1e-5);
}

TEST_CASE("cross_entropy: gradient is (softmax - onehot)/count") {
  Rng rng(50);
  auto z = oracles::randn({3, 5}, rng, true);
  std::vector<std::int32_t> targets{2, -1, 0};
  auto loss = lrsa::cross_entropy(z, targets);
  backward(loss);
  for (i64 r = 0; r < 3; ++r) {
    std::vector<double> row(5);
    for (i64 c = 0; c < 5; ++c) row[static_cast<std::size_t>(c)] = z.at(r, c);
    auto p = oracles::softmax_direct(row);
    for (i64 c = 0; c < 5; ++c) {
      const double expected =
          targets[static_cast<std::size_t>(r)] < 0
              ? 0.0
              : (p[static_cast<std::size_t>(c)] -
                 (c == targets[static_cast<std::size_t>(r)] ? 1.0 : 0.0)) /
                    2.0;
      CHECK((*z.grad)[static_cast<std::size_t>(r * 5 + c)] ==
            doctest::Approx(expected).epsilon(1e-12));
    }
  }
}

TEST_CASE("determinism: identical seeds give bitwise identical op chains") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    auto a = oracles::randn({16, 16}, rng, true);
    auto b = oracles::randn({16, 16}, rng);
    auto w = oracles::randn({16, 16}, rng);
    auto loss = lrsa::sum(lrsa::mul(lrsa::softmax(lrsa::matmul(a, b), 1), w));
    backward(loss);
    return std::make_pair(*a.grad, loss.item());
  };
  auto [g1, l1] = run(99);
  auto [g2, l2] = run(99);
  CHECK(l1 == l2);
  CHECK(g1 == g2);
}
