#include "doctest.h"

#include <cmath>
#include <new>

#include "oracles.hpp"
#include "xvit/ops.hpp"
#include "xvit/tensor.hpp"

using namespace xvit;

TEST_CASE("shape bookkeeping") {
  Tensor t = Tensor::zeros({2, 3, 4});
  CHECK(t.rank() == 3);
  CHECK(t.numel() == 24);
  CHECK(t.nbytes() == 24 * 8);
  CHECK(t.dim(2) == 4);
  CHECK_THROWS_AS(t.dim(3), AxisError);
  CHECK_THROWS_AS(Tensor(Shape{}), ShapeError);
  CHECK_THROWS_AS(Tensor(Shape{3, 0}), ShapeError);
  CHECK(shape_str({2, 3}) == "[2x3]");
  CHECK(Tensor::zeros({5}, DType::f32).nbytes() == 20);
}

TEST_CASE("from checks the element count") {
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
  Tensor t = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK(t.at(1, 0) == 3.0);
}

TEST_CASE("copies share until written") {
  Tensor a = Tensor::from({3}, {1, 2, 3});
  Tensor b = a;
  CHECK(a.shares_buffer_with(b));
  b.set(0, 9.0);
  CHECK_FALSE(a.shares_buffer_with(b));
  CHECK(a.at(0) == 1.0);
  CHECK(b.at(0) == 9.0);
  Tensor r = a.reshape({1, 3});
  CHECK(r.shares_buffer_with(a));
  CHECK_THROWS_AS(a.reshape({2, 2}), ShapeError);
}

TEST_CASE("dtype access is checked") {
  Tensor a = Tensor::zeros({2}, DType::f32);
  CHECK_THROWS_AS(a.data<double>(), ShapeError);
  Tensor d = Tensor::from({2}, {0.1, 0.2}).astype(DType::f32);
  CHECK(d.dtype() == DType::f32);
  CHECK(d.at(0) == static_cast<double>(0.1f));
  CHECK(parse_dtype("f32") == DType::f32);
  CHECK_THROWS_AS(parse_dtype("f16"), ConfigError);
}

TEST_CASE("allocation tracker counts buffer bytes") {
  const auto before = alloc_stats();
  {
    Tensor a = Tensor::zeros({1000});
    CHECK(alloc_stats().live_bytes == before.live_bytes + 8000);
    Tensor b = a;  // shared, no new buffer
    CHECK(alloc_stats().live_bytes == before.live_bytes + 8000);
    b.set(0, 1.0);
    CHECK(alloc_stats().live_bytes == before.live_bytes + 16000);
  }
  CHECK(alloc_stats().live_bytes == before.live_bytes);
  reset_peak();
  CHECK(alloc_stats().peak_bytes == alloc_stats().live_bytes);
  { Tensor big = Tensor::zeros({4096}); }
  CHECK(alloc_stats().peak_bytes == alloc_stats().live_bytes + 4096 * 8);
}

TEST_CASE("allocation limit throws bad_alloc") {
  set_alloc_limit(alloc_stats().live_bytes + 1024);
  CHECK_NOTHROW(Tensor::zeros({64}));
  CHECK_THROWS_AS(Tensor::zeros({1024}), std::bad_alloc);
  set_alloc_limit(0);
  CHECK_NOTHROW(Tensor::zeros({1024}));
}

TEST_CASE("rng is reproducible and in range") {
  Rng a(7), b(7);
  for (int i = 0; i < 100; ++i) {
    const double x = a.uniform(-2.0, 3.0);
    CHECK(x == b.uniform(-2.0, 3.0));
    CHECK(x >= -2.0);
    CHECK(x < 3.0);
  }
  for (int i = 0; i < 100; ++i) CHECK(a.below(5) < 5);
  Rng c(7), d(7), e(8);
  CHECK(uniform({4, 4}, 0, 1, c).bit_equal(uniform({4, 4}, 0, 1, d)));
  CHECK_FALSE(uniform({4, 4}, 0, 1, c).bit_equal(uniform({4, 4}, 0, 1, e)));
}

TEST_CASE("matmul matches the loop oracle") {
  Rng rng(1);
  for (auto [m, k, p] : {std::tuple{1, 1, 1}, {3, 5, 2}, {17, 9, 13}}) {
    Tensor a = uniform({std::size_t(m), std::size_t(k)}, -1, 1, rng);
    Tensor b = uniform({std::size_t(k), std::size_t(p)}, -1, 1, rng);
    const auto ref = oracle::matmul(a.to_vector(), b.to_vector(), m, k, p);
    CHECK(oracle::max_abs_diff(matmul(a, b).to_vector(), ref) < 1e-13);
    CHECK(max_abs_diff(matmul_tn(transpose2d(a), b), matmul(a, b)) < 1e-13);
  }
  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({3, 2}, DType::f32)),
                  ShapeError);
}

TEST_CASE("matmul counts multiply-accumulates") {
  reset_mac_count();
  matmul(Tensor::zeros({4, 5}), Tensor::zeros({5, 6}));
  CHECK(mac_count() == 120);
}

TEST_CASE("conv2d matches the loop oracle") {
  Rng rng(2);
  for (auto [stride, pad] : {std::pair{1, 1}, {2, 1}, {2, 0}, {1, 0}}) {
    Tensor x = uniform({3, 9, 8}, -1, 1, rng);
    Tensor w = uniform({4, 3, 3, 3}, -1, 1, rng);
    Tensor b = uniform({4}, -1, 1, rng);
    std::size_t oh = 0, ow = 0;
    const auto ref = oracle::conv2d(x.to_vector(), w.to_vector(), b.to_vector(),
                                    3, 9, 8, 4, 3, stride, pad, oh, ow);
    Tensor y = conv2d(x, w, b, stride, pad);
    CHECK(y.shape() == Shape{4, oh, ow});
    CHECK(oracle::max_abs_diff(y.to_vector(), ref) < 1e-13);
  }
}

TEST_CASE("depthwise conv equals conv2d with a block-diagonal kernel") {
  Rng rng(3);
  Tensor x = uniform({3, 5, 6}, -1, 1, rng);
  Tensor w = uniform({3, 3, 3}, -1, 1, rng);
  Tensor full = Tensor::zeros({3, 3, 3, 3});
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t t = 0; t < 9; ++t) full.set((c * 3 + c) * 9 + t, w.at(c * 9 + t));
  }
  CHECK(max_abs_diff(depthwise_conv3x3(x, w), conv2d(x, full, {}, 1, 1)) < 1e-14);
}

TEST_CASE("softmax rows sum to one and reject NaN") {
  Rng rng(4);
  Tensor s = softmax_rows(uniform({5, 7}, -30, 30, rng));
  for (std::size_t i = 0; i < 5; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 7; ++j) sum += s.at(i, j);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-14));
  }
  Tensor bad = Tensor::zeros({1, 2});
  bad.set(1, NAN);
  CHECK_THROWS_AS(softmax_rows(bad), NumericError);
}

TEST_CASE("l2 normalization gives gamma-length vectors") {
  Rng rng(5);
  Tensor a = uniform({6, 4}, -1, 1, rng);
  Tensor n = l2_normalize_axis(a, 1, 2.5, 1e-6);
  for (std::size_t i = 0; i < 6; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < 4; ++j) ss += n.at(i, j) * n.at(i, j);
    CHECK(std::sqrt(ss) == doctest::Approx(2.5).epsilon(1e-10));
  }
  Tensor cols = l2_normalize_axis(a, 0, 1.0, 1e-6);
  double ss = 0.0;
  for (std::size_t i = 0; i < 6; ++i) ss += cols.at(i, 2) * cols.at(i, 2);
  CHECK(ss == doctest::Approx(1.0).epsilon(1e-10));
  // zero vector stays finite
  Tensor z = l2_normalize_axis(Tensor::zeros({2, 3}), 1, 1.0, 1e-6);
  CHECK(l2_norm(z) == 0.0);
  const double gammas[] = {1.0, 2.0};
  CHECK_THROWS_AS(l2_normalize_axis(a, 1, gammas, 1e-6), ShapeError);
}

TEST_CASE("gelu matches the tanh formula") {
  Tensor x = Tensor::from({5}, {-3, -0.5, 0, 0.7, 4});
  Tensor y = gelu(x);
  for (std::size_t i = 0; i < 5; ++i) {
    const double v = x.at(i);
    const double ref = 0.5 * v * (1 + std::tanh(0.7978845608028654 * (v + 0.044715 * v * v * v)));
    CHECK(y.at(i) == doctest::Approx(ref).epsilon(1e-15));
  }
}

TEST_CASE("token grid round trip") {
  Rng rng(6);
  Tensor x = uniform({12, 5}, -1, 1, rng);
  Tensor g = tokens_to_grid(x, 3, 4);
  CHECK(g.shape() == Shape{5, 3, 4});
  CHECK(g.at((2 * 3 + 1) * 4 + 3) == x.at(1 * 4 + 3, 2));
  CHECK(grid_to_tokens(g).bit_equal(x));
  CHECK_THROWS_AS(tokens_to_grid(x, 5, 4), ShapeError);
}

TEST_CASE("slices and concatenation invert") {
  Rng rng(7);
  Tensor x = uniform({4, 6}, -1, 1, rng);
  const Tensor cols[] = {slice_cols(x, 0, 2), slice_cols(x, 2, 4)};
  CHECK(concat_cols(cols).bit_equal(x));
  const Tensor rows[] = {slice_rows(x, 0, 1), slice_rows(x, 1, 3)};
  CHECK(concat_rows(rows).bit_equal(x));
  CHECK_THROWS_AS(slice_cols(x, 5, 2), ShapeError);
}
