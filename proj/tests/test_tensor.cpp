#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "p3d/tensor.hpp"

using p3d::Shape;
using p3d::Tensor;

namespace {
std::filesystem::path temp_file(const char* name) {
  auto p = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove(p);
  return p;
}
}  // namespace

TEST_CASE("tensor basics") {
  Tensor<float> t(Shape{2, 3, 4});
  CHECK(t.numel() == 24);
  CHECK(t.rank() == 3);
  CHECK(t.dim(1) == 3);
  for (std::int64_t i = 0; i < t.numel(); ++i) CHECK(t[i] == 0.0f);

  t.at({1, 2, 3}) = 7.0f;
  CHECK(t[23] == 7.0f);  // row-major: last index fastest

  CHECK_THROWS_AS(t.at({1, 3, 0}), p3d::ShapeError);
  CHECK_THROWS_AS(t.at({0, 0}), p3d::ShapeError);
  CHECK_THROWS_AS(Tensor<float>(Shape{2, 0, 3}), p3d::ShapeError);
}

TEST_CASE("tensor reshape") {
  Tensor<double> t(Shape{2, 6});
  for (std::int64_t i = 0; i < 12; ++i) t[i] = static_cast<double>(i);
  auto r = t.reshaped(Shape{3, 4});
  CHECK(r.shape() == Shape{3, 4});
  CHECK(r[5] == 5.0);
  CHECK_THROWS_WITH_AS(static_cast<void>(t.reshaped(Shape{5, 3})),
                       doctest::Contains("reshape"), p3d::ShapeError);
}

TEST_CASE("broadcast shape rule") {
  CHECK(p3d::broadcast_shapes(Shape{1, 3, 4, 1, 1}, Shape{1, 3, 4, 5, 5}) ==
        Shape{1, 3, 4, 5, 5});
  CHECK(p3d::broadcast_shapes(Shape{2, 3}, Shape{2, 3}) == Shape{2, 3});
  CHECK(p3d::broadcast_shapes(Shape{2, 1}, Shape{1, 3}) == Shape{2, 3});

  // Rank promotion is deliberately not supported.
  CHECK_THROWS_AS(p3d::broadcast_shapes(Shape{3}, Shape{2, 3}), p3d::ShapeError);

  // The diagnostic names the clashing axis with its [N,C,T,H,W] label.
  CHECK_THROWS_WITH_AS(p3d::broadcast_shapes(Shape{1, 3, 32, 5, 5}, Shape{1, 3, 31, 5, 5}),
                       doctest::Contains("T"), p3d::ShapeError);
}

TEST_CASE("tensor file round trip is bitwise") {
  p3d::Rng rng(123);
  auto t = Tensor<float>::uniform(Shape{3, 4, 5}, rng, -2.f, 2.f);
  auto path = temp_file("p3d_tensor_rt.p3dt");
  p3d::save_tensor(path, t);
  auto back = p3d::load_tensor<float>(path);
  CHECK(back.bit_equal(t));

  auto d = Tensor<double>::uniform(Shape{7}, rng, -1., 1.);
  p3d::save_tensor(path, d);
  CHECK(p3d::load_tensor<double>(path).bit_equal(d));
  std::filesystem::remove(path);
}

TEST_CASE("tensor file rejects wrong scalar type, magic, truncation") {
  auto path = temp_file("p3d_tensor_bad.p3dt");
  Tensor<float> t(Shape{2, 2}, 1.5f);
  p3d::save_tensor(path, t);
  CHECK_THROWS_WITH_AS(static_cast<void>(p3d::load_tensor<double>(path)),
                       doctest::Contains("scalar tag"), p3d::IoError);

  {
    std::ofstream os(path, std::ios::binary);
    os << "NOPE";
  }
  CHECK_THROWS_WITH_AS(static_cast<void>(p3d::load_tensor<float>(path)),
                       doctest::Contains("magic"), p3d::IoError);

  p3d::save_tensor(path, t);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 4);
  CHECK_THROWS_AS(static_cast<void>(p3d::load_tensor<float>(path)), p3d::IoError);
  std::filesystem::remove(path);
}

TEST_CASE("rng streams are deterministic and purpose-separated") {
  p3d::Rng a = p3d::Rng::stream(42, "shuffle", 3);
  p3d::Rng b = p3d::Rng::stream(42, "shuffle", 3);
  p3d::Rng c = p3d::Rng::stream(42, "augment", 3);
  bool all_equal = true, any_diff = false;
  for (int i = 0; i < 100; ++i) {
    auto va = a.next_u64(), vb = b.next_u64(), vc = c.next_u64();
    all_equal = all_equal && va == vb;
    any_diff = any_diff || va != vc;
  }
  CHECK(all_equal);
  CHECK(any_diff);

  auto u = p3d::Rng(7).uniform();
  CHECK(u >= 0.0);
  CHECK(u < 1.0);
}

TEST_CASE("rng shuffle is a permutation and seed-stable") {
  std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  auto w = v;
  p3d::Rng r1 = p3d::Rng::stream(9, "epoch", 1);
  p3d::Rng r2 = p3d::Rng::stream(9, "epoch", 1);
  r1.shuffle(v.begin(), v.end());
  r2.shuffle(w.begin(), w.end());
  CHECK(v == w);
  std::sort(v.begin(), v.end());
  CHECK(v == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
}
