#include <cmath>

#include "doctest.h"
#include "grad_check.hpp"
#include "magicvid/autodiff.hpp"
#include "magicvid/rng.hpp"

using namespace magicvid;

namespace {

Tensor<double> randn(Rng& rng, std::vector<int> shape) { return rng.gaussian_tensor<double>(std::move(shape)); }

}  // namespace

TEST_CASE("matmul matches a scalar triple loop") {
  Rng rng(1);
  Tensor<double> a = randn(rng, {3, 4});
  Tensor<double> b = randn(rng, {4, 5});
  Var<double> va = Var<double>::leaf(a, false);
  Var<double> vb = Var<double>::leaf(b, false);
  Tensor<double> c = matmul(va, vb).value();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 5; ++j) {
      double acc = 0;
      for (int k = 0; k < 4; ++k) acc += a.at(i, k) * b.at(k, j);
      CHECK(c.at(i, j) == doctest::Approx(acc).epsilon(1e-12));
    }
  }
}

TEST_CASE("gradients of core ops match finite differences") {
  Rng rng(7);

  SUBCASE("elementwise chain") {
    auto res = gradcheck::check_gradients(
        {randn(rng, {2, 3}), randn(rng, {2, 3})}, [](std::vector<Var<double>>& v) {
          return mean(mul(silu(v[0]), sigmoid(add(v[0], v[1]))));
        });
    CHECK(res.max_rel_err < 1e-6);
  }

  SUBCASE("matmul / linear / exp") {
    auto res = gradcheck::check_gradients(
        {randn(rng, {3, 4}), randn(rng, {4, 2}), randn(rng, {2})}, [](std::vector<Var<double>>& v) {
          return mean(vexp(scale(linear(v[0], v[1], v[2]), 0.3)));
        });
    CHECK(res.max_rel_err < 1e-6);
  }

  SUBCASE("bmm and bmm_nt with batch broadcast") {
    auto res = gradcheck::check_gradients(
        {randn(rng, {4, 2, 3}), randn(rng, {2, 5, 3}), randn(rng, {2, 5, 3})},
        [](std::vector<Var<double>>& v) {
          Var<double> logits = bmm_nt(v[0], v[1]);           // [4,2,5]
          return mean(bmm(softmax_lastdim(logits), v[2]));   // [4,2,3]
        });
    CHECK(res.max_rel_err < 1e-6);
  }

  SUBCASE("layernorm") {
    auto res = gradcheck::check_gradients({randn(rng, {3, 6})}, [](std::vector<Var<double>>& v) {
      return mean(mul(layernorm_lastdim(v[0]), v[0]));
    });
    CHECK(res.max_rel_err < 1e-5);
  }

  SUBCASE("masked softmax blocks gradient through masked keys") {
    Tensor<double> mask({2, 2});
    mask.at(0, 0) = 0;
    mask.at(0, 1) = -std::numeric_limits<double>::infinity();
    mask.at(1, 0) = 0;
    mask.at(1, 1) = 0;
    auto res = gradcheck::check_gradients({randn(rng, {1, 2, 2})},
                                          [&](std::vector<Var<double>>& v) {
                                            return mean(softmax_lastdim(v[0], &mask));
                                          });
    CHECK(res.max_rel_err < 1e-6);
  }

  SUBCASE("conv2d") {
    auto res = gradcheck::check_gradients(
        {randn(rng, {2, 3, 4, 4}), randn(rng, {5, 3, 3, 3}), randn(rng, {5})},
        [](std::vector<Var<double>>& v) { return mean(silu(conv2d(v[0], v[1], v[2]))); });
    CHECK(res.max_rel_err < 1e-6);
  }

  SUBCASE("1x1 conv2d") {
    auto res = gradcheck::check_gradients(
        {randn(rng, {1, 4, 3, 3}), randn(rng, {2, 4, 1, 1}), randn(rng, {2})},
        [](std::vector<Var<double>>& v) { return mean(conv2d(v[0], v[1], v[2])); });
    CHECK(res.max_rel_err < 1e-6);
  }

  SUBCASE("pooling and upsampling") {
    auto res = gradcheck::check_gradients({randn(rng, {2, 2, 4, 4})}, [](std::vector<Var<double>>& v) {
      return mean(mul(upsample_nearest2(avgpool2(v[0])), v[0]));
    });
    CHECK(res.max_rel_err < 1e-6);
  }

  SUBCASE("permute / reshape / concat / slice / tile") {
    auto res = gradcheck::check_gradients(
        {randn(rng, {2, 3, 2, 2}), randn(rng, {2, 2, 2, 2})}, [](std::vector<Var<double>>& v) {
          Var<double> c = concat(v[0], v[1], 1);            // [2,5,2,2]
          Var<double> p = permute(c, {1, 0, 2, 3});         // [5,2,2,2]
          Var<double> s = slice_axis0(p, 1, 3);             // [3,2,2,2]
          Var<double> t = tile_axis0(s, 2);                 // [6,2,2,2]
          return mean(mul(t, t));
        });
    CHECK(res.max_rel_err < 1e-6);
  }

  SUBCASE("frame_channel_affine and channel bias") {
    auto res = gradcheck::check_gradients(
        {randn(rng, {2, 3, 2, 2}), randn(rng, {2, 3}), randn(rng, {2, 3}), randn(rng, {3})},
        [](std::vector<Var<double>>& v) {
          return mean(silu(add_channel_bias(frame_channel_affine(v[0], v[1], v[2]), v[3])));
        });
    CHECK(res.max_rel_err < 1e-6);
  }

  SUBCASE("mse_to") {
    Tensor<double> target = randn(rng, {3, 3});
    auto res = gradcheck::check_gradients({randn(rng, {3, 3})}, [&](std::vector<Var<double>>& v) {
      return mse_to(v[0], target);
    });
    CHECK(res.max_rel_err < 1e-6);
  }
}

TEST_CASE("backward accumulates through shared subexpressions") {
  // d/dx mean(x*x) with x used twice = 2x/N
  Tensor<double> x({2, 2});
  x.at(0, 0) = 1.0;
  x.at(0, 1) = -2.0;
  x.at(1, 0) = 0.5;
  x.at(1, 1) = 3.0;
  Var<double> vx = Var<double>::leaf(x, true);
  Var<double> loss = mean(mul(vx, vx));
  backward(loss);
  for (int64_t i = 0; i < 4; ++i) CHECK(vx.grad()[i] == doctest::Approx(2.0 * x[i] / 4.0));
}

TEST_CASE("threaded gemm matches serial bitwise") {
  Rng rng(11);
  Tensor<float> a = rng.gaussian_tensor<float>({64, 96});
  Tensor<float> b = rng.gaussian_tensor<float>({96, 128});
  set_num_threads(1);
  Tensor<float> c1 = matmul(Var<float>::leaf(a, false), Var<float>::leaf(b, false)).value();
  set_num_threads(4);
  Tensor<float> c2 = matmul(Var<float>::leaf(a, false), Var<float>::leaf(b, false)).value();
  set_num_threads(1);
  CHECK(bitwise_equal(c1, c2));
}
