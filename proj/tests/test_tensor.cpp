#include <cmath>
#include <limits>

#include "doctest.h"
#include "fnas/errors.hpp"
#include "fnas/ops.hpp"
#include "gradcheck.hpp"

using namespace fnas;
using fnas::testing::random_tensor;

namespace {

// Direct nested-loop convolution, written without any of the library's
// index helpers.
std::vector<double> naive_conv(const Tensor& x, const Tensor& w, int stride, int pad, int dil, int groups) {
  const int n = static_cast<int>(x.dim(0)), c = static_cast<int>(x.dim(1)), h = static_cast<int>(x.dim(2)),
            wd = static_cast<int>(x.dim(3));
  const int co = static_cast<int>(w.dim(0)), cg = static_cast<int>(w.dim(1)), k = static_cast<int>(w.dim(2));
  const int ho = (h + 2 * pad - dil * (k - 1) - 1) / stride + 1;
  const int wo = (wd + 2 * pad - dil * (k - 1) - 1) / stride + 1;
  const int co_per_g = co / groups;
  std::vector<double> out(static_cast<std::size_t>(n * co * ho * wo), 0.0);
  for (int b = 0; b < n; ++b)
    for (int o = 0; o < co; ++o)
      for (int y = 0; y < ho; ++y)
        for (int xx = 0; xx < wo; ++xx) {
          double s = 0.0;
          const int g = o / co_per_g;
          for (int i = 0; i < cg; ++i)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = y * stride - pad + ky * dil;
                const int ix = xx * stride - pad + kx * dil;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                s += w.at(static_cast<std::size_t>(((o * cg + i) * k + ky) * k + kx)) *
                     x.at(static_cast<std::size_t>(((b * c + g * cg + i) * h + iy) * wd + ix));
              }
          out[static_cast<std::size_t>(((b * co + o) * ho + y) * wo + xx)] = s;
        }
  return out;
}

std::vector<double> naive_pool(const Tensor& x, bool is_max, int window, int stride, int pad) {
  const int n = static_cast<int>(x.dim(0)), c = static_cast<int>(x.dim(1)), h = static_cast<int>(x.dim(2)),
            wd = static_cast<int>(x.dim(3));
  const int ho = (h + 2 * pad - window) / stride + 1;
  const int wo = (wd + 2 * pad - window) / stride + 1;
  std::vector<double> out;
  for (int p = 0; p < n * c; ++p)
    for (int y = 0; y < ho; ++y)
      for (int xx = 0; xx < wo; ++xx) {
        double best = -std::numeric_limits<double>::infinity(), s = 0.0;
        for (int ky = 0; ky < window; ++ky)
          for (int kx = 0; kx < window; ++kx) {
            const int iy = y * stride - pad + ky, ix = xx * stride - pad + kx;
            if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
            const double v = x.at(static_cast<std::size_t>((p * h + iy) * wd + ix));
            best = std::max(best, v);
            s += v;
          }
        out.push_back(is_max ? best : s / (window * window));
      }
  return out;
}

}  // namespace

TEST_CASE("tensor construction enforces shape invariants") {
  Tensor t({2, 3}, std::vector<double>(6, 1.0));
  CHECK(t.numel() == 6);
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5, 0.0)), DimensionError);
  CHECK_THROWS_AS(Tensor({0, 3}, {}), DimensionError);
  CHECK(!t.has_grad());
  CHECK(t.grad().size() == 6);
}

TEST_CASE("graph nodes reference only earlier nodes") {
  Rng rng(3);
  auto a = random_tensor({4}, rng);
  auto b = random_tensor({4}, rng);
  auto loss = sum(mul(add(a, b), sub(a, b)));
  const auto nodes = trace_graph(loss);
  REQUIRE(!nodes.empty());
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    for (auto in : nodes[i].input_ids) CHECK(in < nodes[i].id);
    if (i) CHECK(nodes[i - 1].id < nodes[i].id);
  }
  CHECK(nodes.back().id == loss.node_id());
}

TEST_CASE("backward of sum of squares") {
  Tensor x({3}, {1.0, 2.0, 3.0}, true);
  backward(sum(mul(x, x)));
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(4.0));
  CHECK(x.grad()[2] == doctest::Approx(6.0));
}

TEST_CASE("backward of a constant leaves gradients at zero") {
  Tensor x({3}, {1.0, 2.0, 3.0}, true);
  Tensor c = Tensor::scalar(5.0);
  backward(c);
  for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("backward rejects non-scalar losses") {
  Tensor x({3}, {1.0, 2.0, 3.0}, true);
  CHECK_THROWS_AS(backward(scale(x, 2.0)), UsageError);
}

TEST_CASE("gradients accumulate across repeated uses") {
  Rng rng(11);
  for (int k = 1; k <= 4; ++k) {
    auto x = random_tensor({5}, rng);
    Tensor acc = x;
    for (int i = 1; i < k; ++i) acc = add(acc, x);
    backward(sum(mul(acc, acc)));
    std::vector<double> multi(x.grad().begin(), x.grad().end());
    x.zero_grad();
    backward(sum(mul(scale(x, k), scale(x, k))));
    for (std::size_t i = 0; i < multi.size(); ++i) CHECK(multi[i] == doctest::Approx(x.grad()[i]).epsilon(1e-12));
  }
}

TEST_CASE("conv2d identity and box kernels") {
  Rng rng(5);
  auto x = random_tensor({2, 1, 5, 5}, rng);
  std::vector<double> delta(9, 0.0);
  delta[4] = 1.0;
  auto y = conv2d(x, Tensor({1, 1, 3, 3}, delta), {1, 1, 1, 1});
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == x.at(i));

  auto ones = Tensor::full({1, 1, 3, 3}, 1.0);
  auto box = conv2d(ones, Tensor::full({1, 1, 3, 3}, 1.0));
  CHECK(box.shape() == Shape{1, 1, 1, 1});
  CHECK(box.item() == 9.0);
}

TEST_CASE("conv2d matches the nested-loop oracle") {
  Rng rng(17);
  struct Case {
    Shape x, w;
    int stride, pad, dil, groups;
  };
  const std::vector<Case> cases = {
      {{1, 2, 5, 5}, {2, 1, 3, 3}, 1, 2, 2, 2},   // depthwise, dilation 2
      {{2, 3, 7, 6}, {4, 3, 3, 3}, 2, 1, 1, 1},   // dense, stride 2
      {{1, 4, 8, 8}, {4, 1, 5, 5}, 2, 4, 2, 4},   // dilated depthwise, stride 2
      {{2, 4, 6, 6}, {6, 4, 1, 1}, 1, 0, 1, 1},   // pointwise
      {{1, 4, 6, 6}, {2, 4, 1, 1}, 2, 0, 1, 1},   // strided pointwise
      {{1, 4, 5, 5}, {4, 2, 3, 3}, 1, 1, 1, 2}};  // grouped
  for (const auto& c : cases) {
    auto x = random_tensor(c.x, rng);
    auto w = random_tensor(c.w, rng);
    auto y = conv2d(x, w,
                    {static_cast<std::size_t>(c.stride), static_cast<std::size_t>(c.pad),
                     static_cast<std::size_t>(c.dil), static_cast<std::size_t>(c.groups)});
    auto ref = naive_conv(x, w, c.stride, c.pad, c.dil, c.groups);
    REQUIRE(y.numel() == ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(y.at(i) - ref[i]) <= 1e-12);
  }
}

TEST_CASE("conv2d configuration errors") {
  auto x = Tensor::zeros({1, 3, 5, 5});
  CHECK_THROWS_AS(conv2d(x, Tensor::zeros({2, 1, 3, 3}), {1, 1, 1, 2}), ConfigError);
  CHECK_THROWS_AS(conv2d(x, Tensor::zeros({2, 2, 3, 3})), DimensionError);
  CHECK_THROWS_AS(conv2d(x, Tensor::zeros({2, 3, 7, 7})), DimensionError);
}

TEST_CASE("pooling examples and oracle") {
  Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK(pool2d(x, PoolKind::max, 2, 2, 0).item() == 4.0);
  CHECK(pool2d(x, PoolKind::avg, 2, 2, 0).item() == 2.5);

  Rng rng(23);
  for (int trial = 0; trial < 5; ++trial) {
    auto m = random_tensor({2, 3, 4, 4}, rng);
    for (bool is_max : {true, false}) {
      auto y = pool2d(m, is_max ? PoolKind::max : PoolKind::avg, 3, 1, 1);
      auto ref = naive_pool(m, is_max, 3, 1, 1);
      for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(y.at(i) - ref[i]) <= 1e-12);
      auto y2 = pool2d(m, is_max ? PoolKind::max : PoolKind::avg, 3, 2, 1);
      auto ref2 = naive_pool(m, is_max, 3, 2, 1);
      for (std::size_t i = 0; i < ref2.size(); ++i) CHECK(std::abs(y2.at(i) - ref2[i]) <= 1e-12);
    }
  }
  CHECK_THROWS_AS(pool2d(Tensor::zeros({1, 1, 2, 2}), PoolKind::max, 5, 1, 1), DimensionError);
}

TEST_CASE("max pool gradient goes to the first maximum on ties") {
  Tensor x({1, 1, 2, 2}, {7, 7, 1, 7}, true);
  backward(sum(pool2d(x, PoolKind::max, 2, 2, 0)));
  CHECK(x.grad()[0] == 1.0);
  CHECK(x.grad()[1] == 0.0);
  CHECK(x.grad()[3] == 0.0);
}

TEST_CASE("avg pool divides by the full window including padding") {
  auto x = Tensor::full({1, 1, 3, 3}, 9.0);
  auto y = pool2d(x, PoolKind::avg, 3, 1, 1);
  CHECK(y.at(0) == doctest::Approx(4.0 * 9.0 / 9.0));  // corner sees 4 real cells
  CHECK(y.at(4) == doctest::Approx(9.0));
}

TEST_CASE("batch norm standardizes per channel") {
  BatchNormState st(3);
  CHECK(batch_norm(Tensor::zeros({2, 3, 2, 2}), st, Mode::train).data()[0] == 0.0);

  BatchNormState st2(1);
  auto c = batch_norm(Tensor::full({2, 1, 3, 3}, 4.2), st2, Mode::train);
  for (double v : c.data()) CHECK(v == 0.0);

  Rng rng(29);
  // wide spread so eps/var stays far below the 1e-6 tolerance
  auto x = random_tensor({4, 3, 5, 5}, rng, 0.0, 100.0);
  BatchNormState st3(3);
  auto y = batch_norm(x, st3, Mode::train);
  const std::size_t plane = 25;
  for (std::size_t ch = 0; ch < 3; ++ch) {
    double m = 0.0, v = 0.0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < plane; ++i) m += y.at((b * 3 + ch) * plane + i);
    m /= 100.0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < plane; ++i) v += std::pow(y.at((b * 3 + ch) * plane + i) - m, 2);
    v /= 100.0;
    CHECK(std::abs(m) <= 1e-6);
    CHECK(std::abs(v - 1.0) <= 1e-6);
  }
  BatchNormState st4(1);
  CHECK_THROWS_AS(batch_norm(Tensor::zeros({1, 1, 1, 1}), st4, Mode::train), DimensionError);
}

TEST_CASE("batch norm eval mode uses running statistics") {
  BatchNormState st(1);
  st.running_mean = {2.0};
  st.running_var = {4.0};
  auto y = batch_norm(Tensor::full({1, 1, 1, 1}, 6.0), st, Mode::eval);
  CHECK(y.item() == doctest::Approx(4.0 / std::sqrt(4.0 + 1e-5)));
}

TEST_CASE("softmax examples and invariants") {
  auto a = softmax(std::vector<double>{0, 0, 0, 0});
  for (double v : a) CHECK(v == doctest::Approx(0.25));
  auto b = softmax(std::vector<double>{std::log(2.0), 0.0});
  CHECK(b[0] == doctest::Approx(2.0 / 3.0));
  CHECK(b[1] == doctest::Approx(1.0 / 3.0));
  auto c = softmax(std::vector<double>{1000.0, 0.0});
  CHECK(c[0] == doctest::Approx(1.0));
  CHECK(c[1] >= 0.0);
  CHECK(std::isfinite(c[1]));
  CHECK_THROWS_AS(softmax(std::vector<double>{}), ConfigError);

  Rng rng(31);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> z(1 + rng.below(12));
    for (auto& v : z) v = rng.uniform(-20, 20);
    auto p = softmax(z);
    double s = 0.0;
    for (double v : p) {
      CHECK(v > 0.0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) <= 1e-6);
    const double shift = rng.uniform(-100, 100);
    for (auto& v : z) v += shift;
    auto q = softmax(z);
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(std::abs(p[i] - q[i]) <= 1e-9);
  }
}

TEST_CASE("cross entropy examples") {
  std::vector<int> labels{3};
  CHECK(cross_entropy(Tensor::zeros({1, 10}), labels).item() == doctest::Approx(std::log(10.0)).epsilon(1e-12));
  std::vector<double> z(10, 0.0);
  z[3] = 1000.0;
  CHECK(cross_entropy(Tensor({1, 10}, z), labels).item() == doctest::Approx(0.0));
  std::vector<int> bad{10};
  CHECK_THROWS_AS(cross_entropy(Tensor::zeros({1, 10}), bad), InputError);

  // scalar log-sum-exp oracle
  Rng rng(37);
  auto logits = random_tensor({3, 4}, rng, 0.0, 3.0, false);
  std::vector<int> y{0, 3, 2};
  double expected = 0.0;
  for (int i = 0; i < 3; ++i) {
    double s = 0.0;
    for (int j = 0; j < 4; ++j) s += std::exp(logits.at(static_cast<std::size_t>(i * 4 + j)));
    expected += std::log(s) - logits.at(static_cast<std::size_t>(i * 4 + y[static_cast<std::size_t>(i)]));
  }
  expected /= 3.0;
  CHECK(std::abs(cross_entropy(logits, y).item() - expected) <= 1e-10);
}

TEST_CASE("label smoothing on uniform logits stays at ln K") {
  std::vector<int> labels{0, 1};
  CHECK(cross_entropy(Tensor::zeros({2, 5}), labels, 0.1).item() == doctest::Approx(std::log(5.0)).epsilon(1e-12));
}

TEST_CASE("concat, crop and linear shapes") {
  auto a = Tensor::full({2, 1, 3, 3}, 1.0);
  auto b = Tensor::full({2, 2, 3, 3}, 2.0);
  auto c = concat_channels({a, b});
  CHECK(c.shape() == Shape{2, 3, 3, 3});
  CHECK(c.at(9) == 2.0);
  CHECK(c.at(27) == 1.0);
  CHECK(crop(c, 1, 1, 2, 2).shape() == Shape{2, 3, 2, 2});
  CHECK_THROWS_AS(crop(c, 2, 2, 2, 2), DimensionError);
  CHECK_THROWS_AS(concat_channels({a, Tensor::zeros({2, 1, 4, 3})}), DimensionError);
  Tensor x({1, 2}, {1.0, 2.0});
  Tensor w({1, 2}, {3.0, 4.0});
  CHECK(linear(x, w, Tensor({1}, {0.5})).item() == 11.5);
}

TEST_CASE("mac counter tracks convolutions") {
  reset_mac_count();
  conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({3, 2, 3, 3}), {1, 1, 1, 1});
  CHECK(mac_count() == 3u * 16u * 2u * 9u);
}
