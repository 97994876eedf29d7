#include <cmath>
#include <limits>

#include "doctest.h"
#include "oracles.hpp"
#include "pefnet/ops.hpp"

using namespace pefnet;
using ops::Mode;

namespace {

Tensor64 t64(Shape s, std::vector<double> v) { return Tensor64(std::move(s), std::move(v)); }

void check_close(const Tensor64& a, const Tensor64& b, double tol) {
  REQUIRE(a.shape() == b.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(tol));
}

struct Stats {
  Tensor64 mean, var, count;
  explicit Stats(std::size_t c) : mean({c}, 0.0), var({c}, 1.0), count({1}, 0.0) {}
  ops::RunningStats<double> ref() { return {mean, var, count}; }
};

}  // namespace

TEST_CASE("tensor construction and shape checks") {
  Tensor t({2, 3});
  CHECK(t.numel() == 6);
  CHECK_THROWS_AS(Tensor(Shape{}), ShapeError);
  CHECK_THROWS_AS(Tensor(Shape{1, 1, 1, 1, 1}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(t.item(), ShapeError);
  CHECK(Tensor::scalar(3.5f).item() == 3.5f);
  CHECK(Tensor({2}, std::vector<float>{1, std::nanf("")}).all_finite() == false);
}

TEST_CASE("conv2d examples") {
  Tape<double> tape;
  auto one = tape.leaf(t64({1, 1, 1, 1}, {3.0}));
  auto w = tape.leaf(t64({1, 1, 1, 1}, {2.0}));
  CHECK(ops::conv2d(one, w, std::nullopt, 1, 0).value()[0] == 6.0);

  auto x = tape.leaf(Tensor64::ones({1, 1, 3, 3}));
  auto k = tape.leaf(Tensor64::ones({1, 1, 3, 3}));
  const auto y = ops::conv2d(x, k, std::nullopt, 1, 1).value();
  const std::vector<double> expect{4, 6, 4, 6, 9, 6, 4, 6, 4};
  for (std::size_t i = 0; i < 9; ++i) CHECK(y[i] == expect[i]);

  auto z = tape.leaf(Tensor64::zeros({1, 1, 3, 3}));
  for (double v : ops::conv2d(x, z, std::nullopt, 1, 1).value().data()) CHECK(v == 0.0);
}

TEST_CASE("conv2d matches the nested-loop oracle") {
  std::mt19937_64 gen(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + trial % 2, ci = 1 + trial % 3, co = 1 + (trial / 3) % 3;
    const std::size_t k = 1 + 2 * (trial % 3);
    const int stride = 1 + trial % 2, pad = static_cast<int>(k / 2);
    const std::size_t h = 5 + (stride == 2 ? 0 : trial % 3);
    const auto x = oracle::random64({n, ci, h, h}, gen);
    const auto w = oracle::random64({co, ci, k, k}, gen);
    const auto b = oracle::random64({co}, gen);
    Tape<double> tape;
    auto y = ops::conv2d(tape.leaf(x), tape.leaf(w), tape.leaf(b), stride, pad);
    check_close(y.value(), oracle::conv2d(x, w, {b.data().begin(), b.data().end()}, stride, pad), 1e-12);
  }
}

TEST_CASE("conv2d keeps spatial size for odd kernels with same padding") {
  std::mt19937_64 gen(3);
  for (std::size_t k : {1u, 3u, 5u, 7u}) {
    Tape<double> tape;
    auto x = tape.leaf(oracle::random64({1, 2, 9, 7}, gen));
    auto w = tape.leaf(oracle::random64({3, 2, k, k}, gen));
    CHECK(ops::conv2d(x, w, std::nullopt, 1, static_cast<int>(k / 2)).shape() == Shape{1, 3, 9, 7});
  }
}

TEST_CASE("conv2d errors") {
  Tape<double> tape;
  auto x = tape.leaf(Tensor64::ones({1, 2, 4, 4}));
  auto w = tape.leaf(Tensor64::ones({1, 3, 3, 3}));
  CHECK_THROWS_WITH_AS(ops::conv2d(x, w, std::nullopt, 1, 1), doctest::Contains("input channels mismatch"), ShapeError);
  auto w2 = tape.leaf(Tensor64::ones({1, 2, 3, 3}));
  CHECK_THROWS_WITH_AS(ops::conv2d(x, w2, std::nullopt, 2, 0), doctest::Contains("non-integral output"), ShapeError);
  CHECK_THROWS_WITH_AS(ops::conv2d(x, w2, std::nullopt, 0, 1), doctest::Contains("stride must be >= 1"), ShapeError);
}

TEST_CASE("depthwise conv") {
  Tape<double> tape;
  SUBCASE("per-channel independence") {
    std::mt19937_64 gen(5);
    auto x = tape.leaf(oracle::random64({1, 2, 4, 4}, gen));
    Tensor64 w({2, 1, 3, 3});
    w.at(0, 0, 1, 1) = 1.0;
    const auto y = ops::depthwise_conv2d(x, tape.leaf(w), std::nullopt, 1).value();
    for (std::size_t i = 0; i < 16; ++i) {
      CHECK(y[i] == x.value()[i]);
      CHECK(y[16 + i] == 0.0);
    }
  }
  SUBCASE("single channel equals conv2d") {
    auto x = tape.leaf(Tensor64::ones({1, 1, 3, 3}));
    auto w = tape.leaf(Tensor64::ones({1, 1, 3, 3}));
    CHECK(ops::depthwise_conv2d(x, w, std::nullopt, 1).value() == ops::conv2d(x, w, std::nullopt, 1, 1).value());
  }
  SUBCASE("matches per-channel conv2d oracle") {
    std::mt19937_64 gen(9);
    const auto x = oracle::random64({2, 3, 6, 6}, gen);
    const auto w = oracle::random64({3, 1, 5, 5}, gen);
    const auto y = ops::depthwise_conv2d(tape.leaf(x), tape.leaf(w), std::nullopt, 2).value();
    for (std::size_t c = 0; c < 3; ++c) {
      Tensor64 xc({2, 1, 6, 6}), wc({1, 1, 5, 5});
      for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < 36; ++i) xc[n * 36 + i] = x[(n * 3 + c) * 36 + i];
      for (std::size_t i = 0; i < 25; ++i) wc[i] = w[c * 25 + i];
      const auto ref = oracle::conv2d(xc, wc, {}, 1, 2);
      for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < 36; ++i) CHECK(y[(n * 3 + c) * 36 + i] == doctest::Approx(ref[n * 36 + i]));
    }
  }
  SUBCASE("channel mismatch") {
    auto x = tape.leaf(Tensor64::ones({1, 2, 3, 3}));
    auto w = tape.leaf(Tensor64::ones({3, 1, 3, 3}));
    CHECK_THROWS_WITH_AS(ops::depthwise_conv2d(x, w, std::nullopt, 1), doctest::Contains("weight channels mismatch"),
                         ShapeError);
  }
  SUBCASE("no gradient flows across channels") {
    std::mt19937_64 gen(1);
    auto x = tape.leaf(oracle::random64({1, 2, 4, 4}, gen), true);
    auto w = tape.leaf(oracle::random64({2, 1, 3, 3}, gen), true);
    auto y = ops::depthwise_conv2d(x, w, std::nullopt, 1);
    Tensor64 mask({1, 2, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) mask[i] = 1.0;
    auto loss = ops::sum(ops::mul(y, tape.constant(mask)));
    tape.backward(loss);
    const auto gx = x.grad();
    for (std::size_t i = 16; i < 32; ++i) CHECK(gx[i] == 0.0);
    const auto gw = w.grad();
    for (std::size_t i = 9; i < 18; ++i) CHECK(gw[i] == 0.0);
  }
}

TEST_CASE("transposed conv") {
  Tape<double> tape;
  SUBCASE("1x1 identity") {
    std::mt19937_64 gen(2);
    auto x = tape.leaf(oracle::random64({1, 1, 3, 4}, gen));
    auto w = tape.leaf(t64({1, 1, 1, 1}, {1.0}));
    const auto y = ops::conv_transpose2d(x, w, std::nullopt, 1).value();
    CHECK(y.shape() == x.value().shape());
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == x.value()[i]);
  }
  SUBCASE("stride 2 scatter") {
    auto x = tape.leaf(t64({1, 1, 2, 2}, {1, 2, 3, 4}));
    auto w = tape.leaf(Tensor64::ones({1, 1, 2, 2}));
    const auto y = ops::conv_transpose2d(x, w, std::nullopt, 2).value();
    const std::vector<double> expect{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
    REQUIRE(y.shape() == Shape{1, 1, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) CHECK(y[i] == expect[i]);
  }
  SUBCASE("zeros in, zeros out") {
    auto x = tape.leaf(Tensor64::zeros({1, 2, 3, 3}));
    auto w = tape.leaf(Tensor64::ones({2, 3, 3, 3}));
    for (double v : ops::conv_transpose2d(x, w, std::nullopt, 2).value().data()) CHECK(v == 0.0);
  }
  SUBCASE("matches the scatter-add oracle") {
    std::mt19937_64 gen(4);
    for (int trial = 0; trial < 12; ++trial) {
      const int stride = 1 + trial % 3;
      const std::size_t k = 1 + trial % 4, ci = 1 + trial % 2, co = 1 + (trial / 2) % 3;
      const auto x = oracle::random64({2, ci, 3, 4}, gen);
      const auto w = oracle::random64({ci, co, k, k}, gen);
      const auto b = oracle::random64({co}, gen);
      const auto y = ops::conv_transpose2d(tape.leaf(x), tape.leaf(w), tape.leaf(b), stride).value();
      check_close(y, oracle::conv_transpose2d(x, w, {b.data().begin(), b.data().end()}, stride), 1e-12);
    }
  }
  SUBCASE("stride error") {
    auto x = tape.leaf(Tensor64::ones({1, 1, 2, 2}));
    auto w = tape.leaf(Tensor64::ones({1, 1, 2, 2}));
    CHECK_THROWS_WITH_AS(ops::conv_transpose2d(x, w, std::nullopt, 0), doctest::Contains("stride must be >= 1"),
                         ShapeError);
  }
}

TEST_CASE("transposed conv is the adjoint of strided conv") {
  std::mt19937_64 gen(77);
  for (int trial = 0; trial < 30; ++trial) {
    const int s = 1 + trial % 3;
    const std::size_t k = static_cast<std::size_t>(s) + trial % 2;
    const std::size_t ci = 1 + trial % 3, co = 1 + (trial / 3) % 3, oh = 2 + trial % 3;
    const std::size_t h = (oh - 1) * s + k;
    const auto x = oracle::random64({1, ci, h, h}, gen);
    const auto w = oracle::random64({co, ci, k, k}, gen);
    const auto y = oracle::random64({1, co, oh, oh}, gen);
    Tape<double> tape;
    const auto cx = ops::conv2d(tape.leaf(x), tape.leaf(w), std::nullopt, s, 0).value();
    // conv weight (co, ci, k, k) read as transposed-conv weight (in = co, out = ci, k, k).
    const auto ty = ops::conv_transpose2d(tape.leaf(y), tape.leaf(w), std::nullopt, s).value();
    REQUIRE(ty.shape() == x.shape());
    CHECK(oracle::dot(cx, y) == doctest::Approx(oracle::dot(x, ty)).epsilon(1e-10));
  }
}

TEST_CASE("batch norm") {
  Tape<double> tape;
  SUBCASE("constant channel normalizes to zero") {
    Stats st(1);
    auto x = tape.leaf(Tensor64({2, 1, 2, 2}, 3.0));
    auto y = ops::batch_norm(x, tape.leaf(Tensor64::ones({1})), tape.leaf(Tensor64::zeros({1})), st.ref(), Mode::Train);
    for (double v : y.value().data()) CHECK(v == 0.0);
  }
  SUBCASE("two values map to minus and plus one") {
    Stats st(1);
    auto x = tape.leaf(t64({2, 1, 1, 1}, {1.0, 3.0}));
    const auto y = ops::batch_norm(x, tape.leaf(Tensor64::ones({1})), tape.leaf(Tensor64::zeros({1})), st.ref(),
                                   Mode::Train, 0.9, 1e-12)
                       .value();
    CHECK(y[0] == doctest::Approx(-1.0).epsilon(1e-9));
    CHECK(y[1] == doctest::Approx(1.0).epsilon(1e-9));
    const auto y5 =
        ops::batch_norm(x, tape.leaf(Tensor64::ones({1})), tape.leaf(Tensor64::zeros({1})), st.ref(), Mode::Train)
            .value();
    CHECK(std::abs(y5[0] + 1.0) < 1e-4);
    CHECK(std::abs(y5[1] - 1.0) < 1e-4);
  }
  SUBCASE("zero gamma gives beta") {
    Stats st(2);
    std::mt19937_64 gen(8);
    auto x = tape.leaf(oracle::random64({2, 2, 3, 3}, gen));
    const auto y = ops::batch_norm(x, tape.leaf(Tensor64::zeros({2})), tape.leaf(t64({2}, {0.25, -2.0})), st.ref(),
                                   Mode::Train)
                       .value();
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == ((i / 9) % 2 == 0 ? 0.25 : -2.0));
  }
  SUBCASE("train mode output has zero mean and unit variance per channel") {
    Stats st(3);
    std::mt19937_64 gen(12);
    auto x = tape.leaf(oracle::random64({4, 3, 5, 5}, gen, -3.0, 7.0));
    const auto y = ops::batch_norm(x, tape.leaf(Tensor64::ones({3})), tape.leaf(Tensor64::zeros({3})), st.ref(),
                                   Mode::Train)
                       .value();
    for (std::size_t c = 0; c < 3; ++c) {
      double m = 0, v = 0;
      for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t i = 0; i < 25; ++i) m += y[(n * 3 + c) * 25 + i];
      m /= 100;
      for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t i = 0; i < 25; ++i) v += std::pow(y[(n * 3 + c) * 25 + i] - m, 2);
      v /= 100;
      CHECK(std::abs(m) < 1e-12);
      CHECK(v == doctest::Approx(1.0).epsilon(1e-3));
    }
  }
  SUBCASE("running statistics follow the momentum rule") {
    Stats st(1);
    auto x = tape.leaf(t64({4, 1, 1, 1}, {1, 2, 3, 6}));
    ops::batch_norm(x, tape.leaf(Tensor64::ones({1})), tape.leaf(Tensor64::zeros({1})), st.ref(), Mode::Train);
    // batch mean 3, unbiased variance 14/3
    CHECK(st.mean[0] == doctest::Approx(0.1 * 3.0));
    const double var_update = 0.9 * 1.0 + 0.1 * (14.0 / 3.0);
    const double var_biased = 0.9 * 1.0 + 0.1 * 3.5;
    CHECK((std::abs(st.var[0] - var_update) < 1e-12 || std::abs(st.var[0] - var_biased) < 1e-12));
    CHECK(st.count[0] == 1.0);
  }
  SUBCASE("eval mode uses running statistics") {
    Stats st(1);
    st.mean[0] = 2.0;
    st.var[0] = 4.0;
    st.count[0] = 1.0;
    auto x = tape.leaf(t64({1, 1, 1, 2}, {2.0, 6.0}));
    const auto y =
        ops::batch_norm(x, tape.leaf(Tensor64::ones({1})), tape.leaf(Tensor64::zeros({1})), st.ref(), Mode::Eval)
            .value();
    CHECK(y[0] == 0.0);
    CHECK(y[1] == doctest::Approx(4.0 / std::sqrt(4.0 + 1e-5)));
  }
  SUBCASE("eval before any statistics is an error") {
    Stats st(1);
    auto x = tape.leaf(Tensor64::ones({1, 1, 2, 2}));
    CHECK_THROWS_WITH(
        ops::batch_norm(x, tape.leaf(Tensor64::ones({1})), tape.leaf(Tensor64::zeros({1})), st.ref(), Mode::Eval),
        doctest::Contains("requires running statistics"));
  }
}

TEST_CASE("channel layer norm") {
  Tape<double> tape;
  auto ones = tape.leaf(Tensor64::ones({2}));
  auto zeros = tape.leaf(Tensor64::zeros({2}));
  auto c = tape.leaf(Tensor64({1, 2, 2, 2}, 4.0));
  for (double v : ops::layer_norm_channels(c, ones, zeros).value().data()) CHECK(v == 0.0);
  auto x = tape.leaf(t64({1, 2, 1, 1}, {1.0, 3.0}));
  const auto y = ops::layer_norm_channels(x, ones, zeros, 1e-12).value();
  CHECK(y[0] == doctest::Approx(-1.0));
  CHECK(y[1] == doctest::Approx(1.0));
  auto five = tape.leaf(Tensor64({2}, 5.0));
  for (double v : ops::layer_norm_channels(c, ones, five).value().data()) CHECK(v == 5.0);
}

TEST_CASE("elementwise ops") {
  Tape<double> tape;
  auto g = ops::gelu(tape.leaf(t64({4}, {0.0, 1.0, 10.0, -3.0}))).value();
  CHECK(g[0] == 0.0);
  CHECK(g[1] == doctest::Approx(0.841345).epsilon(1e-6));
  CHECK(g[2] == doctest::Approx(10.0));
  CHECK(g[3] == doctest::Approx(oracle::gelu(-3.0)).epsilon(1e-12));
  CHECK(ops::gelu_scalar(0.5) == doctest::Approx(oracle::gelu(0.5)).epsilon(1e-14));

  auto s = ops::sigmoid(tape.leaf(t64({3}, {0.0, 800.0, -800.0}))).value();
  CHECK(s[0] == 0.5);
  CHECK(s[1] == 1.0);
  CHECK(s[2] == 0.0);

  auto a = tape.leaf(t64({1, 1, 1, 2}, {1, 2}));
  auto b = tape.leaf(t64({1, 2, 1, 2}, {3, 4, 5, 6}));
  const auto cat = ops::concat_channels(a, b).value();
  REQUIRE(cat.shape() == Shape{1, 3, 1, 2});
  const std::vector<double> expect{1, 2, 3, 4, 5, 6};
  for (std::size_t i = 0; i < 6; ++i) CHECK(cat[i] == expect[i]);

  CHECK_THROWS_WITH_AS(ops::add(a, b), doctest::Contains("shape mismatch"), ShapeError);
  CHECK_THROWS_WITH_AS(ops::mul(a, b), doctest::Contains("shape mismatch"), ShapeError);
  auto two = tape.leaf(t64({2, 1, 1, 2}, {1, 2, 3, 4}));
  const auto bc = ops::add(two, a).value();
  CHECK(bc[2] == 4.0);
  CHECK(bc[3] == 6.0);
  CHECK(ops::scale(a, -2.0).value()[1] == -4.0);
  CHECK(ops::sum(b).value().item() == 18.0);
}

TEST_CASE("backward") {
  SUBCASE("sum has unit gradient") {
    Tape<double> tape;
    auto x = tape.leaf(Tensor64({2, 3}, 7.0), true);
    tape.backward(ops::sum(x));
    const auto g = x.grad();
    for (double v : g.data()) CHECK(v == 1.0);
  }
  SUBCASE("conv weight gradient counts valid placements") {
    Tape<double> tape;
    auto x = tape.leaf(Tensor64::ones({1, 1, 3, 3}));
    auto w = tape.leaf(Tensor64::ones({1, 1, 3, 3}), true);
    tape.backward(ops::sum(ops::conv2d(x, w, std::nullopt, 1, 1)));
    const std::vector<double> expect{4, 6, 4, 6, 9, 6, 4, 6, 4};
    const auto gw = w.grad();
    for (std::size_t i = 0; i < 9; ++i) CHECK(gw[i] == expect[i]);
  }
  SUBCASE("repeated backward does not accumulate") {
    Tape<double> tape;
    auto x = tape.leaf(t64({2}, {1.5, -2.0}), true);
    auto loss = ops::sum(ops::mul(x, x));
    tape.backward(loss);
    const auto first = x.grad();
    tape.backward(loss);
    CHECK(x.grad() == first);
    CHECK(first[0] == 3.0);
  }
  SUBCASE("unused leaves get zero gradients") {
    Tape<double> tape;
    auto x = tape.leaf(Tensor64::ones({3}), true);
    auto unused = tape.leaf(Tensor64::ones({2}), true);
    tape.backward(ops::sum(x));
    const auto g = unused.grad();
    for (double v : g.data()) CHECK(v == 0.0);
  }
  SUBCASE("loss from another tape is rejected") {
    Tape<double> a, b;
    auto x = a.leaf(Tensor64::ones({1}), true);
    CHECK_THROWS_WITH(b.backward(ops::sum(x)), doctest::Contains("loss is not recorded on this tape"));
  }
  SUBCASE("loss must be scalar") {
    Tape<double> tape;
    auto x = tape.leaf(Tensor64::ones({2}), true);
    CHECK_THROWS_WITH(tape.backward(x), doctest::Contains("loss must be a scalar"));
  }
  SUBCASE("non-finite values are reported") {
    Tape<double> tape;
    auto x = tape.leaf(t64({1}, {std::numeric_limits<double>::max()}), true);
    CHECK_THROWS_AS(ops::scale(x, 10.0), NumericalError);
  }
}
