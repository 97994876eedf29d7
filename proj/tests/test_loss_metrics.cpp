#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "pefnet/loss.hpp"

using namespace pefnet;

namespace {

Tensor t32(Shape s, std::vector<float> v) { return Tensor(std::move(s), std::move(v)); }

std::vector<double> vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

double loss_on_tape(const Tensor64& target, const Tensor64& prob, const LossConfig& cfg = {}) {
  Tape<double> tape;
  return jaccard_loss(target, tape.leaf(prob), cfg).value().item();
}

// Mask with exactly `on` foreground pixels at the given positions.
Tensor mask16(const std::vector<std::size_t>& on) {
  Tensor m({1, 1, 4, 4});
  for (auto i : on) m[i] = 1.0f;
  return m;
}

}  // namespace

TEST_CASE("jaccard loss worked examples") {
  const auto y = t32({4}, {1, 1, 1, 1});
  CHECK(jaccard_loss_value(y, y) == 0.0);
  CHECK(jaccard_loss_value(y, t32({4}, {0, 0, 0, 0})) == doctest::Approx(0.8).epsilon(1e-9));
  CHECK(jaccard_loss_value(t32({2}, {1, 0}), t32({2}, {0.5f, 0.5f})) == doctest::Approx(0.4).epsilon(1e-9));
  CHECK(loss_on_tape(Tensor64({2}, std::vector<double>{1, 0}), Tensor64({2}, std::vector<double>{0.5, 0.5})) ==
        doctest::Approx(0.4).epsilon(1e-12));
}

TEST_CASE("jaccard loss matches the oracle and stays in range") {
  std::mt19937_64 gen(21);
  for (int trial = 0; trial < 200; ++trial) {
    const double alpha = trial % 3 == 0 ? 1.0 : std::uniform_real_distribution<double>(0.1, 5.0)(gen);
    const auto y = oracle::random_mask({2, 1, 4, 4}, gen, trial % 10 == 0 ? 0.0 : 0.4);
    const auto p = oracle::random32({2, 1, 4, 4}, gen, 0.0, 1.0);
    LossConfig cfg{alpha, false};
    const double value = jaccard_loss_value(y, p, cfg);
    CHECK(value == doctest::Approx(oracle::jaccard(vec(y), vec(p), alpha)).epsilon(1e-6));
    CHECK(value >= 0.0);
    CHECK(value < alpha);

    cfg.per_image = true;
    const auto half = y.numel() / 2;
    const std::vector<double> y0(y.data().begin(), y.data().begin() + half), y1(y.data().begin() + half, y.data().end());
    const std::vector<double> p0(p.data().begin(), p.data().begin() + half), p1(p.data().begin() + half, p.data().end());
    const double expect = 0.5 * (oracle::jaccard(y0, p0, alpha) + oracle::jaccard(y1, p1, alpha));
    CHECK(jaccard_loss_value(y, p, cfg) == doctest::Approx(expect).epsilon(1e-6));
  }
}

TEST_CASE("jaccard loss is zero exactly when prediction equals target") {
  std::mt19937_64 gen(5);
  for (int trial = 0; trial < 100; ++trial) {
    const auto y = oracle::random_mask({1, 1, 8, 8}, gen);
    CHECK(jaccard_loss_value(y, y) == 0.0);
    auto p = y;
    const auto idx = std::uniform_int_distribution<std::size_t>(0, p.numel() - 1)(gen);
    p[idx] = p[idx] > 0.5f ? 0.9f : 0.1f;
    CHECK(jaccard_loss_value(y, p) > 0.0);
  }
}

TEST_CASE("raising the probability of a foreground pixel lowers the loss") {
  std::mt19937_64 gen(6);
  for (int trial = 0; trial < 50; ++trial) {
    auto y = oracle::random_mask({1, 1, 4, 4}, gen);
    y[0] = 1.0f;
    auto p = oracle::random32({1, 1, 4, 4}, gen, 0.0, 0.9);
    const double before = jaccard_loss_value(y, p);
    p[0] += 0.1f;
    CHECK(jaccard_loss_value(y, p) < before);
  }
}

TEST_CASE("jaccard loss gradient") {
  std::mt19937_64 gen(7);
  const auto y = oracle::random_mask({2, 1, 3, 3}, gen).cast<double>();
  const auto p = oracle::random64({2, 1, 3, 3}, gen, 0.05, 0.95);
  for (bool per_image : {false, true}) {
    const LossConfig cfg{0.7, per_image};
    Tape<double> tape;
    auto v = tape.leaf(p, true);
    tape.backward(jaccard_loss(y, v, cfg));
    const auto g = v.grad();
    for (std::size_t i = 0; i < p.numel(); ++i) {
      auto hi = p, lo = p;
      hi[i] += 1e-6;
      lo[i] -= 1e-6;
      const double fd = (loss_on_tape(y, hi, cfg) - loss_on_tape(y, lo, cfg)) / 2e-6;
      CHECK(g[i] == doctest::Approx(fd).epsilon(1e-6));
    }
  }
}

TEST_CASE("jaccard loss errors") {
  const auto p = t32({2}, {0.2f, 0.3f});
  CHECK_THROWS_WITH_AS(jaccard_loss_value(t32({2}, {1, 0.5f}), p), doctest::Contains("target must be binary"), DataError);
  CHECK_THROWS_AS(jaccard_loss_value(t32({3}, {1, 0, 1}), p), ShapeError);
  CHECK_THROWS_AS(jaccard_loss_value(t32({2}, {1, 0}), p, LossConfig{0.0, false}), Error);
  CHECK_THROWS_AS(jaccard_loss_value(t32({2}, {1, 0}), p, LossConfig{-1.0, false}), Error);
}

TEST_CASE("metric hand cases") {
  // Overlap {0, 1}; X adds 2, 3; Y adds 4, 5: union 6.
  const auto x = mask16({0, 1, 2, 3});
  const auto y = mask16({0, 1, 4, 5});
  CHECK(iou(x, y) == doctest::Approx(0.333333).epsilon(1e-6));
  CHECK(iou(x, y) == oracle::iou(x, y));
  const auto a = mask16({0, 1, 2});
  const auto b = mask16({0, 1, 7, 8, 9});
  CHECK(dice(a, b) == 0.5);
  CHECK(dice(a, b) == oracle::dice(a, b));
  CHECK(iou(x, x) == 1.0);
  CHECK(dice(x, x) == 1.0);
  const Tensor empty({1, 1, 4, 4});
  CHECK(iou(empty, empty) == 1.0);
  CHECK(dice(empty, empty) == 1.0);
  CHECK(iou(empty, x) == 0.0);
  CHECK(dice(x, empty) == 0.0);
}

TEST_CASE("metric identities over random pairs") {
  std::mt19937_64 gen(1000);
  for (int trial = 0; trial < 1000; ++trial) {
    const double pa = std::uniform_real_distribution<double>(0.0, 1.0)(gen);
    const double pb = std::uniform_real_distribution<double>(0.0, 1.0)(gen);
    const auto a = oracle::random_mask({1, 1, 16, 16}, gen, pa);
    const auto b = oracle::random_mask({1, 1, 16, 16}, gen, pb);
    const double i = iou(a, b), d = dice(a, b);
    CHECK(std::abs(d - 2 * i / (1 + i)) <= 1e-12);
    CHECK(i == iou(b, a));
    CHECK(d == dice(b, a));
    CHECK(i == doctest::Approx(oracle::iou(a, b)).epsilon(1e-12));
    CHECK(d == doctest::Approx(oracle::dice(a, b)).epsilon(1e-12));
  }
}

TEST_CASE("metric errors") {
  CHECK_THROWS_AS(iou(Tensor({1, 1, 2, 2}), Tensor({1, 1, 2, 3})), ShapeError);
  CHECK_THROWS_AS(dice(Tensor({4}), Tensor({5})), ShapeError);
  CHECK_THROWS_WITH_AS(iou(t32({2}, {0.5f, 1}), t32({2}, {1, 1})), doctest::Contains("mask values must be 0 or 1"),
                       DataError);
}

TEST_CASE("evaluation report") {
  EvalReport r;
  r.add("a", mask16({0, 1, 2, 3}), mask16({0, 1, 4, 5}));
  r.add("b", mask16({0}), mask16({0}));
  CHECK(r.mean_iou() == doctest::Approx((1.0 / 3.0 + 1.0) / 2));
  CHECK(r.mean_dice() == doctest::Approx((0.5 + 1.0) / 2));
  CHECK(r.to_csv() == "sample_id,iou,dice\na,0.333333,0.500000\nb,1.000000,1.000000\nmean,0.666667,0.750000\n");
  CHECK(EvalReport{}.mean_dice() == 0.0);
}
