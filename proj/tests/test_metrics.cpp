#include <catch2/catch_amalgamated.hpp>

#include <numeric>

#include "testutil.hpp"

using namespace fv2ic;
using fv2ic::testing::brute_metrics;

namespace {

std::vector<std::uint8_t> random_mask(int n, int c, Rng& rng) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(n));
  for (auto& v : m) v = static_cast<std::uint8_t>(rng.below(static_cast<std::uint64_t>(c)));
  return m;
}

}  // namespace

TEST_CASE("confusion counts") {
  SECTION("perfect prediction has no fp/fn") {
    Rng rng(1);
    auto m = random_mask(64, 4, rng);
    const ConfusionCounts cc = confusion(m, m, 4);
    for (const auto& k : cc.classes) {
      REQUIRE(k.fp == 0);
      REQUIRE(k.fn == 0);
      REQUIRE(k.tp + k.tn == 64);
    }
  }

  SECTION("2x2 hand count") {
    // pred = [[1,0],[0,0]], true = [[1,1],[0,0]]
    const std::vector<std::uint8_t> pred{1, 0, 0, 0};
    const std::vector<std::uint8_t> truth{1, 1, 0, 0};
    const ConfusionCounts cc = confusion(pred, truth, 2);
    REQUIRE(cc.classes[1].tp == 1);
    REQUIRE(cc.classes[1].fn == 1);
    REQUIRE(cc.classes[1].fp == 0);
    REQUIRE(cc.classes[1].tn == 2);
    for (const auto& k : cc.classes) REQUIRE(k.tp + k.fp + k.fn + k.tn == 4);
  }

  SECTION("class id out of range rejected") {
    REQUIRE_THROWS_AS(confusion({3}, {0}, 2), ContractViolation);
    REQUIRE_THROWS_AS(confusion({0, 1}, {0}, 2), ContractViolation);
  }
}

TEST_CASE("per-class metric formulas") {
  SECTION("perfect prediction scores one everywhere") {
    ConfusionCounts::PerClass k{10, 0, 0, 54};
    REQUIRE(dice_coef(k) == 1.0);
    REQUIRE(jaccard(k) == 1.0);
    REQUIRE(sensitivity(k) == 1.0);
    REQUIRE(accuracy(k) == 1.0);
  }

  SECTION("hand counts from the 2x2 case") {
    ConfusionCounts::PerClass k{1, 0, 1, 2};
    REQUIRE(dice_coef(k) == Catch::Approx(2.0 / 3.0));
    REQUIRE(jaccard(k) == Catch::Approx(0.5));
    REQUIRE(sensitivity(k) == Catch::Approx(0.5));
    REQUIRE(accuracy(k) == Catch::Approx(0.75));
  }

  SECTION("disjoint prediction scores zero overlap") {
    ConfusionCounts::PerClass k{0, 3, 2, 59};
    REQUIRE(dice_coef(k) == 0.0);
    REQUIRE(jaccard(k) == 0.0);
  }

  SECTION("empty-class convention scores one") {
    ConfusionCounts::PerClass k{0, 0, 0, 64};
    REQUIRE(dice_coef(k) == 1.0);
    REQUIRE(jaccard(k) == 1.0);
    REQUIRE(sensitivity(k) == 1.0);
    REQUIRE(accuracy(k) == 1.0);
  }
}

TEST_CASE("macro_average") {
  REQUIRE(macro_average({0.5, 0.8, 0.9, 1.0}) == Catch::Approx((0.8 + 0.9 + 1.0) / 3.0));
  REQUIRE(macro_average({0.5, 0.8, 0.9, 1.0}, false) == Catch::Approx(0.8));
  REQUIRE(macro_average({0.2, 0.7}) == Catch::Approx(0.7));  // single foreground class
  REQUIRE_THROWS_AS(macro_average({0.5}), ContractViolation);
}

TEST_CASE("oracle equivalence on 200 random 8x8 mask pairs") {
  Rng rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    const int C = 2 + static_cast<int>(rng.below(3));
    auto pred = random_mask(64, C, rng);
    auto truth = random_mask(64, C, rng);
    const ConfusionCounts cc = confusion(pred, truth, C);
    for (int c = 0; c < C; ++c) {
      const auto b = brute_metrics(pred, truth, c);
      const auto& k = cc.classes[static_cast<std::size_t>(c)];
      REQUIRE(dice_coef(k) == b.dice);
      REQUIRE(jaccard(k) == b.jaccard);
      REQUIRE(sensitivity(k) == b.sensitivity);
      REQUIRE(accuracy(k) == b.accuracy);
      // dice == 2 jaccard / (1 + jaccard) whenever the union is nonempty
      if (k.tp + k.fp + k.fn > 0) {
        REQUIRE(std::abs(dice_coef(k) - 2.0 * jaccard(k) / (1.0 + jaccard(k))) <= 1e-12);
      }
      REQUIRE(dice_coef(k) >= 0.0);
      REQUIRE(dice_coef(k) <= 1.0);
    }
  }
}

TEST_CASE("permutation invariance of all metrics") {
  Rng rng(7);
  auto pred = random_mask(64, 3, rng);
  auto truth = random_mask(64, 3, rng);
  const ConfusionCounts base = confusion(pred, truth, 3);

  std::vector<int> perm(64);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm.begin(), perm.end());
  std::vector<std::uint8_t> pred_p(64), truth_p(64);
  for (int i = 0; i < 64; ++i) {
    pred_p[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = pred[static_cast<std::size_t>(i)];
    truth_p[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = truth[static_cast<std::size_t>(i)];
  }
  const ConfusionCounts shuffled = confusion(pred_p, truth_p, 3);
  for (int c = 0; c < 3; ++c) {
    REQUIRE(base.classes[static_cast<std::size_t>(c)].tp == shuffled.classes[static_cast<std::size_t>(c)].tp);
    REQUIRE(base.classes[static_cast<std::size_t>(c)].fp == shuffled.classes[static_cast<std::size_t>(c)].fp);
    REQUIRE(base.classes[static_cast<std::size_t>(c)].fn == shuffled.classes[static_cast<std::size_t>(c)].fn);
    REQUIRE(base.classes[static_cast<std::size_t>(c)].tn == shuffled.classes[static_cast<std::size_t>(c)].tn);
  }
}

TEST_CASE("macro_metrics end-to-end matches brute-force recomputation") {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    auto pred = random_mask(64, 4, rng);
    auto truth = random_mask(64, 4, rng);
    const SegMetrics m = macro_metrics(confusion(pred, truth, 4));
    double dice = 0.0, jac = 0.0, sens = 0.0, acc = 0.0;
    for (int c = 1; c < 4; ++c) {
      const auto b = brute_metrics(pred, truth, c);
      dice += b.dice / 3.0;
      jac += b.jaccard / 3.0;
      sens += b.sensitivity / 3.0;
      acc += b.accuracy / 3.0;
    }
    REQUIRE(m.dice == Catch::Approx(dice).margin(1e-15));
    REQUIRE(m.jaccard == Catch::Approx(jac).margin(1e-15));
    REQUIRE(m.sensitivity == Catch::Approx(sens).margin(1e-15));
    REQUIRE(m.accuracy == Catch::Approx(acc).margin(1e-15));
  }
}

TEST_CASE("empty-class skip policy drops absent classes from the average") {
  // truth and pred agree that class 2 is absent.
  std::vector<std::uint8_t> pred(16, 0), truth(16, 0);
  pred[0] = 1;
  truth[0] = 1;
  truth[1] = 1;
  const ConfusionCounts cc = confusion(pred, truth, 3);
  const SegMetrics keep = macro_metrics(cc, true, EmptyClassPolicy::score_one);
  const SegMetrics skip = macro_metrics(cc, true, EmptyClassPolicy::skip);
  // class 1: dice 2/3; class 2 absent: scored 1 or skipped.
  REQUIRE(keep.dice == Catch::Approx((2.0 / 3.0 + 1.0) / 2.0));
  REQUIRE(skip.dice == Catch::Approx(2.0 / 3.0));
}

TEST_CASE("argmax_mask picks the strongest channel") {
  Tensor scores({3, 2, 2});
  // pixel 0: class 2; pixel 1: class 0; pixel 2: tie -> lower id; pixel 3: class 1
  scores[0 * 4 + 0] = 0.1; scores[1 * 4 + 0] = 0.2; scores[2 * 4 + 0] = 0.9;
  scores[0 * 4 + 1] = 0.8; scores[1 * 4 + 1] = 0.1; scores[2 * 4 + 1] = 0.0;
  scores[0 * 4 + 2] = 0.5; scores[1 * 4 + 2] = 0.5; scores[2 * 4 + 2] = 0.1;
  scores[0 * 4 + 3] = 0.2; scores[1 * 4 + 3] = 0.7; scores[2 * 4 + 3] = 0.1;
  const auto mask = argmax_mask(scores);
  REQUIRE(mask == std::vector<std::uint8_t>{2, 0, 0, 1});
}
